"""Efficient channels for approximating the Hotelling observer.

L-grad channels, PLS channels, Hotelling/regularized/channelized Hotelling
observers, MVN lumpy phantoms and ROC/AUC evaluation.
"""

__version__ = "0.1.0"

from .core import (
    ChannelMatrix,
    CorruptionError,
    DegenerateChannelError,
    DegenerateTaskError,
    FormatError,
    ImageStack,
    IngestionError,
    InsufficientDataError,
    ObserverError,
    ObserverTemplate,
    SignalImage,
    SingularMatrixError,
    ValidationError,
    read_image_stack,
    write_image_stack,
)
from .stats import (
    ClassStats,
    IncrementalInverse,
    block_inverse_extend,
    cmd_covariance,
    estimate_class_stats,
    pseudo_solve,
    symmetric_solve,
)
from .phantom import (
    GaussianSignalConfig,
    MvnLumpyConfig,
    NoiseConfig,
    assemble_dataset,
    generate_mvn_lumpy,
    ingest_roi_directory,
    mvn_lumpy_covariance,
    render_gaussian_signal,
)
from .channels import (
    TaskStats,
    generate_lgrad_channels,
    generate_lgrad_channels_from_samples,
    generate_lgrad_cmd_channels,
    generate_pls_channels,
    iterate_lgrad,
    lagrangian_gradient,
    lagrangian_value,
)
from .observers import ChoModel, ScoreSet, build_cho, build_ho, build_rho, score
from .evaluation import (
    RocResult,
    TimingRecord,
    analytic_gaussian_auc,
    benchmark_generation,
    bootstrap_auc_ci,
    compute_auc,
)
