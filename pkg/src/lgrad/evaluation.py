"""ROC/AUC figures of merit and channel-generation timing."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.special import erfc
from scipy.stats import rankdata

from .core import ImageStack, SignalImage, ValidationError
from .observers import ScoreSet

METHODS = ("lgrad", "lgrad_cmd", "pls")


@dataclass(frozen=True, eq=False)
class RocResult:
    auc: float
    curve: np.ndarray  # (K, 2) array of (FPF, TPF), from (0, 0) to (1, 1)
    n0: int
    n1: int


def _split_scores(scores: ScoreSet) -> tuple[np.ndarray, np.ndarray]:
    s0, s1 = scores.absent, scores.present
    if s0.size == 0 or s1.size == 0:
        raise ValidationError(
            f"AUC needs both classes, got {s0.size} absent and {s1.size} present scores"
        )
    return s0, s1


def mann_whitney_auc(s0: np.ndarray, s1: np.ndarray) -> float:
    """P(t1 > t0) + 0.5 P(t1 == t0), computed from mid-ranks."""
    ranks = rankdata(np.concatenate([s0, s1]))
    n0, n1 = s0.size, s1.size
    # mid-ranks are multiples of 0.5, so this sum is exact in float64
    u = ranks[n0:].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n0 * n1))


def roc_curve(s0: np.ndarray, s1: np.ndarray) -> np.ndarray:
    """Empirical ROC, one vertex per distinct threshold (ties move diagonally)."""
    thresholds = np.unique(np.concatenate([s0, s1]))[::-1]
    s0_sorted = np.sort(s0)
    s1_sorted = np.sort(s1)
    fp = s0.size - np.searchsorted(s0_sorted, thresholds, side="left")
    tp = s1.size - np.searchsorted(s1_sorted, thresholds, side="left")
    fpf = np.concatenate([[0.0], fp / s0.size])
    tpf = np.concatenate([[0.0], tp / s1.size])
    return np.column_stack([fpf, tpf])


def compute_auc(scores: ScoreSet) -> RocResult:
    s0, s1 = _split_scores(scores)
    return RocResult(mann_whitney_auc(s0, s1), roc_curve(s0, s1), s0.size, s1.size)


def trapezoid_area(curve: np.ndarray) -> float:
    x, y = curve[:, 0], curve[:, 1]
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))


def analytic_gaussian_auc(snr: float) -> float:
    """AUC of an equal-variance Gaussian test statistic with detectability ``snr``.

    ``AUC = 1/2 + 1/2 erf(snr / 2) = Phi(snr / sqrt(2))``.
    """
    if snr < 0:
        raise ValidationError(f"snr must be nonnegative, got {snr}")
    return float(0.5 * erfc(-snr / 2.0))


def bootstrap_auc(scores: ScoreSet, resamples: int = 1000, seed: int = 0) -> np.ndarray:
    """AUC of each class-stratified bootstrap resample."""
    if resamples < 100:
        raise ValidationError(f"need at least 100 bootstrap resamples, got {resamples}")
    s0, s1 = _split_scores(scores)
    rng = np.random.default_rng(seed)
    out = np.empty(resamples)
    for b in range(resamples):
        r0 = s0[rng.integers(0, s0.size, s0.size)]
        r1 = s1[rng.integers(0, s1.size, s1.size)]
        out[b] = mann_whitney_auc(r0, r1)
    return out


def bootstrap_auc_ci(
    scores: ScoreSet, resamples: int = 1000, seed: int = 0, level: float = 0.95
) -> tuple[float, float]:
    """Percentile bootstrap confidence interval for the AUC."""
    aucs = bootstrap_auc(scores, resamples, seed)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(aucs, [alpha, 1.0 - alpha])
    # the percentile interval can exclude the point estimate on tiny, skewed samples
    point = mann_whitney_auc(*_split_scores(scores))
    return float(min(lo, point)), float(max(hi, point))


def bootstrap_auc_se(scores: ScoreSet, resamples: int = 1000, seed: int = 0) -> float:
    return float(np.std(bootstrap_auc(scores, resamples, seed), ddof=1))


@dataclass(frozen=True)
class TimingRecord:
    method: str
    num_train: int
    num_channels: int
    seconds: float
    repeats: int


def benchmark_generation(
    method: str,
    train: ImageStack,
    num_channels: int,
    repeats: int = 10,
    signal: SignalImage | None = None,
    backgrounds: ImageStack | None = None,
    noise_var: float | None = None,
) -> TimingRecord:
    """Mean wall-clock of the full generation pipeline, statistics included.

    One untimed warm-up run precedes the ``repeats`` timed runs. ``lgrad``
    uses ``train`` (SKE when ``signal`` is given); ``lgrad_cmd`` needs
    ``signal``, ``backgrounds`` and ``noise_var``; ``pls`` uses ``train``.
    """
    from .channels import (
        generate_lgrad_channels_from_samples,
        generate_lgrad_cmd_channels,
        generate_pls_channels,
    )

    if repeats < 1:
        raise ValidationError(f"repeats must be >= 1, got {repeats}")
    if method == "lgrad":
        def run():
            generate_lgrad_channels_from_samples(train, signal, num_channels)
    elif method == "lgrad_cmd":
        if signal is None or backgrounds is None or noise_var is None:
            raise ValidationError("lgrad_cmd needs signal, backgrounds and noise_var")
        def run():
            generate_lgrad_cmd_channels(backgrounds, noise_var, signal, num_channels)
    elif method == "pls":
        def run():
            generate_pls_channels(train, num_channels)
    else:
        raise ValidationError(f"method must be one of {METHODS}, got {method!r}")

    run()
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        run()
        times.append(time.perf_counter() - start)
    seconds = max(float(np.mean(times)), np.finfo(float).tiny)
    return TimingRecord(method, train.n, num_channels, seconds, repeats)
