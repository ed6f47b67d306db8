"""Hotelling, regularized Hotelling and channelized Hotelling observers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    ChannelMatrix,
    DegenerateChannelError,
    ImageStack,
    ObserverTemplate,
    SignalImage,
    SingularMatrixError,
    ValidationError,
)
from .stats import (
    ClassStats,
    as_dense,
    dependent_rows,
    estimate_class_stats,
    pseudo_solve,
    sample_covariance,
    symmetric_solve,
)


@dataclass(frozen=True, eq=False)
class ChoModel:
    """CHO: channels ``T``, channel-space template ``w_v`` and ``w_CHO = T^T w_v``."""

    channels: ChannelMatrix
    template_v: np.ndarray
    expanded_template: np.ndarray
    k_v: np.ndarray
    delta_v: np.ndarray

    @property
    def snr2(self) -> float:
        return float(self.delta_v @ self.template_v)

    def as_template(self) -> ObserverTemplate:
        return ObserverTemplate(self.expanded_template, "CHO")


@dataclass(frozen=True, eq=False)
class ScoreSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64).ravel()
        labels = np.asarray(self.labels).ravel()
        if scores.shape != labels.shape:
            raise ValidationError(
                f"{scores.size} scores but {labels.size} labels"
            )
        if not np.all(np.isfinite(scores)):
            raise ValidationError("scores must be finite")
        if labels.size and not np.all((labels == 0) | (labels == 1)):
            raise ValidationError("labels must contain only 0 and 1")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels.astype(np.uint8))

    @property
    def absent(self) -> np.ndarray:
        return self.scores[self.labels == 0]

    @property
    def present(self) -> np.ndarray:
        return self.scores[self.labels == 1]


def build_ho(stats: ClassStats, ridge: float = 0.0) -> ObserverTemplate:
    """Hotelling template ``[(K0 + K1)/2]^-1 delta_mean``.

    Raises :class:`~lgrad.core.SingularMatrixError` when the average covariance
    is singular and ``ridge`` is 0.
    """
    kbar = 0.5 * (as_dense(stats.k0) + as_dense(stats.k1))
    return ObserverTemplate(symmetric_solve(kbar, stats.delta_mean, ridge), "HO")


def build_rho(
    train: ImageStack, signal: SignalImage | None = None, rank_tol: float | None = None
) -> ObserverTemplate:
    """Regularized HO using the pseudoinverse of the sample average covariance."""
    stats = estimate_class_stats(train)
    delta = stats.delta_mean if signal is None else signal.s
    if delta.size != stats.m:
        raise ValidationError(f"signal has {delta.size} pixels, images have {stats.m}")
    kbar = 0.5 * (stats.k0 + stats.k1)
    return ObserverTemplate(pseudo_solve(kbar, delta, rank_tol), "RHO")


def _channel_stats_from_stack(rows: np.ndarray, stack: ImageStack):
    v = stack.data @ rows.T
    counts = [int(np.count_nonzero(stack.labels == j)) for j in (0, 1)]
    if min(counts) < 2:
        raise ValidationError(f"need at least 2 images per class, got {counts}")
    mean0, kv0 = sample_covariance(v[stack.labels == 0])
    mean1, kv1 = sample_covariance(v[stack.labels == 1])
    return 0.5 * (kv0 + kv1), mean1 - mean0


def build_cho(
    channels: ChannelMatrix,
    data,
    signal: SignalImage | None = None,
    dependence_tol: float = 1e-12,
) -> ChoModel:
    """Channelized Hotelling observer.

    ``data`` is either a :class:`ClassStats` (``K_v = T Kbar T^T``, exact path)
    or an :class:`ImageStack` whose channelized sample covariance is used.
    With ``signal`` (SKE) the mean difference is ``T s``.
    """
    rows = channels.rows
    if isinstance(data, ImageStack):
        if data.m != channels.m:
            raise ValidationError(f"channels have {channels.m} pixels, images have {data.m}")
        k_v, delta_v = _channel_stats_from_stack(rows, data)
    elif isinstance(data, ClassStats) or hasattr(data, "k_sum"):
        if data.delta_mean.size != channels.m:
            raise ValidationError(
                f"channels have {channels.m} pixels, statistics have {data.delta_mean.size}"
            )
        if hasattr(data, "k_sum"):
            kbar_t = 0.5 * np.asarray(data.k_sum @ rows.T)
        else:
            kbar_t = 0.5 * (np.asarray(data.k0 @ rows.T) + np.asarray(data.k1 @ rows.T))
        k_v = rows @ kbar_t
        k_v = 0.5 * (k_v + k_v.T)
        delta_v = rows @ data.delta_mean
    else:
        raise ValidationError(f"expected ClassStats, TaskStats or ImageStack, got {type(data)}")
    if signal is not None:
        if signal.m != channels.m:
            raise ValidationError(f"signal has {signal.m} pixels, channels have {channels.m}")
        delta_v = rows @ signal.s
    try:
        w_v = symmetric_solve(k_v, delta_v)
    except SingularMatrixError:
        bad = dependent_rows(k_v, dependence_tol)
        raise DegenerateChannelError(
            f"channelized covariance is singular; dependent channel rows: {bad}", tuple(bad)
        ) from None
    return ChoModel(channels, w_v, rows.T @ w_v, k_v, delta_v)


def score(observer, test: ImageStack, path: str = "expanded") -> ScoreSet:
    """Test statistics ``w^T g`` for every image in ``test``.

    For a :class:`ChoModel`, ``path="channelized"`` computes ``w_v^T (T g)``
    instead of ``w_CHO^T g``; both give the same numbers up to round-off.
    """
    if isinstance(observer, ChoModel):
        if path == "channelized":
            _check_dim(observer.channels.m, test)
            return ScoreSet((test.data @ observer.channels.rows.T) @ observer.template_v, test.labels)
        if path != "expanded":
            raise ValidationError(f"path must be 'expanded' or 'channelized', got {path!r}")
        w = observer.expanded_template
    elif isinstance(observer, ObserverTemplate):
        w = observer.w
    else:
        w = np.asarray(observer, dtype=np.float64).ravel()
    _check_dim(w.size, test)
    return ScoreSet(test.data @ w, test.labels)


def _check_dim(m: int, test: ImageStack) -> None:
    if m != test.m:
        raise ValidationError(f"template has {m} pixels, images have {test.m}")
