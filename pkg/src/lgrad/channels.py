"""Efficient channel generation: Lagrangian-gradient (L-grad) and PLS channels.

L-grad channels are successive negative half-gradients of the Lagrangian
whose minimum at ``lambda = 2`` is the Hotelling template::

    grad L(w, 2) = (K0 + K1) w - 2 * delta_mean

Starting from ``w = 0`` each new channel is ``t = delta_mean - Kbar w`` where
``w`` is the CHO template built from all previous channels and
``Kbar = (K0 + K1) / 2``. The channelized covariance ``T Kbar T^T`` is grown
one row/column at a time through :func:`~lgrad.stats.block_inverse_extend`,
so no channelized covariance is ever inverted from scratch.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .core import (
    ChannelMatrix,
    DegenerateChannelError,
    DegenerateTaskError,
    ImageStack,
    SignalImage,
    ValidationError,
)
from .stats import (
    IncrementalInverse,
    SampleCovariance,
    SymmetricCovariance,
    block_inverse_extend,
    sample_covariance,
    _noise_matrix,
)


class EarlyStopWarning(UserWarning):
    """Fewer channels than requested were generated."""


@dataclass(frozen=True, eq=False)
class TaskStats:
    """Inputs of the Lagrangian gradient.

    ``k_sum`` is ``K0 + K1``, either a dense array or any object supporting
    ``k_sum @ vector`` (e.g. :class:`~lgrad.stats.SymmetricCovariance`).
    """

    k_sum: object
    delta_mean: np.ndarray

    def __post_init__(self):
        delta = np.array(self.delta_mean, dtype=np.float64, copy=True).ravel()
        shape = getattr(self.k_sum, "shape", None)
        if shape is None or tuple(shape) != (delta.size, delta.size):
            raise ValidationError(
                f"k_sum has shape {shape}, expected {(delta.size, delta.size)}"
            )
        if not np.all(np.isfinite(delta)):
            raise ValidationError("delta_mean has non-finite entries")
        delta.setflags(write=False)
        object.__setattr__(self, "delta_mean", delta)

    @property
    def m(self) -> int:
        return self.delta_mean.size

    @classmethod
    def from_class_stats(cls, stats, delta_mean=None) -> "TaskStats":
        delta = stats.delta_mean if delta_mean is None else delta_mean
        return cls(stats.k0 + stats.k1, delta)


@dataclass(frozen=True, eq=False)
class LgradState:
    """Snapshot after ``iteration`` channels have been generated."""

    channel_matrix: ChannelMatrix
    inc_inverse: IncrementalInverse
    cho_template: np.ndarray
    channel_template: np.ndarray
    delta_v: np.ndarray
    iteration: int

    @property
    def snr2(self) -> float:
        """Channelized SNR^2 = dv^T K_v^-1 dv under the statistics used for generation."""
        return float(self.delta_v @ self.channel_template)


def lagrangian_value(w, lam: float, c: float, stats) -> float:
    """``1/2 w^T K0 w + 1/2 w^T K1 w - lam (w^T delta_mean - c)``."""
    w = np.asarray(w, dtype=np.float64).ravel()
    if w.size != stats.delta_mean.size:
        raise ValidationError(f"w has length {w.size}, expected {stats.delta_mean.size}")
    quad = 0.5 * float(w @ (stats.k0 @ w)) + 0.5 * float(w @ (stats.k1 @ w))
    return quad - lam * (float(w @ stats.delta_mean) - c)


def lagrangian_value_from_samples(w, lam: float, c: float, stack: ImageStack) -> float:
    """Sample-average form of the Lagrangian (class variances with n - 1)."""
    w = np.asarray(w, dtype=np.float64).ravel()
    total = 0.0
    means = []
    for label in (0, 1):
        rows = stack.class_rows(label)
        mean = rows.mean(axis=0)
        means.append(mean)
        proj = (rows - mean) @ w
        total += 0.5 * float(proj @ proj) / (rows.shape[0] - 1)
    return total - lam * (float(w @ (means[1] - means[0])) - c)


def lagrangian_gradient(w, stats: TaskStats) -> np.ndarray:
    """``(K0 + K1) w - 2 delta_mean`` (the Lagrangian gradient at ``lambda = 2``)."""
    w = np.asarray(w, dtype=np.float64).ravel()
    if w.size != stats.m:
        raise ValidationError(f"w has length {w.size}, expected {stats.m}")
    return np.asarray(stats.k_sum @ w).ravel() - 2.0 * stats.delta_mean


def iterate_lgrad(
    stats: TaskStats,
    num_channels: int,
    dependence_tol: float = 1e-12,
    residual_tol: float = 1e-10,
) -> Iterator[LgradState]:
    """Yield the L-grad state after each new channel.

    Generation ends before ``num_channels`` when the next channel is
    linearly dependent on the previous ones (Schur complement ratio at or
    below ``dependence_tol``) or when the gradient has vanished, i.e. its
    norm fell below ``residual_tol`` times the first channel's norm, which
    means the CHO template already equals the Hotelling template.
    """
    m = stats.m
    if not 1 <= num_channels <= m:
        raise ValidationError(f"need 1 <= num_channels <= M={m}, got {num_channels}")
    delta = stats.delta_mean
    rows = np.empty((num_channels, m))
    kbar_rows = np.empty((num_channels, m))
    dv = np.empty(num_channels)
    inverse = IncrementalInverse.empty()
    w = np.zeros(m)
    first_norm = None
    for i in range(num_channels):
        t = -0.5 * lagrangian_gradient(w, stats)
        t_norm = float(np.linalg.norm(t))
        if i == 0:
            if t_norm == 0.0:
                raise DegenerateTaskError("mean difference is zero; no channel can be formed")
            first_norm = t_norm
        elif t_norm <= residual_tol * first_norm:
            _warn_early_stop(i, num_channels, "gradient vanished")
            return
        kbar_t = 0.5 * np.asarray(stats.k_sum @ t).ravel()
        try:
            inverse = block_inverse_extend(
                inverse, kbar_rows[:i] @ t, float(t @ kbar_t), tol=dependence_tol
            )
        except DegenerateChannelError as exc:
            if i == 0:
                raise DegenerateTaskError(
                    "mean difference lies in the null space of the average covariance"
                ) from exc
            _warn_early_stop(i, num_channels, "linear dependence")
            return
        rows[i] = t
        kbar_rows[i] = kbar_t
        dv[i] = t @ delta
        w_v = inverse.inv @ dv[: i + 1]
        w = rows[: i + 1].T @ w_v
        yield LgradState(
            ChannelMatrix(rows[: i + 1]), inverse, w.copy(), w_v, dv[: i + 1].copy(), i + 1
        )


def _warn_early_stop(got: int, wanted: int, reason: str) -> None:
    warnings.warn(
        f"L-grad stopped after {got} of {wanted} channels ({reason})",
        EarlyStopWarning,
        stacklevel=3,
    )


def generate_lgrad_channels(
    stats: TaskStats,
    num_channels: int,
    dependence_tol: float = 1e-12,
    residual_tol: float = 1e-10,
) -> ChannelMatrix:
    state = None
    for state in iterate_lgrad(stats, num_channels, dependence_tol, residual_tol):
        pass
    return state.channel_matrix


# Relative costs, in units of streaming one matrix element through a
# matrix-vector product, measured with OpenBLAS: one flop of a rank-N symmetric
# update, and one element of a symmetric matrix-vector product.
_SYRK_COST = 0.0072
_SYMV_COST = 0.25


def _use_dense(covariance: str, n: int, m: int, num_channels: int) -> bool:
    if covariance == "dense":
        return True
    if covariance == "implicit":
        return False
    if covariance != "auto":
        raise ValidationError(f"covariance must be auto, dense or implicit, got {covariance!r}")
    # dense: one N M^2 / 2 update, then M^2 / 2 per product; implicit: 2 N M per product
    dense = _SYRK_COST * n * m * m + _SYMV_COST * num_channels * m * m
    return dense < n * m * num_channels


def sample_task_stats(
    train: ImageStack,
    signal: SignalImage | None = None,
    num_channels: int = 50,
    covariance: str = "auto",
) -> TaskStats:
    """TaskStats from a labelled training set (``delta_mean = s`` in SKE mode)."""
    if signal is not None and signal.m != train.m:
        raise ValidationError(f"signal has {signal.m} pixels, images have {train.m}")
    groups = [train.class_rows(0), train.class_rows(1)]
    if _use_dense(covariance, train.n, train.m, num_channels):
        k_sum = SymmetricCovariance(groups)
    else:
        k_sum = SampleCovariance(groups)
    delta = k_sum.means[1] - k_sum.means[0]
    if signal is not None:
        delta = signal.s
    return TaskStats(k_sum, delta)


def generate_lgrad_channels_from_samples(
    train: ImageStack,
    signal: SignalImage | None,
    num_channels: int,
    covariance: str = "auto",
    **kwargs,
) -> ChannelMatrix:
    """L-grad channels with covariances estimated from ``train``.

    ``covariance`` selects between the dense sample covariance and a
    matrix-free operator holding the centred training data; both represent
    the same estimate. ``"auto"`` picks whichever is cheaper.
    """
    stats = sample_task_stats(train, signal, num_channels, covariance)
    return generate_lgrad_channels(stats, num_channels, **kwargs)


def cmd_task_stats(
    backgrounds: ImageStack,
    noise_cov,
    signal: SignalImage,
    num_channels: int = 50,
    covariance: str = "auto",
) -> TaskStats:
    """TaskStats with ``K0 = K1 = K_n + cov(backgrounds)`` and ``delta_mean = s``."""
    if signal.m != backgrounds.m:
        raise ValidationError(f"signal has {signal.m} pixels, backgrounds have {backgrounds.m}")
    if np.ndim(noise_cov) != 0:
        kn = _noise_matrix(noise_cov, backgrounds.m)
        _, kb = sample_covariance(backgrounds.data)
        return TaskStats(2.0 * (kn + kb), signal.s)
    if float(noise_cov) < 0:
        raise ValidationError(f"noise variance must be nonnegative, got {noise_cov}")
    dense = _use_dense(covariance, backgrounds.n, backgrounds.m, num_channels)
    operator = SymmetricCovariance if dense else SampleCovariance
    k_sum = operator([backgrounds.data], weights=[2.0], noise_var=2.0 * float(noise_cov))
    return TaskStats(k_sum, signal.s)


def generate_lgrad_cmd_channels(
    backgrounds: ImageStack,
    noise_cov,
    signal: SignalImage,
    num_channels: int,
    covariance: str = "auto",
    **kwargs,
) -> ChannelMatrix:
    """L-grad channels from noiseless backgrounds plus known noise statistics."""
    stats = cmd_task_stats(backgrounds, noise_cov, signal, num_channels, covariance)
    return generate_lgrad_channels(stats, num_channels, **kwargs)


@dataclass(frozen=True, eq=False)
class PlsResult:
    weights: ChannelMatrix
    scores: np.ndarray


def pls_nipals(train: ImageStack, num_channels: int) -> PlsResult:
    """NIPALS PLS1 of images against class labels, deflating X and y.

    Returns the weight vectors (one per row) and the score vectors (one per
    column).
    """
    n, m = train.data.shape
    n1 = int(np.count_nonzero(train.labels))
    if n1 == 0 or n1 == n:
        raise ValidationError("PLS needs both classes in the training set")
    if not 1 <= num_channels <= min(n - 1, m):
        raise ValidationError(
            f"need 1 <= num_channels <= min(N-1, M) = {min(n - 1, m)}, got {num_channels}"
        )
    x = train.data - train.data.mean(axis=0)
    y = train.labels.astype(np.float64)
    y -= y.mean()
    floor = 1e-12 * np.linalg.norm(x)
    weights = []
    scores = []
    for k in range(num_channels):
        xty = x.T @ y
        norm = np.linalg.norm(xty)
        if norm <= floor:
            warnings.warn(
                f"PLS stopped after {k} of {num_channels} channels (X^T y vanished)",
                EarlyStopWarning,
                stacklevel=2,
            )
            break
        wk = xty / norm
        tk = x @ wk
        tt = tk @ tk
        pk = (x.T @ tk) / tt
        x -= np.outer(tk, pk)
        y -= tk * ((tk @ y) / tt)
        weights.append(wk)
        scores.append(tk)
    return PlsResult(ChannelMatrix(np.array(weights)), np.array(scores).T)


def generate_pls_channels(train: ImageStack, num_channels: int) -> ChannelMatrix:
    return pls_nipals(train, num_channels).weights
