"""Class-conditional statistics, symmetric solves and incremental block inverses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import blas, lapack
from scipy.sparse.linalg import LinearOperator

from .core import (
    DegenerateChannelError,
    ImageStack,
    InsufficientDataError,
    SignalImage,
    SingularMatrixError,
    ValidationError,
)

SYMMETRY_ATOL = 1e-10


@dataclass(frozen=True, eq=False)
class ClassStats:
    """Per-hypothesis means and covariances of image data.

    ``k0``/``k1`` may be dense ``M x M`` arrays or :class:`SampleCovariance`
    operators; everything downstream only needs matrix-vector products,
    except the dense solvers.
    """

    mean0: np.ndarray
    mean1: np.ndarray
    delta_mean: np.ndarray
    k0: np.ndarray
    k1: np.ndarray
    n0: int
    n1: int

    @property
    def m(self) -> int:
        return self.mean0.shape[0]

    def average_covariance(self):
        """``(K0 + K1) / 2``."""
        return 0.5 * (self.k0 + self.k1)


def _check_symmetric(a: np.ndarray, name: str) -> None:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError(f"{name} must be square, got shape {a.shape}")
    if not np.allclose(a, a.T, rtol=0.0, atol=SYMMETRY_ATOL * max(1.0, np.abs(a).max())):
        raise ValidationError(f"{name} is not symmetric")


def sample_covariance(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and unbiased (n - 1) covariance of the rows of ``rows``."""
    rows = np.asarray(rows, dtype=np.float64)
    n = rows.shape[0]
    if n < 2:
        raise InsufficientDataError(f"need at least 2 samples for a covariance, got {n}")
    mean = rows.mean(axis=0)
    centered = rows - mean
    cov = centered.T @ centered
    cov += cov.T
    cov *= 0.5 / (n - 1)
    return mean, cov


def estimate_class_stats(stack: ImageStack) -> ClassStats:
    """Sample means and (n - 1)-denominator covariances for both classes."""
    counts = [int(np.count_nonzero(stack.labels == j)) for j in (0, 1)]
    for j, c in enumerate(counts):
        if c < 2:
            raise InsufficientDataError(f"class {j} has {c} image(s); need at least 2")
    mean0, k0 = sample_covariance(stack.class_rows(0))
    mean1, k1 = sample_covariance(stack.class_rows(1))
    return ClassStats(mean0, mean1, mean1 - mean0, k0, k1, counts[0], counts[1])


class SampleCovariance(LinearOperator):
    """Matrix-free weighted sum of sample covariances plus a diagonal term.

    Represents ``sum_j weight_j * Xc_j^T Xc_j / (n_j - 1) + noise_var * I``
    where ``Xc_j`` are the mean-centered rows of each group. A product costs
    two passes over the data instead of the ``O(N M^2)`` needed to form the
    dense matrix, which wins whenever only a few dozen products are needed.
    """

    def __init__(self, groups, weights=None, noise_var: float = 0.0):
        centered = []
        self.means = []
        for rows in groups:
            rows = np.asarray(rows, dtype=np.float64)
            if rows.shape[0] < 2:
                raise InsufficientDataError(
                    f"need at least 2 samples per group, got {rows.shape[0]}"
                )
            mean = rows.mean(axis=0)
            self.means.append(mean)
            centered.append(rows - mean)
        if not centered:
            raise ValidationError("at least one group of samples is required")
        m = centered[0].shape[1]
        if weights is None:
            weights = [1.0] * len(centered)
        self._centered = centered
        self._scales = [float(w) / (c.shape[0] - 1) for w, c in zip(weights, centered)]
        self.noise_var = float(noise_var)
        super().__init__(dtype=np.float64, shape=(m, m))

    def _matvec(self, x):
        x = np.asarray(x, dtype=np.float64).ravel()
        out = self.noise_var * x
        for scale, xc in zip(self._scales, self._centered):
            out += scale * (xc.T @ (xc @ x))
        return out

    def _matmat(self, x):
        out = self.noise_var * x
        for scale, xc in zip(self._scales, self._centered):
            out = out + scale * (xc.T @ (xc @ x))
        return out

    def _adjoint(self):
        return self

    def __mul__(self, other):
        if np.isscalar(other):
            return self.scaled(float(other))
        return super().__mul__(other)

    __rmul__ = __mul__

    def scaled(self, factor: float) -> "SampleCovariance":
        out = object.__new__(SampleCovariance)
        out.means = self.means
        out._centered = self._centered
        out._scales = [factor * s for s in self._scales]
        out.noise_var = factor * self.noise_var
        LinearOperator.__init__(out, dtype=np.float64, shape=self.shape)
        return out

    def to_dense(self) -> np.ndarray:
        m = self.shape[0]
        out = self.noise_var * np.eye(m)
        for scale, xc in zip(self._scales, self._centered):
            g = xc.T @ xc
            out += 0.5 * scale * (g + g.T)
        return out


class SymmetricCovariance:
    """Dense weighted sum of sample covariances, stored as its upper triangle.

    Same estimator as :class:`SampleCovariance`, formed once with a rank-N
    symmetric update (``dsyrk``) and applied with ``dsymv``/``dsymm``. Forming
    it costs ``N M^2 / 2`` BLAS-3 flops, after which every product costs
    ``M^2 / 2`` regardless of ``N``.
    """

    def __init__(self, groups, weights=None, noise_var: float = 0.0):
        groups = [np.asarray(rows, dtype=np.float64) for rows in groups]
        if not groups:
            raise ValidationError("at least one group of samples is required")
        if weights is None:
            weights = [1.0] * len(groups)
        m = groups[0].shape[1]
        upper = np.zeros((m, m), order="F")
        self.means = []
        for rows, weight in zip(groups, weights):
            if rows.shape[0] < 2:
                raise InsufficientDataError(
                    f"need at least 2 samples per group, got {rows.shape[0]}"
                )
            mean = rows.mean(axis=0)
            self.means.append(mean)
            # the transpose of a C-ordered array is Fortran-ordered, so BLAS sees no copy
            upper = blas.dsyrk(
                float(weight) / (rows.shape[0] - 1), (rows - mean).T,
                beta=1.0, c=upper, trans=0, lower=0, overwrite_c=1,
            )
        upper[np.diag_indices(m)] += float(noise_var)
        self.upper = upper
        self.shape = (m, m)
        self.dtype = np.dtype(np.float64)

    def __matmul__(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            return blas.dsymv(1.0, self.upper, x, lower=0)
        return blas.dsymm(1.0, self.upper, x, side=0, lower=0)

    def __mul__(self, other):
        if not np.isscalar(other):
            return NotImplemented
        out = object.__new__(SymmetricCovariance)
        out.means = self.means
        out.upper = np.asfortranarray(float(other) * self.upper)
        out.shape = self.shape
        out.dtype = self.dtype
        return out

    __rmul__ = __mul__

    def to_dense(self) -> np.ndarray:
        upper = np.triu(self.upper)
        return upper + np.triu(upper, 1).T


def as_dense(k) -> np.ndarray:
    if isinstance(k, (SampleCovariance, SymmetricCovariance)):
        return k.to_dense()
    return np.asarray(k, dtype=np.float64)


def _noise_matrix(noise_cov, m: int):
    if np.isscalar(noise_cov) or np.ndim(noise_cov) == 0:
        var = float(noise_cov)
        if var < 0:
            raise ValidationError(f"noise variance must be nonnegative, got {var}")
        return var * np.eye(m)
    kn = np.asarray(noise_cov, dtype=np.float64)
    if kn.shape != (m, m):
        raise ValidationError(f"noise covariance has shape {kn.shape}, expected {(m, m)}")
    _check_symmetric(kn, "noise covariance")
    return kn


def cmd_covariance(
    backgrounds: ImageStack, noise_cov, signal: SignalImage | None = None
) -> ClassStats:
    """Covariance matrix decomposition: ``K = K_n + cov(backgrounds)``.

    The noise is object independent and the signal deterministic, so both
    hypotheses share the same covariance. ``noise_cov`` is an ``M x M``
    matrix or a scalar variance meaning ``sigma^2 I``. When ``signal`` is
    given the signal-present mean is shifted by it.
    """
    m = backgrounds.m
    kn = _noise_matrix(noise_cov, m)
    mean_b, kb = sample_covariance(backgrounds.data)
    k = kn + kb
    if signal is not None:
        if signal.m != m:
            raise ValidationError(f"signal has {signal.m} pixels, backgrounds have {m}")
        delta = signal.s.copy()
    else:
        delta = np.zeros(m)
    n = backgrounds.n
    return ClassStats(mean_b, mean_b + delta, delta, k, k, n, n)


def cmd_covariance_operator(backgrounds: ImageStack, noise_var: float) -> SampleCovariance:
    """Matrix-free ``sigma_n^2 I + cov(backgrounds)``."""
    if noise_var < 0:
        raise ValidationError(f"noise variance must be nonnegative, got {noise_var}")
    return SampleCovariance([backgrounds.data], noise_var=noise_var)


def cholesky(a: np.ndarray) -> np.ndarray:
    """Upper Cholesky factor; raises :class:`SingularMatrixError` on failure."""
    c, info = lapack.dpotrf(np.asarray(a, dtype=np.float64), lower=0, clean=1)
    if info > 0:
        raise SingularMatrixError(
            f"matrix is not positive definite: leading minor {info} failed", index=int(info)
        )
    if info < 0:
        raise ValidationError(f"invalid argument {-info} to Cholesky factorization")
    return c


def symmetric_solve(a, rhs, ridge: float = 0.0) -> np.ndarray:
    """Solve ``(a + ridge I) x = rhs`` by Cholesky factorization."""
    a = np.asarray(a, dtype=np.float64)
    rhs = np.asarray(rhs, dtype=np.float64)
    _check_symmetric(a, "a")
    if rhs.shape[0] != a.shape[0]:
        raise ValidationError(f"rhs has length {rhs.shape[0]}, matrix is {a.shape}")
    if ridge < 0:
        raise ValidationError(f"ridge must be nonnegative, got {ridge}")
    if ridge:
        a = a + ridge * np.eye(a.shape[0])
    c = cholesky(a)
    x, info = lapack.dpotrs(c, rhs, lower=0)
    if info != 0:
        raise ValidationError(f"triangular solve failed (info={info})")
    return x


def pseudo_solve(a, rhs, rank_tol: float | None = None) -> np.ndarray:
    """Moore-Penrose solve ``A^+ rhs`` via symmetric eigendecomposition.

    Eigenvalues below ``rank_tol * lambda_max`` are treated as zero. The
    default ``rank_tol`` is ``M * eps``.
    """
    a = np.asarray(a, dtype=np.float64)
    rhs = np.asarray(rhs, dtype=np.float64)
    _check_symmetric(a, "a")
    if rhs.shape[0] != a.shape[0]:
        raise ValidationError(f"rhs has length {rhs.shape[0]}, matrix is {a.shape}")
    if rank_tol is None:
        rank_tol = a.shape[0] * np.finfo(np.float64).eps
    evals, evecs = np.linalg.eigh(a)
    lam_max = evals[-1]
    if lam_max <= 0:
        return np.zeros_like(rhs)
    keep = evals >= rank_tol * lam_max
    inv = np.zeros_like(evals)
    inv[keep] = 1.0 / evals[keep]
    return evecs @ (inv * (evecs.T @ rhs))


@dataclass(frozen=True, eq=False)
class IncrementalInverse:
    """Inverse of a channelized covariance grown one channel at a time."""

    inv: np.ndarray

    @classmethod
    def empty(cls) -> "IncrementalInverse":
        return cls(np.zeros((0, 0)))

    @property
    def dim(self) -> int:
        return self.inv.shape[0]


def block_inverse_extend(
    state: IncrementalInverse, cross_cov, new_var: float, tol: float = 1e-12
) -> IncrementalInverse:
    """Append one row/column to ``K`` and update ``K^-1`` in ``O(i^2)``.

    With ``K' = [[K, c], [c^T, v]]`` and Schur complement
    ``s = v - c^T K^-1 c`` the new inverse is
    ``[[K^-1 + u u^T / s, -u / s], [-u^T / s, 1 / s]]`` where ``u = K^-1 c``.

    Raises :class:`DegenerateChannelError` when ``s <= tol * v``, i.e. the
    new channel output is linearly predictable from the previous ones.
    """
    cross_cov = np.asarray(cross_cov, dtype=np.float64).ravel()
    i = state.dim
    if cross_cov.shape[0] != i:
        raise ValidationError(f"cross covariance has length {cross_cov.shape[0]}, expected {i}")
    new_var = float(new_var)
    if not new_var > 0:
        raise DegenerateChannelError(f"new channel has variance {new_var}", (i,))
    u = state.inv @ cross_cov
    schur = new_var - cross_cov @ u
    if schur <= tol * new_var:
        raise DegenerateChannelError(
            f"Schur complement {schur:.3e} <= {tol:g} * variance {new_var:.3e}; "
            f"channel {i} depends linearly on the previous channels",
            (i,),
        )
    out = np.empty((i + 1, i + 1))
    out[:i, :i] = state.inv + np.outer(u, u) / schur
    out[:i, i] = -u / schur
    out[i, :i] = -u / schur
    out[i, i] = 1.0 / schur
    return IncrementalInverse(out)


def dependent_rows(k: np.ndarray, tol: float = 1e-12) -> list[int]:
    """Indices of rows/columns of a covariance that are linearly predictable from earlier ones."""
    k = np.asarray(k, dtype=np.float64)
    state = IncrementalInverse.empty()
    kept: list[int] = []
    bad: list[int] = []
    for j in range(k.shape[0]):
        try:
            state = block_inverse_extend(state, k[kept, j], k[j, j], tol=tol)
            kept.append(j)
        except DegenerateChannelError:
            bad.append(j)
    return bad
