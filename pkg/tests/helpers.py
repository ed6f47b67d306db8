"""Shared analytic tasks and oracles for the test suite."""

import numpy as np
from scipy.linalg import subspace_angles

from lgrad import (
    GaussianSignalConfig,
    MvnLumpyConfig,
    TaskStats,
    mvn_lumpy_covariance,
    render_gaussian_signal,
)

# Short correlation length and a compact signal keep the Krylov basis of
# this task numerically full-rank well past 20 vectors (a smooth task loses
# rank after about 10, which no float64 algorithm can resolve).
SMALL_LUMPY = MvnLumpyConfig(
    height=16, width=16, dc_offset=100.0, kernel_sigma=0.7, field_magnitude=30.0, seed=0
)
SMALL_SIGNAL = GaussianSignalConfig(center_row=5, center_col=9, sigma=0.5, amplitude=10.0)
SMALL_NOISE_SIGMA = 3.0


def analytic_task(lumpy=SMALL_LUMPY, signal=SMALL_SIGNAL, sigma_n=SMALL_NOISE_SIGMA):
    """Exact ``(TaskStats, Kbar, delta)`` of an SKE MVN-lumpy task."""
    kbar = mvn_lumpy_covariance(lumpy) + sigma_n**2 * np.eye(lumpy.height * lumpy.width)
    delta = render_gaussian_signal(signal, lumpy.height, lumpy.width).s
    return TaskStats(2.0 * kbar, delta), kbar, delta


def krylov_basis(a, b, k):
    """Orthonormal basis of span{b, Ab, ..., A^(k-1) b} (Arnoldi, full reorthogonalization)."""
    q = np.zeros((b.size, k))
    q[:, 0] = b / np.linalg.norm(b)
    for j in range(1, k):
        v = a @ q[:, j - 1]
        for _ in range(2):
            v -= q[:, :j] @ (q[:, :j].T @ v)
        q[:, j] = v / np.linalg.norm(v)
    return q


def max_principal_angle(rows, basis):
    return float(np.max(subspace_angles(rows.T, basis)))


def relative_error(x, ref):
    return float(np.linalg.norm(np.asarray(x) - np.asarray(ref)) / np.linalg.norm(ref))


def random_spd(rng, m, cond=100.0):
    q, _ = np.linalg.qr(rng.standard_normal((m, m)))
    eig = np.geomspace(1.0, cond, m)
    a = (q * eig) @ q.T
    return 0.5 * (a + a.T)
