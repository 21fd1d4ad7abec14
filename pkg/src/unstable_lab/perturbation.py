"""Free evolution of unfiltered perturbations along the stable BLVs.

``psi[k, j]`` is the variance multiplier of model error accumulated along
``B_k^i`` (``i = n0 + 1 + j``) when nothing is filtered::

    Psi_k^i = sum_{l=0}^{k} || row_i(T_{k:l}) ||^2,   T_{k:k} = I

Only the trailing (stable) block of each triangle enters, so the sum stays
well conditioned however fast the unstable modes grow.
"""
from __future__ import annotations

from dataclasses import dataclass

import mpmath
import numba
import numpy as np

from .errors import ConfigurationError
from .l96 import PropagatorSequence
from .lyapunov import LyapunovRun


@dataclass
class PsiSeries:
    values: np.ndarray
    n0: int
    trunc_tol: float

    @property
    def modes(self) -> list[int]:
        """1-based BLV indices of the columns of ``values``."""
        return list(range(self.n0 + 1, self.n0 + 1 + self.values.shape[1]))

    def mode(self, i: int) -> np.ndarray:
        if not self.n0 < i <= self.n0 + self.values.shape[1]:
            raise ConfigurationError(f"mode {i} is not a stable mode (n0={self.n0})")
        return self.values[:, i - self.n0 - 1]


def stable_block(T, n0):
    """Trailing block of ``T`` for modes ``n0+1 .. n``."""
    T = np.asarray(T)
    n = T.shape[-1]
    if not 1 <= n0 < n:
        raise ConfigurationError(f"n0 must satisfy 1 <= n0 < {n}, got {n0}")
    return T[..., n0:, n0:]


@numba.njit(cache=True)
def _psi_kernel(Ts, trunc_tol):
    K, s = Ts.shape[0], Ts.shape[1]
    out = np.ones((K + 1, s))
    for k in range(1, K + 1):
        acc = np.eye(s)
        for l in range(k):
            acc = acc @ Ts[k - l - 1]
            fro = 0.0
            for a in range(s):
                r = 0.0
                for b in range(a, s):
                    r += acc[a, b] * acc[a, b]
                out[k, a] += r
                fro += r
            if fro < trunc_tol:
                break
    return out


def psi_series(triangles, n0, trunc_tol=1e-30) -> PsiSeries:
    """Backward accumulation of stable-block products for every step.

    For each ``k`` the running product ``T^s_k T^s_{k-1} ... T^s_{k-l}`` is
    extended one factor at a time; accumulation stops once its squared
    Frobenius norm drops below ``trunc_tol``.  ``triangles[k-1]`` is ``T_k``.
    """
    Ts = np.ascontiguousarray(stable_block(np.asarray(triangles, dtype=np.float64), n0))
    if Ts.ndim != 3 or len(Ts) == 0:
        raise ConfigurationError("need a non-empty sequence of triangles")
    return PsiSeries(_psi_kernel(Ts, float(trunc_tol)), n0, trunc_tol)


def psi_recursive(triangles, n0) -> np.ndarray:
    """Same quantity through ``S_k = T^s_k S_{k-1} (T^s_k)^T + I``, ``S_0 = I``."""
    Ts = stable_block(np.asarray(triangles, dtype=np.float64), n0)
    s = Ts.shape[-1]
    S = np.eye(s)
    out = np.empty((len(Ts) + 1, s))
    out[0] = 1.0
    for k, T in enumerate(Ts, start=1):
        S = T @ S @ T.T + np.eye(s)
        out[k] = np.diag(S)
    return out


def _mp_array(A):
    return np.vectorize(mpmath.mpf, otypes=[object])(np.asarray(A, dtype=np.float64))


def _mp_qr(A):
    """Modified Gram-Schmidt on an object array of mpf; R has positive diagonal."""
    n = A.shape[1]
    Q = A.copy()
    R = np.full((n, n), mpmath.mpf(0), dtype=object)
    for j in range(n):
        for i in range(j):
            R[i, j] = np.dot(Q[:, i], Q[:, j])
            Q[:, j] = Q[:, j] - R[i, j] * Q[:, i]
        R[j, j] = mpmath.sqrt(np.dot(Q[:, j], Q[:, j]))
        Q[:, j] = Q[:, j] / R[j, j]
    return Q, R


def unfiltered_covariance_oracle(props: PropagatorSequence, blv: LyapunovRun, D, K, dps=None):
    """``(B_k^i)^T P_k B_k^i`` from direct state-space propagation without filtering.

    ``P_0 = Q_0`` and ``P_k = M_k P_{k-1} M_k^T + Q_k`` with
    ``Q_k = B_k D B_k^T``.  Returns shape (K+1, n).

    In double precision (``dps=None``) the frames of ``blv`` are used and the
    result is only meaningful while ``||P_k||`` stays moderate, because
    rounding along the unstable modes leaks into the stable entries.  With
    ``dps`` set, the frames and the covariance are recomputed from
    ``blv.frames[0]`` in ``dps``-digit arithmetic, which extends the usable
    horizon to hundreds of steps.
    """
    D = np.asarray(D, dtype=np.float64)
    D = np.diag(D) if D.ndim == 1 else D
    if K > len(props) or K > len(blv):
        raise ConfigurationError(f"K={K} exceeds the available sequence length")
    n = props.n
    out = np.empty((K + 1, n))
    if dps is None:
        B = blv.frames
        P = B[0] @ D @ B[0].T
        out[0] = np.einsum("ji,jk,ki->i", B[0], P, B[0])
        for k in range(1, K + 1):
            M = props.mats[k - 1]
            P = M @ P @ M.T + B[k] @ D @ B[k].T
            out[k] = np.einsum("ji,jk,ki->i", B[k], P, B[k])
        return out

    with mpmath.workdps(dps):
        Dm = _mp_array(D)
        B = _mp_qr(_mp_array(blv.frames[0]))[0]
        P = B @ Dm @ B.T
        out[0] = [float(v) for v in np.diag(B.T @ P @ B)]
        for k in range(1, K + 1):
            M = _mp_array(props.mats[k - 1])
            B = _mp_qr(M @ B)[0]
            P = M @ P @ M.T + B @ Dm @ B.T
            out[k] = [float(v) for v in np.diag(B.T @ P @ B)]
    return out
