"""Backward/forward Lyapunov vectors by recursive QR.

Forward run (BLVs)::

    M_k B_{k-1} = B_k T_k,            k = 1..K

Backward adjoint run (FLVs)::

    M_k^T F_k = F_{k-1} T_k,          k = K..1

In both cases ``triangles[k-1]`` holds ``T_k`` and ``frames[k]`` the frame at
analysis time ``t_k``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DegeneracyError
from .l96 import PropagatorSequence

FORWARD = "forward-blv"
BACKWARD = "backward-adjoint-flv"


@dataclass
class LyapunovRun:
    frames: np.ndarray
    triangles: np.ndarray
    direction: str = FORWARD
    spinup_used: int = 0

    def __post_init__(self):
        if self.direction not in (FORWARD, BACKWARD):
            raise ConfigurationError(f"unknown direction {self.direction!r}")
        if len(self.frames) != len(self.triangles) + 1:
            raise ConfigurationError("frames must have one more entry than triangles")

    def __len__(self):
        return len(self.triangles)

    @property
    def n(self) -> int:
        return self.frames.shape[-1]

    def window(self, start: int, stop: int | None = None) -> "LyapunovRun":
        """Frames ``start..stop`` and the triangles between them."""
        stop = len(self) if stop is None else stop
        if not 0 <= start <= stop <= len(self):
            raise ConfigurationError(f"window [{start}, {stop}] outside [0, {len(self)}]")
        return LyapunovRun(self.frames[start:stop + 1], self.triangles[start:stop],
                           self.direction, self.spinup_used)

    def log_diagonals(self) -> np.ndarray:
        """``log T_k[i, i]`` with shape (K, n)."""
        return np.log(np.einsum("kii->ki", self.triangles))


@dataclass
class SpectrumEstimate:
    lambdas: np.ndarray
    n0: int
    K_used: int
    neutral_tol: float

    def per_time(self, delta: float) -> np.ndarray:
        return self.lambdas / delta


@dataclass
class LLESeries:
    """Finite-window local exponents; row ``j`` is the window ending at step ``start + j``."""

    values: np.ndarray
    window: int
    start: int

    def std(self) -> np.ndarray:
        return self.values.std(axis=0)


@dataclass
class SpinupDiagnostics:
    """Largest principal angle (radians) of the leading-j subspaces, per step.

    ``pair_angles`` compares the run against an independently initialised
    reference run; ``successive_angles`` compares consecutive frames.
    """

    pair_angles: np.ndarray
    successive_angles: np.ndarray
    converged_step: int | None
    angle_tol: float
    leading: tuple = field(default_factory=tuple)

    @property
    def converged(self) -> bool:
        return self.converged_step is not None


def qr_positive(A):
    """QR factorisation with a strictly positive diagonal in ``R``."""
    A = np.asarray(A, dtype=np.float64)
    Q, R = np.linalg.qr(A)
    d = np.diag(R)
    if np.any(np.abs(d) <= 1e-14 * np.linalg.norm(A)):
        raise DegeneracyError("matrix is numerically rank deficient; "
                              f"min |R_ii| = {np.abs(d).min():.3e}")
    s = np.where(d < 0, -1.0, 1.0)
    return Q * s, s[:, None] * R


def random_frame(n, seed=None):
    """Orthonormal frame from the positive QR of a Gaussian matrix."""
    rng = np.random.default_rng(seed)
    return qr_positive(rng.standard_normal((n, n)))[0]


def _max_angles(A, B, leading):
    """sin of the largest principal angle between span(A[:, :j]) and span(B[:, :j])."""
    G = A.T @ B
    out = np.empty(len(leading))
    for c, j in enumerate(leading):
        D = B[:, :j] - A[:, :j] @ G[:j, :j]
        out[c] = np.linalg.norm(D, 2)
    return np.arcsin(np.clip(out, 0.0, 1.0))


def blv_spinup(props: PropagatorSequence, Q0, min_steps, angle_tol=1e-9,
               leading=None, reference=None, seed=12345):
    """Push the frame ``Q0`` through the first ``min_steps`` propagators.

    Returns the final frame and a :class:`SpinupDiagnostics`.  Convergence is
    judged on ``pair_angles``: the distance between the leading subspaces of
    this run and of a run started from ``reference`` (a seeded random frame
    by default).  ``converged_step`` is the first step after which every
    monitored angle stays below ``angle_tol``.
    """
    if len(props) < min_steps:
        raise ConfigurationError(f"need {min_steps} propagators, have {len(props)}")
    n = props.n
    leading = tuple(range(1, n)) if leading is None else tuple(int(j) for j in leading)
    Q = np.array(Q0, dtype=np.float64)
    Qr = random_frame(n, seed) if reference is None else np.array(reference, dtype=np.float64)
    pair = np.empty((min_steps, len(leading)))
    succ = np.empty((min_steps, len(leading)))
    for k in range(min_steps):
        Qn, _ = qr_positive(props.mats[k] @ Q)
        Qr, _ = qr_positive(props.mats[k] @ Qr)
        succ[k] = _max_angles(Q, Qn, leading)
        pair[k] = _max_angles(Qn, Qr, leading)
        Q = Qn
    above = np.nonzero(np.any(pair >= angle_tol, axis=1))[0]
    if len(above) == 0:
        conv = 0 if min_steps else None
    elif above[-1] + 1 < min_steps:
        conv = int(above[-1] + 1)
    else:
        conv = None
    if conv is None:
        warnings.warn(f"BLV spin-up did not converge to {angle_tol:g} rad in {min_steps} steps",
                      RuntimeWarning, stacklevel=2)
    return Q, SpinupDiagnostics(pair, succ, conv, angle_tol, leading)


def blv_run(props: PropagatorSequence, B_start) -> LyapunovRun:
    """Forward recursive QR from the frame ``B_start``."""
    K, n = len(props), props.n
    frames = np.empty((K + 1, n, n))
    tris = np.empty((K, n, n))
    frames[0] = B_start
    for k in range(K):
        frames[k + 1], tris[k] = qr_positive(props.mats[k] @ frames[k])
    return LyapunovRun(frames, tris, FORWARD)


def flv_run(props: PropagatorSequence, F_end) -> LyapunovRun:
    """Backward recursive QR of the adjoint, ending at the frame ``F_end``."""
    K, n = len(props), props.n
    frames = np.empty((K + 1, n, n))
    tris = np.empty((K, n, n))
    frames[K] = F_end
    for k in range(K, 0, -1):
        frames[k - 1], tris[k - 1] = qr_positive(props.mats[k - 1].T @ frames[k])
    return LyapunovRun(frames, tris, BACKWARD)


def reconstruction_errors(props: PropagatorSequence, run: LyapunovRun) -> np.ndarray:
    """Relative Frobenius residual of the QR recursion at every step."""
    M = props.mats
    B, T = run.frames, run.triangles
    if run.direction == FORWARD:
        res = M @ B[:-1] - B[1:] @ T
    else:
        res = np.transpose(M, (0, 2, 1)) @ B[1:] - B[:-1] @ T
    return np.linalg.norm(res, axis=(1, 2)) / np.linalg.norm(M, axis=(1, 2))


def orthonormality_errors(run: LyapunovRun) -> np.ndarray:
    F = run.frames
    return np.abs(np.transpose(F, (0, 2, 1)) @ F - np.eye(run.n)).max(axis=(1, 2))


def _retained(run: LyapunovRun, discard: int) -> np.ndarray:
    ld = run.log_diagonals()
    if discard < 0 or len(ld) - discard < 1:
        raise ConfigurationError(f"no steps left after discarding {discard} of {len(ld)}")
    # the backward run spins up at the far end of the sequence
    return ld[discard:] if run.direction == FORWARD else ld[:len(ld) - discard]


def lyapunov_spectrum(run: LyapunovRun, discard=0, neutral_tol=0.005) -> SpectrumEstimate:
    """Per-step exponents as time means of ``log diag(T_k)``."""
    ld = _retained(run, discard)
    lam = ld.mean(axis=0)
    return SpectrumEstimate(lam, int(np.sum(lam >= -neutral_tol)), len(ld), neutral_tol)


def check_nondegenerate(spectrum: SpectrumEstimate, min_gap=1e-3):
    """Reject spectra with (nearly) repeated or unordered exponents."""
    gaps = -np.diff(spectrum.lambdas)
    if np.any(gaps < min_gap):
        j = int(np.argmin(gaps))
        raise DegeneracyError(
            f"exponents {j + 1} and {j + 2} are not separated by {min_gap}: "
            f"{spectrum.lambdas[j]:.5f} vs {spectrum.lambdas[j + 1]:.5f}")


def lle_series(run: LyapunovRun, window: int, discard=0) -> LLESeries:
    """Local exponents over ``window`` consecutive steps.

    The diagonal of a product of upper-triangular matrices is the product of
    their diagonals, so the window LLE is a moving average of log-diagonals.
    """
    if window < 1:
        raise ConfigurationError("window must be >= 1")
    ld = _retained(run, discard)
    if window > len(ld):
        raise ConfigurationError(f"window {window} exceeds {len(ld)} available steps")
    if window == 1:
        vals = ld.copy()
    else:
        c = np.cumsum(np.vstack([np.zeros((1, ld.shape[1])), ld]), axis=0)
        vals = (c[window:] - c[:-window]) / window
    offset = discard if run.direction == FORWARD else 0
    return LLESeries(vals, window, offset + window)
