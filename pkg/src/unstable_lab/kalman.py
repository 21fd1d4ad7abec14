"""Full-rank Kalman filter covariance recursion and observation designs.

Only the covariance is propagated; the mean update is irrelevant to the
error statistics studied here.  Every update is a linear solve followed by
explicit symmetrisation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import ConditioningError, ConfigurationError
from .l96 import PropagatorSequence
from .lyapunov import qr_positive

DESIGN_KINDS = ("blv", "flv", "random", "fixed", "full", "none")


def symmetrize(A):
    return 0.5 * (A + A.T)


@dataclass
class NoiseModel:
    """Constant model-error covariance ``Q`` (n x n) and observation-error covariance ``R`` (d x d)."""

    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=np.float64))
        R = np.asarray(self.R, dtype=np.float64)
        self.R = np.zeros((0, 0)) if R.size == 0 else np.atleast_2d(R)
        if self.R.size and np.linalg.eigvalsh(self.R).min() <= 0:
            raise ConfigurationError("R must be positive definite")
        if np.linalg.eigvalsh(self.Q).min() < -1e-12 * max(1.0, np.abs(self.Q).max()):
            raise ConfigurationError("Q must be positive semi-definite")

    @classmethod
    def scaled_identity(cls, n, d, q_scale=1.0, r_scale=1.0):
        return cls(q_scale * np.eye(n), r_scale * np.eye(d))

    @property
    def q_inf(self):
        return float(np.linalg.eigvalsh(self.Q)[0])

    @property
    def q_sup(self):
        return float(np.linalg.eigvalsh(self.Q)[-1])

    @property
    def r_inf(self):
        return float(np.linalg.eigvalsh(self.R)[0]) if self.R.size else np.inf

    @property
    def r_sup(self):
        return float(np.linalg.eigvalsh(self.R)[-1]) if self.R.size else 0.0


@dataclass
class ObservationDesign:
    """Rule producing ``H_k``.

    kind
        ``blv``/``flv``: transpose of the leading ``d`` columns of the frame at
        step ``k`` (``frames`` required); ``random``: an orthonormal ``n x d``
        draw, independent at every step and reproducible from ``(seed, k)``;
        ``fixed``: leading ``d`` rows of the identity; ``full``: identity;
        ``none``: no observations (``d = 0``).
    """

    kind: str
    d: int
    n: int
    frames: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DESIGN_KINDS:
            raise ConfigurationError(f"unknown design kind {self.kind!r}; expected one of {DESIGN_KINDS}")
        if self.kind == "full":
            self.d = self.n
        elif self.kind == "none":
            self.d = 0
        if not 0 <= self.d <= self.n:
            raise ConfigurationError(f"d={self.d} outside [0, {self.n}]")
        if self.kind in ("blv", "flv") and self.frames is None:
            raise ConfigurationError(f"design {self.kind!r} needs Lyapunov frames")

    @property
    def time_invariant(self) -> bool:
        return self.kind in ("fixed", "full", "none")

    @property
    def label(self) -> str:
        return self.kind if self.kind in ("full", "none") else f"{self.kind}_{self.d}"


def make_observation(design: ObservationDesign, k: int) -> np.ndarray:
    """Observation operator ``H_k`` (d x n) with orthonormal rows."""
    n, d = design.n, design.d
    if design.kind in ("blv", "flv"):
        if design.frames is None:
            raise ConfigurationError(f"design {design.kind!r} needs Lyapunov frames")
        return np.ascontiguousarray(design.frames[k][:, :d].T)
    if design.kind == "random":
        rng = np.random.default_rng([design.seed, k])
        return qr_positive(rng.standard_normal((n, d)))[0].T
    if design.kind == "full":
        return np.eye(n)
    if design.kind == "none":
        return np.zeros((0, n))
    return np.eye(n)[:d]


def precision_matrix(H, R):
    """``H^T R^{-1} H`` through the Cholesky factor of ``R``."""
    H = np.atleast_2d(np.asarray(H, dtype=np.float64))
    n = H.shape[1]
    if H.shape[0] == 0:
        return np.zeros((n, n))
    try:
        L = np.linalg.cholesky(np.atleast_2d(R))
    except np.linalg.LinAlgError as exc:
        raise ConditioningError("observation error covariance R is not positive definite") from exc
    A = scipy.linalg.solve_triangular(L, H, lower=True)
    return symmetrize(A.T @ A)


def analysis_update(P, Omega):
    """``(I + P Omega)^{-1} P``."""
    n = P.shape[0]
    A = np.eye(n) + P @ Omega
    try:
        Pa = np.linalg.solve(A, P)
    except np.linalg.LinAlgError as exc:
        raise ConditioningError(f"I + P Omega is singular (cond={np.linalg.cond(A):.3e})") from exc
    if not np.all(np.isfinite(Pa)):
        raise ConditioningError(f"non-finite analysis covariance (cond={np.linalg.cond(A):.3e})")
    return symmetrize(Pa)


def analysis_update_sqrt(X, Omega):
    """Factor form ``X (I + X^T Omega X)^{-1} X^T`` of the analysis update."""
    n = X.shape[1]
    S = np.eye(n) + X.T @ Omega @ X
    return symmetrize(X @ np.linalg.solve(S, X.T))


def forecast_update(Pa, M, Q):
    return symmetrize(M @ Pa @ M.T + Q)


def riccati_step(P, M, Omega, Q):
    """One analysis-forecast cycle of the Riccati recursion."""
    return forecast_update(analysis_update(P, Omega), M, Q)


def cholesky_factor(P):
    """``X`` with ``X X^T = P``; eigen-decomposition fallback when ``P`` is singular."""
    P = np.asarray(P, dtype=np.float64)
    try:
        return np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        pass
    w, V = np.linalg.eigh(symmetrize(P))
    scale = max(np.abs(w).max(), 0.0)
    if w[0] < -1e-10 * scale:
        raise ConditioningError(f"matrix is indefinite: min eigenvalue {w[0]:.3e}")
    w = np.where(w < 1e-12 * scale, 0.0, w)
    return V * np.sqrt(w)


@dataclass
class FilterStats:
    """Running extremes of the singular values of ``X_k^T Omega_k X_k`` and error norms.

    ``beta`` is also the running supremum of ``sigma_1^2(R^{-1/2} H_k X_k)``.
    """

    alpha: float = np.inf
    beta: float = 0.0
    frobenius: np.ndarray = field(default_factory=lambda: np.zeros(0))
    alpha_running: np.ndarray = field(default_factory=lambda: np.zeros(0))
    beta_running: np.ndarray = field(default_factory=lambda: np.zeros(0))
    spinup: int = 0
    frobenius_mean: float = np.nan
    label: str = ""
    forecasts: np.ndarray | None = None

    @property
    def sup_sigma1_sq(self) -> float:
        return self.beta


def alpha_beta_update(stats: FilterStats, X, Omega) -> FilterStats:
    s = np.linalg.svd(X.T @ Omega @ X, compute_uv=False)
    stats.alpha = min(stats.alpha, float(s[-1]))
    stats.beta = max(stats.beta, float(s[0]))
    return stats


def run_filter(props: PropagatorSequence, design: ObservationDesign, noise: NoiseModel,
               P0=None, spinup=0, K_avg=None, store_forecasts=False) -> FilterStats:
    """Iterate the Riccati recursion with ``H_k`` from ``design``.

    ``frobenius[k]`` is the norm of the forecast covariance ``P_k``, for
    ``k = 0 .. spinup + K_avg - 1``; the mean covers the last ``K_avg`` of
    them.  ``P_{k+1}`` uses ``props.mats[k]``.
    """
    n = props.n
    K_avg = len(props) - spinup if K_avg is None else K_avg
    total = spinup + K_avg
    if K_avg < 1 or total > len(props):
        raise ConfigurationError(f"need spinup + K_avg = {total} <= {len(props)} propagators, K_avg >= 1")
    if design.n != n:
        raise ConfigurationError("design dimension does not match propagators")
    if noise.R.shape[0] != design.d:
        raise ConfigurationError(f"R is {noise.R.shape[0]}-dimensional but design has d={design.d}")
    P = np.eye(n) if P0 is None else np.array(P0, dtype=np.float64)
    Q = noise.Q
    Omega = precision_matrix(make_observation(design, 0), noise.R) if design.time_invariant else None

    stats = FilterStats(spinup=spinup, label=design.label)
    frob = np.empty(total)
    a_run = np.empty(total)
    b_run = np.empty(total)
    stored = np.empty((total + 1, n, n)) if store_forecasts else None
    for k in range(total):
        if stored is not None:
            stored[k] = P
        frob[k] = np.linalg.norm(P)
        Om = Omega if Omega is not None else precision_matrix(make_observation(design, k), noise.R)
        alpha_beta_update(stats, cholesky_factor(P), Om)
        a_run[k], b_run[k] = stats.alpha, stats.beta
        P = riccati_step(P, props.mats[k], Om, Q)
    if stored is not None:
        stored[total] = P
    stats.frobenius = frob
    stats.alpha_running = a_run
    stats.beta_running = b_run
    stats.frobenius_mean = float(frob[spinup:].mean())
    stats.forecasts = stored
    return stats
