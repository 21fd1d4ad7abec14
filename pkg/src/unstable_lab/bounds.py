"""Gramians, recursive sandwich bounds and boundedness criteria.

Propagator convention: ``M_{k:l}`` maps ``t_l`` to ``t_k``, i.e.
``M_k ... M_{l+1}`` with ``M_{k:k} = I``; ``props.mats[j]`` is ``M_{j+1}``.
Sequences of ``Q_l`` or ``Omega_l`` are passed either as one constant
``(n, n)`` matrix or as an array indexed by ``l``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ConvergenceError, DegeneracyError
from .kalman import FilterStats, cholesky_factor, precision_matrix, riccati_step
from .l96 import PropagatorSequence
from .lyapunov import LyapunovRun, SpectrumEstimate, lyapunov_spectrum


def _at(seq, l):
    seq = np.asarray(seq)
    return seq if seq.ndim == 2 else seq[l]


def _window(props, k, j):
    if not 0 <= j <= k <= len(props):
        raise ConfigurationError(f"window [{j}, {k}] not inside [0, {len(props)}]")


def weighted_controllability(props: PropagatorSequence, Q_seq, gamma, k, j):
    """``sum_{l=j}^{k} (1+gamma)^{-(k-l)} M_{k:l} Q_l M_{k:l}^T``."""
    if gamma < 0:
        raise ConfigurationError("gamma must be non-negative")
    _window(props, k, j)
    n = props.n
    A = np.eye(n)
    w = 1.0
    out = np.zeros((n, n))
    for l in range(k, j - 1, -1):
        out += w * (A @ _at(Q_seq, l) @ A.T)
        if l > j:
            A = A @ props.mats[l - 1]
            w /= 1.0 + gamma
    return 0.5 * (out + out.T)


def controllability_matrix(props: PropagatorSequence, Q_seq, k, N):
    """``Upsilon_{k:k-N}``."""
    if N < 0 or k - N < 0:
        raise ConfigurationError(f"window N={N} exceeds available steps before k={k}")
    return weighted_controllability(props, Q_seq, 0.0, k, k - N)


def information_matrix(props: PropagatorSequence, Omega_seq, k, N):
    """``Phi_{k:k-N} = sum_l M_{k:l}^{-T} Omega_l M_{k:l}^{-1}`` via linear solves."""
    if N < 0 or k - N < 0:
        raise ConfigurationError(f"window N={N} exceeds available steps before k={k}")
    _window(props, k, k - N)
    n = props.n
    A = np.eye(n)
    out = np.zeros((n, n))
    for l in range(k, k - N - 1, -1):
        try:
            Y = np.linalg.solve(A.T, _at(Omega_seq, l))
            out += np.linalg.solve(A.T, Y.T)
        except np.linalg.LinAlgError as exc:
            raise DegeneracyError(f"propagator M_{{{k}:{l}}} is singular") from exc
        if l > k - N:
            A = A @ props.mats[l - 1]
    return 0.5 * (out + out.T)


@dataclass
class GramianReport:
    window: tuple
    controllability: np.ndarray
    information: np.ndarray
    weighted: np.ndarray
    gamma: float
    extremes: dict = field(default_factory=dict)

    @property
    def observable(self) -> bool:
        return self.extremes["information"][0] > 0

    @property
    def controllable(self) -> bool:
        return self.extremes["controllability"][0] > 0


def gramian_report(props, Q_seq, Omega_seq, gamma, k, N) -> GramianReport:
    ups = controllability_matrix(props, Q_seq, k, N)
    phi = information_matrix(props, Omega_seq, k, N)
    xi = weighted_controllability(props, Q_seq, gamma, k, k - N)
    ext = {name: (float(w[0]), float(w[-1])) for name, w in
           (("controllability", np.linalg.eigvalsh(ups)),
            ("information", np.linalg.eigvalsh(phi)),
            ("weighted", np.linalg.eigvalsh(xi)))}
    return GramianReport((k - N, k), ups, phi, xi, gamma, ext)


def gramian_extremes(props, seq, N, anchors, kind="controllability", gamma=0.0):
    """Smallest and largest eigenvalue of a windowed Gramian over the anchor steps."""
    lo, hi = np.inf, -np.inf
    for k in anchors:
        if kind == "information":
            G = information_matrix(props, seq, k, N)
        else:
            G = weighted_controllability(props, seq, gamma, k, k - N)
        w = np.linalg.eigvalsh(G)
        lo, hi = min(lo, w[0]), max(hi, w[-1])
    return float(lo), float(hi)


def gramian_constants(props, Q_seq, alpha, beta, N, anchors, frames=None, mode=None):
    """Witnesses for the local-variability constants ``(C_alpha, C_beta)``.

    By default the largest eigenvalue of ``Xi^alpha_{k:k-N}`` and the
    smallest of ``Xi^beta_{k:k-N}`` over ``anchors``.  Since ``Xi >= Q_k``,
    the smallest eigenvalue of ``Q_k`` replaces a computed minimum that is
    below the rounding level of the largest one.  With ``frames`` and a
    1-based ``mode``, the quadratic forms along ``B^i_k`` are used instead,
    accumulated through ``M_{k:l}^T B^i_k`` so that no full product is formed.
    """
    c_alpha, c_beta = -np.inf, np.inf
    for k in anchors:
        _window(props, k, k - N)
        if frames is None:
            wa = np.linalg.eigvalsh(weighted_controllability(props, Q_seq, alpha, k, k - N))
            wb = np.linalg.eigvalsh(weighted_controllability(props, Q_seq, beta, k, k - N))
            a, b = wa[-1], wb[0]
            if b <= 10 * props.n * np.finfo(float).eps * wb[-1]:
                b = max(b, np.linalg.eigvalsh(_at(Q_seq, k))[0])
        else:
            w = np.array(frames[k][:, mode - 1], dtype=np.float64)
            a = b = 0.0
            ga = gb = 1.0
            for l in range(k, k - N - 1, -1):
                q = w @ _at(Q_seq, l) @ w
                a += ga * q
                b += gb * q
                if l > k - N:
                    w = props.mats[l - 1].T @ w
                    ga /= 1.0 + alpha
                    gb /= 1.0 + beta
        c_alpha, c_beta = max(c_alpha, a), min(c_beta, b)
    return float(c_alpha), float(c_beta)


@dataclass
class SandwichReport:
    lower_margin: np.ndarray
    upper_margin: np.ndarray
    scale: np.ndarray
    alpha: float
    beta: float

    def worst(self) -> float:
        """Most negative margin relative to ``||P_k||_F``."""
        return float(min((self.lower_margin / self.scale).min(),
                         (self.upper_margin / self.scale).min()))

    def ok(self, tol=1e-8) -> bool:
        return self.worst() >= -tol


def sandwich_check(P_series, props: PropagatorSequence, P0, alpha, beta, Q_seq, horizon=None):
    """Min-eigenvalue margins of the recursive bound for ``k = 1 .. horizon``.

    ``lower_k = (1+beta)^{-k} M_{k:0} P0 M_{k:0}^T + Xi^beta_{k:1}`` and the
    upper bound likewise with ``alpha``.  ``P_series[k]`` is the forecast
    covariance at step ``k``.
    """
    horizon = len(P_series) - 1 if horizon is None else horizon
    if horizon > min(len(P_series) - 1, len(props)):
        raise ConfigurationError(f"horizon {horizon} beyond the available forecasts/propagators")
    n = props.n
    lo = np.empty(horizon)
    up = np.empty(horizon)
    scale = np.empty(horizon)
    A = np.eye(n)
    for k in range(1, horizon + 1):
        A = props.mats[k - 1] @ A
        if not np.all(np.isfinite(A)):
            raise ConfigurationError(f"M_{{k:0}} overflows at k={k}; reduce the horizon")
        base = A @ P0 @ A.T
        lower = base * np.exp(-k * np.log1p(beta)) + weighted_controllability(props, Q_seq, beta, k, 1)
        upper = base * np.exp(-k * np.log1p(alpha)) + weighted_controllability(props, Q_seq, alpha, k, 1)
        P = P_series[k]
        lo[k - 1] = np.linalg.eigvalsh(P - lower)[0]
        up[k - 1] = np.linalg.eigvalsh(upper - P)[0]
        scale[k - 1] = np.linalg.norm(P)
    return SandwichReport(lo, up, scale, alpha, beta)


@dataclass
class CriterionReport:
    lambda1: float
    sup_sigma1_sq: float
    ratio: float

    @property
    def satisfied(self) -> bool:
        return self.ratio < 1.0


def criterion_ratio(lambda1, sup_sigma1_sq) -> CriterionReport:
    return CriterionReport(float(lambda1), float(sup_sigma1_sq),
                           float(np.exp(2.0 * lambda1) / (1.0 + sup_sigma1_sq)))


def necessary_criterion_tv(run: FilterStats, spectrum: SpectrumEstimate) -> CriterionReport:
    """Leading growth against the best observational precision seen by the filter."""
    return criterion_ratio(spectrum.lambdas[0], run.sup_sigma1_sq)


@dataclass
class EigenBoundCheck:
    mu: complex
    lam: float
    quad_P: float
    quad_Q: float
    upper: float | None
    lower: float | None
    defective: bool = False

    @property
    def upper_margin(self):
        return None if self.upper is None else self.upper - self.quad_P

    @property
    def lower_margin(self):
        return None if self.lower is None else self.quad_P - self.lower


@dataclass
class AutonomousReport:
    P_hat: np.ndarray
    X_hat: np.ndarray
    alpha: float
    beta: float
    iterations: int
    residual: float
    checks: list

    def worst_margin(self) -> float:
        m = [c.upper_margin for c in self.checks if c.upper_margin is not None]
        m += [c.lower_margin for c in self.checks if c.lower_margin is not None]
        return min(m) if m else np.inf


def _eigen_checks(M, Q, P_hat, alpha, beta, cond_limit=1e8):
    w, V = np.linalg.eig(M.T)
    defective = np.linalg.cond(V) > cond_limit
    checks = []
    for mu, v in zip(w, V.T):
        v = v / np.linalg.norm(v)
        qp = float(np.real(np.conj(v) @ P_hat @ v))
        qq = float(np.real(np.conj(v) @ Q @ v))
        a2 = abs(mu) ** 2
        lam = float(np.log(abs(mu))) if abs(mu) > 0 else -np.inf
        upper = lower = None
        if not defective:
            if a2 / (1.0 + alpha) < 1.0:
                upper = qq / (1.0 - a2 / (1.0 + alpha))
            if a2 / (1.0 + beta) < 1.0:
                lower = qq / (1.0 - a2 / (1.0 + beta))
            elif qq > 0:
                lower = np.inf
        checks.append(EigenBoundCheck(complex(mu), lam, qp, qq, upper, lower, bool(defective)))
    return checks


def autonomous_stable_riccati(M, H, Q, R, tol=1e-12, max_iter=10000) -> AutonomousReport:
    """Fixed point of the autonomous Riccati map, iterated from ``P = Q``.

    Also evaluates the eigenvector bounds for each eigenpair of ``M^T``:
    ``v^H P v <= v^H Q v / (1 - |mu|^2/(1+alpha))`` when the denominator is
    positive, and ``v^H Q v / (1 - |mu|^2/(1+beta)) <= v^H P v``.
    """
    M, Q = np.atleast_2d(M).astype(float), np.atleast_2d(Q).astype(float)
    Omega = precision_matrix(np.atleast_2d(H), np.atleast_2d(R))
    P = Q.copy()
    for it in range(1, max_iter + 1):
        P_new = riccati_step(P, M, Omega, Q)
        change = np.linalg.norm(P_new - P)
        P = P_new
        if change <= tol * max(1.0, np.linalg.norm(P)):
            break
    else:
        raise ConvergenceError(f"no fixed point within {max_iter} iterations", residual=change)
    X = cholesky_factor(P)
    s = np.linalg.svd(X.T @ Omega @ X, compute_uv=False)
    alpha, beta = float(s[-1]), float(s[0])
    resid = float(np.linalg.norm(riccati_step(P, M, Omega, Q) - P))
    return AutonomousReport(P, X, alpha, beta, it, resid, _eigen_checks(M, Q, P, alpha, beta))


def necessary_criterion_autonomous(M, H, R, Q, X_hat, null_tol=1e-12) -> CriterionReport:
    """Autonomous criterion for the leading eigen-direction of ``M^T`` not annihilated by ``Q``."""
    w, V = np.linalg.eig(np.atleast_2d(M).T)
    order = np.argsort(-np.abs(w))
    for idx in order:
        v = V[:, idx] / np.linalg.norm(V[:, idx])
        if np.linalg.norm(np.atleast_2d(Q) @ v) > null_tol:
            lam = np.log(abs(w[idx]))
            break
    else:
        raise ConfigurationError("Q annihilates every eigenvector of M^T")
    H = np.atleast_2d(H)
    L = np.linalg.cholesky(np.atleast_2d(R))
    s1 = np.linalg.norm(np.linalg.solve(L, H @ X_hat), 2)
    return criterion_ratio(lam, s1 ** 2)


@dataclass
class EpsilonWindowEstimate:
    mode: int
    epsilon: float
    N: int
    saturated: bool
    lam: float
    max_window: int
    anchors: np.ndarray
    worst_deviation: np.ndarray


def epsilon_window_estimate(run: LyapunovRun, i, epsilon, samples=50, max_window=500,
                            lam=None, seed=0) -> EpsilonWindowEstimate:
    """Smallest window beyond which sampled backward growth rates stay within ``epsilon``.

    The rate over ``w`` steps ending at anchor ``k`` is
    ``(1/w) log ||row_i(T_k ... T_{k-w+1})||``, which equals the growth of
    ``B_k^i`` under ``M_{k:k-w}^T``.  ``worst_deviation[w-1]`` is the largest
    ``|rate - lam|`` over the anchors.
    """
    K, n = len(run), run.n
    if not 1 <= i <= n:
        raise ConfigurationError(f"mode {i} outside 1..{n}")
    max_window = min(max_window, K)
    if max_window < 1:
        raise ConfigurationError("empty run")
    lam = lyapunov_spectrum(run).lambdas[i - 1] if lam is None else float(lam)
    rng = np.random.default_rng(seed)
    candidates = np.arange(max_window, K + 1)
    anchors = np.sort(rng.choice(candidates, size=min(samples, len(candidates)), replace=False))
    T = run.triangles
    worst = np.zeros(max_window)
    for k in anchors:
        v = T[k - 1][i - 1, i - 1:].copy()
        logscale = 0.0
        for w in range(1, max_window + 1):
            if w > 1:
                v = v @ T[k - w][i - 1:, i - 1:]
            nv = np.linalg.norm(v)
            logscale += np.log(nv)
            v /= nv
            worst[w - 1] = max(worst[w - 1], abs(logscale / w - lam))
    bad = np.nonzero(worst >= epsilon)[0]
    last_bad = int(bad[-1] + 1) if len(bad) else 0
    return EpsilonWindowEstimate(i, float(epsilon), max(1, last_bad), last_bad == max_window,
                                 lam, max_window, anchors, worst)


def tv_bound_values(lambda_i, epsilon, N, alpha, beta, q_sup, q_inf, C_alpha, C_beta):
    """Asymptotic upper and lower bounds on the forecast variance along ``B^i_k``.

    The upper value is ``inf`` when ``e^{2(lambda+eps)}/(1+alpha) >= 1``.
    """
    r_up = np.exp(2.0 * (lambda_i + epsilon)) / (1.0 + alpha)
    upper = np.inf if r_up >= 1.0 else C_alpha + r_up ** (N + 1) * q_sup / (1.0 - r_up)
    r_lo = np.exp(2.0 * (lambda_i - epsilon)) / (1.0 + beta)
    if q_inf == 0:
        lower = C_beta
    elif r_lo >= 1.0:
        lower = np.inf
    else:
        lower = C_beta + r_lo ** (N + 1) * q_inf / (1.0 - r_lo)
    return float(upper), float(lower)
