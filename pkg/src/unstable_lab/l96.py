"""Lorenz-96 trajectory and discrete tangent-linear propagators.

The propagator ``M_k`` maps perturbations at analysis time ``t_{k-1}`` to
``t_k = t_{k-1} + delta``.  It is the resolvent of the variational equation
``dV/dt = J(x(t)) V`` with ``V(0) = I``, integrated jointly with the state by
classical RK4 on the augmented system.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import ConfigurationError, InvalidDimensionError


@dataclass(frozen=True)
class ModelConfig:
    """Parameters of the L96 trajectory and its propagator sequence."""

    n: int = 10
    F: float = 8.0
    delta: float = 0.1
    h: float = 0.01
    spinup_steps: int = 5000
    K: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.n < 4:
            raise InvalidDimensionError(f"n must be >= 4, got {self.n}")
        if not self.h > 0:
            raise ConfigurationError(f"h must be positive, got {self.h}")
        if self.K < 0 or self.spinup_steps < 0:
            raise ConfigurationError("K and spinup_steps must be non-negative")
        substeps(self.delta, self.h)

    @property
    def substeps(self) -> int:
        return substeps(self.delta, self.h)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class PropagatorSequence:
    """Ordered propagators ``mats[k-1] = M_k`` along a trajectory.

    ``states[k]`` is the trajectory point at analysis time ``t_k``; so
    ``mats[k-1]`` carries ``states[k-1]`` to ``states[k]``.
    """

    mats: np.ndarray
    states: np.ndarray
    config: ModelConfig | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mats = np.asarray(self.mats, dtype=np.float64)
        self.states = np.asarray(self.states, dtype=np.float64)
        n = self.states.shape[-1]
        if self.mats.size == 0:
            self.mats = self.mats.reshape(0, n, n)
        if self.mats.ndim != 3 or self.mats.shape[1:] != (n, n):
            raise ConfigurationError(f"mats must have shape (K, {n}, {n}), got {self.mats.shape}")
        if len(self.states) != len(self.mats) + 1:
            raise ConfigurationError(
                f"expected {len(self.mats) + 1} states for {len(self.mats)} propagators, "
                f"got {len(self.states)}"
            )
        if not (np.all(np.isfinite(self.mats)) and np.all(np.isfinite(self.states))):
            raise ConfigurationError("propagator sequence contains non-finite values")

    def __len__(self):
        return len(self.mats)

    @property
    def n(self) -> int:
        return self.states.shape[-1]

    def window(self, start: int, stop: int | None = None) -> "PropagatorSequence":
        """Sub-sequence whose time origin is ``states[start]``."""
        stop = len(self) if stop is None else stop
        if not 0 <= start <= stop <= len(self):
            raise ConfigurationError(f"window [{start}, {stop}) outside [0, {len(self)}]")
        return PropagatorSequence(self.mats[start:stop], self.states[start:stop + 1], self.config,
                                  dict(self.meta, offset=self.meta.get("offset", 0) + start))

    def product(self, k: int, l: int) -> np.ndarray:
        """Propagator from ``t_l`` to ``t_k``: ``M_k ... M_{l+1}`` (identity when k == l)."""
        if not 0 <= l <= k <= len(self):
            raise ConfigurationError(f"invalid product range k={k}, l={l}")
        out = np.eye(self.n)
        for j in range(l, k):
            out = self.mats[j] @ out
        return out

    def min_singular_values(self) -> np.ndarray:
        return np.linalg.svd(self.mats, compute_uv=False)[:, -1]


def substeps(delta: float, h: float) -> int:
    """Number of RK4 steps per assimilation interval; ``delta`` must be a multiple of ``h``."""
    if not h > 0:
        raise ConfigurationError(f"h must be positive, got {h}")
    m = round(delta / h)
    if m < 1 or not math.isclose(m * h, delta, rel_tol=1e-9, abs_tol=1e-12):
        raise ConfigurationError(f"delta={delta} is not a positive integer multiple of h={h}")
    return int(m)


def _check_dim(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] < 4:
        raise InvalidDimensionError(f"L96 needs a 1-d state with n >= 4, got shape {x.shape}")
    return x


def l96_rhs(x, F):
    """Lorenz-96 tendency with cyclic indices."""
    x = _check_dim(x)
    return (np.roll(x, -1) - np.roll(x, 2)) * np.roll(x, 1) - x + F


def l96_jacobian(x):
    """Dense Jacobian of :func:`l96_rhs` at ``x``."""
    x = _check_dim(x)
    n = x.shape[0]
    idx = np.arange(n)
    im2, im1, ip1 = (idx - 2) % n, (idx - 1) % n, (idx + 1) % n
    jac = np.zeros((n, n))
    jac[idx, im2] = -x[im1]
    jac[idx, im1] = x[ip1] - x[im2]
    jac[idx, idx] = -1.0
    jac[idx, ip1] = x[im1]
    return jac


def rk4_state_step(x, h, F):
    """One classical RK4 step of the nonlinear model."""
    if not h > 0:
        raise ConfigurationError(f"h must be positive, got {h}")
    x = _check_dim(x)
    k1 = l96_rhs(x, F)
    k2 = l96_rhs(x + 0.5 * h * k1, F)
    k3 = l96_rhs(x + 0.5 * h * k2, F)
    k4 = l96_rhs(x + h * k3, F)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


# -- compiled kernels -------------------------------------------------------

@numba.njit(cache=True)
def _rhs(x, F, out):
    n = x.shape[0]
    for m in range(n):
        out[m] = (x[(m + 1) % n] - x[m - 2]) * x[m - 1] - x[m] + F


@numba.njit(cache=True)
def _jac_times(x, V, out):
    # (J V)[m] = -x[m-1] V[m-2] + (x[m+1] - x[m-2]) V[m-1] - V[m] + x[m-1] V[m+1]
    n = x.shape[0]
    c = V.shape[1]
    for m in range(n):
        a = -x[m - 1]
        b = x[(m + 1) % n] - x[m - 2]
        e = x[m - 1]
        for j in range(c):
            out[m, j] = a * V[m - 2, j] + b * V[m - 1, j] - V[m, j] + e * V[(m + 1) % n, j]


@numba.njit(cache=True)
def _state_steps(x, F, h, steps):
    n = x.shape[0]
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    for _ in range(steps):
        _rhs(x, F, k1)
        _rhs(x + 0.5 * h * k1, F, k2)
        _rhs(x + 0.5 * h * k2, F, k3)
        _rhs(x + h * k3, F, k4)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


@numba.njit(cache=True)
def _joint_steps(x, V, F, h, steps):
    n = x.shape[0]
    c = V.shape[1]
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    K1 = np.empty((n, c))
    K2 = np.empty((n, c))
    K3 = np.empty((n, c))
    K4 = np.empty((n, c))
    for _ in range(steps):
        _rhs(x, F, k1)
        _jac_times(x, V, K1)
        x2 = x + 0.5 * h * k1
        V2 = V + 0.5 * h * K1
        _rhs(x2, F, k2)
        _jac_times(x2, V2, K2)
        x3 = x + 0.5 * h * k2
        V3 = V + 0.5 * h * K2
        _rhs(x3, F, k3)
        _jac_times(x3, V3, K3)
        x4 = x + h * k3
        V4 = V + h * K3
        _rhs(x4, F, k4)
        _jac_times(x4, V4, K4)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        V = V + (h / 6.0) * (K1 + 2.0 * K2 + 2.0 * K3 + K4)
    return x, V


@numba.njit(cache=True)
def _record(x, F, h, m, K, states, mats):
    n = x.shape[0]
    states[0] = x
    for k in range(K):
        x, V = _joint_steps(x, np.eye(n), F, h, m)
        states[k + 1] = x
        mats[k] = V


def integrate(x, delta, h, F):
    """Advance the nonlinear state by ``delta`` model time with fixed-step RK4."""
    x = _check_dim(x).copy()
    return _state_steps(x, float(F), float(h), substeps(delta, h))


def tangent_resolvent_step(x, delta, h, F):
    """Advance ``x`` by ``delta`` and return ``(x_new, M)`` with ``M`` the resolvent.

    State and resolvent are advanced together, so the Jacobian is evaluated
    at each RK4 stage state.
    """
    x = _check_dim(x).copy()
    m = substeps(delta, h)
    return _joint_steps(x, np.eye(x.shape[0]), float(F), float(h), m)


def initial_condition(config: ModelConfig) -> np.ndarray:
    rng = np.random.default_rng(config.seed)
    return config.F * np.ones(config.n) + 1e-3 * rng.standard_normal(config.n)


def generate_propagators(config: ModelConfig) -> PropagatorSequence:
    """Spin up the nonlinear model, then record ``config.K`` propagators."""
    m = config.substeps
    x = initial_condition(config)
    x = _state_steps(x, float(config.F), float(config.h), m * config.spinup_steps)
    states = np.empty((config.K + 1, config.n))
    mats = np.empty((config.K, config.n, config.n))
    _record(x, float(config.F), float(config.h), m, config.K, states, mats)
    return PropagatorSequence(mats, states, config)
