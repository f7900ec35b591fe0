"""Optimizer kernels applied to an already-aggregated gradient, plus the
convergence-constants calculator.

The AMSGrad update keeps the stability constant nu inside the square root,
i.e. x <- x - alpha * m / sqrt(b_hat + nu), and uses no bias-correction
terms. b_hat is the running elementwise max of the second moment, so the
effective per-coordinate step size is nonincreasing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .core import NonFiniteError, check_same_length


@dataclass
class AmsgradParams:
    """Step size (constant or schedule alpha(t), expected nonincreasing),
    moment decay rates, and the stability constant nu."""

    alpha: Union[float, Callable[[int], float]] = 0.001
    beta1: float = 0.9
    beta2: float = 0.99
    nu: float = 1e-8

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0):
            raise ValueError(f"beta1 must be in [0, 1), got {self.beta1}")
        if not (0.0 <= self.beta2 < 1.0):
            raise ValueError(f"beta2 must be in [0, 1), got {self.beta2}")
        if self.nu <= 0.0:
            raise ValueError(f"nu must be > 0, got {self.nu}")

    def step_size(self, t: int) -> float:
        return self.alpha(t) if callable(self.alpha) else self.alpha


@dataclass
class AmsgradState:
    """First moment m, second moment b, its running max b_hat, and model x."""

    m: np.ndarray
    b: np.ndarray
    b_hat: np.ndarray
    x: np.ndarray

    @classmethod
    def fresh(cls, x0: np.ndarray) -> "AmsgradState":
        d = len(x0)
        return cls(np.zeros(d), np.zeros(d), np.zeros(d), np.array(x0, dtype=np.float64))


def amsgrad_step(state: AmsgradState, g: np.ndarray, params: AmsgradParams,
                 t: int, iteration_info=None) -> AmsgradState:
    """One AMSGrad update in place:

        m <- beta1*m + (1-beta1)*g
        b <- beta2*b + (1-beta2)*g^2
        b_hat <- max(b_hat, b)
        x <- x - alpha_t * m / sqrt(b_hat + nu)

    Raises NonFiniteError on a non-finite gradient or iterate.
    """
    check_same_length(state.x, g)
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("gradient", iteration=t, algorithm=iteration_info)
    state.m = params.beta1 * state.m + (1.0 - params.beta1) * g
    state.b = params.beta2 * state.b + (1.0 - params.beta2) * g * g
    prev_b_hat = state.b_hat
    state.b_hat = np.maximum(state.b_hat, state.b)
    assert np.all(state.b_hat >= prev_b_hat)
    state.x = state.x - params.step_size(t) * state.m / np.sqrt(state.b_hat + params.nu)
    if not np.all(np.isfinite(state.x)):
        raise NonFiniteError("model", iteration=t, algorithm=iteration_info)
    return state


def sgd_step(x: np.ndarray, g: np.ndarray, alpha: float) -> np.ndarray:
    """x <- x - alpha * g."""
    check_same_length(x, g)
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("gradient")
    return x - alpha * g


def momentum_sgd_step(x: np.ndarray, m: np.ndarray, g: np.ndarray,
                      alpha: float, beta: float):
    """Heavy-ball update: m <- beta*m + g, x <- x - alpha*m. Returns (x, m)."""
    check_same_length(x, g)
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("gradient")
    m = beta * m + g
    return x - alpha * m, m


def variance_instability(g_fresh: np.ndarray, g_compressed: np.ndarray, beta2: float):
    """Diagnostic decomposition of the second-moment update under compression.

    Returns ((1-beta2)*||g_hat - g||^2, 2*(1-beta2)*<g, g_hat - g>): the
    quadratic term accumulates with compression error while the inner term
    can cancel out over training.
    """
    check_same_length(g_fresh, g_compressed)
    diff = g_compressed - g_fresh
    quadratic = (1.0 - beta2) * float(diff @ diff)
    inner = 2.0 * (1.0 - beta2) * float(g_fresh @ diff)
    return quadratic, inner


@dataclass(frozen=True)
class TheoryInputs:
    """Problem constants feeding the convergence-rate calculator.

    pi: contraction factor in [0, 1); L: smoothness constant; G, G_inf:
    stochastic-gradient bounds in l2/l_inf; sigma: local variance bound;
    nu, beta1: optimizer constants; n: workers; N: samples per worker;
    d: dimension; delta_f: f(x_1) - inf f; epsilon: stationarity target.
    """

    pi: float
    L: float
    G: float
    G_inf: float
    sigma: float
    nu: float
    beta1: float
    n: int
    N: int
    d: int
    delta_f: float
    epsilon: float

    def __post_init__(self):
        if not (0.0 <= self.pi < 1.0):
            raise ValueError(f"pi must be in [0, 1), got {self.pi}")
        for name in ("L", "G", "G_inf", "nu", "delta_f", "epsilon"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not (0.0 <= self.beta1 < 1.0):
            raise ValueError("beta1 must be in [0, 1)")
        if self.n < 1 or self.N < 2 or self.d < 1:
            raise ValueError("n >= 1, N >= 2, d >= 1 required")


THEORY_FIELDS = ("C2", "G_tilde", "G_tilde_inf", "C", "C1",
                 "M1", "M2", "M3", "M4", "M5",
                 "alpha_max", "tau_min", "T_min")


def theorem_constants(inp: TheoryInputs) -> dict:
    """Closed-form constants of the convergence bound, plus the admissible
    step size, minimum batch size, and minimum iteration count for reaching
    an epsilon-stationary point.

    pi = 0 collapses everything to the uncompressed constants: C2 = 1,
    G_tilde = G, M5 = 0. One ceiling is applied to the whole T_min sum.
    tau_min is clamped to [1, N]: the closed form yields 0 when M5 = 0 and
    can round one past N when the variance term dominates.
    """
    rt = math.sqrt(inp.pi)
    c2 = (1.0 + rt) ** 2 / (1.0 - rt) ** 2
    g_tilde = c2 * inp.G
    g_tilde_inf = c2 * inp.G_inf
    c = 2.0 * math.sqrt(g_tilde_inf ** 2 + inp.nu)
    c1 = 2.0 * inp.L + 3.0 * inp.L * (inp.beta1 / (1.0 - inp.beta1)) ** 2
    m1 = c * inp.delta_f
    m2 = c * inp.G * g_tilde / ((1.0 - inp.beta1) * math.sqrt(inp.nu))
    m3 = (32.0 * c * c1 * g_tilde ** 2 / inp.nu
          + 2.0 * rt * c * inp.L * inp.G * g_tilde * math.sqrt(inp.d)
          / (inp.nu * (1.0 - rt) ** 2))
    m4 = 4.0 * c * c1 / inp.nu
    m5 = 4.0 * rt * c * inp.G / (math.sqrt(inp.nu) * (1.0 - rt) ** 2)

    alpha_max = inp.n * inp.epsilon / (6.0 * inp.n * m3 + 6.0 * m4 * inp.sigma ** 2)
    s = (3.0 * m5 * inp.sigma) ** 2
    tau_min = min(inp.N, max(1, math.ceil(inp.N * s / ((inp.N - 1) * inp.epsilon ** 2 + s))))
    t_min = math.ceil(36.0 * m1 * m3 / inp.epsilon ** 2
                      + 36.0 * m1 * m4 * inp.sigma ** 2 / (inp.n * inp.epsilon ** 2)
                      + 3.0 * m2 / inp.epsilon)
    return {
        "C2": c2, "G_tilde": g_tilde, "G_tilde_inf": g_tilde_inf,
        "C": c, "C1": c1,
        "M1": m1, "M2": m2, "M3": m3, "M4": m4, "M5": m5,
        "alpha_max": alpha_max, "tau_min": tau_min, "T_min": t_min,
    }
