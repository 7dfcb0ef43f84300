"""Explicit contraction-rate machinery for the partially dissipative regime.

``gamma`` is the one-sided Lipschitz profile of the endpoint drift,
``gamma~(v) = gamma(v) + K_sigma v`` and ``Psi(s) = (1/(2 beta^2)) int_0^s gamma~``.
From these come ``delta = int_0^inf s exp(Psi(s)) ds``, the distance-like
function ``f`` and the rate constants ``lambda0``, ``c``, ``lambda``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import quad

__all__ = [
    "RateFunction",
    "RateReport",
    "QuadratureDiagnostics",
    "DivergenceError",
    "paper_piecewise",
    "custom_rate",
    "eval_gamma",
    "eval_gamma_tilde",
    "eval_Psi",
    "compute_delta",
    "eval_f",
    "theorem33_rates",
    "check_theorem23_condition",
    "Theorem23Check",
    "ell_epsilon",
    "ctk0_bound",
]

PIECEWISE = "paper_piecewise"
CUSTOM = "custom"
_QUAD = {"epsabs": 0.0, "epsrel": 1e-13, "limit": 500}


class DivergenceError(ArithmeticError):
    """The improper integral does not decay within the search range."""


@dataclass(frozen=True)
class RateFunction:
    """Drift profile ``gamma`` plus the noise constants.

    For the custom kind, ``tail_slope`` ``c > 0`` and ``tail_start`` declare
    that ``gamma~(v) <= -c v`` for ``v >= tail_start``; the tail bound of the
    improper integrals relies on it.
    """

    kind: str
    beta: float
    Ksigma: float = 0.0
    K1: float = 0.0
    K2: float = 1.0
    R: float = 1.0
    gamma_fn: Callable[[float], float] | None = field(default=None, compare=False)
    tail_slope: float | None = None
    tail_start: float = 0.0

    def __post_init__(self):
        if self.beta == 0 or not math.isfinite(self.beta):
            raise ValueError("beta must be finite and nonzero")
        if self.Ksigma < 0:
            raise ValueError("Ksigma must be >= 0")
        if self.kind == PIECEWISE:
            if self.K1 < 0 or self.R <= 0:
                raise ValueError("need K1 >= 0 and R > 0")
            if not self.K2 > self.Ksigma:
                raise ValueError("need K2 > Ksigma")
        elif self.kind == CUSTOM:
            if self.gamma_fn is None:
                raise ValueError("custom rate function needs gamma_fn")
            if self.tail_slope is None or self.tail_slope <= 0:
                raise ValueError("custom rate function needs a positive tail_slope")
        else:
            raise ValueError(f"unknown rate function kind {self.kind!r}")

    @property
    def two_beta_sq(self) -> float:
        return 2.0 * self.beta * self.beta

    @property
    def dissipation(self) -> float:
        """Slope ``c`` with ``gamma~(v) <= -c v`` in the tail."""
        return self.K2 - self.Ksigma if self.kind == PIECEWISE else float(self.tail_slope)

    @property
    def tail_from(self) -> float:
        return 2.0 * self.R if self.kind == PIECEWISE else float(self.tail_start)


def paper_piecewise(K1: float, K2: float, R: float, Ksigma: float = 0.0, beta: float = 1.0) -> RateFunction:
    return RateFunction(PIECEWISE, beta, Ksigma, K1, K2, R)


def custom_rate(gamma: Callable[[float], float], tail_slope: float, Ksigma: float = 0.0, beta: float = 1.0,
                tail_start: float = 0.0) -> RateFunction:
    return RateFunction(CUSTOM, beta, Ksigma, gamma_fn=gamma, tail_slope=tail_slope, tail_start=tail_start)


def _check_r(r):
    if r < 0:
        raise ValueError(f"argument must be >= 0, got {r}")


def eval_gamma(rf: RateFunction, r: float) -> float:
    _check_r(r)
    if rf.kind == CUSTOM:
        return float(rf.gamma_fn(r))
    K1, K2, R = rf.K1, rf.K2, rf.R
    if r <= R:
        return K1 * r
    if r <= 2 * R:
        return (-(K1 + K2) / R * (r - R) + K1) * r
    return -K2 * r


def eval_gamma_tilde(rf: RateFunction, r: float) -> float:
    return eval_gamma(rf, r) + rf.Ksigma * r


def _primitive(rf: RateFunction, s: float) -> float:
    """``int_0^s gamma~`` in closed form for the piecewise profile."""
    K1, K2, R, Ks = rf.K1, rf.K2, rf.R, rf.Ksigma
    a = (K1 + K2) / R

    def first(x):
        return 0.5 * (K1 + Ks) * x * x

    def middle(x):
        return first(R) - a * (x ** 3 - R ** 3) / 3.0 + 0.5 * (a * R + K1 + Ks) * (x * x - R * R)

    if s <= R:
        return first(s)
    if s <= 2 * R:
        return middle(s)
    return middle(2 * R) + 0.5 * (Ks - K2) * (s * s - 4 * R * R)


def eval_Psi(rf: RateFunction, s: float) -> float:
    _check_r(s)
    if rf.kind == PIECEWISE:
        return _primitive(rf, s) / rf.two_beta_sq
    if s == 0:
        return 0.0
    val, _ = quad(lambda v: eval_gamma_tilde(rf, v), 0.0, s, epsabs=0.0, epsrel=1e-10, limit=200)
    return val / rf.two_beta_sq


def _psi_diff(rf: RateFunction, s: float, u: float) -> float:
    """``Psi(s) - Psi(u)`` without cancellation when both sit in the Gaussian tail."""
    if rf.kind == PIECEWISE and u >= 2 * rf.R:
        return -(rf.K2 - rf.Ksigma) * (s * s - u * u) / (2.0 * rf.two_beta_sq)
    return eval_Psi(rf, s) - eval_Psi(rf, u)


@dataclass(frozen=True)
class QuadratureDiagnostics:
    truncation_point: float
    tail_mass: float
    tolerance: float

    def to_dict(self) -> dict:
        return {"truncation_point": self.truncation_point, "tail_mass": self.tail_mass, "tolerance": self.tolerance}


def _tail_integral(rf: RateFunction, u: float, tol: float) -> tuple[float, QuadratureDiagnostics]:
    """``int_u^inf s exp(Psi(s) - Psi(u)) ds`` with certified truncation.

    Beyond ``tail_from`` the integrand is dominated by a Gaussian, so the
    remaining mass from ``s*`` is at most ``exp(Psi(s*) - Psi(u)) 2 beta^2 / c``.
    Pieces are added until that bound falls below ``tol`` times the sum so far.
    """
    c = rf.dissipation
    scale = math.sqrt(rf.two_beta_sq / c)
    limit = 1e4 * max(1.0, rf.tail_from)

    def integrand(s):
        return s * math.exp(_psi_diff(rf, s, u))

    breaks = [b for b in (rf.R, 2 * rf.R) if rf.kind == PIECEWISE and b > u]
    edges = [u] + breaks
    if rf.kind == CUSTOM and rf.tail_start > u:
        edges.append(rf.tail_start)
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        total += quad(integrand, lo, hi, **_QUAD)[0]
    s = edges[-1]
    while True:
        bound = math.exp(_psi_diff(rf, s, u)) * rf.two_beta_sq / c
        if s > u and bound < tol * total:
            return total, QuadratureDiagnostics(s, bound, tol)
        if s > limit:
            raise DivergenceError(f"integrand still not negligible at s={s:.3g}")
        nxt = s + scale
        total += quad(integrand, s, nxt, **_QUAD)[0]
        s = nxt


def compute_delta(rf: RateFunction, tol: float = 1e-10) -> tuple[float, QuadratureDiagnostics]:
    """``delta = int_0^inf s exp(Psi(s)) ds`` (the slope of ``f`` at 0)."""
    if rf.kind == CUSTOM:
        _check_custom_tail(rf)
    return _tail_integral(rf, 0.0, tol)


def _check_custom_tail(rf: RateFunction):
    # sample a few points past the declared tail start
    for v in np.linspace(max(rf.tail_start, 1e-6), max(rf.tail_start, 1e-6) * 10 + 10, 25):
        if eval_gamma_tilde(rf, float(v)) > -rf.tail_slope * v * (1 - 1e-9):
            raise DivergenceError(f"gamma~({v:.3g}) exceeds the declared tail bound")


def eval_f(rf: RateFunction, r: float, tol: float = 1e-10) -> float:
    """``f(r) = int_0^r exp(-Psi(u)) int_u^inf s exp(Psi(s)) ds du``."""
    _check_r(r)
    if r == 0:
        return 0.0

    def outer(u):
        if rf.kind == PIECEWISE and u >= 2 * rf.R:
            # exact Gaussian tail: int_u^inf s exp(-a(s^2-u^2)) ds = 1/(2a)
            return rf.two_beta_sq / (rf.K2 - rf.Ksigma)
        return _tail_integral(rf, u, tol)[0]

    pts = [b for b in (rf.R, 2 * rf.R) if rf.kind == PIECEWISE and 0 < b < r]
    edges = [0.0] + pts + [r]
    return math.fsum(quad(outer, lo, hi, **_QUAD)[0] for lo, hi in zip(edges[:-1], edges[1:]))


def ctk0_bound(K2: float, Ksigma: float, r0: float) -> float:
    d = K2 - Ksigma
    return 2.0 * d * math.exp(-2.0 * d * r0) / 6.0


@dataclass(frozen=True)
class Theorem23Check:
    holds: bool
    lhs: float
    rhs: float
    prefactor: float
    exponent: float

    def to_dict(self) -> dict:
        return {"holds": self.holds, "lhs": self.lhs, "rhs": self.rhs,
                "envelope_prefactor": self.prefactor, "envelope_exponent": self.exponent}


def check_theorem23_condition(K1: float, K2: float, K3: float, r0: float) -> Theorem23Check:
    """``20 K1 + 2 K2 < K3 exp(-K3 r0)``.

    Also returns the synchronous-coupling envelope
    ``E||X_t - Y_t||^2 <= prefactor * exp(exponent * t) * E||X_0 - Y_0||^2``
    with ``prefactor = 2 exp(K3 r0)`` and
    ``exponent = exp(K3 r0) (2 K2 + 20 K1 - K3 exp(-K3 r0))``.
    """
    if K3 <= 0:
        raise ValueError("K3 must be > 0")
    lhs = 20.0 * K1 + 2.0 * K2
    rhs = K3 * math.exp(-K3 * r0)
    e = math.exp(K3 * r0)
    return Theorem23Check(lhs < rhs, lhs, rhs, 2.0 * e, e * (lhs - rhs))


@dataclass(frozen=True)
class RateReport:
    delta: float
    lambda0: float
    c: float
    lam: float
    threshold: float
    conditions: dict
    diagnostics: QuadratureDiagnostics

    @property
    def contractive(self) -> bool:
        return self.lam > 0

    def to_dict(self) -> dict:
        return {"delta": self.delta, "lambda0": self.lambda0, "c": self.c, "lambda": self.lam,
                "kb_threshold": self.threshold, "contractive": self.contractive,
                "conditions": self.conditions, "quadrature_diagnostics": self.diagnostics.to_dict()}


def theorem33_rates(rf: RateFunction, Kb: float, r0: float, K3: float | None = None,
                    K1_B: float | None = None, K2_B: float | None = None, tol: float = 1e-10) -> RateReport:
    """``delta``, ``lambda0 = 2 beta^2/delta``, ``c``, ``lambda`` and the hypothesis flags.

    ``lambda`` is reported even when negative; the flags say which
    hypotheses fail.  ``dic`` needs the constants of the synchronous regime
    (``K1_B``, ``K2_B``, ``K3``) and is ``None`` when ``K3`` is not given.
    """
    if Kb < 0 or r0 < 0:
        raise ValueError("Kb and r0 must be >= 0")
    delta, diag = compute_delta(rf, tol)
    b2 = rf.beta ** 2
    lambda0 = 2.0 * b2 / delta
    dis = rf.dissipation
    growth = math.exp(lambda0 * r0)
    threshold = 2.0 * b2 * b2 / (growth * dis * delta * delta)
    c = dis / b2 * growth * delta
    lam = c * (threshold - Kb)
    ctk0 = ctk0_bound(rf.K2, rf.Ksigma, r0) if rf.kind == PIECEWISE else 2.0 * dis * math.exp(-2.0 * dis * r0) / 6.0
    conditions = {
        "kb_kd1": Kb < threshold,
        "kb_kd": Kb < min(threshold, ctk0),
        "CTK0": Kb < ctk0,
        "dic": None,
    }
    if K3 is not None:
        k1 = rf.K1 if K1_B is None else K1_B
        k2 = rf.K2 if K2_B is None else K2_B
        conditions["dic"] = check_theorem23_condition(k1, k2, K3, r0).holds
    return RateReport(delta, lambda0, c, lam, threshold, conditions, diag)


def ell_epsilon(rf: RateFunction, epsilon: float, delta: float | None = None) -> float:
    """``l(eps) = 2 beta^2 eps + delta (sup_[0,eps] gamma^+ + K_sigma eps)``."""
    _check_r(epsilon)
    if epsilon == 0:
        return 0.0
    if delta is None:
        delta = compute_delta(rf)[0]
    if rf.kind == PIECEWISE and epsilon <= rf.R:
        sup_pos = rf.K1 * epsilon
    else:
        grid = np.linspace(0.0, epsilon, 2001)
        sup_pos = max(0.0, max(eval_gamma(rf, float(v)) for v in grid))
    return rf.two_beta_sq * epsilon + delta * (sup_pos + rf.Ksigma * epsilon)
