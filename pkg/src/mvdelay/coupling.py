"""Paired-trajectory coupling drivers.

* synchronous coupling: both copies see identical increments;
* asymptotic reflection coupling: the additive noise is split into a
  reflected channel (weight ``pi_R``) and a shared channel (weight ``pi_S``)
  according to the current endpoint distance;
* Girsanov coupling by change of conditional measure: a drift-shifted copy
  ``Y`` of ``X`` meets ``X`` at ``t0``, and the tilt ``R`` transports the law
  of ``X(t0)`` onto that of ``X~(t0)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr

from .engine import MeasureFlow, step_frozen
from .metrics import PathNorm, path_norms, sorted_1d_wasserstein
from .model import THEOREM2, THEOREM3, ModelError, ParticleCloud, Scenario
from .noise import NoiseStream

__all__ = [
    "MixingProfile",
    "CouplingTrace",
    "GirsanovReport",
    "pi_functions",
    "reflect",
    "run_synchronous_pair",
    "run_reflection_pair",
    "run_girsanov_pair",
    "TEST_FUNCTIONS",
]

PAIR_TAG = 11
GIRSANOV_TAG = 13


@dataclass(frozen=True)
class MixingProfile:
    """Linear ramp ``pi_R`` on ``[eps/2, eps]`` and its complement ``pi_S``."""

    epsilon: float

    def pi_R(self, x):
        x = np.asarray(x, dtype=float)
        return np.clip(2.0 * x / self.epsilon - 1.0, 0.0, 1.0)

    def pi_S(self, x):
        r = self.pi_R(x)
        return np.sqrt(np.maximum(0.0, 1.0 - r * r))


def pi_functions(epsilon: float) -> MixingProfile:
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    return MixingProfile(float(epsilon))


def reflect(increment, z):
    """Householder reflection ``(I - 2 u u^T) w`` with ``u = z/|z|``; identity where ``z = 0``.

    Works row-wise on stacks ``(n, d)`` as well as on single vectors.
    """
    w = np.asarray(increment, dtype=float)
    z = np.asarray(z, dtype=float)
    norm = np.linalg.norm(z, axis=-1, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    u = np.where(norm > 0, z / safe, 0.0)
    return w - 2.0 * np.sum(u * w, axis=-1, keepdims=True) * u


@dataclass
class CouplingTrace:
    """Per-step distance records of a coupled pair of clouds.

    ``gamma`` is the coupled ``W1`` estimate in the Gamma norm (mean over
    pairs) and ``sup`` the coupled ``W2`` estimate in the sup norm (root mean
    square); ``*_se`` are their Monte Carlo standard errors.
    """

    times: np.ndarray
    endpoint: np.ndarray
    gamma: np.ndarray
    gamma_se: np.ndarray
    sup: np.ndarray
    sup_se: np.ndarray
    n_pairs: int
    marginal_w1: np.ndarray | None = None
    mixing_residual: float = 0.0
    coalesced_fraction: np.ndarray | None = None
    final: tuple | None = None

    def rows(self):
        for k in range(len(self.times)):
            yield (k, self.times[k], self.endpoint[k], self.gamma[k], self.gamma_se[k], self.sup[k], self.sup_se[k])


class _Recorder:
    def __init__(self, n_steps):
        keys = ("times", "endpoint", "gamma", "gamma_se", "sup", "sup_se", "marginal_w1")
        self.buf = {k: np.zeros(n_steps + 1) for k in keys}

    def __call__(self, k, x: ParticleCloud, y: ParticleCloud):
        diff = x.values - y.values
        g = path_norms(diff, PathNorm.GAMMA)
        s2 = path_norms(diff, PathNorm.SUP) ** 2
        n = g.shape[0]
        b = self.buf
        b["times"][k] = x.time
        # exact W1 between the endpoint marginals; the sorted coupling is optimal on the line
        b["marginal_w1"][k] = sorted_1d_wasserstein(x.endpoints, y.endpoints, 1) if x.dim == 1 else np.nan
        b["endpoint"][k] = float(np.mean(np.linalg.norm(diff[:, -1], axis=-1)))
        b["gamma"][k] = float(np.mean(g))
        b["gamma_se"][k] = float(np.std(g, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        rms = math.sqrt(float(np.mean(s2)))
        b["sup"][k] = rms
        if n > 1 and rms > 0:
            b["sup_se"][k] = float(np.std(s2, ddof=1) / math.sqrt(n)) / (2.0 * rms)

    def trace(self, n, **kw) -> CouplingTrace:
        return CouplingTrace(n_pairs=n, **self.buf, **kw)


def _check_pair(a: Scenario, b: Scenario, flows):
    if not a.grid.same_window(b.grid) or a.grid.horizon_steps != b.grid.horizon_steps:
        raise ModelError("coupled scenarios must share the time grid")
    if a.model is not b.model and a.model.to_dict() != b.model.to_dict():
        raise ModelError("coupled scenarios must share the coefficient model")
    if a.n_particles != b.n_particles:
        raise ModelError("coupled scenarios must have the same number of pairs")
    n_steps = a.grid.horizon_steps
    for f in flows:
        if f.n_steps < n_steps:
            raise ModelError(f"flow covers {f.n_steps} steps, horizon needs {n_steps}")
    return n_steps


def _initial_pair(a: Scenario, b: Scenario):
    # equal seeds and a common tag make same-family samplers shift-coupled row by row
    return a.initial_cloud(tag=PAIR_TAG), b.initial_cloud(tag=PAIR_TAG)


def run_synchronous_pair(scenario_pair: Sequence[Scenario], flows: Sequence[MeasureFlow]) -> CouplingTrace:
    """Evolve two clouds against their own frozen flows with identical increments."""
    a, b = scenario_pair
    n_steps = _check_pair(a, b, flows)
    x, y = _initial_pair(a, b)
    noise = NoiseStream(a.seed, a.grid.h, tag=PAIR_TAG)
    rec = _Recorder(n_steps)
    rec(0, x, y)
    for k in range(n_steps):
        x = step_frozen(x, flows[0], a.model, noise, k)
        y = step_frozen(y, flows[1], a.model, noise, k)
        rec(k + 1, x, y)
    return rec.trace(x.n, final=(x, y))


def _shift(cloud: ParticleCloud, new: np.ndarray) -> ParticleCloud:
    values = np.concatenate([cloud.values[:, 1:], new[:, None, :]], axis=1)
    return ParticleCloud(values, cloud.grid, cloud.time + cloud.grid.h, cloud.ids)


def run_reflection_pair(scenario_pair: Sequence[Scenario], flows: Sequence[MeasureFlow], epsilon: float,
                        variant: str = "maximal") -> CouplingTrace:
    """Asymptotic reflection coupling of two clouds.

    The shared channel (weight ``pi_S``) reuses the ``W1`` stream, so when
    ``pi_R`` vanishes throughout the run is identical to the synchronous
    driver; the reflected channel (weight ``pi_R``) draws from ``W1_tilde``.
    ``W2`` is shared, each side scaled by its own ``sigma(state)``.

    ``variant="plain"`` reflects the ``pi_R`` increment across the current
    difference ``Z``.  ``variant="maximal"`` replaces it by the
    reflection-maximal coupling of the two one-step Gaussian proposals: with
    probability ``min(1, phi(xi + e)/phi(xi))`` the copies are glued,
    otherwise the increment is reflected across the proposal gap.  Both
    variants leave each marginal an exact Euler scheme; only the maximal one
    lets discrete pairs actually meet.
    """
    if variant not in ("plain", "maximal"):
        raise ValueError(f"unknown reflection variant {variant!r}")
    a, b = scenario_pair
    if a.model.mode != THEOREM3:
        raise ModelError("reflection coupling needs a theorem3 (state-sigma) model")
    prof = pi_functions(epsilon)
    n_steps = _check_pair(a, b, flows)
    model, h, beta = a.model, a.grid.h, a.model.beta
    x, y = _initial_pair(a, b)
    noise = NoiseStream(a.seed, h, tag=PAIR_TAG)
    rec = _Recorder(n_steps)
    rec(0, x, y)
    residual = 0.0
    coalesced = np.zeros(n_steps + 1)
    coalesced[0] = float(np.mean(np.all(x.endpoints == y.endpoints, axis=1)))
    ids = x.ids
    for k in range(n_steps):
        mx, my = flows[0].values(k), flows[1].values(k)
        ex, ey = x.endpoints, y.endpoints
        z = ex - ey
        r = np.linalg.norm(z, axis=1, keepdims=True)
        pr, ps = prof.pi_R(r), prof.pi_S(r)
        residual = max(residual, float(np.max(np.abs(pr * pr + ps * ps - 1.0))))
        dw_shared = noise.increments("W1", k, ids, model.dim)
        dw_r = noise.increments("W1_tilde", k, ids, model.dim)
        with np.errstate(over="ignore", invalid="ignore"):
            base_x = ex + model.drift(x.values, mx) * h + beta * ps * dw_shared
            base_y = ey + model.drift(y.values, my) * h + beta * ps * dw_shared
            if model.sigma.name != "none":
                dw2 = noise.increments("W2", k, ids, model.noise_dim)
                base_x = base_x + model.diffusion(x.values, mx, dw2)
                base_y = base_y + model.diffusion(y.values, my, dw2)
            glue = None
            if variant == "plain":
                dw_y = reflect(dw_r, z)
            else:
                dw_y, glue = _maximal_partner(base_x, base_y, beta * pr, dw_r, noise.increments("aux", k, ids, 1), h)
            new_x = base_x + beta * pr * dw_r
            new_y = base_y + beta * pr * dw_y
            if glue is not None:
                new_y[glue] = new_x[glue]
        for cloud, new in ((x, new_x), (y, new_y)):
            if not np.all(np.isfinite(new)):
                from .engine import BlowUpError
                bad = int(np.flatnonzero(~np.all(np.isfinite(new), axis=1))[0])
                raise BlowUpError(int(cloud.ids[bad]), k)
        x, y = _shift(x, new_x), _shift(y, new_y)
        coalesced[k + 1] = float(np.mean(np.all(x.endpoints == y.endpoints, axis=1)))
        rec(k + 1, x, y)
    return rec.trace(x.n, mixing_residual=residual, coalesced_fraction=coalesced, final=(x, y))


def _maximal_partner(base_x, base_y, scale, dw, aux, h):
    """Partner increment for the reflection-maximal coupling of ``base + scale * dW``.

    Returns the increment and the mask of glued rows.
    """
    sq = math.sqrt(h)
    active = scale[:, 0] > 0
    out = dw.copy()
    glued_rows = np.zeros(dw.shape[0], dtype=bool)
    if not np.any(active):
        return out, glued_rows
    s = scale[active]
    xi = dw[active] / sq
    e = (base_x[active] - base_y[active]) / (s * sq)
    # log of phi(xi + e) / phi(xi)
    log_ratio = -np.sum(e * xi, axis=1) - 0.5 * np.sum(e * e, axis=1)
    u = ndtr(aux[active, 0] / sq)
    glue = np.log(np.maximum(u, 1e-300)) <= log_ratio
    eta = np.where(glue[:, None], xi + e, reflect(xi, e))
    out[active] = eta * sq
    glued_rows[np.flatnonzero(active)[glue]] = True
    return out, glued_rows


# ---------------------------------------------------------------------------
# Girsanov coupling
# ---------------------------------------------------------------------------


def _tanh(x):
    return np.tanh(x).mean(axis=1)


def _gauss(x):
    return np.exp(-np.sum(x * x, axis=1))


def _halfspace(x):
    return ndtr(x[:, 0] / 0.25)


TEST_FUNCTIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "tanh": _tanh,
    "exp_neg_sq": _gauss,
    "smooth_halfspace": _halfspace,
}


def _mean_se(v: np.ndarray) -> dict:
    v = np.asarray(v, dtype=float)
    n = v.shape[0]
    # sorted pairwise summation keeps the aggregate independent of replica order
    mean = math.fsum(np.sort(v).tolist()) / n
    se = float(np.std(v, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return {"mean": mean, "se": se}


@dataclass
class GirsanovReport:
    endpoint_residual_max: float
    E_R: dict
    entropy_bound: dict
    q_side: dict
    entropy_gap: dict
    tests: list
    n_replicas: int
    t0: float
    weights: np.ndarray = field(repr=False, default=None)
    log_weights: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {
            "endpoint_residual_max": self.endpoint_residual_max,
            "E_R": self.E_R,
            "entropy_bound": self.entropy_bound,
            "q_side": self.q_side,
            "entropy_gap": self.entropy_gap,
            "tests": self.tests,
            "n_replicas": self.n_replicas,
            "t0": self.t0,
        }

    def checks(self, n_sigma: float = 3.0) -> dict:
        """Operational pass/fail form of the identities the construction guarantees."""
        out = {
            "endpoint_residual": self.endpoint_residual_max < 1e-10,
            "E_R": abs(self.E_R["mean"] - 1.0) < n_sigma * self.E_R["se"] or self.E_R["se"] == 0 and self.E_R["mean"] == 1.0,
            "entropy_nonnegative": self.entropy_bound["mean"] >= -1e-12,
            "entropy_q_side": abs(self.entropy_gap["mean"]) <= n_sigma * self.entropy_gap["se"],
        }
        for t in self.tests:
            comb = math.hypot(t["lhs_se"], t["rhs_se"])
            out[f"identity_{t['f']}"] = abs(t["lhs"] - t["rhs"]) <= n_sigma * comb
        return out


def run_girsanov_pair(mu0_scenario: Scenario, nu0_scenario: Scenario, flows: Sequence[MeasureFlow], t0: float,
                      test_functions: dict | None = None, n_replicas: int = 10_000,
                      pairing: str = "independent") -> tuple[CouplingTrace, GirsanovReport]:
    """Build ``X``, ``X~`` and the shifted process ``Y`` for ``n_replicas`` replicas.

    ``X`` runs against the flow ``mu``, ``X~`` against ``nu``, both with the
    same ``(W1, W2)`` streams.  ``Y`` is assembled from the closed-form
    difference ``Y - X``, so ``Y(t0) = X(t0)`` up to rounding.  The log
    weight is ``sum <phi_k, dW1_k> - 1/2 sum |phi_k|^2 h`` with ``phi``
    evaluated at the left point of every step.

    ``pairing="optimal"`` translates the ``X0`` draws when the optimal map
    between the initial laws is a known translation.
    """
    a, b = mu0_scenario, nu0_scenario
    model = a.model
    if model.mode != THEOREM2:
        raise ModelError("the Girsanov coupling needs a theorem2 (measure-only sigma) model")
    if model.beta == 0:
        raise ModelError("the Girsanov coupling needs beta != 0")
    if not a.grid.same_window(b.grid):
        raise ModelError("scenarios must share the time grid")
    grid = a.grid
    K = grid.steps_for(t0)
    if K < 1:
        raise ModelError("t0 must be at least one step")
    for f in flows:
        if f.n_steps < K:
            raise ModelError(f"flow covers {f.n_steps} steps, t0 needs {K}")
    tests = TEST_FUNCTIONS if test_functions is None else test_functions
    h, beta, d, mp1 = grid.h, model.beta, model.dim, grid.n_points
    n = int(n_replicas)

    x0 = a.initial_cloud(n, tag=GIRSANOV_TAG)
    if pairing == "optimal":
        shift = a.initial.shifted_by(b.initial)
        if shift is None:
            raise ModelError("optimal pairing needs point or equal-std Gaussian samplers")
        xt0 = ParticleCloud(x0.values + shift, grid)
    elif pairing == "independent":
        xt0 = b.initial_cloud(n, tag=GIRSANOV_TAG + 1)
    else:
        raise ValueError(f"unknown pairing {pairing!r}")

    noise = NoiseStream(a.seed, h, tag=GIRSANOV_TAG)
    ids = x0.ids
    flow_mu, flow_nu = flows

    def sigma_matrix(flow, k):
        s = model.sigma
        if s.measure_dependent:
            return s.matrix_measure(flow.values(k), d, model.noise_dim)
        if s.name == "constant_sigma":
            return s.value * np.eye(d)
        return np.zeros((d, model.noise_dim))

    # endpoint paths over [-r0, t0]
    xp = np.empty((n, mp1 + K, d))
    yp = np.empty((n, mp1 + K, d))
    tp = np.empty((n, mp1 + K, d))
    xp[:, :mp1], yp[:, :mp1], tp[:, :mp1] = x0.values, xt0.values, xt0.values

    sig_mu = [sigma_matrix(flow_mu, k) for k in range(K)]
    sig_nu = [sigma_matrix(flow_nu, k) for k in range(K)]
    dw1 = [noise.increments("W1", k, ids, d) for k in range(K)]
    dw2 = [noise.increments("W2", k, ids, model.noise_dim) for k in range(K)]
    xi_mu = np.zeros((K + 1, n, d))
    xi_nu = np.zeros((K + 1, n, d))
    for k in range(K):
        xi_mu[k + 1] = xi_mu[k] + dw2[k] @ sig_mu[k].T
        xi_nu[k + 1] = xi_nu[k] + dw2[k] @ sig_nu[k].T
    gap0 = xt0.endpoints - x0.endpoints
    drift_shift = (xi_mu[K] - xi_nu[K] - gap0) / t0

    log_r = np.zeros(n)
    phi_sq = np.zeros(n)
    for k in range(K):
        xs = xp[:, k:k + mp1]
        ts = tp[:, k:k + mp1]
        bx = model.drift(xs, flow_mu.values(k))
        xp[:, mp1 + k] = xs[:, -1] + bx * h + beta * dw1[k] + dw2[k] @ sig_mu[k].T
        tp[:, mp1 + k] = ts[:, -1] + model.drift(ts, flow_nu.values(k)) * h + beta * dw1[k] + dw2[k] @ sig_nu[k].T
        # Y - X from the closed-form identity, at the left point and the new point
        # the gap is summed before it touches X, so it vanishes exactly at t0
        gap = ((K - k - 1) / K) * gap0 + ((k + 1) / K) * (xi_mu[K] - xi_nu[K]) + (xi_nu[k + 1] - xi_mu[k + 1])
        yp[:, mp1 + k] = xp[:, mp1 + k] + gap
        by = model.drift(yp[:, k:k + mp1], flow_nu.values(k))
        phi = (by - bx) / beta - drift_shift / beta
        log_r += np.sum(phi * dw1[k], axis=1) - 0.5 * np.sum(phi * phi, axis=1) * h
        phi_sq += np.sum(phi * phi, axis=1) * h
    if not (np.all(np.isfinite(xp)) and np.all(np.isfinite(tp)) and np.all(np.isfinite(log_r))):
        raise FloatingPointError("non-finite values in the Girsanov coupling")

    x_end, y_end, t_end = xp[:, -1], yp[:, -1], tp[:, -1]
    residual = float(np.max(np.abs(y_end - x_end)))
    w = np.exp(log_r)
    rlogr = w * log_r
    q_side = w * 0.5 * phi_sq
    report_tests = []
    for name, fn in tests.items():
        fx, ft = fn(x_end), fn(t_end)
        lhs, rhs = _mean_se(w * fx), _mean_se(ft)
        report_tests.append({"f": name, "lhs": lhs["mean"], "lhs_se": lhs["se"], "rhs": rhs["mean"], "rhs_se": rhs["se"]})
    report = GirsanovReport(
        endpoint_residual_max=residual,
        E_R=_mean_se(w),
        entropy_bound=_mean_se(rlogr),
        q_side=_mean_se(q_side),
        entropy_gap=_mean_se(rlogr - q_side),
        tests=report_tests,
        n_replicas=n,
        t0=float(t0),
        weights=w,
        log_weights=log_r,
    )

    rec = _Recorder(K)
    for k in range(K + 1):
        xc = ParticleCloud(xp[:, k:k + mp1], grid, k * h)
        yc = ParticleCloud(yp[:, k:k + mp1], grid, k * h)
        rec(k, xc, yc)
    return rec.trace(n), report
