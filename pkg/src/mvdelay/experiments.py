"""Experiment orchestration behind the command-line interface.

Each ``cmd_*`` function takes a parsed :class:`ExperimentSpec` and returns an
:class:`ExperimentResult` holding a JSON summary, CSV tables and a pass flag.
Nothing here touches the file system; :func:`write_result` does.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import __version__
from .coupling import run_girsanov_pair, run_reflection_pair, run_synchronous_pair
from .engine import run_interacting, solve_mckean_vlasov_picard
from .metrics import PathNorm, fit_exponential_rate, path_norms
from .model import THEOREM2, THEOREM3, ModelError, Scenario, build_sampler
from .noise import NoiseStream
from .rates import check_theorem23_condition, ctk0_bound, paper_piecewise, theorem33_rates

__all__ = [
    "ExperimentSpec",
    "ExperimentResult",
    "load_spec",
    "spec_hash",
    "cmd_simulate",
    "cmd_contract",
    "cmd_chaos",
    "cmd_moments",
    "cmd_girsanov",
    "cmd_rates",
    "write_result",
    "COMMANDS",
]

log = logging.getLogger(__name__)

CHAOS_TAG = 17
KINDS = ("simulate", "contract_sync", "contract_reflect", "chaos", "moments", "girsanov", "rates")


@dataclass
class ExperimentSpec:
    """A scenario plus the experiment block of a config document."""

    kind: str
    scenario: Scenario
    params: dict
    raw: dict

    def get(self, key, default=None):
        return self.params.get(key, default)


def spec_hash(raw: dict) -> str:
    canon = json.dumps(raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def load_spec(raw: dict, kind: str | None = None, seed: int | None = None) -> ExperimentSpec:
    """Validate a config document; ``seed`` overrides the scenario seed."""
    raw = json.loads(json.dumps(raw))
    if "scenario" not in raw:
        raise ModelError("config needs a 'scenario' block")
    if seed is not None:
        raw["scenario"]["seed"] = int(seed)
    params = dict(raw.get("experiment", {}))
    kind = kind or params.get("kind")
    if kind not in KINDS:
        raise ModelError(f"unknown experiment kind {kind!r}; known: {list(KINDS)}")
    scenario = Scenario.from_dict(raw["scenario"])
    for key in ("n_reference", "n_replicas", "picard_max_iter"):
        if key in params and int(params[key]) < 1:
            raise ModelError(f"{key} must be positive")
    for key in ("epsilon", "t0", "picard_tol"):
        if key in params and not float(params[key]) > 0:
            raise ModelError(f"{key} must be positive")
    return ExperimentSpec(kind, scenario, params, raw)


@dataclass
class ExperimentResult:
    summary: dict
    tables: dict = field(default_factory=dict)
    passed: bool = True
    json_name: str = "summary.json"


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _solve_flow(spec: ExperimentSpec, scenario: Scenario):
    res = solve_mckean_vlasov_picard(
        scenario,
        n_reference=int(spec.get("n_reference", max(2, scenario.n_particles))),
        tol=float(spec.get("picard_tol", 1e-10)),
        max_iter=int(spec.get("picard_max_iter", 50)),
    )
    return res.flow, res.to_dict()


def _other(spec: ExperimentSpec) -> Scenario:
    other = spec.get("initial_other")
    if other is None:
        return spec.scenario
    return spec.scenario.replace(initial=build_sampler(other))


def _fit_window(times, values, se, burn_in, floor):
    keep = (times >= burn_in) & (values > np.maximum(floor, 3.0 * se)) & (values > 0)
    return np.flatnonzero(keep)


def _batch_mean_se(values: np.ndarray, n_batches: int = 25) -> tuple[float, float]:
    """Mean of a correlated series and its batch-means standard error."""
    n_batches = max(2, min(n_batches, values.shape[0] // 2))
    batches = np.array_split(values, n_batches)
    means = np.array([b.mean() for b in batches])
    return float(values.mean()), float(means.std(ddof=1) / math.sqrt(n_batches))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_simulate(spec: ExperimentSpec) -> ExperimentResult:
    sc = spec.scenario
    record_every = int(spec.get("record_every", 1))
    snap_every = spec.get("snapshot_every")
    run = run_interacting(sc, record_every=record_every, keep_snapshots=bool(snap_every))
    rows = [(r["step"], r["time"], r["second_gamma_moment"]) for r in run.trace]
    tables = {"trace.csv": (("step", "time", "second_gamma_moment"), rows)}
    summary = {"final_time": run.final.time, "final_second_gamma_moment": rows[-1][2],
               "n_particles": sc.n_particles}
    if snap_every:
        every = int(snap_every)
        snaps = [{"step": r["step"], "time": c.time, "segments": c.values.tolist()}
                 for r, c in zip(run.trace, run.snapshots) if r["step"] % every == 0]
        summary["snapshots"] = {"format": "mvdelay-segments", "format_version": 1, "items": snaps}
    return ExperimentResult(summary, tables, True)


def cmd_contract(spec: ExperimentSpec) -> ExperimentResult:
    """Coupled contraction run (synchronous or asymptotic reflection)."""
    a = spec.scenario
    b = _other(spec)
    grid, model = a.grid, a.model
    reflect_kind = spec.kind == "contract_reflect"
    k = model.constants
    if reflect_kind:
        rf = paper_piecewise(k.K1, k.K2, k.R, k.Ksigma, model.beta)
        rep = theorem33_rates(rf, k.Kb, grid.r0)
        lam_th, c_th = rep.lam, rep.c
        condition = rep.conditions["kb_kd1"]
        theory = rep.to_dict()
        metric, metric_se_key, norm_label = "gamma", "gamma_se", "W1_gamma"
    else:
        chk = check_theorem23_condition(k.K1, k.K2, k.K3, grid.r0)
        # the squared-distance envelope has rate -exponent; distances decay at half of it
        lam_th, c_th = -chk.exponent / 2.0, math.sqrt(chk.prefactor)
        condition = chk.holds
        theory = chk.to_dict()
        metric, metric_se_key, norm_label = "sup", "sup_se", "W2_sup"
    if not condition:
        log.warning("scenario does not satisfy the contraction hypothesis; run is flagged")

    flow_a, diag_a = _solve_flow(spec, a)
    flow_b, diag_b = _solve_flow(spec, b) if b is not a else (flow_a, diag_a)
    if reflect_kind:
        eps = float(spec.get("epsilon", 1e-3))
        trace = run_reflection_pair((a, b), (flow_a, flow_b), eps, variant=spec.get("reflection_variant", "maximal"))
    else:
        eps = 0.0
        trace = run_synchronous_pair((a, b), (flow_a, flow_b))

    times = trace.times
    values = getattr(trace, metric)
    se = getattr(trace, metric_se_key)
    d0 = values[0]
    envelope = c_th * np.exp(-lam_th * times) * d0
    violations = int(np.sum(values > envelope + 3.0 * se + 1e-12 * max(1.0, d0)))

    endpoint_w1 = float(trace.marginal_w1[-1]) if model.dim == 1 else None

    burn_in = float(spec.get("burn_in", grid.r0))
    floor = float(spec.get("noise_floor", eps))
    idx = _fit_window(times, values, se, burn_in, floor)
    fit = None
    if idx.size >= 3:
        fit = fit_exponential_rate(np.column_stack([times[idx], values[idx]]))
    after = times > burn_in
    monotone = bool(np.all(np.diff(values[after]) < 0)) if np.any(after) and d0 > 0 else False

    rows = []
    for i in range(len(times)):
        rows.append((i, times[i], trace.endpoint[i], trace.gamma[i], trace.gamma_se[i], trace.sup[i],
                     trace.sup_se[i], trace.marginal_w1[i] if model.dim == 1 else None, envelope[i]))
    header = ("step", "time", "endpoint_mean", "coupled_gamma_w1", "coupled_gamma_w1_se",
              "coupled_sup_w2", "coupled_sup_w2_se", "endpoint_marginal_w1", "envelope")
    summary = {
        "kind": spec.kind,
        "metric": norm_label,
        "initial_distance": d0,
        "final_distance": float(values[-1]),
        "fitted_rate": fit.rate if fit else None,
        "fit_r_squared": fit.r_squared if fit else None,
        "fit_points": fit.n_points if fit else 0,
        "fit_status": "ok" if fit else "undefined",
        "theoretical_rate": lam_th,
        "theoretical_c": c_th,
        "hypothesis_holds": bool(condition),
        "theory": theory,
        "bound_violations": violations,
        "monotone_after_burn_in": monotone,
        "burn_in": burn_in,
        "noise_floor": floor,
        "endpoint_marginal_w1_final": endpoint_w1,
        "n_pairs": trace.n_pairs,
        "picard": {"mu": diag_a, "nu": diag_b},
    }
    if reflect_kind:
        summary["epsilon"] = eps
        summary["mixing_residual_max"] = trace.mixing_residual
        summary["reflection_variant"] = spec.get("reflection_variant", "maximal")
        summary["coalesced_fraction_final"] = float(trace.coalesced_fraction[-1])
    passed = violations == 0
    return ExperimentResult(summary, {"contract.csv": (header, rows)}, passed)


def _run_chaos_size(spec, scenario, flow, n, replicas, window_start):
    """Interacting system vs limit particles with shared noise; returns per-replica time averages."""
    model, grid = scenario.model, scenario.grid
    K = grid.horizon_steps
    init = scenario.initial_cloud(replicas * n, tag=CHAOS_TAG + n)
    noise = NoiseStream(scenario.seed, grid.h, tag=CHAOS_TAG + n)
    ids = init.ids
    h, beta = grid.h, model.beta
    sys_v = np.array(init.values)
    lim_v = np.array(init.values)
    mp1, d = grid.n_points, model.dim
    acc = np.zeros(replicas)
    count = 0
    for k in range(K):
        dw1 = noise.increments("W1", k, ids, d)
        dw2 = noise.increments("W2", k, ids, model.noise_dim) if model.sigma.name != "none" else None
        # interacting drift: every replica sees only its own N particles
        blocks = sys_v.reshape(replicas, n, mp1, d)
        inter = model.kernel.mean_field_blocks(blocks).reshape(replicas * n, d)
        drift_sys = model.b0(sys_v[:, -1, :]) + inter
        new_sys = sys_v[:, -1, :] + drift_sys * h + beta * dw1
        measure = flow.values(k)
        new_lim = lim_v[:, -1, :] + model.drift(lim_v, measure) * h + beta * dw1
        if dw2 is not None:
            if model.sigma.measure_dependent:
                new_sys = new_sys + np.concatenate([model.diffusion(blk, blk, w) for blk, w in
                                                    zip(blocks, dw2.reshape(replicas, n, -1))])
            else:
                new_sys = new_sys + model.diffusion(sys_v, sys_v, dw2)
            new_lim = new_lim + model.diffusion(lim_v, measure, dw2)
        if not (np.all(np.isfinite(new_sys)) and np.all(np.isfinite(new_lim))):
            raise FloatingPointError(f"non-finite state at step {k} in chaos run with N={n}")
        sys_v = np.concatenate([sys_v[:, 1:], new_sys[:, None]], axis=1)
        lim_v = np.concatenate([lim_v[:, 1:], new_lim[:, None]], axis=1)
        if k + 1 >= window_start:
            cost = path_norms(sys_v - lim_v, PathNorm.GAMMA).reshape(replicas, n).mean(axis=1)
            acc += cost
            count += 1
    return acc / count


def cmd_chaos(spec: ExperimentSpec) -> ExperimentResult:
    """Propagation of chaos: coupled distance between N-particle and limit systems versus N."""
    sc = spec.scenario
    sizes = [int(n) for n in spec.get("N", [16, 64, 256, 1024])]
    if len(sizes) < 3:
        raise ModelError("chaos needs at least three particle counts")
    budget = int(spec.get("particle_budget", 16384))
    min_rep = int(spec.get("min_replicas", 8))
    flow, diag = _solve_flow(spec, sc)
    K = sc.grid.horizon_steps
    window_start = int(math.ceil(K / 2))
    rows = []
    for n in sizes:
        reps = max(min_rep, budget // n)
        per_rep = _run_chaos_size(spec, sc, flow, n, reps, window_start)
        mean = float(per_rep.mean())
        se = float(per_rep.std(ddof=1) / math.sqrt(reps)) if reps > 1 else 0.0
        rows.append((n, reps, mean, se))
        log.info("chaos N=%d replicas=%d distance=%.4e se=%.2e", n, reps, mean, se)
    dist = np.array([r[2] for r in rows])
    ns = np.array([r[0] for r in rows], dtype=float)
    slope = slope_se = r2 = intercept = None
    if np.all(dist > 0):
        x, y = np.log(ns), np.log(dist)
        xc = x - x.mean()
        slope = float(np.dot(xc, y - y.mean()) / np.dot(xc, xc))
        intercept = float(y.mean() - slope * x.mean())
        resid = y - intercept - slope * x
        ss_tot = float(np.dot(y - y.mean(), y - y.mean()))
        r2 = 1.0 - float(np.dot(resid, resid)) / ss_tot if ss_tot > 0 else 1.0
        dof = len(x) - 2
        slope_se = float(math.sqrt(np.dot(resid, resid) / dof / np.dot(xc, xc))) if dof > 0 else None
    lo, hi = spec.get("slope_band", [-0.7, -0.3])
    passed = slope is not None and lo <= slope <= hi and r2 > float(spec.get("min_r_squared", 0.9))
    if np.all(dist == 0):
        passed = True
    summary = {"slope": slope, "slope_se": slope_se, "r_squared": r2, "log_intercept": intercept,
               "slope_band": [lo, hi], "n_reference": flow.size, "time_window": [K / 2 * sc.grid.h, sc.grid.horizon],
               "picard": diag, "distances": {str(r[0]): {"mean": r[2], "se": r[3], "replicas": r[1]} for r in rows}}
    return ExperimentResult(summary, {"chaos.csv": (("N", "replicas", "coupled_gamma_w1", "se"), rows)}, passed)


def cmd_moments(spec: ExperimentSpec) -> ExperimentResult:
    """Long-horizon second Gamma moment trace."""
    sc = spec.scenario
    k = sc.model.constants
    run = run_interacting(sc, record_every=int(spec.get("record_every", 1)))
    t = np.array([r["time"] for r in run.trace])
    v = np.array([r["second_gamma_moment"] for r in run.trace])
    T = sc.grid.horizon
    half = t >= T / 2 - 1e-12
    v_half = float(v[np.argmax(half)])
    window = v[half]
    growth = float((window.max() - v_half) / v_half) if v_half > 0 else 0.0
    plateau, plateau_se = _batch_mean_se(window)
    ctk0 = None
    if sc.model.mode == THEOREM3:
        ctk0 = k.Kb < ctk0_bound(k.K2, k.Ksigma, sc.grid.r0)
    max_growth = float(spec.get("max_relative_growth", 0.2))
    passed = growth < max_growth
    summary = {"max_moment": float(v.max()), "moment_at_half": v_half, "relative_growth": growth,
               "plateau": plateau, "plateau_se": plateau_se, "CTK0": ctk0,
               "initial_moment": float(v[0]), "max_relative_growth": max_growth}
    target = spec.get("stationary_moment")
    if target is not None:
        ok = abs(plateau - float(target)) < 3.0 * plateau_se
        summary["stationary_moment"] = float(target)
        summary["stationary_check"] = bool(ok)
        passed = passed and ok
    rows = [(r["step"], r["time"], r["second_gamma_moment"]) for r in run.trace]
    return ExperimentResult(summary, {"moments.csv": (("step", "time", "second_gamma_moment"), rows)}, passed)


def cmd_girsanov(spec: ExperimentSpec) -> ExperimentResult:
    a = spec.scenario
    b = _other(spec)
    if a.model.mode != THEOREM2:
        raise ModelError("girsanov experiments need a theorem2 scenario")
    flow_a, diag_a = _solve_flow(spec, a)
    flow_b, diag_b = _solve_flow(spec, b) if b is not a else (flow_a, diag_a)
    t0 = float(spec.get("t0", 1.0))
    trace, report = run_girsanov_pair(a, b, (flow_a, flow_b), t0, n_replicas=int(spec.get("n_replicas", 10_000)),
                                      pairing=spec.get("pairing", "independent"))
    checks = report.checks()
    summary = report.to_dict()
    summary["checks"] = checks
    summary["picard"] = {"mu": diag_a, "nu": diag_b}
    rows = [(i, trace.times[i], trace.endpoint[i], trace.sup[i]) for i in range(len(trace.times))]
    return ExperimentResult(summary, {"girsanov_paths.csv": (("step", "time", "endpoint_gap_mean", "sup_gap_w2"), rows)},
                            all(checks.values()), json_name="girsanov.json")


def cmd_rates(spec: ExperimentSpec) -> ExperimentResult:
    sc = spec.scenario
    k = sc.model.constants
    rf = paper_piecewise(k.K1, k.K2, k.R, k.Ksigma, sc.model.beta)
    rep = theorem33_rates(rf, k.Kb, sc.grid.r0, K3=k.K3)
    default = ["dic"] if sc.model.mode == THEOREM2 else ["kb_kd1", "kb_kd", "CTK0"]
    require = list(spec.get("require", default))
    unknown = [c for c in require if c not in rep.conditions]
    if unknown:
        raise ModelError(f"unknown conditions {unknown}")
    summary = rep.to_dict()
    summary["theorem23"] = check_theorem23_condition(k.K1, k.K2, k.K3, sc.grid.r0).to_dict()
    summary["required"] = require
    passed = all(bool(rep.conditions[c]) for c in require)
    return ExperimentResult(summary, {}, passed, json_name="rates.json")


COMMANDS = {
    "simulate": cmd_simulate,
    "contract": cmd_contract,
    "contract_sync": cmd_contract,
    "contract_reflect": cmd_contract,
    "chaos": cmd_chaos,
    "moments": cmd_moments,
    "girsanov": cmd_girsanov,
    "rates": cmd_rates,
}


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if x is None:
        return ""
    return "%.16e" % float(x)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj


def write_result(result: ExperimentResult, out_dir: str, spec: ExperimentSpec) -> list[str]:
    """Write CSV tables and the JSON summary; every file carries the config hash and version."""
    os.makedirs(out_dir, exist_ok=True)
    h = spec_hash(spec.raw)
    written = []
    for name, (header, rows) in sorted(result.tables.items()):
        path = os.path.join(out_dir, name)
        with open(path, "w", newline="\n") as fh:
            fh.write(f"# mvdelay {__version__} spec_sha256={h}\n")
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(_fmt(x) for x in row) + "\n")
        written.append(path)
    doc = {"version": __version__, "spec_sha256": h, "kind": spec.kind, "passed": bool(result.passed),
           "result": _jsonable(result.summary)}
    path = os.path.join(out_dir, result.json_name)
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")
    written.append(path)
    return written
