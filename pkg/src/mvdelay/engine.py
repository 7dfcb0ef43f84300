"""Explicit Euler-Maruyama dynamics on segment space.

Three drivers share one update rule:

* the interacting particle system, whose measure argument is the cloud's own
  pre-step empirical measure;
* frozen-flow dynamics, whose measure argument is read from a given flow;
* the Picard iteration on measure flows, which repeatedly applies the
  frozen-flow solution map with fixed noise.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .metrics import PathNorm, coupled_pair_cost, empirical_wasserstein, second_gamma_moment, ASSIGNMENT_CEILING
from .model import CoefficientModel, ModelError, ParticleCloud, Scenario, TimeGrid
from .noise import NoiseStream

__all__ = [
    "BlowUpError",
    "ConvergenceError",
    "MeasureFlow",
    "PicardResult",
    "RunResult",
    "euler_endpoint",
    "step_interacting",
    "step_frozen",
    "simulate_frozen",
    "solve_mckean_vlasov_picard",
    "run_interacting",
]

log = logging.getLogger(__name__)

REFERENCE_TAG = 7


class BlowUpError(FloatingPointError):
    def __init__(self, particle: int, step: int):
        super().__init__(f"non-finite state for particle {particle} at step {step}")
        self.particle = particle
        self.step = step


class ConvergenceError(RuntimeError):
    def __init__(self, trace: list[float], tol: float):
        super().__init__(f"Picard iteration did not reach tol={tol}; distance trace {trace}")
        self.trace = trace
        self.tol = tol


@dataclass(frozen=True)
class MeasureFlow:
    """Empirical measure flow: one cloud of segments per retained step."""

    snapshots: tuple
    grid: TimeGrid

    def __post_init__(self):
        snaps = tuple(self.snapshots)
        if not snaps:
            raise ModelError("a measure flow needs at least one snapshot")
        shape = snaps[0].shape
        for s in snaps:
            if s.ndim != 3 or s.shape[1:] != shape[1:] or s.shape[1] != self.grid.n_points:
                raise ModelError("inconsistent snapshot shapes in measure flow")
            s.setflags(write=False) if s.flags.writeable else None
        object.__setattr__(self, "snapshots", snaps)

    @property
    def n_steps(self) -> int:
        return len(self.snapshots) - 1

    @property
    def size(self) -> int:
        return self.snapshots[0].shape[0]

    def values(self, k: int) -> np.ndarray:
        if not 0 <= k < len(self.snapshots):
            raise KeyError(f"flow has no snapshot at step {k}")
        return self.snapshots[k]

    def snapshot(self, k: int) -> ParticleCloud:
        return ParticleCloud(self.values(k), self.grid, k * self.grid.h)

    @classmethod
    def constant(cls, cloud: ParticleCloud, n_steps: int) -> "MeasureFlow":
        v = np.array(cloud.values)
        v.setflags(write=False)
        return cls((v,) * (n_steps + 1), cloud.grid)

    @classmethod
    def from_paths(cls, paths: np.ndarray, grid: TimeGrid) -> "MeasureFlow":
        """Windows of a path array ``(M, m+1+K, d)``; snapshots are views."""
        paths = np.asarray(paths)
        paths.setflags(write=False)
        mp1 = grid.n_points
        k = paths.shape[1] - mp1
        return cls(tuple(paths[:, j:j + mp1] for j in range(k + 1)), grid)

    @classmethod
    def from_clouds(cls, clouds: Sequence[ParticleCloud]) -> "MeasureFlow":
        return cls(tuple(c.values for c in clouds), clouds[0].grid)


def euler_endpoint(x, drift, h, beta, dw1, diffusion=None):
    """The single explicit update used by every driver."""
    new = x + drift * h + beta * dw1
    if diffusion is not None:
        new = new + diffusion
    return new


def _diffusion(model: CoefficientModel, values, measure, noise: NoiseStream, k, ids):
    if model.sigma.name == "none":
        return None
    dw2 = noise.increments("W2", k, ids, model.noise_dim)
    return model.diffusion(values, measure, dw2)


def _shifted(cloud: ParticleCloud, new: np.ndarray, step_index: int) -> ParticleCloud:
    if not np.all(np.isfinite(new)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(new), axis=1))[0])
        raise BlowUpError(int(cloud.ids[bad]), step_index)
    values = np.concatenate([cloud.values[:, 1:], new[:, None, :]], axis=1)
    return ParticleCloud(values, cloud.grid, cloud.time + cloud.grid.h, cloud.ids)


def _step(cloud, measure, model, noise, k):
    with np.errstate(over="ignore", invalid="ignore"):
        drift = model.drift(cloud.values, measure)
        dw1 = noise.increments("W1", k, cloud.ids, model.dim)
        diff = _diffusion(model, cloud.values, measure, noise, k, cloud.ids)
        new = euler_endpoint(cloud.endpoints, drift, cloud.grid.h, model.beta, dw1, diff)
    return _shifted(cloud, new, k)


def step_interacting(cloud: ParticleCloud, model: CoefficientModel, noise: NoiseStream,
                     step_index: int) -> ParticleCloud:
    """One step of the N-particle system against its own pre-step empirical measure."""
    return _step(cloud, cloud.values, model, noise, step_index)


def step_frozen(cloud: ParticleCloud, flow: MeasureFlow, model: CoefficientModel,
                noise: NoiseStream, step_index: int) -> ParticleCloud:
    """One step with the measure argument read from ``flow`` at ``step_index``."""
    return _step(cloud, flow.values(step_index), model, noise, step_index)


def simulate_frozen(cloud: ParticleCloud, flow: MeasureFlow, model: CoefficientModel,
                    noise: NoiseStream, n_steps: int | None = None) -> np.ndarray:
    """Run frozen-flow dynamics and return the endpoint path array ``(N, m+1+K, d)``."""
    n_steps = flow.n_steps if n_steps is None else n_steps
    mp1 = cloud.grid.n_points
    paths = np.empty((cloud.n, mp1 + n_steps, cloud.dim))
    paths[:, :mp1] = cloud.values
    for k in range(n_steps):
        cloud = step_frozen(cloud, flow, model, noise, k)
        paths[:, mp1 + k] = cloud.endpoints
    return paths


def flow_distance(a: MeasureFlow, b: MeasureFlow, method: str = "coupled") -> float:
    """Sup over steps of the W2 (sup-norm) distance between two flows.

    ``coupled`` pairs snapshot rows by index, an upper bound on the exact
    distance (valid whenever both flows come from the same reference
    particles); ``assignment`` solves every step exactly.
    """
    worst = 0.0
    for k in range(min(a.n_steps, b.n_steps) + 1):
        va, vb = a.values(k), b.values(k)
        if method == "coupled":
            d = coupled_pair_cost((va, vb), 2, PathNorm.SUP)
        elif method == "assignment":
            if va.shape[0] > ASSIGNMENT_CEILING:
                raise ValueError(f"exact assignment above {ASSIGNMENT_CEILING} particles is not supported")
            d = empirical_wasserstein(ParticleCloud(va, a.grid), ParticleCloud(vb, b.grid), 2, PathNorm.SUP).value
        else:
            raise ValueError(f"unknown flow distance method {method!r}")
        worst = max(worst, d)
    return worst


@dataclass
class PicardResult:
    flow: MeasureFlow
    trace: list[float]
    initial_distance: float
    converged: bool
    iterations: int

    def to_dict(self) -> dict:
        return {"trace": self.trace, "initial_distance": self.initial_distance,
                "converged": self.converged, "iterations": self.iterations,
                "n_reference": self.flow.size, "n_steps": self.flow.n_steps}


def solve_mckean_vlasov_picard(scenario: Scenario, n_reference: int, tol: float = 1e-10,
                               max_iter: int = 50, n_steps: int | None = None,
                               distance: str = "coupled", noise_tag: int = REFERENCE_TAG,
                               initial_tag: int = REFERENCE_TAG, raise_on_failure: bool = True) -> PicardResult:
    """Fixed-point iteration ``mu <- law of the frozen-flow solution driven by mu``.

    Starts from the flow that stays at the initial reference cloud for all
    time.  The same noise streams are reused in every iteration, so the map
    is deterministic on empirical flows.  ``trace[k-1]`` is the distance
    between iterates ``k`` and ``k+1``; the iteration stops once it drops
    below ``tol``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if n_reference < 2:
        raise ValueError("n_reference must be at least 2")
    grid = scenario.grid
    n_steps = grid.horizon_steps if n_steps is None else n_steps
    model = scenario.model
    init = scenario.initial_cloud(n_reference, tag=initial_tag)
    noise = NoiseStream(scenario.seed, grid.h, tag=noise_tag, cache=True)

    flow = MeasureFlow.constant(init, n_steps)
    flow = MeasureFlow.from_paths(simulate_frozen(init, flow, model, noise, n_steps), grid)
    initial_distance = flow_distance(MeasureFlow.constant(init, n_steps), flow, distance)
    trace: list[float] = []
    for it in range(1, max_iter + 1):
        nxt = MeasureFlow.from_paths(simulate_frozen(init, flow, model, noise, n_steps), grid)
        d = flow_distance(flow, nxt, distance)
        trace.append(d)
        flow = nxt
        log.debug("picard iteration %d: distance %.3e", it, d)
        if d <= tol:
            return PicardResult(flow, trace, initial_distance, True, it)
    if raise_on_failure:
        raise ConvergenceError(trace, tol)
    return PicardResult(flow, trace, initial_distance, False, max_iter)


@dataclass
class RunResult:
    final: ParticleCloud
    trace: list[dict] = field(default_factory=list)
    snapshots: list[ParticleCloud] = field(default_factory=list)


def run_interacting(scenario: Scenario, record_every: int = 1, keep_snapshots: bool = False,
                    cloud: ParticleCloud | None = None, noise: NoiseStream | None = None,
                    n_steps: int | None = None) -> RunResult:
    """Advance the particle system over the horizon, recording the second Gamma moment."""
    n_steps = scenario.grid.horizon_steps if n_steps is None else n_steps
    if n_steps < 1:
        raise ValueError("horizon_steps must be >= 1")
    if record_every < 1:
        raise ValueError("record_every must be >= 1")
    cloud = scenario.initial_cloud() if cloud is None else cloud
    noise = NoiseStream(scenario.seed, scenario.grid.h) if noise is None else noise
    result = RunResult(cloud)

    def record(k, c):
        result.trace.append({"step": k, "time": c.time, "second_gamma_moment": second_gamma_moment(c)})
        if keep_snapshots:
            result.snapshots.append(c)

    record(0, cloud)
    for k in range(n_steps):
        cloud = step_interacting(cloud, scenario.model, noise, k)
        if (k + 1) % record_every == 0 or k + 1 == n_steps:
            record(k + 1, cloud)
    result.final = cloud
    return result
