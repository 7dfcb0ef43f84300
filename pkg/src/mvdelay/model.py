"""Core domain types for path-dependent mean-field dynamics.

A segment is the discretized path history of one particle over the delay
window ``[-r0, 0]``; index ``m`` is the current value.  A particle cloud is a
stack of segments sharing one grid, and doubles as the uniform empirical
measure on segment space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

__all__ = [
    "TimeGrid",
    "Segment",
    "ParticleCloud",
    "Constants",
    "CoefficientModel",
    "Sampler",
    "Scenario",
    "ModelError",
    "segment_shift",
    "constant_segment",
    "trapezoid_mean",
    "gamma_average",
    "build_model",
    "build_sampler",
    "THEOREM2",
    "THEOREM3",
]

THEOREM2 = "theorem2"
THEOREM3 = "theorem3"

_INITIAL_TAG = 0x1A17


class ModelError(ValueError):
    """Invalid model, grid, segment or scenario description."""


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time grid; the delay ``r0 = delay_steps * h`` is exact."""

    h: float
    delay_steps: int = 0
    horizon_steps: int = 0

    def __post_init__(self):
        if not (self.h > 0 and math.isfinite(self.h)):
            raise ModelError(f"step h must be positive, got {self.h}")
        if int(self.delay_steps) != self.delay_steps or self.delay_steps < 0:
            raise ModelError(f"delay_steps must be a nonnegative integer, got {self.delay_steps}")
        if int(self.horizon_steps) != self.horizon_steps or self.horizon_steps < 0:
            raise ModelError(f"horizon_steps must be a nonnegative integer, got {self.horizon_steps}")
        object.__setattr__(self, "delay_steps", int(self.delay_steps))
        object.__setattr__(self, "horizon_steps", int(self.horizon_steps))

    @property
    def m(self) -> int:
        return self.delay_steps

    @property
    def r0(self) -> float:
        return self.delay_steps * self.h

    @property
    def n_points(self) -> int:
        return self.delay_steps + 1

    @property
    def horizon(self) -> float:
        return self.horizon_steps * self.h

    def same_window(self, other: "TimeGrid") -> bool:
        """Same step and delay (horizons may differ)."""
        return self.h == other.h and self.delay_steps == other.delay_steps

    def offsets(self) -> np.ndarray:
        """Times ``-r0 + j h`` of the segment points."""
        return (np.arange(self.n_points) - self.delay_steps) * self.h

    def steps_for(self, t: float) -> int:
        """Number of steps covering time ``t``; raises if ``t`` is off-grid."""
        k = round(t / self.h)
        if abs(k * self.h - t) > 1e-9 * max(1.0, abs(t)):
            raise ModelError(f"time {t} is not on the grid with h={self.h}")
        return int(k)

    def to_dict(self) -> dict:
        return {"h": self.h, "delay_steps": self.delay_steps, "horizon_steps": self.horizon_steps}

    @classmethod
    def from_dict(cls, d: dict) -> "TimeGrid":
        return cls(h=float(d["h"]), delay_steps=int(d.get("delay_steps", 0)),
                   horizon_steps=int(d.get("horizon_steps", 0)))


def trapezoid_mean(values: np.ndarray) -> np.ndarray:
    """Trapezoidal average over the delay window along axis -2.

    ``values`` has shape ``(..., m+1, d)`` (or ``(..., m+1)`` for scalars when
    called on norms).  For ``m = 0`` the window degenerates to the endpoint.
    """
    m = values.shape[-2] - 1
    if m == 0:
        return values[..., 0, :]
    inner = values[..., 1:-1, :].sum(axis=-2)
    return (inner + 0.5 * (values[..., 0, :] + values[..., -1, :])) / m


def gamma_average(values: np.ndarray) -> np.ndarray:
    """Vector average of a segment against the Gamma measure (half endpoint, half window)."""
    if values.shape[-2] == 1:
        return values[..., 0, :]
    return 0.5 * values[..., -1, :] + 0.5 * trapezoid_mean(values)


@dataclass(frozen=True)
class Segment:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] < 1:
            raise ModelError(f"segment must have shape (m+1, d), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ModelError("segment contains non-finite values")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def m(self) -> int:
        return self.values.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def endpoint(self) -> np.ndarray:
        return self.values[-1]

    def __eq__(self, other):
        return isinstance(other, Segment) and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash(self.values.tobytes())


def segment_shift(seg: Segment, new_point) -> Segment:
    """Advance a segment by one grid step, appending ``new_point`` as the new endpoint."""
    p = np.atleast_1d(np.asarray(new_point, dtype=float))
    if p.shape != (seg.dim,):
        raise ModelError(f"new point has shape {p.shape}, segment dimension is {seg.dim}")
    if not np.all(np.isfinite(p)):
        raise ModelError("new point is not finite")
    return Segment(np.concatenate([seg.values[1:], p[None, :]], axis=0))


def constant_segment(x, grid: TimeGrid) -> Segment:
    p = np.atleast_1d(np.asarray(x, dtype=float))
    if not np.all(np.isfinite(p)):
        raise ModelError("constant segment value is not finite")
    return Segment(np.broadcast_to(p, (grid.n_points, p.shape[0])))


@dataclass(frozen=True)
class ParticleCloud:
    """``N`` segments on one grid plus the clock.

    ``values`` has shape ``(N, m+1, d)``.  ``ids`` are the noise-stream
    identifiers of the particles; relabelling particles together with their
    ids leaves every simulation result permuted in the same way.
    """

    values: np.ndarray
    grid: TimeGrid
    time: float = 0.0
    ids: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 3:
            raise ModelError(f"cloud values must have shape (N, m+1, d), got {v.shape}")
        if v.shape[0] < 1:
            raise ModelError("cloud needs at least one particle")
        if v.shape[1] != self.grid.n_points:
            raise ModelError(f"segments have {v.shape[1]} points, grid expects {self.grid.n_points}")
        if not np.all(np.isfinite(v)):
            raise ModelError("cloud contains non-finite values")
        # read-only input is already frozen (e.g. a window into a measure flow)
        arr = v if not v.flags.writeable else _frozen(v)
        object.__setattr__(self, "values", arr)
        ids = np.arange(v.shape[0]) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        if ids.shape != (v.shape[0],):
            raise ModelError("ids must have one entry per particle")
        if np.any(ids < 0):
            raise ModelError("stream ids must be nonnegative")
        ids = ids.copy()
        ids.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "time", float(self.time))

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    @property
    def endpoints(self) -> np.ndarray:
        return self.values[:, -1, :]

    def segment(self, i: int) -> Segment:
        return Segment(self.values[i])

    def permuted(self, perm) -> "ParticleCloud":
        perm = np.asarray(perm)
        return ParticleCloud(self.values[perm], self.grid, self.time, self.ids[perm])

    def with_time(self, t: float) -> "ParticleCloud":
        return ParticleCloud(self.values, self.grid, t, self.ids)

    @classmethod
    def from_segments(cls, segments, grid: TimeGrid, time: float = 0.0) -> "ParticleCloud":
        return cls(np.stack([s.values for s in segments]), grid, time)


# ---------------------------------------------------------------------------
# coefficient building blocks
# ---------------------------------------------------------------------------


class Drift:
    """Endpoint drift ``b0: R^d -> R^d``, vectorized over rows."""

    name = "zero"

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.zeros_like(x)


class LinearDrift(Drift):
    name = "ou"

    def __init__(self, a: float = 1.0):
        self.a = float(a)

    def __call__(self, x):
        return -self.a * x


class DoubleWellDrift(Drift):
    """``b0(x) = -4|x|^2 x + 2x``, the gradient of ``-|x|^4 + |x|^2``."""

    name = "double_well"

    def __call__(self, x):
        r2 = np.sum(x * x, axis=-1, keepdims=True)
        return -4.0 * r2 * x + 2.0 * x


class CallableDrift(Drift):
    name = "custom"

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray]):
        self.fn = fn

    def __call__(self, x):
        return np.asarray(self.fn(x), dtype=float)


class Kernel:
    """Pairwise interaction ``b~(xi, eta)``.

    ``pair`` works on broadcastable stacks of segments ``(..., m+1, d)``.
    ``mean_field`` averages the kernel of every row of ``values`` against all
    segments of ``measure`` (full pairwise sum, evaluated in row chunks).
    """

    name = "none"
    flow_free = True
    chunk_elements = 1 << 21

    def pair(self, xi: np.ndarray, eta: np.ndarray) -> np.ndarray:
        shape = np.broadcast_shapes(xi.shape, eta.shape)
        return np.zeros(shape[:-2] + shape[-1:])

    def mean_field(self, values: np.ndarray, measure: np.ndarray) -> np.ndarray:
        n, m = values.shape[0], measure.shape[0]
        out = np.empty((n, values.shape[-1]))
        rows = max(1, self.chunk_elements // max(1, m * values.shape[1]))
        for start in range(0, n, rows):
            block = values[start:start + rows, None]
            out[start:start + rows] = self.pair(block, measure[None]).mean(axis=1)
        return out

    def mean_field_blocks(self, blocks: np.ndarray) -> np.ndarray:
        """Mean-field drift of independent systems ``(B, N, m+1, d)``, each against itself."""
        return np.stack([self.mean_field(b, b) for b in blocks])


class ZeroKernel(Kernel):
    def mean_field(self, values, measure):
        return np.zeros((values.shape[0], values.shape[-1]))

    def mean_field_blocks(self, blocks):
        return np.zeros(blocks.shape[:2] + blocks.shape[-1:])


class ConstantKernel(Kernel):
    name = "constant_kernel"

    def __init__(self, value=0.0):
        self.value = np.atleast_1d(np.asarray(value, dtype=float))

    def pair(self, xi, eta):
        shape = np.broadcast_shapes(xi.shape, eta.shape)
        return np.broadcast_to(self.value, shape[:-2] + shape[-1:]).copy()

    def mean_field(self, values, measure):
        return np.broadcast_to(self.value, (values.shape[0], values.shape[-1])).copy()


class LinearKernel(Kernel):
    """``b~(xi, eta) = kappa * (A(eta) - xi(0))``.

    ``A(eta) = (1 - w) eta(0) + w * gamma_average(eta)`` with ``w`` the delay
    weight; ``w = 0`` gives the endpoint form ``kappa (eta(0) - xi(0))``.
    Its Lipschitz constant in the Gamma norm is ``Kb = 2 kappa``.
    """

    name = "linear_kernel"
    flow_free = False

    def __init__(self, kappa: float = 0.1, delay_weight: float = 0.0):
        self.kappa = float(kappa)
        self.delay_weight = float(delay_weight)

    def _anchor(self, eta):
        if self.delay_weight == 0.0:
            return eta[..., -1, :]
        return (1 - self.delay_weight) * eta[..., -1, :] + self.delay_weight * gamma_average(eta)

    def pair(self, xi, eta):
        return self.kappa * (self._anchor(eta) - xi[..., -1, :])

    def mean_field(self, values, measure):
        # exact: the kernel is affine in eta, so the pairwise mean collapses
        center = self._anchor(measure).mean(axis=0)
        return self.kappa * (center[None, :] - values[:, -1, :])

    def mean_field_blocks(self, blocks):
        center = self._anchor(blocks).mean(axis=1, keepdims=True)
        return self.kappa * (center - blocks[:, :, -1, :])


class BoundedKernel(Kernel):
    """``b~(xi, eta) = kappa * tanh((eta(0) - xi(0)) / scale)`` componentwise."""

    name = "bounded_kernel"
    flow_free = False

    def __init__(self, kappa: float = 0.05, scale: float = 1.0):
        self.kappa = float(kappa)
        self.scale = float(scale)

    def pair(self, xi, eta):
        return self.kappa * np.tanh((eta[..., -1, :] - xi[..., -1, :]) / self.scale)

    def mean_field(self, values, measure):
        x = values[:, -1, :]
        y = measure[:, -1, :]
        n, m = x.shape[0], y.shape[0]
        out = np.empty_like(x)
        rows = max(1, self.chunk_elements // max(1, m * x.shape[1]))
        for start in range(0, n, rows):
            diff = y[None, :, :] - x[start:start + rows, None, :]
            out[start:start + rows] = np.tanh(diff / self.scale).mean(axis=1)
        return self.kappa * out


class CallableKernel(Kernel):
    name = "custom"
    flow_free = False

    def __init__(self, fn):
        self.fn = fn

    def pair(self, xi, eta):
        return np.asarray(self.fn(xi, eta), dtype=float)


class Sigma:
    """Diffusion coefficient multiplying the ``W2`` increments.

    ``measure_dependent`` sigmas (theorem2 mode) see the measure only through
    :meth:`summary`; state sigmas (theorem3 mode) see only the endpoint.
    """

    name = "none"
    measure_dependent = False

    def matrix_state(self, x: np.ndarray, noise_dim: int) -> np.ndarray | None:
        return None

    def matrix_measure(self, measure: np.ndarray, dim: int, noise_dim: int) -> np.ndarray | None:
        return None

    def apply(self, values, measure, dw2):
        """Return the diffusion increment ``sigma . dW2`` for every particle."""
        x = values[:, -1, :]
        if self.measure_dependent:
            mat = self.matrix_measure(measure, x.shape[1], dw2.shape[1])
            return dw2 @ mat.T
        mat = self.matrix_state(x, dw2.shape[1])
        if mat is None:
            return np.zeros_like(x)
        return np.einsum("nij,nj->ni", mat, dw2)


class ConstantSigma(Sigma):
    name = "constant_sigma"

    def __init__(self, value: float = 0.0):
        self.value = float(value)

    def apply(self, values, measure, dw2):
        d = values.shape[-1]
        if dw2.shape[1] != d:
            raise ModelError("constant_sigma needs noise_dimension == dimension")
        return self.value * dw2


class LinearStateSigma(Sigma):
    """``sigma(x) = scale * diag(x)``; Lipschitz with ``K_sigma = scale^2 / 2``."""

    name = "linear_state_sigma"

    def __init__(self, scale: float = 0.1):
        self.scale = float(scale)

    def apply(self, values, measure, dw2):
        x = values[:, -1, :]
        if dw2.shape[1] != x.shape[1]:
            raise ModelError("linear_state_sigma needs noise_dimension == dimension")
        return self.scale * x * dw2


class MomentSigma(Sigma):
    """Measure-only sigma ``scale * M(mu)^power * I`` with ``M`` the second Gamma moment.

    With ``power = 0.5`` the summary is the root second moment, which is
    1-Lipschitz in the Wasserstein-2 distance.
    """

    name = "moment_sigma"
    measure_dependent = True

    def __init__(self, scale: float = 0.1, power: float = 0.5):
        self.scale = float(scale)
        self.power = float(power)

    def summary(self, measure: np.ndarray) -> float:
        from .metrics import gamma_norms

        return float(np.mean(gamma_norms(measure) ** 2))

    def matrix_measure(self, measure, dim, noise_dim):
        if noise_dim != dim:
            raise ModelError("moment_sigma needs noise_dimension == dimension")
        level = self.summary(measure)
        coef = self.scale * (level ** self.power if level > 0 else 0.0)
        return coef * np.eye(dim)


class CallableMeasureSigma(Sigma):
    name = "custom_measure"
    measure_dependent = True

    def __init__(self, fn):
        self.fn = fn

    def matrix_measure(self, measure, dim, noise_dim):
        return np.asarray(self.fn(measure), dtype=float).reshape(dim, noise_dim)


class CallableStateSigma(Sigma):
    name = "custom_state"

    def __init__(self, fn):
        self.fn = fn

    def matrix_state(self, x, noise_dim):
        return np.asarray(self.fn(x), dtype=float).reshape(x.shape[0], x.shape[1], noise_dim)


@dataclass(frozen=True)
class Constants:
    """Declared structural constants; never inferred from the coefficients."""

    K1: float = 0.0
    K2: float = 1.0
    K3: float = 1.0
    Ksigma: float = 0.0
    Kb: float = 0.0
    R: float = 1.0

    def __post_init__(self):
        if self.K1 < 0:
            raise ModelError("K1 must be >= 0")
        if self.K2 <= 0:
            raise ModelError("K2 must be > 0")
        if self.Ksigma < 0 or self.Kb < 0:
            raise ModelError("Ksigma and Kb must be >= 0")
        if self.R <= 0:
            raise ModelError("R must be > 0")

    def to_dict(self) -> dict:
        return {"K1": self.K1, "K2": self.K2, "K3": self.K3,
                "Ksigma": self.Ksigma, "Kb": self.Kb, "R": self.R}

    @classmethod
    def from_dict(cls, d: dict) -> "Constants":
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass(frozen=True)
class CoefficientModel:
    """Drift, interaction, diffusion and noise level of the dynamics.

    The total drift is ``b0(xi(0)) + mean over the measure of b~(xi, .)``; the
    noise is ``beta dW1 + sigma dW2``.  ``beta = 0`` is accepted for the
    degenerate zero-dynamics case; the Girsanov driver and the rate
    machinery reject it.
    """

    b0: Drift = field(default_factory=Drift)
    kernel: Kernel = field(default_factory=ZeroKernel)
    sigma: Sigma = field(default_factory=Sigma)
    beta: float = 1.0
    constants: Constants = field(default_factory=Constants)
    mode: str = THEOREM3
    dim: int = 1
    noise_dim: int | None = None
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in (THEOREM2, THEOREM3):
            raise ModelError(f"unknown mode {self.mode!r}")
        if not math.isfinite(self.beta):
            raise ModelError("beta must be finite")
        if self.mode == THEOREM3:
            if self.sigma.measure_dependent:
                raise ModelError("theorem3 mode needs a state-only sigma")
            if not self.constants.K2 > self.constants.Ksigma:
                raise ModelError("theorem3 mode requires K2 > Ksigma")
        elif self.mode == THEOREM2 and not self.sigma.measure_dependent and self.sigma.name not in ("none", "constant_sigma"):
            raise ModelError("theorem2 mode needs a measure-only sigma")
        if self.noise_dim is None:
            object.__setattr__(self, "noise_dim", self.dim)

    @property
    def flow_free(self) -> bool:
        """True when neither drift nor diffusion reads the measure argument."""
        return self.kernel.flow_free and not self.sigma.measure_dependent

    def drift(self, values: np.ndarray, measure: np.ndarray) -> np.ndarray:
        return self.b0(values[:, -1, :]) + self.kernel.mean_field(values, measure)

    def diffusion(self, values, measure, dw2):
        return self.sigma.apply(values, measure, dw2)

    def to_dict(self) -> dict:
        return {"name": self.name, "params": self.params, "constants": self.constants.to_dict(),
                "beta": self.beta, "mode": self.mode}


# ---------------------------------------------------------------------------
# registry of named models
# ---------------------------------------------------------------------------

_DRIFTS = {
    "zero": lambda p: Drift(),
    "ou": lambda p: LinearDrift(p.get("a", 1.0)),
    "double_well": lambda p: DoubleWellDrift(),
}

_KERNELS = {
    "none": lambda p: ZeroKernel(),
    "constant_kernel": lambda p: ConstantKernel(p.get("value", 0.0)),
    "linear_kernel": lambda p: LinearKernel(p.get("kappa", 0.1), p.get("delay_weight", 0.0)),
    "bounded_kernel": lambda p: BoundedKernel(p.get("kappa", 0.05), p.get("scale", 1.0)),
}

_SIGMAS = {
    "none": lambda p: Sigma(),
    "constant_sigma": lambda p: ConstantSigma(p.get("value", 0.0)),
    "linear_state_sigma": lambda p: LinearStateSigma(p.get("scale", 0.1)),
    "moment_sigma": lambda p: MomentSigma(p.get("scale", 0.1), p.get("power", 0.5)),
}


def _lookup(table, spec, what):
    if spec is None:
        spec = {"name": "none"}
    if isinstance(spec, str):
        spec = {"name": spec}
    name = spec.get("name", "none")
    if name not in table:
        raise ModelError(f"unknown {what} {name!r}; known: {sorted(table)}")
    return table[name]({k: v for k, v in spec.items() if k != "name"})


def build_model(d: dict) -> CoefficientModel:
    """Build a coefficient model from its JSON description.

    ``name`` selects the endpoint drift (``zero``, ``ou``, ``double_well``);
    ``params`` may carry ``a`` (OU rate), ``kernel`` and ``sigma`` sub-specs,
    ``dimension`` and ``noise_dimension``.
    """
    name = d.get("name", "zero")
    if name not in _DRIFTS:
        raise ModelError(f"unknown model {name!r}; known: {sorted(_DRIFTS)}")
    params = dict(d.get("params", {}))
    dim = int(params.get("dimension", 1))
    return CoefficientModel(
        b0=_DRIFTS[name](params),
        kernel=_lookup(_KERNELS, params.get("kernel"), "kernel"),
        sigma=_lookup(_SIGMAS, params.get("sigma"), "sigma"),
        beta=float(d.get("beta", 1.0)),
        constants=Constants.from_dict(d.get("constants", {})),
        mode=d.get("mode", THEOREM3),
        dim=dim,
        noise_dim=int(params.get("noise_dimension", dim)),
        name=name,
        params=params,
    )


# ---------------------------------------------------------------------------
# initial samplers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Sampler:
    """Named distribution over segments.

    ``point``: constant segment at ``value``.
    ``gaussian``: endpoint ``N(mean, std^2 I)`` extended constantly backward.
    ``brownian_history``: a Brownian path over the delay window started at a
    Gaussian ``N(mean, std^2 I)`` at time ``-r0`` with diffusion ``scale``.
    """

    name: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in ("point", "gaussian", "brownian_history"):
            raise ModelError(f"unknown initial sampler {self.name!r}")

    def _vec(self, key, dim, default=0.0):
        v = np.atleast_1d(np.asarray(self.params.get(key, default), dtype=float))
        return np.broadcast_to(v, (dim,))

    def sample(self, grid: TimeGrid, n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
        mp1 = grid.n_points
        if self.name == "point":
            x = self._vec("value", dim)
            return np.broadcast_to(x, (n, mp1, dim)).copy()
        mean = self._vec("mean", dim)
        std = float(self.params.get("std", 1.0))
        if self.name == "gaussian":
            z = rng.standard_normal((n, dim))
            return np.broadcast_to((mean + std * z)[:, None, :], (n, mp1, dim)).copy()
        scale = float(self.params.get("scale", 1.0))
        z = rng.standard_normal((n, mp1, dim))
        path = np.empty((n, mp1, dim))
        path[:, 0] = mean + std * z[:, 0]
        if mp1 > 1:
            path[:, 1:] = path[:, :1] + scale * math.sqrt(grid.h) * np.cumsum(z[:, 1:], axis=1)
        return path

    def shifted_by(self, other: "Sampler") -> np.ndarray | None:
        """Translation mapping this sampler onto ``other`` when that map is the W2-optimal one."""
        if self.name != other.name:
            return None
        if self.name == "point":
            return np.atleast_1d(np.asarray(other.params.get("value", 0.0), float)) - \
                np.atleast_1d(np.asarray(self.params.get("value", 0.0), float))
        if self.name == "gaussian" and float(self.params.get("std", 1.0)) == float(other.params.get("std", 1.0)):
            return np.atleast_1d(np.asarray(other.params.get("mean", 0.0), float)) - \
                np.atleast_1d(np.asarray(self.params.get("mean", 0.0), float))
        return None

    def to_dict(self) -> dict:
        return {"name": self.name, "params": self.params}


def build_sampler(d: dict) -> Sampler:
    return Sampler(d["name"], dict(d.get("params", {})))


def initial_rng(seed: int, tag: int = 0) -> np.random.Generator:
    """Generator for initial data; independent of the noise streams."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), _INITIAL_TAG, int(tag)])))


@dataclass(frozen=True)
class Scenario:
    grid: TimeGrid
    model: CoefficientModel
    n_particles: int
    initial: Sampler
    seed: int = 0

    def __post_init__(self):
        if self.n_particles < 1:
            raise ModelError("n_particles must be >= 1")
        if not (0 <= int(self.seed) < 2 ** 64):
            raise ModelError("seed must be an unsigned 64-bit integer")

    def initial_cloud(self, n: int | None = None, tag: int = 0, ids=None) -> ParticleCloud:
        """Sample ``n`` initial segments; row ``i`` depends only on ``(seed, tag, i)``."""
        n = self.n_particles if n is None else n
        vals = self.initial.sample(self.grid, n, self.model.dim, initial_rng(self.seed, tag))
        return ParticleCloud(vals, self.grid, 0.0, ids)

    def replace(self, **kw) -> "Scenario":
        d = {"grid": self.grid, "model": self.model, "n_particles": self.n_particles,
             "initial": self.initial, "seed": self.seed}
        d.update(kw)
        return Scenario(**d)

    def to_dict(self) -> dict:
        return {"grid": self.grid.to_dict(), "model": self.model.to_dict(),
                "n_particles": self.n_particles, "initial": self.initial.to_dict(), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Scenario":
        return cls(
            grid=TimeGrid.from_dict(d["grid"]),
            model=build_model(d["model"]),
            n_particles=int(d.get("n_particles", 1)),
            initial=build_sampler(d.get("initial", {"name": "point"})),
            seed=int(d.get("seed", 0)),
        )
