"""Path-space norms, empirical Wasserstein distances and rate fitting."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .model import ParticleCloud, Segment, trapezoid_mean

__all__ = [
    "PathNorm",
    "EmpiricalDistanceReport",
    "RateFit",
    "ASSIGNMENT_CEILING",
    "path_norm",
    "path_norms",
    "gamma_norms",
    "cost_matrix",
    "empirical_wasserstein",
    "coupled_pair_cost",
    "coupled_costs",
    "sorted_1d_wasserstein",
    "second_gamma_moment",
    "fit_exponential_rate",
]

# exact assignment is O(N^3); beyond this size callers should fall back to
# coupled_pair_cost and label the result as an upper bound
ASSIGNMENT_CEILING = 2000


class PathNorm(str, Enum):
    SUP = "sup"
    GAMMA = "gamma_r0"


def _norm_kind(norm) -> PathNorm:
    return norm if isinstance(norm, PathNorm) else PathNorm(norm)


def path_norms(values: np.ndarray, norm=PathNorm.GAMMA) -> np.ndarray:
    """Norms of a stack of segments ``(..., m+1, d)``.

    ``sup`` is the max over grid points of the Euclidean norm.  ``gamma_r0``
    is half the endpoint norm plus half the trapezoidal window average of the
    pointwise norm; with no delay both reduce to the endpoint norm.
    """
    kind = _norm_kind(norm)
    pointwise = np.sqrt(np.sum(values * values, axis=-1))
    if pointwise.shape[-1] == 1:
        return pointwise[..., 0]
    if kind is PathNorm.SUP:
        return pointwise.max(axis=-1)
    return 0.5 * pointwise[..., -1] + 0.5 * trapezoid_mean(pointwise[..., None])[..., 0]


def gamma_norms(values: np.ndarray) -> np.ndarray:
    return path_norms(values, PathNorm.GAMMA)


def path_norm(seg: Segment, norm=PathNorm.GAMMA) -> float:
    return float(path_norms(seg.values, norm))


@dataclass(frozen=True)
class EmpiricalDistanceReport:
    value: float
    method: str
    order: int
    norm: str

    def to_dict(self) -> dict:
        return {"value": self.value, "method": self.method, "order": self.order, "norm": self.norm}


def _check_order(p):
    if p not in (1, 2):
        raise ValueError(f"order must be 1 or 2, got {p}")


def cost_matrix(a: np.ndarray, b: np.ndarray, order: int, norm, chunk_elements: int = 1 << 22) -> np.ndarray:
    """``C[i, j] = ||a_i - b_j||^p`` built row-block by row-block."""
    n, m = a.shape[0], b.shape[0]
    out = np.empty((n, m))
    rows = max(1, chunk_elements // max(1, m * a.shape[1] * a.shape[2]))
    for start in range(0, n, rows):
        diff = a[start:start + rows, None] - b[None]
        out[start:start + rows] = path_norms(diff, norm)
    return out ** order if order != 1 else out


def empirical_wasserstein(cloud_a: ParticleCloud, cloud_b: ParticleCloud, order: int = 1,
                          norm=PathNorm.GAMMA) -> EmpiricalDistanceReport:
    """Exact ``W_p`` between two uniform empirical measures of equal size.

    Solves the linear assignment problem on the ``N x N`` cost matrix; the
    result is ``(mean matched cost)^(1/p)``.  Practical up to roughly
    :data:`ASSIGNMENT_CEILING` particles.
    """
    _check_order(order)
    kind = _norm_kind(norm)
    if cloud_a.n != cloud_b.n:
        raise ValueError(f"clouds have different sizes {cloud_a.n} and {cloud_b.n}")
    if cloud_a.dim != cloud_b.dim or not cloud_a.grid.same_window(cloud_b.grid):
        raise ValueError("clouds live on different grids or dimensions")
    cost = cost_matrix(cloud_a.values, cloud_b.values, order, kind)
    rows, cols = linear_sum_assignment(cost)
    total = math.fsum(cost[rows, cols].tolist())
    value = (total / cloud_a.n) ** (1.0 / order)
    return EmpiricalDistanceReport(value, "assignment_exact", order, kind.value)


def coupled_costs(a: np.ndarray, b: np.ndarray, norm=PathNorm.GAMMA) -> np.ndarray:
    """Per-pair distances ``||a_i - b_i||`` for paired segment stacks."""
    return path_norms(np.asarray(a) - np.asarray(b), norm)


def coupled_pair_cost(pairs, order: int = 1, norm=PathNorm.GAMMA) -> float:
    """``((1/N) sum ||xi_i - eta_i||^p)^(1/p)`` for an explicit pairing.

    ``pairs`` is either a sequence of ``(Segment, Segment)`` or a tuple of two
    aligned arrays ``(N, m+1, d)``.  Any pairing is a coupling, so this is an
    upper bound on the exact distance between the marginals.
    """
    _check_order(order)
    if isinstance(pairs, tuple) and len(pairs) == 2 and isinstance(pairs[0], np.ndarray):
        a, b = pairs
    else:
        pairs = list(pairs)
        if not pairs:
            raise ValueError("empty pair list")
        a = np.stack([p[0].values for p in pairs])
        b = np.stack([p[1].values for p in pairs])
    d = coupled_costs(a, b, norm)
    return float(np.mean(d ** order) ** (1.0 / order))


def sorted_1d_wasserstein(xs, ys, order: int = 1) -> float:
    """Exact ``W_p`` on the real line via the monotone (sorted) coupling."""
    _check_order(order)
    x = np.sort(np.asarray(xs, dtype=float).ravel())
    y = np.sort(np.asarray(ys, dtype=float).ravel())
    if x.shape != y.shape:
        raise ValueError("samples must have equal length")
    return float(np.mean(np.abs(x - y) ** order) ** (1.0 / order))


def second_gamma_moment(cloud: ParticleCloud | np.ndarray) -> float:
    values = cloud.values if isinstance(cloud, ParticleCloud) else cloud
    return float(np.mean(gamma_norms(values) ** 2))


@dataclass(frozen=True)
class RateFit:
    rate: float
    log_intercept: float
    r_squared: float
    n_points: int

    def __iter__(self):
        return iter((self.rate, self.log_intercept, self.r_squared))

    def to_dict(self) -> dict:
        return {"rate": self.rate, "log_intercept": self.log_intercept,
                "r_squared": self.r_squared, "n_points": self.n_points}


def fit_exponential_rate(series: Iterable[Sequence[float]], burn_in: float = 0.0) -> RateFit:
    """Least-squares fit of ``log(value) = log_intercept - rate * t``.

    Points with ``t < burn_in`` are discarded.  Values must be positive; floor
    and drop noise-level points before calling.
    """
    arr = np.asarray(list(series), dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("series must be a sequence of (t, value) pairs")
    arr = arr[arr[:, 0] >= burn_in]
    if arr.shape[0] < 3:
        raise ValueError("need at least 3 points to fit a rate")
    t, v = arr[:, 0], arr[:, 1]
    if np.any(v <= 0) or not np.all(np.isfinite(v)):
        raise ValueError("values must be positive and finite")
    y = np.log(v)
    tc = t - t.mean()
    slope = float(np.dot(tc, y - y.mean()) / np.dot(tc, tc))
    intercept = float(y.mean() - slope * t.mean())
    resid = y - (intercept + slope * t)
    ss_tot = float(np.dot(y - y.mean(), y - y.mean()))
    ss_res = float(np.dot(resid, resid))
    if ss_tot <= 1e-300:
        r2 = 1.0 if ss_res <= 1e-300 else 0.0
    else:
        r2 = 1.0 - ss_res / ss_tot
    return RateFit(-slope, intercept, r2, int(arr.shape[0]))
