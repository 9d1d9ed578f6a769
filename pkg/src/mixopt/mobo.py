"""Multi-objective Bayesian optimization over the mix design space.

Everything here works in a canonical *maximization* orientation: objectives
to be minimized are negated on the way in (see :func:`to_max`). The strength
/ carbon problem is ``(28-day strength, -GWP)``.

Expected hypervolume improvement is estimated by Monte Carlo over a fixed
matrix of quasi-random standard-normal base samples. The improvement of a
sample is computed exactly from a box decomposition of the region that the
current Pareto set does not dominate, with inclusion-exclusion over the
members of a batch.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import logsumexp, ndtri
from scipy.stats import qmc

from .dataset import (
    CONSTITUENTS,
    SPECIFIC_GRAVITY,
    WATER_LB_PER_FT3,
    YD3_FT3,
    DataError,
    MixComposition,
    mixes_to_csv,
)

DEFAULT_Q = 4
DEFAULT_MC_SAMPLES = 2**14
DEFAULT_TAU = 1e-3


def to_max(points, directions: Sequence[str] | None = None) -> np.ndarray:
    """Return ``points`` with minimized objectives negated."""
    Y = np.atleast_2d(np.asarray(points, dtype=float))
    if directions is None:
        return Y.copy()
    if len(directions) != Y.shape[1]:
        raise ValueError(f"{len(directions)} directions for {Y.shape[1]} objectives")
    sign = np.array([_sign(d) for d in directions])
    return Y * sign


def _sign(direction: str) -> float:
    if direction in ("max", "maximize"):
        return 1.0
    if direction in ("min", "minimize"):
        return -1.0
    raise ValueError(f"unknown direction {direction!r}")


def _check_points(points) -> np.ndarray:
    if isinstance(points, np.ndarray):
        Y = points.astype(float)
        if Y.ndim == 1:
            Y = Y[None, :] if Y.size else Y.reshape(0, 0)
    else:
        rows = [np.atleast_1d(np.asarray(p, dtype=float)) for p in points]
        if len({r.shape for r in rows}) > 1:
            raise ValueError("mixed objective dimensionality")
        Y = np.array(rows) if rows else np.zeros((0, 0))
    if Y.ndim != 2:
        raise ValueError("points must form an (n, m) array")
    if not np.all(np.isfinite(Y)):
        raise ValueError("objective vectors must be finite")
    return Y


def pareto_front(points, directions: Sequence[str] | None = None, return_index: bool = False):
    """Non-dominated subset of ``points``.

    Duplicates keep their first occurrence. Output is ordered by the first
    (canonical) objective, descending, ties broken lexicographically.
    """
    Y = _check_points(points)
    if len(Y) == 0:
        return (Y, np.zeros(0, dtype=int)) if return_index else Y
    C = to_max(Y, directions)
    _, first = np.unique(C, axis=0, return_index=True)
    first = np.sort(first)
    # lexicographic descending; a dominator always sorts before what it dominates
    order = first[np.lexsort((-C[first]).T[::-1])]
    kept: list[int] = []
    for i in order:
        if kept and np.any(np.all(C[kept] >= C[i], axis=1)):
            continue
        kept.append(int(i))
    idx = np.array(kept, dtype=int)
    return (Y[idx], idx) if return_index else Y[idx]


def _dominating(C: np.ndarray, r: np.ndarray) -> np.ndarray:
    if C.size == 0:
        return C.reshape(0, len(r))
    return C[np.all(C > r, axis=1)]


def _hv2(front: np.ndarray, r: np.ndarray) -> float:
    """2-D sweep. ``front`` must be non-dominated, sorted by f1 descending."""
    x = np.append(front[:, 0], r[0])
    return float(np.sum((x[:-1] - x[1:]) * (front[:, 1] - r[1])))


def hypervolume(P, r, directions: Sequence[str] | None = None) -> float:
    """Lebesgue measure of the union of boxes ``[r, y]`` over ``y`` in ``P``.

    Exact for up to three objectives (sweep for 2, slicing for 3); higher
    dimensions fall back to :func:`hypervolume_mc` with a warning.
    """
    r = np.asarray(r, dtype=float)
    Y = _check_points(P)
    m = len(r)
    if Y.size and Y.shape[1] != m:
        raise ValueError("reference point and points differ in dimension")
    C = _dominating(to_max(Y, directions) if Y.size else Y, to_max(r[None], directions)[0])
    rc = to_max(r[None], directions)[0]
    if len(C) == 0:
        return 0.0
    if m == 1:
        return float(C.max() - rc[0])
    if m == 2:
        return _hv2(pareto_front(C), rc)
    if m == 3:
        front = pareto_front(C)
        front = front[np.argsort(-front[:, 2], kind="stable")]
        z = np.append(front[:, 2], rc[2])
        total = 0.0
        for i in range(len(front)):
            if z[i] > z[i + 1]:
                total += _hv2(pareto_front(front[: i + 1, :2]), rc[:2]) * (z[i] - z[i + 1])
        return float(total)
    warnings.warn(f"exact hypervolume limited to m ≤ 3; using Monte Carlo for m = {m}", stacklevel=2)
    return hypervolume_mc(C, rc, n_samples=2**16, seed=0)[0]


def hypervolume_mc(P, r, n_samples: int = 2**16, seed: int = 0, directions: Sequence[str] | None = None) -> tuple[float, float]:
    """Monte Carlo hypervolume: ``(estimate, standard error)``.

    Samples are uniform in the box between ``r`` and the componentwise
    maximum of the points that dominate ``r``.
    """
    r = to_max(np.asarray(r, dtype=float)[None], directions)[0]
    Y = _check_points(P)
    C = _dominating(to_max(Y, directions) if Y.size else Y, r)
    if len(C) == 0:
        return 0.0, 0.0
    C = pareto_front(C)
    ub = C.max(axis=0)
    box = float(np.prod(ub - r))
    if box <= 0:
        return 0.0, 0.0
    rng = np.random.default_rng(seed)
    hits = 0
    done = 0
    chunk = max(1, 2**20 // max(len(C), 1))
    while done < n_samples:
        k = min(chunk, n_samples - done)
        U = rng.uniform(r, ub, size=(k, len(r)))
        hits += int(np.sum(np.any(np.all(C[None, :, :] >= U[:, None, :], axis=2), axis=1)))
        done += k
    frac = hits / n_samples
    return box * frac, box * math.sqrt(frac * (1 - frac) / n_samples)


def nondominated_cells(P, r) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint boxes ``[lower, upper)`` covering the region above ``r`` not dominated by ``P``.

    Canonical (maximization) inputs. Upper corners may be ``inf``.
    """
    r = np.asarray(r, dtype=float)
    m = len(r)
    Y = _check_points(P)
    C = _dominating(Y, r) if Y.size else np.zeros((0, m))
    if len(C) == 0:
        return r[None, :].copy(), np.full((1, m), np.inf)
    front = pareto_front(C)
    if m == 1:
        return front.max(axis=0)[None, :], np.full((1, 1), np.inf)
    if m == 2:
        front = front[::-1]  # f1 ascending, f2 descending
        a, b = front[:, 0], front[:, 1]
        lower = np.column_stack([np.append(r[0], a), np.append(b, r[1])])
        upper = np.column_stack([np.append(a, np.inf), np.full(len(a) + 1, np.inf)])
        return lower, upper
    # grid over the distinct coordinates; a cell is dominated iff some point covers its upper corner
    edges = [np.unique(np.append(r[d], front[:, d])) for d in range(m)]
    lows = np.array(list(itertools.product(*edges)))
    ups = np.array(list(itertools.product(*[np.append(e[1:], np.inf) for e in edges])))
    dominated = np.any(np.all(front[None, :, :] >= ups[:, None, :], axis=2), axis=1)
    return lows[~dominated], ups[~dominated]


def draw_base_samples(n_samples: int, q: int, m: int, seed: int = 0) -> np.ndarray:
    """``(n_samples, q, m)`` standard normals from a scrambled Sobol sequence."""
    sampler = qmc.Sobol(d=q * m, scramble=True, seed=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        U = sampler.random(n_samples)
    U = np.clip(U, 1e-12, 1 - 1e-12)
    return ndtri(U).reshape(n_samples, q, m)


def _subsets(q: int) -> list[tuple[tuple[int, ...], int]]:
    return [(s, 1 if len(s) % 2 else -1) for k in range(1, q + 1) for s in itertools.combinations(range(q), k)]


def _posterior_samples(means, variances, n_samples, seed, base_samples, directions):
    mu = np.atleast_2d(np.asarray(means, dtype=float))
    var = np.atleast_2d(np.asarray(variances, dtype=float))
    if mu.shape != var.shape:
        raise ValueError("means and variances must have the same shape")
    if np.any(var < 0) or not np.all(np.isfinite(var)):
        raise ValueError("posterior variances must be finite and ≥ 0")
    if directions is not None:
        mu = to_max(mu, directions)
    q, m = mu.shape
    if base_samples is None:
        base_samples = draw_base_samples(n_samples, q, m, seed)
    Z = np.asarray(base_samples)[:, :q, :m]
    if Z.shape[1:] != (q, m):
        raise ValueError(f"base samples of shape {Z.shape} cannot cover a ({q}, {m}) batch")
    return mu[None] + np.sqrt(var)[None] * Z


def _canonical_ref(P, r, directions):
    r = to_max(np.asarray(r, dtype=float)[None], directions)[0]
    Y = _check_points(P)
    Pc = to_max(Y, directions) if Y.size else np.zeros((0, len(r)))
    return Pc, r


def hvi_samples(Y: np.ndarray, lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    """Exact hypervolume improvement of each sample batch ``Y[s]`` (shape ``(N, q, m)``)."""
    N, q, _ = Y.shape
    out = np.zeros(N)
    for members, sign in _subsets(q):
        corner = Y[:, list(members), :].min(axis=1)
        ext = np.minimum(corner[:, None, :], upper[None]) - lower[None]
        out += sign * np.prod(np.maximum(ext, 0.0), axis=2).sum(axis=1)
    return np.maximum(out, 0.0)


def ehvi_mc(
    means,
    variances,
    P,
    r,
    n_samples: int = DEFAULT_MC_SAMPLES,
    seed: int = 0,
    base_samples: np.ndarray | None = None,
    directions: Sequence[str] | None = None,
) -> float:
    """Monte Carlo expected hypervolume improvement of a batch.

    ``means`` and ``variances`` have shape ``(q, m)``: independent Gaussian
    posteriors per point and objective. Passing the same ``base_samples``
    across calls gives common random numbers.
    """
    Pc, rc = _canonical_ref(P, r, directions)
    Y = _posterior_samples(means, variances, n_samples, seed, base_samples, directions)
    lower, upper = nondominated_cells(Pc, rc)
    return float(np.mean(hvi_samples(Y, lower, upper)))


def log_softplus(x: np.ndarray, tau: float) -> np.ndarray:
    """``log(tau * log(1 + exp(x / tau)))``, finite for very negative ``x``."""
    z = np.asarray(x, dtype=float) / tau
    with np.errstate(divide="ignore"):
        # log(log1p(e^z)) ~ z for z -> -inf, where log1p(e^z) underflows
        out = np.where(z < -30.0, z, np.log(np.logaddexp(0.0, z)))
    return out + math.log(tau)


def _logdiffexp(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(np.isfinite(b), b - a, -np.inf)
        return a + np.log(-np.expm1(np.minimum(d, -1e-300)))


def log_hvi_samples(Y: np.ndarray, lower: np.ndarray, upper: np.ndarray, tau: float) -> np.ndarray:
    """Smoothed log improvement per sample, shape ``(N,)``.

    The positive part of every box side is replaced by a softplus with
    temperature ``tau``; inclusion-exclusion runs in the log domain.
    """
    N, q, _ = Y.shape
    pos, neg = [], []
    for members, sign in _subsets(q):
        corner = Y[:, list(members), :].min(axis=1)
        ext = np.minimum(corner[:, None, :], upper[None]) - lower[None]
        (pos if sign > 0 else neg).append(log_softplus(ext, tau).sum(axis=2))
    per_cell = logsumexp(np.stack(pos), axis=0)
    if neg:
        per_cell = _logdiffexp(per_cell, logsumexp(np.stack(neg), axis=0))
    return logsumexp(per_cell, axis=1)


def qlog_ehvi(
    means,
    variances,
    P,
    r,
    tau: float = DEFAULT_TAU,
    n_samples: int = DEFAULT_MC_SAMPLES,
    seed: int = 0,
    base_samples: np.ndarray | None = None,
    directions: Sequence[str] | None = None,
) -> float:
    """Log of a softplus-smoothed EHVI estimate; finite where plain EHVI underflows.

    Approaches ``log(ehvi_mc(...))`` from above as ``tau -> 0``.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    Pc, rc = _canonical_ref(P, r, directions)
    Y = _posterior_samples(means, variances, n_samples, seed, base_samples, directions)
    lower, upper = nondominated_cells(Pc, rc)
    return float(logsumexp(log_hvi_samples(Y, lower, upper, tau)) - math.log(len(Y)))


def _binder_split(binder, replacement, slag_share, fly_ash_c_share) -> dict[str, float]:
    fly_ash = binder * replacement * (1.0 - slag_share)
    return {
        "cement": binder * (1.0 - replacement),
        "fly_ash_c": fly_ash * fly_ash_c_share,
        "fly_ash_f": fly_ash * (1.0 - fly_ash_c_share),
        "slag": binder * replacement * slag_share,
    }


def paste_volume_ft3(binder, replacement, slag_share, fly_ash_c_share, wb, hrwr) -> float:
    masses = _binder_split(binder, replacement, slag_share, fly_ash_c_share)
    masses["water"] = wb * binder
    masses["hrwr"] = hrwr
    return sum(mass / (SPECIFIC_GRAVITY[c] * WATER_LB_PER_FT3) for c, mass in masses.items())


def proportion_mix(
    binder: float,
    replacement: float,
    slag_share: float,
    fly_ash_c_share: float,
    wb: float,
    hrwr: float,
    fine_coarse: float | None,
    curing_temp: float = 22.0,
    air_fraction: float = 0.02,
) -> MixComposition:
    """Masses per yd^3 by absolute volume; aggregate fills what paste and air leave.

    ``fine_coarse=None`` gives a mortar (all aggregate fine).
    """
    masses = _binder_split(binder, replacement, slag_share, fly_ash_c_share)
    room = YD3_FT3 * (1.0 - air_fraction) - paste_volume_ft3(binder, replacement, slag_share, fly_ash_c_share, wb, hrwr)
    if room <= 0:
        raise DataError(f"paste volume exceeds the batch volume by {-room:.2f} ft³")
    if fine_coarse is None:
        fine, coarse, kind = room * WATER_LB_PER_FT3 * SPECIFIC_GRAVITY["fine_agg"], 0.0, "mortar"
    else:
        coarse = room * WATER_LB_PER_FT3 / (fine_coarse / SPECIFIC_GRAVITY["fine_agg"] + 1.0 / SPECIFIC_GRAVITY["coarse_agg"])
        fine, kind = fine_coarse * coarse, "concrete"
    return MixComposition(**masses, water=wb * binder, fine_agg=fine, coarse_agg=coarse, hrwr=hrwr, curing_temp=curing_temp, kind=kind)


DESIGN_VARIABLES = (
    "binder",
    "replacement",
    "slag_share",
    "fly_ash_c_share",
    "wb",
    "hrwr",
    "fine_coarse",
    "curing_temp",
)

DEFAULT_BOUNDS = {
    "binder": (440.0, 1125.0),
    "replacement": (0.0, 0.8),
    "slag_share": (0.0, 1.0),
    "fly_ash_c_share": (0.0, 1.0),
    "wb": (0.30, 0.50),
    "hrwr": (0.0, 3.4),
    "fine_coarse": (0.6, 0.9),
    "curing_temp": (22.0, 22.0),
}


@dataclass(frozen=True)
class DesignSpace:
    """Box over concrete design variables and its map to constituent masses.

    Variables: binder content (lb/yd^3), SCM replacement fraction of binder,
    slag share of the SCM, class-C share of the fly ash, w/b, HRWR dosage
    (lb/yd^3), fine-to-coarse aggregate mass ratio, curing temperature.
    Aggregates fill the volume left by paste and ``air_fraction`` air.
    Variables with equal bounds are fixed.
    """

    bounds: Mapping[str, tuple[float, float]] = field(default_factory=lambda: dict(DEFAULT_BOUNDS))
    air_fraction: float = 0.02

    def __post_init__(self):
        merged = {**DEFAULT_BOUNDS, **dict(self.bounds)}
        unknown = set(merged) - set(DESIGN_VARIABLES)
        if unknown:
            raise ValueError(f"unknown design variables: {sorted(unknown)}")
        for name, (lo, hi) in merged.items():
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise ValueError(f"bad bounds for {name}: ({lo}, {hi})")
        for name in ("replacement", "slag_share", "fly_ash_c_share"):
            lo, hi = merged[name]
            if lo < 0 or hi > 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if merged["binder"][0] <= 0 or merged["fine_coarse"][0] <= 0 or merged["wb"][0] < 0 or merged["hrwr"][0] < 0:
            raise ValueError("binder and fine_coarse must be > 0; wb and hrwr ≥ 0")
        object.__setattr__(self, "bounds", {k: tuple(map(float, merged[k])) for k in DESIGN_VARIABLES})
        # paste volume is multilinear in the variables, so corners bound it
        lo, hi = self.lower, self.upper
        worst = max(self._paste_volume(np.where(mask, hi, lo)) for mask in itertools.product([0, 1], repeat=len(DESIGN_VARIABLES)))
        if worst >= self.aggregate_room:
            raise ValueError(f"paste volume up to {worst:.2f} ft³ leaves no room for aggregate")

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.bounds[k][0] for k in DESIGN_VARIABLES])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.bounds[k][1] for k in DESIGN_VARIABLES])

    @property
    def free(self) -> np.ndarray:
        return np.flatnonzero(self.upper > self.lower)

    @property
    def dim(self) -> int:
        return len(self.free)

    @property
    def aggregate_room(self) -> float:
        return YD3_FT3 * (1.0 - self.air_fraction)

    def from_unit(self, U) -> np.ndarray:
        """Map points in the unit cube over free variables to full design vectors."""
        U = np.atleast_2d(np.asarray(U, dtype=float))
        V = np.tile(self.lower, (len(U), 1))
        f = self.free
        V[:, f] = self.lower[f] + np.clip(U, 0.0, 1.0) * (self.upper[f] - self.lower[f])
        return V

    def to_unit(self, V) -> np.ndarray:
        V = np.atleast_2d(np.asarray(V, dtype=float))
        f = self.free
        return (V[:, f] - self.lower[f]) / (self.upper[f] - self.lower[f])

    def _paste_volume(self, v) -> float:
        return paste_volume_ft3(*v[:6])

    def to_mix(self, v) -> MixComposition:
        return proportion_mix(*np.asarray(v, dtype=float), air_fraction=self.air_fraction)

    def mixes(self, U) -> list[MixComposition]:
        return [self.to_mix(v) for v in self.from_unit(U)]

    def masses(self, V) -> np.ndarray:
        """Constituent masses (``CONSTITUENTS`` order) for many design vectors at once."""
        V = np.atleast_2d(np.asarray(V, dtype=float))
        binder, repl, slag_share, fac_share, wb, hrwr, fine_coarse = V[:, :7].T
        split = _binder_split(binder, repl, slag_share, fac_share)
        room = self.aggregate_room - paste_volume_ft3(binder, repl, slag_share, fac_share, wb, hrwr)
        coarse = room * WATER_LB_PER_FT3 / (fine_coarse / SPECIFIC_GRAVITY["fine_agg"] + 1.0 / SPECIFIC_GRAVITY["coarse_agg"])
        columns = {**split, "water": wb * binder, "fine_agg": fine_coarse * coarse, "coarse_agg": coarse, "hrwr": hrwr}
        return np.column_stack([columns[c] for c in CONSTITUENTS])

    def features(self, V) -> np.ndarray:
        """Raw feature rows (``FEATURES`` order) matching :meth:`MixComposition.features`."""
        V = np.atleast_2d(np.asarray(V, dtype=float))
        M = self.masses(V)
        return np.column_stack([M, V[:, 7], V[:, 4]])

    def sobol(self, n: int, seed: int = 0) -> np.ndarray:
        """``n`` scrambled-Sobol points in the unit cube over free variables."""
        if self.dim == 0:
            return np.zeros((n, 0))
        sampler = qmc.Sobol(d=self.dim, scramble=True, seed=seed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            return sampler.random(n)

    def to_dict(self) -> dict:
        return {"bounds": {k: list(v) for k, v in self.bounds.items()}, "air_fraction": self.air_fraction}

    @classmethod
    def from_dict(cls, payload: Mapping) -> "DesignSpace":
        return cls(bounds={k: tuple(v) for k, v in payload.get("bounds", {}).items()}, air_fraction=payload.get("air_fraction", 0.02))


@dataclass
class CandidateBatch:
    mixes: list[MixComposition]
    design: np.ndarray
    acquisition: float
    predicted_mean: np.ndarray
    predicted_var: np.ndarray
    n_evals: int = 0

    def __len__(self) -> int:
        return len(self.mixes)

    def to_csv(self, seed: int, iteration: int, prefix: str = "BO", comments: Sequence[str] = ()) -> str:
        ids = [f"{prefix}{iteration}-{i + 1}" for i in range(len(self.mixes))]
        mixes = dict(zip(ids, self.mixes))
        extra = {
            "suggested_by": {k: "bo" for k in ids},
            "seed": {k: str(seed) for k in ids},
            "iteration": {k: str(iteration) for k in ids},
        }
        return mixes_to_csv(mixes, extra_columns=extra, comments=comments)


def objective_moments(strength_model, gwp_fn: Callable, mixes: Sequence[MixComposition], age: float = 28.0):
    """Canonical ``(strength, -GWP)`` means and variances for each mix."""
    mean_s, var_s = strength_model.predict_mix(list(mixes), age)
    g = np.array([gwp_fn(m) for m in mixes], dtype=float)
    means = np.column_stack([mean_s, -g])
    variances = np.column_stack([var_s, np.zeros(len(mixes))])
    return means, variances


class _Acquisition:
    """qLogEHVI of ``fixed + [candidate]`` on a fixed base-sample matrix."""

    def __init__(self, strength_model, gwp_fn, space, P, r, base, tau, age):
        self.model = strength_model
        self.gwp_fn = gwp_fn
        self.space = space
        self.lower, self.upper = nondominated_cells(_check_points(P), np.asarray(r, dtype=float))
        self.base = base
        self.tau = tau
        self.age = age
        self.fixed_mean = np.zeros((0, 2))
        self.fixed_var = np.zeros((0, 2))
        self.n_evals = 0

    def __call__(self, U: np.ndarray) -> np.ndarray:
        U = np.atleast_2d(U)
        means, variances = objective_moments(self.model, self.gwp_fn, self.space.mixes(U), self.age)
        n, j = len(U), len(self.fixed_mean)
        mu = np.concatenate([np.broadcast_to(self.fixed_mean, (n, j, 2)), means[:, None, :]], axis=1)
        sd = np.sqrt(np.concatenate([np.broadcast_to(self.fixed_var, (n, j, 2)), variances[:, None, :]], axis=1))
        base = self.base[:, : j + 1, :]
        out = np.empty(n)
        # candidates are stacked along the sample axis, a chunk at a time
        chunk = max(1, 2**16 // len(base))
        for s in range(0, n, chunk):
            Y = (mu[s : s + chunk, None] + sd[s : s + chunk, None] * base[None]).reshape(-1, j + 1, 2)
            logs = log_hvi_samples(Y, self.lower, self.upper, self.tau).reshape(-1, len(base))
            out[s : s + chunk] = logsumexp(logs, axis=1) - math.log(len(base))
        self.n_evals += n
        return out

    def add(self, U):
        means, variances = objective_moments(self.model, self.gwp_fn, self.space.mixes(U), self.age)
        self.fixed_mean = np.vstack([self.fixed_mean, means])
        self.fixed_var = np.vstack([self.fixed_var, variances])


def pattern_search(f: Callable[[np.ndarray], np.ndarray], x0: np.ndarray, f0: float, step: float = 0.2, min_step: float = 1e-3, max_evals: int = 2000):
    """Compass search maximizing ``f`` over the unit cube.

    Polls ``x ± step * e_d`` for every coordinate, moves to the best improving
    poll point, halves the step when none improves.
    """
    x, fx = np.asarray(x0, dtype=float).copy(), float(f0)
    d = len(x)
    evals = 0
    if d == 0:
        return x, fx, evals
    while step >= min_step and evals < max_evals:
        polls = np.vstack([x + step * np.eye(d), x - step * np.eye(d)])
        polls = np.clip(polls, 0.0, 1.0)
        polls = polls[np.any(polls != x, axis=1)]
        if len(polls) == 0:
            step /= 2
            continue
        values = f(polls)
        evals += len(polls)
        best = int(np.argmax(values))
        if values[best] > fx:
            x, fx = polls[best], float(values[best])
        else:
            step /= 2
    return x, fx, evals


def _repeats(x: np.ndarray, chosen, tol: float = 1e-9) -> bool:
    # a fixed design space has a single point, so repeats are unavoidable
    return x.size > 0 and any(np.max(np.abs(x - c)) <= tol for c in chosen)


def optimize_acquisition(
    strength_model,
    gwp_fn: Callable[[MixComposition], float],
    P,
    r,
    space: DesignSpace,
    q: int = DEFAULT_Q,
    restarts: int = 4,
    seed: int = 0,
    raw_samples: int = 256,
    n_samples: int = DEFAULT_MC_SAMPLES,
    tau: float = DEFAULT_TAU,
    age: float = 28.0,
    max_evals: int = 2000,
) -> CandidateBatch:
    """Choose ``q`` mixes maximizing qLogEHVI over ``(strength, -GWP)``.

    ``P`` and ``r`` are canonical (both maximized). The batch is built
    greedily: each new point maximizes the joint acquisition of the points
    already chosen plus itself. Each greedy step runs a multi-start compass
    search from the best Sobol points. Base samples are drawn once from
    ``seed`` and shared by every evaluation.
    """
    P = _check_points(P)
    if P.size == 0:
        raise ValueError("Pareto set must be nonempty")
    if q < 1:
        raise ValueError("q must be ≥ 1")
    base = draw_base_samples(n_samples, q, 2, seed)
    acq = _Acquisition(strength_model, gwp_fn, space, P, r, base, tau, age)
    raw = space.sobol(raw_samples, seed=seed)
    chosen = []
    value = -np.inf
    for _ in range(q):
        raw_values = acq(raw)
        order = [i for i in np.argsort(-raw_values, kind="stable") if not _repeats(raw[i], chosen)]
        results = [pattern_search(acq, raw[i], raw_values[i], max_evals=max_evals)[:2] for i in order[:restarts]]
        # a repeated design adds nothing; fall back to the best fresh raw point
        results = [(x, fx) for x, fx in results if not _repeats(x, chosen)]
        if not results:
            if not order:
                raise ValueError("no distinct design points left to choose from")
            results = [(raw[order[0]], raw_values[order[0]])]
        best_x, best_f = max(results, key=lambda item: item[1])
        chosen.append(best_x)
        acq.add(best_x[None])
        value = best_f
    U = np.array(chosen)
    if space.dim == 0:
        U = np.zeros((q, 0))
    mixes = space.mixes(U)
    means, variances = objective_moments(strength_model, gwp_fn, mixes, age)
    return CandidateBatch(
        mixes=mixes,
        design=space.from_unit(U),
        acquisition=float(value),
        predicted_mean=means,
        predicted_var=variances,
        n_evals=acq.n_evals,
    )


def batch_csv_rows(batch: CandidateBatch) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(DESIGN_VARIABLES) + ["mean_strength_ksi", "var_strength", "gwp"])
    for v, mu, var in zip(batch.design, batch.predicted_mean, batch.predicted_var):
        writer.writerow([repr(float(x)) for x in v] + [repr(float(mu[0])), repr(float(var[0])), repr(float(-mu[1]))])
    return buf.getvalue()


__all__ = [
    "CandidateBatch",
    "DataError",
    "DesignSpace",
    "draw_base_samples",
    "ehvi_mc",
    "hypervolume",
    "hypervolume_mc",
    "nondominated_cells",
    "optimize_acquisition",
    "pareto_front",
    "qlog_ehvi",
    "to_max",
]
