"""Inverse design: feasible mixes for strength thresholds within GWP bins.

For each GWP bin (half-open ``[lo, hi)`` in kg CO2e per m^3) a stream of
design points is drawn: scrambled Sobol points over the design box, kept
when their GWP falls in the bin, followed by Gaussian perturbations of those
in-bin points (local refinement). The stream depends only on ``(seed, bin)``
so every threshold and every ``confidence_k`` is checked against the same
points, which makes the found feasible sets nested under tightening.

A point is feasible for threshold ``s`` (psi) when, at every queried age,
``mean - confidence_k * sigma >= s / 1000`` (ksi).
"""

from __future__ import annotations

import csv
import io
import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .dataset import MixComposition, format_float, mixes_to_csv
from .gwp import EmissionFactors, convert_volume_basis
from .mobo import DesignSpace

PSI_PER_KSI = 1000.0
DEFAULT_THRESHOLDS = (5000.0, 6000.0, 7000.0, 8000.0)
REPORT_PARAMETERS = ("cement", "fly_ash", "slag", "wb", "hrwr")
SHORTFALL = "shortfall"


@dataclass(frozen=True)
class InverseQuery:
    strength_thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    ages: tuple[float, ...] = (28.0,)
    gwp_bin_width: float = 50.0
    confidence_k: float = 0.0
    candidates_per_bin: int = 50
    # optional (lo, hi) restriction of the binned GWP range, m^3 basis
    gwp_range: tuple[float, float] | None = None

    def __post_init__(self):
        object.__setattr__(self, "strength_thresholds", tuple(float(s) for s in self.strength_thresholds))
        object.__setattr__(self, "ages", tuple(float(a) for a in self.ages))
        if not self.strength_thresholds or any(not s > 0 for s in self.strength_thresholds):
            raise ValueError("strength thresholds must be > 0")
        if not self.ages or any(not a > 0 for a in self.ages):
            raise ValueError("ages must be > 0")
        if not self.gwp_bin_width > 0:
            raise ValueError("gwp_bin_width must be > 0")
        if not self.confidence_k >= 0:
            raise ValueError("confidence_k must be ≥ 0")
        if self.candidates_per_bin < 1:
            raise ValueError("candidates_per_bin must be ≥ 1")

    def to_dict(self) -> dict:
        return {
            "strength_thresholds": list(self.strength_thresholds),
            "ages": list(self.ages),
            "gwp_bin_width": self.gwp_bin_width,
            "confidence_k": self.confidence_k,
            "candidates_per_bin": self.candidates_per_bin,
            "gwp_range": list(self.gwp_range) if self.gwp_range else None,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "InverseQuery":
        payload = dict(payload)
        if payload.get("gwp_range") is not None:
            payload["gwp_range"] = tuple(payload["gwp_range"])
        for key in ("strength_thresholds", "ages"):
            if key in payload:
                payload[key] = tuple(payload[key])
        return cls(**payload)


@dataclass
class Cell:
    """Candidates for one (threshold, GWP bin) pair.

    ``feasible`` holds the stream indices of every feasible point found, of
    which the first ``requested`` become candidates.
    """

    threshold_psi: float
    bin_lo: float
    bin_hi: float
    requested: int
    mixes: list[MixComposition]
    design: np.ndarray
    mean: np.ndarray
    sigma: np.ndarray
    gwp_m3: np.ndarray
    feasible: frozenset = field(default_factory=frozenset)
    n_in_bin: int = 0

    @property
    def shortfall(self) -> bool:
        return len(self.mixes) < self.requested

    @property
    def key(self) -> tuple[float, tuple[float, float]]:
        return (self.threshold_psi, (self.bin_lo, self.bin_hi))


@dataclass
class InverseResult:
    query: InverseQuery
    cells: dict

    def __getitem__(self, key) -> Cell:
        return self.cells[key]

    def __iter__(self):
        return iter(self.cells.values())

    def to_csv(self, comments=()) -> str:
        """candidates.csv: mixes.csv columns plus threshold, bin, predictions and GWP."""
        ages = self.query.ages
        mixes: dict[str, MixComposition] = {}
        extra: dict[str, dict[str, str]] = {name: {} for name in _candidate_columns(ages)}
        for cell in self:
            for i, mix in enumerate(cell.mixes):
                mix_id = f"T{cell.threshold_psi:g}-G{cell.bin_lo:g}-{i + 1}"
                mixes[mix_id] = mix
                extra["threshold_psi"][mix_id] = format_float(cell.threshold_psi)
                extra["bin_lo"][mix_id] = format_float(cell.bin_lo)
                extra["bin_hi"][mix_id] = format_float(cell.bin_hi)
                for a, age in enumerate(ages):
                    extra[f"predicted_mean_ksi_{age:g}"][mix_id] = format_float(cell.mean[i, a])
                    extra[f"predicted_sigma_ksi_{age:g}"][mix_id] = format_float(cell.sigma[i, a])
                extra["gwp_m3"][mix_id] = format_float(cell.gwp_m3[i])
        return mixes_to_csv(mixes, extra_columns=extra, comments=comments)


def _candidate_columns(ages) -> list[str]:
    cols = ["threshold_psi", "bin_lo", "bin_hi"]
    for age in ages:
        cols += [f"predicted_mean_ksi_{age:g}", f"predicted_sigma_ksi_{age:g}"]
    return cols + ["gwp_m3"]


def design_gwp_m3(space: DesignSpace, factors: EmissionFactors, V: np.ndarray) -> np.ndarray:
    return convert_volume_basis(space.masses(V) @ factors.total_per_lb, "yd3->m3")


def gwp_bins(space: DesignSpace, factors: EmissionFactors, width: float, gwp_range=None) -> list[tuple[float, float]]:
    """Half-open bins of ``width`` covering the GWP reachable in ``space``.

    Masses are multilinear in the design variables and GWP is linear in the
    masses, so the extremes sit at box corners.
    """
    if gwp_range is None:
        corners = np.array([np.where(mask, space.upper, space.lower) for mask in itertools.product([0, 1], repeat=len(space.lower))])
        g = design_gwp_m3(space, factors, corners)
        lo, hi = float(g.min()), float(g.max())
    else:
        lo, hi = map(float, gwp_range)
    first, last = math.floor(lo / width), math.floor(hi / width)
    return [(k * width, (k + 1) * width) for k in range(first, last + 1)]


def bin_stream(
    space: DesignSpace,
    factors: EmissionFactors,
    bin_lo: float,
    bin_hi: float,
    seed: int,
    budget: int = 20000,
    refine_scale: float = 0.05,
) -> np.ndarray:
    """In-bin design points (unit-cube coordinates) drawn from a ``(seed, bin)`` stream.

    Half the budget goes to Sobol points over the box, the other half to
    perturbations of the in-bin Sobol points.
    """
    bin_key = int(round(bin_lo * 1000)) % (2**63)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), bin_key]))
    n_global = budget // 2
    if space.dim == 0:
        U = np.zeros((1, 0))
    else:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            U = qmc.Sobol(d=space.dim, scramble=True, seed=rng).random(n_global)
    g = design_gwp_m3(space, factors, space.from_unit(U))
    kept = U[(g >= bin_lo) & (g < bin_hi)]
    n_local = budget - n_global
    if len(kept) and n_local > 0 and space.dim > 0:
        parents = kept[rng.integers(len(kept), size=n_local)]
        local = np.clip(parents + refine_scale * rng.standard_normal(parents.shape), 0.0, 1.0)
        g = design_gwp_m3(space, factors, space.from_unit(local))
        kept = np.vstack([kept, local[(g >= bin_lo) & (g < bin_hi)]])
    return kept


def feasible_mask(mean: np.ndarray, sigma: np.ndarray, threshold_psi: float, k: float) -> np.ndarray:
    """``mean - k sigma >= threshold`` at every age (columns)."""
    return np.all(mean - k * sigma >= threshold_psi / PSI_PER_KSI, axis=1)


def generate_candidates(
    model,
    factors: EmissionFactors,
    space: DesignSpace,
    query: InverseQuery = InverseQuery(),
    seed: int = 0,
    budget: int = 20000,
) -> InverseResult:
    """Sample feasible mixes per (threshold, GWP bin) cell.

    ``model`` needs ``predict_features(F, age) -> (mean, var)`` over raw
    feature rows; a fitted :class:`~mixopt.gp.GpModel` qualifies. Predictions
    are made once per bin and shared by every threshold.
    """
    cells = {}
    for lo, hi in gwp_bins(space, factors, query.gwp_bin_width, query.gwp_range):
        U = bin_stream(space, factors, lo, hi, seed, budget)
        V = space.from_unit(U) if len(U) else np.zeros((0, len(space.lower)))
        F = space.features(V) if len(V) else np.zeros((0, 10))
        mean = np.zeros((len(V), len(query.ages)))
        sigma = np.zeros_like(mean)
        for a, age in enumerate(query.ages):
            if len(V):
                mu, var = model.predict_features(F, age)
                mean[:, a], sigma[:, a] = mu, np.sqrt(np.maximum(var, 0.0))
        g = design_gwp_m3(space, factors, V) if len(V) else np.zeros(0)
        for threshold in query.strength_thresholds:
            idx = np.flatnonzero(feasible_mask(mean, sigma, threshold, query.confidence_k))
            take = idx[: query.candidates_per_bin]
            cells[(threshold, (lo, hi))] = Cell(
                threshold_psi=threshold,
                bin_lo=lo,
                bin_hi=hi,
                requested=query.candidates_per_bin,
                mixes=[space.to_mix(v) for v in V[take]],
                design=V[take],
                mean=mean[take],
                sigma=sigma[take],
                gwp_m3=g[take],
                feasible=frozenset(int(i) for i in idx),
                n_in_bin=len(V),
            )
    return InverseResult(query, cells)


def check_candidate(model, factors: EmissionFactors, mix: MixComposition, cell_key, query: InverseQuery, tol: float = 1e-9) -> bool:
    """Re-evaluate one candidate's feasibility from its composition alone.

    ``tol`` (ksi) absorbs rounding between the batched and per-mix feature paths.
    """
    threshold, (lo, hi) = cell_key
    g = float(convert_volume_basis(mix.masses() @ factors.total_per_lb, "yd3->m3"))
    if not lo <= g < hi:
        return False
    F = mix.features()[None]
    for age in query.ages:
        mu, var = model.predict_features(F, age)
        if mu[0] - query.confidence_k * math.sqrt(max(var[0], 0.0)) < threshold / PSI_PER_KSI - tol:
            return False
    return True


def _parameter_values(mixes: list[MixComposition]) -> dict[str, np.ndarray]:
    return {
        "cement": np.array([m.cement for m in mixes]),
        "fly_ash": np.array([m.fly_ash_c + m.fly_ash_f for m in mixes]),
        "slag": np.array([m.slag for m in mixes]),
        "wb": np.array([m.wb for m in mixes]),
        "hrwr": np.array([m.hrwr for m in mixes]),
    }


def bin_sweep_report(result: InverseResult) -> str:
    """Per-cell min/median/max of key mix parameters as CSV.

    Cells with fewer candidates than requested are marked ``shortfall``;
    empty cells carry no statistics.
    """
    if not result.cells:
        raise ValueError("no cells to report")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["threshold_psi", "bin_lo", "bin_hi", "n", "status"]
    header += [f"{p}_{s}" for p in REPORT_PARAMETERS for s in ("min", "median", "max")]
    writer.writerow(header)
    for cell in result:
        row = [format_float(cell.threshold_psi), format_float(cell.bin_lo), format_float(cell.bin_hi), len(cell.mixes), SHORTFALL if cell.shortfall else "ok"]
        if cell.mixes:
            for values in _parameter_values(cell.mixes).values():
                row += [format_float(values.min()), format_float(np.median(values)), format_float(values.max())]
        else:
            row += [""] * (3 * len(REPORT_PARAMETERS))
        writer.writerow(row)
    return buf.getvalue()
