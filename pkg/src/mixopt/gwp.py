"""Cradle-to-gate global warming potential of a mix.

GWP is linear in the constituent masses: for each constituent the material,
transport and production factors (kg CO2e per lb) multiply its mass in
lb/yd^3. Factor tables are user configuration; the bundled
``example_factors.csv`` is illustrative only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources
from typing import Mapping

import numpy as np

from .dataset import CONSTITUENTS, DataError, MixComposition, read_table

STAGES = ("material", "transport", "production")
FACTOR_COLUMNS = ("constituent", "g_m", "g_t", "g_p")
# exact: 1 yd = 0.9144 m
M3_PER_YD3 = 0.9144**3


class MissingFactorError(KeyError):
    pass


@dataclass(frozen=True)
class EmissionFactors:
    """Per-constituent ``(g_m, g_t, g_p)`` in kg CO2e per lb."""

    table: Mapping[str, tuple[float, float, float]]

    def __post_init__(self):
        for name, values in self.table.items():
            if name not in CONSTITUENTS:
                raise DataError(f"unknown constituent {name!r}", field="constituent")
            if len(values) != 3 or any(not math.isfinite(v) or v < 0 for v in values):
                raise DataError(f"factors for {name!r} must be three finite values ≥ 0", field=name)

    def matrix(self, mix: MixComposition | None = None) -> np.ndarray:
        """``(3, 8)`` stage-by-constituent factor matrix; missing rows are zero.

        With ``mix`` given, a missing factor for a nonzero constituent raises.
        """
        out = np.zeros((3, len(CONSTITUENTS)))
        for j, name in enumerate(CONSTITUENTS):
            if name in self.table:
                out[:, j] = self.table[name]
            elif mix is not None and getattr(mix, name) != 0:
                raise MissingFactorError(f"no emission factor for {name!r}")
        return out

    @property
    def total_per_lb(self) -> np.ndarray:
        return self.matrix().sum(axis=0)


@dataclass(frozen=True)
class GwpResult:
    total: float
    breakdown: Mapping[str, Mapping[str, float]]
    basis: str = "yd3"

    def by_stage(self) -> dict[str, float]:
        return {s: sum(row[s] for row in self.breakdown.values()) for s in STAGES}

    def by_constituent(self) -> dict[str, float]:
        return {c: sum(row.values()) for c, row in self.breakdown.items()}


def gwp(mix: MixComposition, factors: EmissionFactors) -> GwpResult:
    """GWP in kg CO2e per yd^3 with a constituent x stage breakdown."""
    G = factors.matrix(mix)
    z = mix.masses()
    contrib = G * z
    breakdown = {c: {s: float(contrib[i, j]) for i, s in enumerate(STAGES)} for j, c in enumerate(CONSTITUENTS)}
    return GwpResult(total=float(G.sum(axis=0) @ z), breakdown=breakdown)


def gwp_total(mixes, factors: EmissionFactors, basis: str = "yd3") -> np.ndarray:
    """Vectorized totals for many mixes, per yd^3 or per m^3."""
    mixes = list(mixes)
    for m in mixes:
        factors.matrix(m)
    Z = np.array([m.masses() for m in mixes]).reshape(len(mixes), len(CONSTITUENTS))
    totals = Z @ factors.total_per_lb
    return totals if basis == "yd3" else convert_volume_basis(totals, "yd3->m3")


def convert_volume_basis(value, direction: str = "yd3->m3"):
    """Convert a per-volume quantity between per-yd^3 and per-m^3."""
    if direction == "yd3->m3":
        return value / M3_PER_YD3
    if direction == "m3->yd3":
        return value * M3_PER_YD3
    raise ValueError(f"direction must be 'yd3->m3' or 'm3->yd3', got {direction!r}")


def load_factors(text: str | bytes) -> EmissionFactors:
    table: dict[str, tuple[float, float, float]] = {}
    for lineno, row in read_table(text, FACTOR_COLUMNS):
        name = row["constituent"]
        if name not in CONSTITUENTS:
            raise DataError(f"unknown constituent {name!r}", row=lineno, field="constituent")
        if name in table:
            raise DataError(f"duplicate constituent {name!r}", row=lineno, field="constituent")
        values = []
        for col in FACTOR_COLUMNS[1:]:
            try:
                v = float(row[col])
            except ValueError:
                raise DataError(f"non-numeric value {row[col]!r} in {col}", row=lineno, field=col) from None
            if not math.isfinite(v) or v < 0:
                raise DataError(f"{col} must be ≥ 0, got {row[col]}", row=lineno, field=col)
            values.append(v)
        table[name] = tuple(values)
    return EmissionFactors(table)


def example_factors() -> EmissionFactors:
    """Bundled illustrative factor table (not authoritative)."""
    return load_factors(resources.files("mixopt").joinpath("data/example_factors.csv").read_text(encoding="utf-8"))
