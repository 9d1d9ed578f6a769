"""Synthetic ground truth standing in for laboratory strength tests.

Strength follows a Hill-type curve in age,
``s(x, t) = S_max(x) * t**h / (t**h + t50(x)**h)``, where the plateau
``S_max`` and half-strength age ``t50`` are linear functions of the binder
fractions, w/b, HRWR and temperature plus w/b x replacement and slag x fly
ash interactions; coarse aggregate dilutes the plateau.
The generator reproduces the six-phase campaign structure: a mortar phase
followed by five concrete phases with narrowing parameter ranges.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import (
    AGE_GRID,
    MORTAR_AGES,
    DataError,
    Dataset,
    MixComposition,
    StrengthObservation,
)
from .mobo import proportion_mix

# phase -> sampling ranges for (binder, replacement, slag_share, fly_ash_c_share,
# wb, hrwr, fine_coarse, curing_temp); fine_coarse None marks mortar
PHASE_RANGES = {
    1: dict(binder=(240, 2150), replacement=(0.0, 1.0), wb=(0.20, 0.50), hrwr=(0.0, 22.5), fine_coarse=None, curing_temp=(4.5, 22.0)),
    2: dict(binder=(650, 760), replacement=(0.2, 0.5), wb=(0.33, 0.40), hrwr=(0.0, 2.0), fine_coarse=(0.3, 0.9), curing_temp=(22.0, 22.0)),
    3: dict(binder=(650, 760), replacement=(0.0, 0.8), wb=(0.30, 0.40), hrwr=(0.0, 3.0), fine_coarse=(0.6, 0.9), curing_temp=(22.0, 22.0)),
    4: dict(binder=(675, 1125), replacement=(0.0, 0.8), wb=(0.35, 0.50), hrwr=(0.0, 1.3), fine_coarse=(0.6, 0.9), curing_temp=(22.0, 22.0)),
    5: dict(binder=(625, 755), replacement=(0.29, 0.60), wb=(0.35, 0.45), hrwr=(2.2, 3.4), fine_coarse=(0.6, 0.9), curing_temp=(22.0, 22.0)),
    6: dict(binder=(440, 760), replacement=(0.29, 0.52), wb=(0.39, 0.50), hrwr=(0.0, 3.4), fine_coarse=(0.6, 0.9), curing_temp=(10.0, 22.0)),
}
# training-set sizes per phase plus extra concrete mixes per phase (54 concrete total)
PHASE_SIZES = (69, 7, 5, 10, 4, 16)
PHASE_EXTRAS = (0, 2, 1, 3, 1, 5)


@dataclass(frozen=True)
class SyntheticOracle:
    s0: float = 14.0
    wb_slope: float = 30.0
    slag_gain: float = 3.0
    fly_ash_f_loss: float = 2.5
    fly_ash_c_loss: float = 1.0
    wb_repl_interaction: float = 8.0
    hrwr_gain: float = 0.05
    binder_gain: float = 0.001
    ternary_synergy: float = 6.0
    coarse_dilution: float = 0.3
    t50_base: float = 1.2
    t50_repl: float = 5.0
    t50_slag: float = -1.5
    temp_rate: float = 0.05
    hill: float = 1.5
    sigma_obs: float = 0.5

    def s_max(self, mix: MixComposition) -> float:
        b = mix.binder
        repl = mix.scm_replacement
        value = (
            self.s0
            - self.wb_slope * (mix.wb - 0.3)
            + self.slag_gain * mix.slag / b
            - self.fly_ash_f_loss * mix.fly_ash_f / b
            - self.fly_ash_c_loss * mix.fly_ash_c / b
            + self.wb_repl_interaction * (mix.wb - 0.35) * repl
            + self.hrwr_gain * min(mix.hrwr, 10.0)
            + self.binder_gain * (b - 700.0)
            + self.ternary_synergy * (mix.slag / b) * (mix.fly_ash_c + mix.fly_ash_f) / b
        )
        coarse_frac = mix.coarse_agg / (mix.fine_agg + mix.coarse_agg) if mix.coarse_agg > 0 else 0.0
        return max(1.0, value * (1.0 - self.coarse_dilution * coarse_frac))

    def t50(self, mix: MixComposition) -> float:
        b = mix.binder
        base = self.t50_base + self.t50_repl * mix.scm_replacement + self.t50_slag * mix.slag / b
        return max(0.3, base) * math.exp(self.temp_rate * (21.0 - mix.curing_temp))

    def strength(self, mix: MixComposition, t):
        t = np.asarray(t, dtype=float)
        th = np.power(t, self.hill)
        out = self.s_max(mix) * th / (th + self.t50(mix) ** self.hill)
        return float(out) if out.ndim == 0 else out

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SyntheticConfig:
    oracle: SyntheticOracle = field(default_factory=SyntheticOracle)
    phase_sizes: tuple = PHASE_SIZES
    phase_extras: tuple = PHASE_EXTRAS
    replicates: int = 3
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "oracle": self.oracle.to_dict(),
            "phase_sizes": list(self.phase_sizes),
            "phase_extras": list(self.phase_extras),
            "replicates": self.replicates,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "SyntheticConfig":
        payload = dict(payload)
        oracle = SyntheticOracle(**payload.pop("oracle", {}))
        for key in ("phase_sizes", "phase_extras"):
            if key in payload:
                payload[key] = tuple(payload[key])
        return cls(oracle=oracle, **payload)


def sample_phase_mix(phase: int, rng: np.random.Generator, max_tries: int = 1000) -> MixComposition:
    ranges = PHASE_RANGES[phase]
    for _ in range(max_tries):
        binder = rng.uniform(*ranges["binder"])
        repl = rng.uniform(*ranges["replacement"])
        slag_share = rng.uniform(0.0, 1.0)
        fac_share = rng.uniform(0.0, 1.0)
        wb = rng.uniform(*ranges["wb"])
        hrwr = rng.uniform(*ranges["hrwr"])
        fc = ranges["fine_coarse"]
        fine_coarse = None if fc is None else rng.uniform(*fc)
        temp = rng.uniform(*ranges["curing_temp"])
        try:
            mix = proportion_mix(binder, repl, slag_share, fac_share, wb, hrwr, fine_coarse, temp)
        except DataError:
            continue
        # keep at least ~15% of the volume for aggregate
        if mix.fine_agg + mix.coarse_agg > 0.15 * 27 * 62.4 * 2.65:
            return mix
    raise DataError(f"could not sample a feasible phase {phase} mix")


def observe(
    oracle: SyntheticOracle,
    mix_id: str,
    mix: MixComposition,
    ages,
    rng: np.random.Generator,
    replicates: int = 3,
) -> list[StrengthObservation]:
    """Noisy replicate tests; the mean of ``replicates`` specimens has sd ``sigma_obs``."""
    out = []
    specimen_sd = oracle.sigma_obs * math.sqrt(replicates)
    for age in ages:
        truth = oracle.strength(mix, age)
        values = np.maximum(truth + specimen_sd * rng.standard_normal(replicates), 0.0)
        if oracle.sigma_obs == 0:
            # noiseless: report the oracle value itself, free of averaging round-off
            out.append(StrengthObservation(mix_id, float(age), float(truth), 0.0, replicates))
            continue
        sd = float(np.std(values, ddof=1)) if replicates > 1 else 0.0
        out.append(StrengthObservation(mix_id, float(age), float(np.mean(values)), sd, replicates))
    return out


def generate_synthetic(config: SyntheticConfig = SyntheticConfig()) -> Dataset:
    """Mortar ``M1..`` and concrete ``C1..`` mixes with phase tags and noisy strengths."""
    rng = np.random.default_rng(config.seed)
    mixes: dict[str, MixComposition] = {}
    phases: dict[str, int] = {}
    observations: list[StrengthObservation] = []
    n_mortar = n_concrete = 0
    for phase, (size, extra) in enumerate(zip(config.phase_sizes, config.phase_extras), start=1):
        for _ in range(size + extra):
            mix = sample_phase_mix(phase, rng)
            if mix.kind == "mortar":
                n_mortar += 1
                mix_id, ages = f"M{n_mortar}", MORTAR_AGES
            else:
                n_concrete += 1
                mix_id, ages = f"C{n_concrete}", AGE_GRID
            mixes[mix_id] = mix
            phases[mix_id] = phase
            observations += observe(config.oracle, mix_id, mix, ages, rng, config.replicates)
    return Dataset(mixes=mixes, observations=tuple(observations), phase_tags=phases)
