"""Mix and strength data: validation, csv round-trip, augmentation, splits.

Two flat tables carry a dataset:

``mixes.csv``
    ``mix_id,kind,cement,fly_ash_c,fly_ash_f,slag,water,fine_agg,coarse_agg,hrwr,curing_temp,phase``
``strengths.csv``
    ``mix_id,age_days,mean_ksi,std_ksi,n``

Masses are lb/yd^3, strengths ksi, ages days, temperatures degC. Lines that
start with ``#`` are comments and are skipped by the parsers.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np

CONSTITUENTS = (
    "cement",
    "fly_ash_c",
    "fly_ash_f",
    "slag",
    "water",
    "fine_agg",
    "coarse_agg",
    "hrwr",
)
BINDERS = ("cement", "fly_ash_c", "fly_ash_f", "slag")
FEATURES = CONSTITUENTS + ("curing_temp", "wb")
MIX_KINDS = ("mortar", "concrete")
AGE_GRID = (1.0, 3.0, 5.0, 14.0, 28.0)
MORTAR_AGES = (1.0, 3.0, 5.0, 28.0)
PHASES = ("I", "II", "III", "IV", "V", "VI")
MAX_WB = 1.5

MIX_COLUMNS = ("mix_id", "kind") + CONSTITUENTS + ("curing_temp", "phase")
STRENGTH_COLUMNS = ("mix_id", "age_days", "mean_ksi", "std_ksi", "n")

# Specific gravities for absolute-volume proportioning.
SPECIFIC_GRAVITY = {
    "cement": 3.15,
    "fly_ash_c": 2.65,
    "fly_ash_f": 2.35,
    "slag": 2.90,
    "water": 1.00,
    "fine_agg": 2.65,
    "coarse_agg": 2.70,
    "hrwr": 1.10,
}
WATER_LB_PER_FT3 = 62.4
YD3_FT3 = 27.0


class DataError(ValueError):
    """Invalid mix or strength data.

    ``row`` is the 1-based line number in the source table when known.
    """

    def __init__(self, message: str, row: int | None = None, field: str | None = None):
        self.row = row
        self.field = field
        where = f"row {row}: " if row is not None else ""
        super().__init__(where + message)


@dataclass(frozen=True)
class MixComposition:
    cement: float
    fly_ash_c: float
    fly_ash_f: float
    slag: float
    water: float
    fine_agg: float
    coarse_agg: float
    hrwr: float
    curing_temp: float = 22.0
    kind: str = "concrete"

    def __post_init__(self):
        for name in CONSTITUENTS + ("curing_temp",):
            value = getattr(self, name)
            if not isinstance(value, (int, float, np.floating, np.integer)) or not math.isfinite(value):
                raise DataError(f"{name} must be a finite number, got {value!r}", field=name)
            object.__setattr__(self, name, float(value))
        for name in CONSTITUENTS:
            if getattr(self, name) < 0:
                raise DataError(f"{name} ≥ 0 violated ({getattr(self, name)!r})", field=name)
        if self.kind not in MIX_KINDS:
            raise DataError(f"kind must be one of {MIX_KINDS}, got {self.kind!r}", field="kind")
        if self.binder <= 0:
            raise DataError("binder = cement + fly_ash_c + fly_ash_f + slag > 0 violated", field="cement")
        if not self.wb < MAX_WB:
            raise DataError(f"w/b = {self.wb:.4g} outside [0, {MAX_WB})", field="water")
        if self.kind == "concrete" and self.coarse_agg <= 0:
            raise DataError("concrete mix needs coarse_agg > 0", field="coarse_agg")
        if self.kind == "mortar" and self.coarse_agg != 0:
            raise DataError("mortar mix must have coarse_agg = 0", field="coarse_agg")

    @property
    def binder(self) -> float:
        return self.cement + self.fly_ash_c + self.fly_ash_f + self.slag

    @property
    def wb(self) -> float:
        return self.water / self.binder

    @property
    def scm_replacement(self) -> float:
        return (self.fly_ash_c + self.fly_ash_f + self.slag) / self.binder

    def masses(self) -> np.ndarray:
        return np.array([getattr(self, c) for c in CONSTITUENTS])

    def features(self) -> np.ndarray:
        """Raw (unscaled) feature vector in ``FEATURES`` order."""
        return np.append(self.masses(), [self.curing_temp, self.wb])

    def scaled(self, factor: float) -> "MixComposition":
        return replace(self, **{c: getattr(self, c) * factor for c in CONSTITUENTS})


@dataclass(frozen=True)
class StrengthObservation:
    mix_id: str
    age: float
    mean_strength: float
    std_dev: float = 0.0
    replicates: int = 1
    synthetic: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.age) and self.age >= 0):
            raise DataError(f"age must be ≥ 0, got {self.age!r}", field="age_days")
        if not (math.isfinite(self.mean_strength) and self.mean_strength >= 0):
            raise DataError(f"mean_ksi ≥ 0 violated ({self.mean_strength!r})", field="mean_ksi")
        if not (math.isfinite(self.std_dev) and self.std_dev >= 0):
            raise DataError(f"std_ksi ≥ 0 violated ({self.std_dev!r})", field="std_ksi")
        if self.replicates < 1:
            raise DataError(f"n ≥ 1 violated ({self.replicates!r})", field="n")


@dataclass(frozen=True)
class Dataset:
    """Immutable collection of mixes, their strength observations and phase tags."""

    mixes: Mapping[str, MixComposition]
    observations: tuple[StrengthObservation, ...] = ()
    phase_tags: Mapping[str, int] = field(default_factory=dict)
    synthetic_mixes: frozenset = frozenset()
    allow_replicates: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mixes", MappingProxyType(dict(self.mixes)))
        object.__setattr__(self, "phase_tags", MappingProxyType(dict(self.phase_tags)))
        object.__setattr__(self, "observations", tuple(self.observations))
        object.__setattr__(self, "synthetic_mixes", frozenset(self.synthetic_mixes))
        seen = set()
        for obs in self.observations:
            if obs.mix_id not in self.mixes:
                raise DataError(f"observation references unknown mix {obs.mix_id!r}", field="mix_id")
            key = (obs.mix_id, obs.age)
            if key in seen and not self.allow_replicates:
                raise DataError(f"duplicate observation for mix {obs.mix_id!r} at age {obs.age:g}")
            seen.add(key)
        for mix_id, phase in self.phase_tags.items():
            if mix_id not in self.mixes:
                raise DataError(f"phase tag for unknown mix {mix_id!r}", field="phase")
            if not 1 <= phase <= len(PHASES):
                raise DataError(f"phase {phase!r} outside I..VI", field="phase")

    def __len__(self) -> int:
        return len(self.observations)

    def mix_ids(self, kind: str | None = None, include_synthetic: bool = True) -> list[str]:
        return [
            k
            for k, m in self.mixes.items()
            if (kind is None or m.kind == kind) and (include_synthetic or k not in self.synthetic_mixes)
        ]

    def subset(self, mix_ids: Iterable[str]) -> "Dataset":
        wanted = set(mix_ids)
        keep = [k for k in self.mixes if k in wanted]
        keep_set = set(keep)
        return Dataset(
            mixes={k: self.mixes[k] for k in keep},
            observations=tuple(o for o in self.observations if o.mix_id in keep_set),
            phase_tags={k: v for k, v in self.phase_tags.items() if k in keep_set},
            synthetic_mixes=self.synthetic_mixes & keep_set,
            allow_replicates=self.allow_replicates,
        )

    def observations_for(self, mix_id: str) -> list[StrengthObservation]:
        return [o for o in self.observations if o.mix_id == mix_id]

    def merge(self, other: "Dataset") -> "Dataset":
        clash = set(self.mixes) & set(other.mixes)
        if clash:
            raise DataError(f"mix ids already present: {sorted(clash)[:5]}")
        return Dataset(
            mixes={**self.mixes, **other.mixes},
            observations=self.observations + other.observations,
            phase_tags={**self.phase_tags, **other.phase_tags},
            synthetic_mixes=self.synthetic_mixes | other.synthetic_mixes,
            allow_replicates=self.allow_replicates or other.allow_replicates,
        )


def parse_phase(text: str) -> int | None:
    text = text.strip()
    if not text:
        return None
    upper = text.upper()
    if upper.startswith("P") and upper[1:].strip() in PHASES:
        upper = upper[1:].strip()
    if upper in PHASES:
        return PHASES.index(upper) + 1
    try:
        value = int(text)
    except ValueError:
        raise DataError(f"unrecognised phase {text!r}", field="phase") from None
    if not 1 <= value <= len(PHASES):
        raise DataError(f"phase {value} outside I..VI", field="phase")
    return value


def read_table(text: str | bytes, columns: Sequence[str]):
    """Yield ``(line_number, row_dict)`` for a delimited table, checking the header."""
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    lines = [(i + 1, line) for i, line in enumerate(text.splitlines()) if line.strip() and not line.lstrip().startswith("#")]
    if not lines:
        raise DataError("empty table")
    header_line, header_text = lines[0]
    header = [h.strip() for h in next(csv.reader([header_text]))]
    missing = [c for c in columns if c not in header]
    if missing:
        raise DataError(f"missing column(s): {', '.join(missing)}", row=header_line)
    for lineno, line in lines[1:]:
        values = next(csv.reader([line]))
        if len(values) != len(header):
            raise DataError(f"expected {len(header)} cells, got {len(values)}", row=lineno)
        yield lineno, dict(zip(header, (v.strip() for v in values)))


def _number(row: dict, name: str, lineno: int) -> float:
    try:
        value = float(row[name])
    except ValueError:
        raise DataError(f"non-numeric value {row[name]!r} in {name}", row=lineno, field=name) from None
    if not math.isfinite(value):
        raise DataError(f"non-finite value in {name}", row=lineno, field=name)
    return value


def parse_mix_table(
    mixes_text: str | bytes,
    strengths_text: str | bytes = "",
    *,
    strict_ages: bool = True,
    allow_replicates: bool = False,
) -> Dataset:
    """Parse and validate the mixes/strengths tables into a :class:`Dataset`.

    Errors carry the offending line number and field. With ``strict_ages``
    every observation age must be on the 1/3/5/14/28-day test grid.
    """
    mixes: dict[str, MixComposition] = {}
    phases: dict[str, int] = {}
    for lineno, row in read_table(mixes_text, MIX_COLUMNS):
        mix_id = row["mix_id"]
        if not mix_id:
            raise DataError("empty mix_id", row=lineno, field="mix_id")
        if mix_id in mixes:
            raise DataError(f"duplicate mix_id {mix_id!r}", row=lineno, field="mix_id")
        values = {name: _number(row, name, lineno) for name in CONSTITUENTS + ("curing_temp",)}
        try:
            mixes[mix_id] = MixComposition(**values, kind=row["kind"].lower())
            phase = parse_phase(row["phase"])
        except DataError as err:
            raise DataError(str(err), row=lineno, field=err.field) from None
        if phase is not None:
            phases[mix_id] = phase

    observations = []
    if strengths_text:
        seen = set()
        for lineno, row in read_table(strengths_text, STRENGTH_COLUMNS):
            mix_id = row["mix_id"]
            if mix_id not in mixes:
                raise DataError(f"unknown mix_id {mix_id!r}", row=lineno, field="mix_id")
            age = _number(row, "age_days", lineno)
            if strict_ages and age not in AGE_GRID:
                raise DataError(f"age {age:g} not on the test grid {AGE_GRID}", row=lineno, field="age_days")
            if age <= 0:
                raise DataError("age_days > 0 violated", row=lineno, field="age_days")
            n = _number(row, "n", lineno)
            if n != int(n):
                raise DataError(f"n must be an integer, got {row['n']!r}", row=lineno, field="n")
            if (mix_id, age) in seen and not allow_replicates:
                raise DataError(f"duplicate observation for {mix_id!r} at {age:g} d", row=lineno)
            seen.add((mix_id, age))
            try:
                observations.append(
                    StrengthObservation(
                        mix_id=mix_id,
                        age=age,
                        mean_strength=_number(row, "mean_ksi", lineno),
                        std_dev=_number(row, "std_ksi", lineno),
                        replicates=int(n),
                    )
                )
            except DataError as err:
                raise DataError(str(err), row=lineno, field=err.field) from None
    return Dataset(mixes=mixes, observations=tuple(observations), phase_tags=phases, allow_replicates=allow_replicates)


def format_float(x: float) -> str:
    return repr(float(x))


def mixes_to_csv(
    mixes: Mapping[str, MixComposition],
    phase_tags: Mapping[str, int] | None = None,
    extra_columns: Mapping[str, Mapping[str, str]] | None = None,
    comments: Sequence[str] = (),
) -> str:
    """Serialize mixes to the mixes.csv schema.

    ``extra_columns`` maps column name -> {mix_id: cell} and is appended after
    the standard columns.
    """
    phase_tags = phase_tags or {}
    extra_columns = extra_columns or {}
    buf = io.StringIO()
    for line in comments:
        buf.write(f"# {line}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(MIX_COLUMNS) + list(extra_columns))
    for mix_id, mix in mixes.items():
        phase = phase_tags.get(mix_id)
        row = [mix_id, mix.kind]
        row += [format_float(getattr(mix, c)) for c in CONSTITUENTS + ("curing_temp",)]
        row.append(PHASES[phase - 1] if phase else "")
        row += [extra_columns[col].get(mix_id, "") for col in extra_columns]
        writer.writerow(row)
    return buf.getvalue()


def strengths_to_csv(observations: Iterable[StrengthObservation], comments: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    for line in comments:
        buf.write(f"# {line}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(STRENGTH_COLUMNS)
    for o in observations:
        writer.writerow([o.mix_id, format_float(o.age), format_float(o.mean_strength), format_float(o.std_dev), o.replicates])
    return buf.getvalue()


def serialize(d: Dataset, comments: Sequence[str] = ()) -> tuple[str, str]:
    """Return ``(mixes_csv, strengths_csv)`` for the real (non-synthetic) part of ``d``."""
    real = {k: m for k, m in d.mixes.items() if k not in d.synthetic_mixes}
    obs = [o for o in d.observations if not o.synthetic]
    return mixes_to_csv(real, d.phase_tags, comments=comments), strengths_to_csv(obs, comments=comments)


def feature_matrix(mixes: Iterable[MixComposition]) -> np.ndarray:
    rows = [m.features() for m in mixes]
    return np.array(rows, dtype=float).reshape(len(rows), len(FEATURES))


@dataclass(frozen=True)
class FeatureScaler:
    """Per-feature min-max scaling to [0, 1].

    Features that are constant in the fitted data map to 0 and keep unit span.
    """

    lower: np.ndarray
    upper: np.ndarray

    @classmethod
    def fit(cls, mixes: Iterable[MixComposition]) -> "FeatureScaler":
        F = feature_matrix(list(mixes))
        if len(F) == 0:
            raise DataError("cannot fit a scaler on zero mixes")
        return cls(lower=F.min(axis=0), upper=F.max(axis=0))

    @property
    def span(self) -> np.ndarray:
        span = self.upper - self.lower
        return np.where(span > 0, span, 1.0)

    def transform(self, F: np.ndarray) -> np.ndarray:
        return (np.asarray(F, dtype=float) - self.lower) / self.span

    def inverse_transform(self, Z: np.ndarray) -> np.ndarray:
        return np.asarray(Z, dtype=float) * self.span + self.lower

    def to_dict(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}

    @classmethod
    def from_dict(cls, payload: Mapping) -> "FeatureScaler":
        return cls(lower=np.array(payload["lower"], dtype=float), upper=np.array(payload["upper"], dtype=float))


def absolute_volume_ft3(mix: MixComposition) -> float:
    """Solid + liquid volume of the batch in ft^3 (air excluded)."""
    return sum(getattr(mix, c) / (SPECIFIC_GRAVITY[c] * WATER_LB_PER_FT3) for c in CONSTITUENTS)


def augment_zero_strength(d: Dataset, n_virtual: int | None = None, seed: int = 0) -> Dataset:
    """Add zero-strength observations at age 0.

    One observation per observed mix, plus ``n_virtual`` compositions drawn
    uniformly inside the per-constituent bounds of the observed mixes
    (default: one per observed mix). All added rows are tagged synthetic.
    """
    observed = [k for k in d.mixes if k not in d.synthetic_mixes and any(o.mix_id == k for o in d.observations)]
    if not observed:
        raise DataError("cannot augment an empty dataset")
    if any(o.age == 0 for o in d.observations):
        raise DataError("dataset already contains age-0 observations")
    if n_virtual is None:
        n_virtual = len(observed)
    if n_virtual < 0:
        raise DataError("n_virtual must be ≥ 0")

    zero_obs = [StrengthObservation(k, 0.0, 0.0, synthetic=True) for k in observed]

    columns = CONSTITUENTS + ("curing_temp",)
    raw = np.array([[getattr(d.mixes[k], c) for c in columns] for k in observed])
    lo, hi = raw.min(axis=0), raw.max(axis=0)
    rng = np.random.default_rng(seed)
    virtual: dict[str, MixComposition] = {}
    tries = 0
    while len(virtual) < n_virtual:
        tries += 1
        if tries > 1000 * (n_virtual + 1):
            raise DataError("could not draw valid virtual compositions inside the data bounds")
        values = dict(zip(columns, rng.uniform(lo, hi)))
        values["kind"] = "concrete" if values["coarse_agg"] > 0 else "mortar"
        try:
            mix = MixComposition(**values)
        except DataError:
            continue
        mix_id = f"~virtual-{len(virtual):04d}"
        while mix_id in d.mixes:
            mix_id = "~" + mix_id
        virtual[mix_id] = mix

    last_phase = max(d.phase_tags.values(), default=None)
    tags = dict(d.phase_tags)
    if last_phase is not None:
        tags.update({k: last_phase for k in virtual})
    return Dataset(
        mixes={**d.mixes, **virtual},
        observations=d.observations
        + tuple(zero_obs)
        + tuple(StrengthObservation(k, 0.0, 0.0, synthetic=True) for k in virtual),
        phase_tags=tags,
        synthetic_mixes=d.synthetic_mixes | set(virtual),
        allow_replicates=d.allow_replicates,
    )


def split_holdout(d: Dataset, n_holdout_mixes: int, kind: str = "concrete", seed: int = 0) -> tuple[Dataset, Dataset]:
    """Hold out whole mixes of one kind; returns ``(train, test)``."""
    candidates = sorted(d.mix_ids(kind, include_synthetic=False))
    if n_holdout_mixes < 0:
        raise DataError("n_holdout_mixes must be ≥ 0")
    if len(candidates) < n_holdout_mixes:
        raise DataError(f"only {len(candidates)} {kind} mixes available, {n_holdout_mixes} requested")
    rng = np.random.default_rng(seed)
    test_ids = set(rng.choice(candidates, size=n_holdout_mixes, replace=False).tolist()) if n_holdout_mixes else set()
    train_ids = [k for k in d.mixes if k not in test_ids]
    return d.subset(train_ids), d.subset(test_ids)


def phase_schedule(d: Dataset, exclude: Iterable[str] = ()) -> list[Dataset]:
    """Cumulative training sets for phases I..VI, minus the ``exclude`` mix ids."""
    excluded = set(exclude)
    untagged = [k for k in d.mixes if k not in d.phase_tags and k not in excluded]
    if untagged:
        raise DataError(f"mixes without a phase tag: {untagged[:5]}", field="phase")
    return [
        d.subset(k for k, p in d.phase_tags.items() if p <= phase and k not in excluded)
        for phase in range(1, len(PHASES) + 1)
    ]

