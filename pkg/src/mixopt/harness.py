"""Run orchestration behind the command-line interface.

Every command takes a :class:`RunConfig` and writes plain CSV tables plus a
JSON summary under ``config.out``. Each file carries the configuration hash
and seed (CSV comment lines, JSON keys), and files are write-once: rerunning
the same configuration reproduces identical bytes, while a different result
for an existing path is refused.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import (
    PHASES,
    AGE_GRID,
    DataError,
    Dataset,
    MixComposition,
    augment_zero_strength,
    format_float,
    parse_mix_table,
    phase_schedule,
    serialize,
    split_holdout,
)
from .gp import DEFAULT_DELTA, FitError, GpModel, KernelHyperparams, fit_dataset, model_to_text, predict_strength_curve
from .gwp import EmissionFactors, convert_volume_basis, example_factors, gwp, load_factors
from .inverse import InverseQuery, bin_sweep_report, generate_candidates
from .metrics import EvalTable, evaluate_by_age, parity_rows
from .mobo import CandidateBatch, DesignSpace, hypervolume, optimize_acquisition, pareto_front
from .synthetic import SyntheticConfig, SyntheticOracle, generate_synthetic, observe

log = logging.getLogger("mixopt")


class ConfigError(ValueError):
    pass


class ReportConflictError(ConfigError):
    """An output file exists with different content."""


@dataclass(frozen=True)
class SplitOptions:
    n_holdout: int = 12
    kind: str = "concrete"
    test_seeds: tuple[int, ...] = (1, 2, 3, 4, 5)


@dataclass(frozen=True)
class FitOptions:
    restarts: int = 1
    max_iters: int = 100
    jitter: float = 1e-8
    tol: float = 1e-5
    # start each phase from the previous phase's hyperparameters
    warm_start: bool = True


@dataclass(frozen=True)
class BoOptions:
    # reference point: minimum 28-day strength (ksi), maximum GWP (kg CO2e/yd^3)
    ref_strength_ksi: float = 2.0
    ref_gwp_yd3: float = 550.0
    q: int = 4
    n_samples: int = 2**14
    tau: float = 1e-3
    restarts: int = 4
    raw_samples: int = 256
    max_evals: int = 2000
    age: float = 28.0
    rounds: int = 5
    # synthetic campaign: phases used as the starting data
    initial_phases: int = 4

    @property
    def reference(self) -> np.ndarray:
        """Reference point in canonical (maximized) form."""
        return np.array([self.ref_strength_ksi, -self.ref_gwp_yd3])


_SECTIONS = {"split": SplitOptions, "fit": FitOptions, "bo": BoOptions}


@dataclass(frozen=True)
class RunConfig:
    mixes: str | None = None
    strengths: str | None = None
    factors: str | None = None
    seed: int = 0
    delta_days: float = DEFAULT_DELTA
    n_virtual: int | None = None
    split: SplitOptions = field(default_factory=SplitOptions)
    fit: FitOptions = field(default_factory=FitOptions)
    bo: BoOptions = field(default_factory=BoOptions)
    inverse: InverseQuery = field(default_factory=InverseQuery)
    inverse_budget: int = 20000
    design: DesignSpace = field(default_factory=DesignSpace)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    out: str = "runs"

    def to_dict(self) -> dict:
        payload = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name in _SECTIONS:
                value = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(value).items()}
            elif hasattr(value, "to_dict"):
                value = value.to_dict()
            payload[f.name] = value
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        try:
            for key, value in payload.items():
                if key in _SECTIONS:
                    section = _SECTIONS[key]
                    bad = set(value) - {f.name for f in fields(section)}
                    if bad:
                        raise ConfigError(f"unknown keys in {key}: {sorted(bad)}")
                    value = section(**{k: tuple(v) if isinstance(v, list) else v for k, v in value.items()})
                elif key == "inverse":
                    value = InverseQuery.from_dict(value)
                elif key == "design":
                    value = DesignSpace.from_dict(value)
                elif key == "synthetic":
                    value = SyntheticConfig.from_dict(value)
                kwargs[key] = value
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid config: {exc}") from exc

    @property
    def hash(self) -> str:
        """Digest of everything except the output directory."""
        payload = self.to_dict()
        payload.pop("out")
        text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    def with_overrides(self, **changes) -> "RunConfig":
        return replace(self, **{k: v for k, v in changes.items() if v is not None})


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigError("config must be a JSON object")
    return RunConfig.from_dict(payload)


class RunDir:
    """Write-once report files tagged with the config hash and seed."""

    def __init__(self, config: RunConfig):
        self.root = Path(config.out)
        self.config = config
        self.written: list[Path] = []

    @property
    def stamp(self) -> list[str]:
        return [f"config_hash={self.config.hash}", f"seed={self.config.seed}"]

    def write(self, relpath: str, text: str) -> Path:
        path = self.root / relpath
        if path.exists():
            if path.read_text(encoding="utf-8") != text:
                raise ReportConflictError(f"{path} exists with different content; use a new --out directory")
        else:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text, encoding="utf-8")
        self.written.append(path)
        return path

    def write_csv(self, relpath: str, text: str) -> Path:
        return self.write(relpath, "".join(f"# {line}\n" for line in self.stamp) + text)

    def write_json(self, relpath: str, payload: dict) -> Path:
        # the output directory is not part of the run's identity
        config = {k: v for k, v in self.config.to_dict().items() if k != "out"}
        body = {"config_hash": self.config.hash, "seed": self.config.seed, "config": config, **payload}
        return self.write(relpath, json.dumps(body, indent=2, sort_keys=True) + "\n")


def _read(path: str, what: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {what} file {path}: {exc}") from exc


def load_dataset(config: RunConfig) -> Dataset:
    """The configured dataset, or the synthetic one when no mixes file is given."""
    if config.mixes is None:
        log.info("no mixes file configured; using the synthetic dataset")
        return generate_synthetic(config.synthetic)
    strengths = _read(config.strengths, "strengths") if config.strengths else ""
    return parse_mix_table(_read(config.mixes, "mixes"), strengths)


def load_emission_factors(config: RunConfig) -> EmissionFactors:
    if config.factors is None:
        log.info("no factor table configured; using the bundled EXAMPLE factors")
        return example_factors()
    return load_factors(_read(config.factors, "factors"))


def _csv(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_float(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def fit_model(config: RunConfig, train: Dataset, seed: int | None = None, init: KernelHyperparams | None = None) -> GpModel:
    """Augment with zero-strength rows and fit with the configured options."""
    seed = config.seed if seed is None else seed
    aug = augment_zero_strength(train, n_virtual=config.n_virtual, seed=seed)
    opts = config.fit
    return fit_dataset(
        aug,
        delta=config.delta_days,
        init=init,
        restarts=opts.restarts,
        max_iters=opts.max_iters,
        jitter=opts.jitter,
        tol=opts.tol,
        seed=seed,
    )


# ---------------------------------------------------------------- ingest / synthetic


def cmd_ingest(config: RunConfig) -> Dataset:
    """Validate the configured tables and write normalized copies."""
    if config.mixes is None:
        raise ConfigError("ingest needs a mixes file (config 'mixes')")
    d = load_dataset(config)
    run = RunDir(config)
    mixes_csv, strengths_csv = serialize(d, comments=run.stamp)
    run.write("ingest/mixes.csv", mixes_csv)
    run.write("ingest/strengths.csv", strengths_csv)
    counts = {kind: len(d.mix_ids(kind)) for kind in ("mortar", "concrete")}
    phases = {PHASES[p - 1]: sum(1 for v in d.phase_tags.values() if v == p) for p in range(1, 7)}
    run.write_json("ingest/summary.json", {"mixes": counts, "phases": phases, "observations": len(d.observations)})
    return d


def cmd_generate_synthetic(config: RunConfig) -> Dataset:
    d = generate_synthetic(config.synthetic)
    run = RunDir(config)
    mixes_csv, strengths_csv = serialize(d, comments=run.stamp)
    run.write("mixes.csv", mixes_csv)
    run.write("strengths.csv", strengths_csv)
    run.write_json("synthetic.json", {"mixes": len(d.mixes), "observations": len(d.observations)})
    return d


# ---------------------------------------------------------------- phase-wise training


@dataclass
class PhaseReport:
    seed: int
    phase: int
    n_train_mixes: int
    table: EvalTable
    parity: list
    hyper: KernelHyperparams
    lml: float
    stopped: str


def _parity_csv(rows) -> str:
    return _csv(["mix_id", "age_days", "measured_ksi", "predicted_ksi", "sigma_ksi"], rows)


def train_phasewise(config: RunConfig, d: Dataset | None = None, write: bool = True) -> list[PhaseReport]:
    """Fit and evaluate every cumulative phase for every testing-set seed.

    Held-out mixes are fixed per seed before the phases are assembled.
    """
    d = load_dataset(config) if d is None else d
    run = RunDir(config) if write else None
    reports: list[PhaseReport] = []
    for seed in config.split.test_seeds:
        train, test = split_holdout(d, config.split.n_holdout, config.split.kind, seed)
        if not test.observations:
            raise DataError(f"testing set {seed} has no observations")
        init = None
        for phase, phase_data in enumerate(phase_schedule(train), start=1):
            if not phase_data.mixes:
                raise DataError(f"phase {PHASES[phase - 1]} has no training mixes (seed {seed})")
            try:
                model = fit_model(config, phase_data, seed=seed, init=init)
            except (DataError, FitError) as exc:
                raise type(exc)(f"testing set {seed}, phase {PHASES[phase - 1]}: {exc}") from exc
            if config.fit.warm_start:
                init = model.hyper
            rows = sorted(parity_rows(model, test))
            table = evaluate_by_age(model, test)
            reports.append(PhaseReport(seed, phase, len(phase_data.mixes), table, rows, model.hyper, model.lml, model.fit_info.get("stopped", "")))
            if run:
                stem = f"phasewise/seed{seed}/phase{PHASES[phase - 1]}"
                run.write_csv(f"{stem}_parity.csv", _parity_csv(rows))
                run.write_csv(f"{stem}_eval.csv", table.to_csv())
            log.info("seed %d phase %s: R2=%s RMSE=%s", seed, PHASES[phase - 1], table.pooled.r2, table.pooled.rmse)
    if run:
        run.write_csv("phasewise/trajectory.csv", trajectory_csv(reports))
        run.write_csv("phasewise/final_by_age.csv", final_by_age_csv(reports))
        run.write_json("phasewise/summary.json", phasewise_summary(reports))
    return reports


def trajectory_csv(reports: Sequence[PhaseReport]) -> str:
    rows = [
        (r.seed, PHASES[r.phase - 1], r.n_train_mixes, r.table.pooled.n, _num(r.table.pooled.r2), _num(r.table.pooled.rmse))
        for r in reports
    ]
    return _csv(["seed", "phase", "n_train_mixes", "n_test", "r2", "rmse_ksi"], rows)


def _num(x):
    return "undefined" if x is None else float(x)


def final_by_age_csv(reports: Sequence[PhaseReport]) -> str:
    """Last-phase R² and RMSE per age: mean and sample sd across testing sets."""
    last = max(r.phase for r in reports)
    tables = [r.table for r in reports if r.phase == last]
    rows = []
    for key in [f"{a:g}" for a in AGE_GRID] + ["all"]:
        r2 = [t[key].r2 for t in tables if t[key].r2 is not None]
        err = [t[key].rmse for t in tables if t[key].rmse is not None]
        rows.append((key, len(tables), *_mean_sd(r2), *_mean_sd(err)))
    return _csv(["age", "n_sets", "r2_mean", "r2_sd", "rmse_mean_ksi", "rmse_sd_ksi"], rows)


def _mean_sd(values) -> tuple:
    if not values:
        return ("undefined", "undefined")
    sd = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    return (float(np.mean(values)), sd)


def phasewise_summary(reports: Sequence[PhaseReport]) -> dict:
    last = max(r.phase for r in reports)
    final = [r for r in reports if r.phase == last]
    r2 = [r.table.pooled.r2 for r in final if r.table.pooled.r2 is not None]
    err = [r.table.pooled.rmse for r in final]
    return {
        "n_reports": len(reports),
        "final_phase": PHASES[last - 1],
        "final_r2_mean": float(np.mean(r2)) if r2 else None,
        "final_rmse_mean_ksi": float(np.mean(err)),
        "fits": [
            {"seed": r.seed, "phase": PHASES[r.phase - 1], "lml": r.lml, "stopped": r.stopped, "hyper": r.hyper.to_dict()}
            for r in reports
        ],
    }


# ---------------------------------------------------------------- predict / evaluate / gwp


def cmd_predict(config: RunConfig, d: Dataset, queries: Dataset, ages: Sequence[float] = AGE_GRID, k: float = 2.0) -> str:
    """Fit on ``d`` and write mean and ±kσ bands for each query mix and age."""
    model = fit_model(config, d)
    rows = []
    for mix_id, mix in queries.mixes.items():
        for age, mean, lower, upper in predict_strength_curve(model, mix, ages, k=k):
            rows.append((mix_id, float(age), mean, lower, upper))
    text = _csv(["mix_id", "age_days", "mean_ksi", "lower_ksi", "upper_ksi"], rows)
    run = RunDir(config)
    run.write_csv("predict/predictions.csv", text)
    run.write("predict/model.txt", model_to_text(model))
    return text


def cmd_evaluate(config: RunConfig, d: Dataset) -> EvalTable:
    """Hold out mixes with ``config.seed``, fit on the rest, evaluate by age."""
    train, test = split_holdout(d, config.split.n_holdout, config.split.kind, config.seed)
    model = fit_model(config, train)
    table = evaluate_by_age(model, test)
    run = RunDir(config)
    run.write_csv("evaluate/eval.csv", table.to_csv())
    run.write_csv("evaluate/parity.csv", _parity_csv(sorted(parity_rows(model, test))))
    return table


def cmd_gwp(config: RunConfig, d: Dataset) -> str:
    factors = load_emission_factors(config)
    rows = []
    for mix_id, mix in d.mixes.items():
        res = gwp(mix, factors)
        stages = res.by_stage()
        rows.append((mix_id, mix.kind, res.total, float(convert_volume_basis(res.total)), stages["material"], stages["transport"], stages["production"]))
    text = _csv(["mix_id", "kind", "gwp_yd3", "gwp_m3", "material_yd3", "transport_yd3", "production_yd3"], rows)
    RunDir(config).write_csv("gwp/gwp.csv", text)
    return text


# ---------------------------------------------------------------- BO suggest and campaign


def observed_objectives(d: Dataset, factors: EmissionFactors, age: float = 28.0) -> tuple[list[str], np.ndarray]:
    """Canonical ``(strength, -GWP)`` for concrete mixes with a real observation at ``age``."""
    ids, points = [], []
    for o in d.observations:
        if o.synthetic or o.age != age:
            continue
        mix = d.mixes[o.mix_id]
        if mix.kind != "concrete":
            continue
        ids.append(o.mix_id)
        points.append((o.mean_strength, -gwp(mix, factors).total))
    return ids, np.array(points, dtype=float).reshape(-1, 2)


@dataclass
class SuggestResult:
    batch: CandidateBatch
    pareto: np.ndarray
    hv_before: float
    hv_after_predicted: float


def suggest(config: RunConfig, d: Dataset, factors: EmissionFactors, seed: int, init: KernelHyperparams | None = None):
    """Fit on ``d`` and choose a batch; returns ``(SuggestResult, model)``."""
    model = fit_model(config, d, seed=seed, init=init)
    opts = config.bo
    _, Y = observed_objectives(d, factors, opts.age)
    if len(Y) == 0:
        raise DataError(f"no concrete mixes observed at {opts.age:g} days to form a Pareto set")
    P = pareto_front(Y)
    r = opts.reference
    batch = optimize_acquisition(
        model,
        lambda mix: gwp(mix, factors).total,
        P,
        r,
        config.design,
        q=opts.q,
        restarts=opts.restarts,
        seed=seed,
        raw_samples=opts.raw_samples,
        n_samples=opts.n_samples,
        tau=opts.tau,
        age=opts.age,
        max_evals=opts.max_evals,
    )
    hv_before = hypervolume(P, r)
    hv_after = hypervolume(np.vstack([P, batch.predicted_mean]), r)
    return SuggestResult(batch, P, hv_before, hv_after), model


def _suggest_log(res: SuggestResult, reference) -> dict:
    return {
        "acquisition_log": res.batch.acquisition,
        "pareto_set": res.pareto.tolist(),
        "reference_point": list(map(float, reference)),
        "hv_before": res.hv_before,
        "hv_after_predicted": res.hv_after_predicted,
        "acquisition_evaluations": res.batch.n_evals,
        "predicted_mean": res.batch.predicted_mean.tolist(),
        "predicted_var": res.batch.predicted_var.tolist(),
    }


def cmd_suggest(config: RunConfig, d: Dataset, iteration: int = 1) -> SuggestResult:
    factors = load_emission_factors(config)
    res, _ = suggest(config, d, factors, config.seed)
    run = RunDir(config)
    run.write("suggest" + f"/iter{iteration}_batch.csv", res.batch.to_csv(config.seed, iteration, comments=run.stamp))
    run.write_json(f"suggest/iter{iteration}_log.json", _suggest_log(res, config.bo.reference))
    return res


def true_objectives(oracle: SyntheticOracle, mixes: Sequence[MixComposition], factors: EmissionFactors, age: float = 28.0) -> np.ndarray:
    """Noise-free canonical objectives from the synthetic oracle."""
    return np.array([(oracle.strength(m, age), -gwp(m, factors).total) for m in mixes], dtype=float).reshape(-1, 2)


@dataclass
class CampaignResult:
    seed: int
    rounds: list[dict]
    evaluated: list[MixComposition]
    hv_true: float

    @property
    def hv_trajectory(self) -> list[float]:
        return [r["hv_observed"] for r in self.rounds]


def run_bo_campaign(config: RunConfig, seed: int, d0: Dataset | None = None, write: bool = True) -> CampaignResult:
    """Closed-loop rehearsal: suggest, test against the synthetic oracle, repeat.

    Starts from the synthetic phases up to ``bo.initial_phases``. Each round
    fits the GP, picks ``q`` mixes, "casts" them with oracle noise and adds
    them to the data. The trajectory logs the observed Pareto set and its
    hypervolume after every round.
    """
    opts = config.bo
    factors = load_emission_factors(config)
    oracle = config.synthetic.oracle
    if d0 is None:
        full = generate_synthetic(config.synthetic)
        d0 = phase_schedule(full)[opts.initial_phases - 1]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    run = RunDir(config) if write else None
    d, init = d0, None
    rounds, evaluated = [], []
    for k in range(1, opts.rounds + 1):
        res, model = suggest(config, d, factors, seed * 1000 + k, init=init)
        init = model.hyper
        new_mixes, new_obs, tags = {}, [], {}
        for i, mix in enumerate(res.batch.mixes):
            mix_id = f"BO{k}-{i + 1}"
            new_mixes[mix_id] = mix
            tags[mix_id] = max(d.phase_tags.values(), default=1)
            new_obs += observe(oracle, mix_id, mix, AGE_GRID, rng, config.synthetic.replicates)
        d = d.merge(Dataset(new_mixes, tuple(new_obs), tags))
        evaluated += res.batch.mixes
        _, Y = observed_objectives(d, factors, opts.age)
        P = pareto_front(Y)
        entry = {
            "round": k,
            **_suggest_log(res, opts.reference),
            "pareto_set_observed": P.tolist(),
            "hv_observed": hypervolume(P, opts.reference),
        }
        rounds.append(entry)
        if run:
            run.write(f"campaign/seed{seed}/round{k}_batch.csv", res.batch.to_csv(seed, k, comments=run.stamp))
            run.write_json(f"campaign/seed{seed}/round{k}_log.json", entry)
    hv_true = hypervolume(pareto_front(true_objectives(oracle, evaluated, factors, opts.age)), opts.reference)
    result = CampaignResult(seed, rounds, evaluated, hv_true)
    if run:
        run.write_csv(
            f"campaign/seed{seed}/hv_trajectory.csv",
            _csv(["round", "n_observed", "hv_observed", "hv_before", "hv_after_predicted"], [(r["round"], len(r["pareto_set_observed"]), r["hv_observed"], r["hv_before"], r["hv_after_predicted"]) for r in rounds]),
        )
    return result


def random_baseline(config: RunConfig, seed: int, budget: int | None = None) -> tuple[list[MixComposition], float]:
    """Uniformly random designs at the campaign's evaluation budget; true-oracle HV."""
    opts = config.bo
    budget = opts.q * opts.rounds if budget is None else budget
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    mixes = config.design.mixes(rng.random((budget, config.design.dim)))
    Y = true_objectives(config.synthetic.oracle, mixes, load_emission_factors(config), opts.age)
    return mixes, hypervolume(pareto_front(Y), opts.reference)


# ---------------------------------------------------------------- inverse design


def cmd_inverse(config: RunConfig, d: Dataset):
    model = fit_model(config, d)
    factors = load_emission_factors(config)
    result = generate_candidates(model, factors, config.design, config.inverse, seed=config.seed, budget=config.inverse_budget)
    run = RunDir(config)
    run.write("inverse/candidates.csv", result.to_csv(comments=run.stamp))
    run.write_csv("inverse/report.csv", bin_sweep_report(result))
    shortfalls = [
        {"threshold_psi": c.threshold_psi, "bin_lo": c.bin_lo, "bin_hi": c.bin_hi, "found": len(c.mixes)}
        for c in result
        if c.shortfall
    ]
    run.write_json("inverse/summary.json", {"cells": len(result.cells), "shortfalls": shortfalls})
    return result, model
