import csv
import io

import numpy as np
import pytest

from mixopt.dataset import augment_zero_strength, parse_mix_table, phase_schedule, read_table
from mixopt.gp import fit_dataset
from mixopt.gwp import example_factors
from mixopt.inverse import (
    REPORT_PARAMETERS,
    SHORTFALL,
    InverseQuery,
    InverseResult,
    bin_stream,
    bin_sweep_report,
    check_candidate,
    design_gwp_m3,
    generate_candidates,
    gwp_bins,
)
from mixopt.mobo import DesignSpace
from mixopt.synthetic import SyntheticConfig, generate_synthetic

BUDGET = 2000


class ConstantModel:
    def __init__(self, value=7.0):
        self.value = value

    def predict_features(self, F, age):
        return np.full(len(F), self.value), np.zeros(len(F))


class LinearModel:
    """Mean falls with w/b and rises with binder; variance grows with replacement."""

    def predict_features(self, F, age):
        binder = F[:, :4].sum(axis=1)
        wb = F[:, 9]
        repl = F[:, 1:4].sum(axis=1) / binder
        mean = 12.0 - 14.0 * wb + 0.002 * binder - 0.02 * (28 - age)
        return mean, 0.05 + 0.5 * repl


@pytest.fixture(scope="module")
def space():
    return DesignSpace()


@pytest.fixture(scope="module")
def factors():
    return example_factors()


def run(model, space, factors, **query):
    q = InverseQuery(**query)
    return generate_candidates(model, factors, space, q, seed=3, budget=BUDGET)


def test_query_validation():
    with pytest.raises(ValueError):
        InverseQuery(strength_thresholds=(0.0,))
    with pytest.raises(ValueError):
        InverseQuery(gwp_bin_width=0)
    with pytest.raises(ValueError):
        InverseQuery(confidence_k=-1)
    q = InverseQuery(strength_thresholds=[5000, 6000], gwp_range=(100, 300))
    assert InverseQuery.from_dict(q.to_dict()) == q
    assert InverseQuery().ages == (28.0,) and InverseQuery().candidates_per_bin == 50


def test_bins_cover_reachable_range(space, factors):
    bins = gwp_bins(space, factors, 50.0)
    assert all(hi - lo == 50.0 and lo % 50 == 0 for lo, hi in bins)
    U = space.sobol(4096, seed=0)
    g = design_gwp_m3(space, factors, space.from_unit(U))
    assert bins[0][0] <= g.min() and g.max() < bins[-1][1]
    assert gwp_bins(space, factors, 50.0, gwp_range=(120, 260)) == [(100.0, 150.0), (150.0, 200.0), (200.0, 250.0), (250.0, 300.0)]


def test_bin_stream_in_bin_and_deterministic(space, factors):
    a = bin_stream(space, factors, 300.0, 350.0, seed=1, budget=BUDGET)
    b = bin_stream(space, factors, 300.0, 350.0, seed=1, budget=BUDGET)
    assert np.array_equal(a, b)
    g = design_gwp_m3(space, factors, space.from_unit(a))
    assert np.all((g >= 300) & (g < 350))
    assert not np.array_equal(a, bin_stream(space, factors, 300.0, 350.0, seed=2, budget=BUDGET))


def test_constant_model_oracle(space, factors):
    result = run(ConstantModel(7.0), space, factors, strength_thresholds=(6000, 8000))
    assert result.cells
    for cell in result:
        if cell.threshold_psi == 6000:
            assert len(cell.mixes) == min(cell.n_in_bin, 50)
            assert cell.feasible == frozenset(range(cell.n_in_bin))
        else:
            assert cell.mixes == [] and cell.shortfall
    reachable = [c for c in result if c.threshold_psi == 6000 and c.n_in_bin > 0]
    assert len(reachable) >= len(result.cells) // 2 - 1


def test_infeasible_threshold_flags_every_cell(space, factors):
    result = run(LinearModel(), space, factors, strength_thresholds=(100000,))
    assert all(c.mixes == [] and c.shortfall for c in result)
    report = bin_sweep_report(result)
    rows = list(csv.DictReader(io.StringIO(report)))
    assert len(rows) == len(result.cells)
    assert all(r["status"] == SHORTFALL and r["n"] == "0" and r["cement_min"] == "" for r in rows)


def test_candidates_satisfy_predicate(space, factors):
    result = run(LinearModel(), space, factors, strength_thresholds=(5000, 6000), confidence_k=1.0, ages=(14, 28))
    model = LinearModel()
    found = 0
    for cell in result:
        found += len(cell.mixes)
        for mix, g in zip(cell.mixes, cell.gwp_m3):
            assert cell.bin_lo <= g < cell.bin_hi
            assert check_candidate(model, factors, mix, cell.key, result.query)
        assert np.all(cell.mean - cell.sigma >= cell.threshold_psi / 1000)
    assert found > 0


def test_confidence_margin_nests(space, factors):
    loose = run(LinearModel(), space, factors, strength_thresholds=(5000, 6000, 7000))
    tight = run(LinearModel(), space, factors, strength_thresholds=(5000, 6000, 7000), confidence_k=2.0)
    k0 = loose.query
    shrunk = 0
    for key, cell in tight.cells.items():
        assert cell.feasible <= loose[key].feasible
        shrunk += len(cell.feasible) < len(loose[key].feasible)
        for mix in cell.mixes:
            assert check_candidate(LinearModel(), factors, mix, key, k0)
    assert shrunk > 0


def test_threshold_tightening_nests(space, factors):
    result = run(LinearModel(), space, factors, strength_thresholds=(5000, 6000, 7000, 8000))
    for lo, hi in gwp_bins(space, factors, 50.0):
        sets = [result[(t, (lo, hi))].feasible for t in (5000.0, 6000.0, 7000.0, 8000.0)]
        assert all(b <= a for a, b in zip(sets, sets[1:]))


def test_generation_deterministic(space, factors):
    a = run(LinearModel(), space, factors, strength_thresholds=(6000,))
    b = run(LinearModel(), space, factors, strength_thresholds=(6000,))
    assert a.to_csv() == b.to_csv()


def test_report_statistics_recomputed(space, factors):
    result = run(LinearModel(), space, factors, strength_thresholds=(5000, 7000))
    rows = {(float(r["threshold_psi"]), float(r["bin_lo"])): r for r in csv.DictReader(io.StringIO(bin_sweep_report(result)))}
    raw = {}
    for _, row in read_table(result.to_csv(), ("threshold_psi", "bin_lo", "cement", "fly_ash_c", "fly_ash_f", "slag", "water", "hrwr")):
        f = {k: float(v) for k, v in row.items() if k not in ("mix_id", "kind", "phase")}
        values = {
            "cement": f["cement"], "fly_ash": f["fly_ash_c"] + f["fly_ash_f"], "slag": f["slag"],
            "wb": f["water"] / (f["cement"] + f["fly_ash_c"] + f["fly_ash_f"] + f["slag"]), "hrwr": f["hrwr"],
        }
        raw.setdefault((f["threshold_psi"], f["bin_lo"]), []).append(values)
    assert raw
    for key, cands in raw.items():
        row = rows[key]
        assert int(row["n"]) == len(cands)
        for p in REPORT_PARAMETERS:
            v = np.array([c[p] for c in cands])
            assert float(row[f"{p}_min"]) == pytest.approx(v.min(), abs=1e-12)
            assert float(row[f"{p}_median"]) == pytest.approx(float(np.median(v)), abs=1e-12, rel=1e-12)
            assert float(row[f"{p}_max"]) == pytest.approx(v.max(), abs=1e-12)


def test_report_single_candidate(space, factors):
    result = run(LinearModel(), space, factors, strength_thresholds=(5000,), candidates_per_bin=1)
    rows = [r for r in csv.DictReader(io.StringIO(bin_sweep_report(result))) if r["n"] == "1"]
    assert rows
    for row in rows:
        assert row["status"] == "ok"
        for p in REPORT_PARAMETERS:
            assert row[f"{p}_min"] == row[f"{p}_median"] == row[f"{p}_max"]


def test_report_needs_cells():
    with pytest.raises(ValueError):
        bin_sweep_report(InverseResult(InverseQuery(), {}))


def test_fitted_model_candidates_recheck_from_csv(space, factors):
    d = phase_schedule(generate_synthetic(SyntheticConfig(seed=0)))[3]
    model = fit_dataset(augment_zero_strength(d), restarts=1, max_iters=40)
    query = InverseQuery(strength_thresholds=(6000, 7000), ages=(28,), candidates_per_bin=10)
    result = generate_candidates(model, factors, space, query, seed=5, budget=BUDGET)
    text = result.to_csv()
    mixes = parse_mix_table(text).mixes
    checked = 0
    for _, row in read_table(text, ("mix_id", "threshold_psi", "bin_lo", "bin_hi")):
        key = (float(row["threshold_psi"]), (float(row["bin_lo"]), float(row["bin_hi"])))
        assert check_candidate(model, factors, mixes[row["mix_id"]], key, query)
        checked += 1
    assert checked == sum(len(c.mixes) for c in result) > 0
