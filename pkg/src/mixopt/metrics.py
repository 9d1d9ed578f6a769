"""Coefficient of determination, RMSE and per-age evaluation tables."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .dataset import AGE_GRID, Dataset


class UndefinedMetricError(ValueError):
    pass


def r_squared(y, yhat) -> float:
    """``1 - SS_res / SS_tot``, reported as 0 when negative."""
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if y.shape != yhat.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {yhat.shape}")
    if y.size < 2:
        raise UndefinedMetricError("R² needs at least 2 observations")
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0:
        raise UndefinedMetricError("R² undefined for constant targets")
    ss_res = float(np.sum((y - yhat) ** 2))
    return max(0.0, 1.0 - ss_res / ss_tot)


def rmse(y, yhat) -> float:
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if y.shape != yhat.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {yhat.shape}")
    if y.size == 0:
        raise ValueError("rmse of empty vectors")
    return math.sqrt(float(np.mean((y - yhat) ** 2)))


@dataclass(frozen=True)
class EvalRow:
    key: str
    n: int
    r2: float | None
    rmse: float | None

    @property
    def defined(self) -> bool:
        return self.r2 is not None


@dataclass(frozen=True)
class EvalTable:
    rows: tuple[EvalRow, ...]

    def __getitem__(self, key) -> EvalRow:
        key = age_key(key) if not isinstance(key, str) else key
        for row in self.rows:
            if row.key == key:
                return row
        raise KeyError(key)

    @property
    def pooled(self) -> EvalRow:
        return self["all"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["age", "n", "r2", "rmse_ksi"])
        for row in self.rows:
            writer.writerow([row.key, row.n, _cell(row.r2), _cell(row.rmse)])
        return buf.getvalue()


def _cell(x: float | None) -> str:
    return "undefined" if x is None else f"{x:.6f}"


def age_key(age: float) -> str:
    return f"{float(age):g}"


def eval_table(ages, y, yhat, grid=AGE_GRID) -> EvalTable:
    """Per-age rows for each grid age plus a pooled ``all`` row.

    A row with fewer than two points, or constant targets, is marked
    undefined; pooling is unaffected. Off-grid ages only enter ``all``.
    """
    ages = np.asarray(ages, dtype=float)
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    rows = []
    for age in grid:
        mask = ages == age
        rows.append(_row(age_key(age), y[mask], yhat[mask]))
    rows.append(_row("all", y, yhat))
    return EvalTable(tuple(rows))


def _row(key: str, y: np.ndarray, yhat: np.ndarray) -> EvalRow:
    n = int(y.size)
    if n == 0:
        return EvalRow(key, 0, None, None)
    err = rmse(y, yhat)
    try:
        r2 = r_squared(y, yhat)
    except UndefinedMetricError:
        return EvalRow(key, n, None, err)
    return EvalRow(key, n, r2, err)


def parity_rows(model, test: Dataset) -> list[tuple[str, float, float, float, float]]:
    """``(mix_id, age, measured, predicted, sd)`` for every real observation in ``test``."""
    obs = [o for o in test.observations if not o.synthetic]
    if not obs:
        raise ValueError("test set has no observations")
    mixes = [test.mixes[o.mix_id] for o in obs]
    mean, var = model.predict(model.encode(mixes, [o.age for o in obs]))
    return [(o.mix_id, o.age, o.mean_strength, float(mu), float(math.sqrt(v))) for o, mu, v in zip(obs, mean, var)]


def evaluate_by_age(model, test: Dataset) -> EvalTable:
    rows = sorted(parity_rows(model, test))
    return eval_table([r[1] for r in rows], [r[2] for r in rows], [r[3] for r in rows])
