"""Standardized mean differences before and after matching."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cohort import Cohort

IDEAL, ACCEPTABLE = 0.1, 0.2


def pooled_sd(column, z) -> float:
    column, z = np.asarray(column, float), np.asarray(z).astype(bool)
    if z.all() or not z.any():
        raise ValueError("both groups must be non-empty")
    v1 = np.var(column[z], ddof=1) if z.sum() > 1 else 0.0
    v0 = np.var(column[~z], ddof=1) if (~z).sum() > 1 else 0.0
    return float(np.sqrt((v1 + v0) / 2))


def _standardize(diff: float, s_pool: float) -> float:
    if s_pool > 0:
        return diff / s_pool
    return 0.0 if diff == 0 else float(np.copysign(np.inf, diff))


def smd_before(column, z) -> float:
    """(mean exposed - mean control) / sqrt((s2_exposed + s2_control) / 2)."""
    column, z = np.asarray(column, float), np.asarray(z).astype(bool)
    s_pool = pooled_sd(column, z)
    return _standardize(column[z].mean() - column[~z].mean(), s_pool)


def set_weights(design, scheme: str = "exposed") -> np.ndarray:
    if scheme == "exposed":
        w = np.array([len(s.exposed) for s in design.sets], float)
    elif scheme == "harmonic":
        w = np.array([2 * len(s.exposed) * len(s.controls) / s.size for s in design.sets], float)
    else:
        raise ValueError(f"unknown weighting {scheme!r}")
    return w / w.sum()


def _set_differences(design, X: np.ndarray, ids) -> np.ndarray:
    """Within-set exposed mean minus control mean, one row per set."""
    pos = ids if isinstance(ids, dict) else {sid: i for i, sid in enumerate(ids)}
    rows, set_of, sign = [], [], []
    for k, s in enumerate(design.sets):
        for i in s.exposed:
            rows.append(pos[i]), set_of.append(k), sign.append(1.0 / len(s.exposed))
        for i in s.controls:
            rows.append(pos[i]), set_of.append(k), sign.append(-1.0 / len(s.controls))
    diffs = np.zeros((len(design.sets), X.shape[1]))
    np.add.at(diffs, np.array(set_of, dtype=int), X[rows] * np.array(sign)[:, None])
    return diffs


def smd_after(design, column, z, ids, weights: str = "exposed") -> float:
    """Set-weighted matched difference over the pre-matching pooled SD."""
    if not design.sets:
        raise ValueError("empty design")
    column = np.asarray(column, float)
    s_pool = pooled_sd(column, z)
    diff = set_weights(design, weights) @ _set_differences(design, column[:, None], ids)[:, 0]
    return _standardize(float(diff), s_pool)


@dataclass(frozen=True)
class BalanceReport:
    labels: tuple[str, ...]
    before: np.ndarray
    after: np.ndarray
    ideal: float = IDEAL
    acceptable: float = ACCEPTABLE

    @property
    def max_abs_after(self) -> float:
        return float(np.max(np.abs(self.after))) if self.after.size else 0.0

    @property
    def verdict(self) -> str:
        if self.max_abs_after < self.ideal:
            return "ideal"
        if self.max_abs_after < self.acceptable:
            return "acceptable"
        return "failed"

    @property
    def fraction_ideal(self) -> float:
        return float(np.mean(np.abs(self.after) < self.ideal)) if self.after.size else 1.0

    def column_verdicts(self) -> list[str]:
        out = []
        for a in np.abs(self.after):
            out.append("ideal" if a < self.ideal else "acceptable" if a < self.acceptable else "failed")
        return out

    def rows(self) -> list[dict]:
        return [
            {"covariate": lab, "smd_before": float(b), "smd_after": float(a), "verdict": v}
            for lab, b, a, v in zip(self.labels, self.before, self.after, self.column_verdicts())
        ]

    def summary(self) -> dict:
        return {
            "verdict": self.verdict,
            "max_abs_after": self.max_abs_after,
            "fraction_ideal": self.fraction_ideal,
            "n_columns": len(self.labels),
        }


class BalanceChecker:
    """SMDs for many candidate designs over one fixed pre-matching sample."""

    def __init__(self, X, labels, z, ids, weights: str = "exposed", thresholds=(IDEAL, ACCEPTABLE)):
        self.X = np.asarray(X, float)
        z = np.asarray(z).astype(bool)
        self.labels = tuple(labels)
        self.pos = {sid: i for i, sid in enumerate(ids)}
        self.weights = weights
        self.thresholds = thresholds
        self.s_pool = np.array([pooled_sd(self.X[:, j], z) for j in range(self.X.shape[1])])
        diff = self.X[z].mean(axis=0) - self.X[~z].mean(axis=0)
        self.before = np.array([_standardize(d, s) for d, s in zip(diff, self.s_pool)])

    def __call__(self, design) -> BalanceReport:
        diff = set_weights(design, self.weights) @ _set_differences(design, self.X, self.pos)
        after = np.array([_standardize(d, s) for d, s in zip(diff, self.s_pool)])
        return BalanceReport(self.labels, self.before, after, *self.thresholds)


def balance_report(design, X, labels, z, ids, weights: str = "exposed",
                   thresholds=(IDEAL, ACCEPTABLE)) -> BalanceReport:
    """SMDs for every column of ``X`` (rows aligned with ``ids`` and ``z``)."""
    return BalanceChecker(X, labels, z, ids, weights, thresholds)(design)


def covariate_indicators(cohort: Cohort, rows) -> tuple[np.ndarray, list[str]]:
    """Continuous covariates as-is plus one indicator per occupied categorical level.

    Unlike the propensity design matrix no reference level is dropped, so the
    balance table lists every level (missing included) present at the node.
    """
    rows = np.asarray(rows)
    cols, labels = [], []
    for entry in cohort.schema.entries:
        values = cohort.covariate_column(entry.name)[rows]
        if entry.kind == "continuous":
            cols.append(values.astype(float))
            labels.append(entry.name)
            continue
        for k, lvl in enumerate(entry.all_levels):
            ind = values == k
            if ind.any():
                cols.append(ind.astype(float))
                labels.append(f"{entry.name}={lvl}")
    return np.column_stack(cols) if cols else np.zeros((rows.size, 0)), labels
