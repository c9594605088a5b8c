"""Does outcome availability differ by exposure, given baseline covariates?"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import norm

from .cohort import EXPOSURE_NODES, NODES, Cohort, CovariateSchema
from .propensity import RankError, SeparationError, design_matrix, fit_max_likelihood

Z95 = 1.96


@dataclass(frozen=True)
class AttritionRow:
    node: str
    odds_ratio: float | None
    ci_low: float | None
    ci_high: float | None
    p_value: float | None
    n_exposed: int
    n_control: int
    flagged: bool = False
    note: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def format_p(p: float | None) -> str:
    if p is None:
        return "NA"
    return "<0.001" if p < 0.001 else f"{p:.3f}"


def format_row(row: AttritionRow) -> str:
    if row.flagged:
        return f"{row.node:<14} {'flagged':>22} {'NA':>7}  {row.note}"
    ci = f"{row.odds_ratio:.2f} ({row.ci_low:.2f}, {row.ci_high:.2f})"
    return f"{row.node:<14} {ci:>22} {format_p(row.p_value):>7}"


def _separating_levels(cohort, schema, rows, y) -> frozenset[str]:
    """Levels within which availability never varies; their coefficients run off to infinity."""
    out = set()
    for entry in schema.entries:
        if entry.kind == "continuous":
            continue
        codes = cohort.covariate_column(entry.name)[rows]
        for k in np.unique(codes):
            sel = y[codes == k]
            if sel.min() == sel.max():
                out.add(f"{entry.name}={entry.all_levels[k]}")
    return frozenset(out)


def attrition_analysis(cohort: Cohort, members: np.ndarray, node: str,
                       schema: CovariateSchema | None = None) -> AttritionRow:
    """Odds ratio for having both primary outcomes, exposed at ``node`` versus controls.

    Logistic regression of availability on the exposure indicator plus the
    covariate design matrix; Wald interval from the inverse information.
    """
    col = {n: j for j, n in enumerate(NODES)}
    exposed, control = members[:, col[node]], members[:, col["control"]]
    rows = np.flatnonzero(exposed | control)
    z = exposed[rows].astype(float)
    n_e, n_c = int(z.sum()), int(len(rows) - z.sum())
    if n_e == 0 or n_c == 0:
        return AttritionRow(node, None, None, None, None, n_e, n_c, True, "empty exposure or control group")
    y = cohort.available[rows].astype(float)
    if y.min() == y.max():
        return AttritionRow(node, None, None, None, None, n_e, n_c, True, "availability does not vary")
    schema = cohort.schema if schema is None else schema
    if not schema.entries:
        X, labels, note = np.ones((len(rows), 1)), ("(intercept)",), ""
    else:
        drop = _separating_levels(cohort, schema, rows, y)
        dm = design_matrix(cohort, rows, schema, drop_levels=drop)
        X, labels = dm.matrix, dm.labels
        note = f"dropped levels with constant availability: {sorted(drop)}" if drop else ""
    X = np.column_stack([X, z])
    try:
        fit = fit_max_likelihood(X, y, (*labels, "exposure"))
    except (SeparationError, RankError) as exc:
        return AttritionRow(node, None, None, None, None, n_e, n_c, True, str(exc))
    pi = fit.fitted
    info = (X * (pi * (1 - pi))[:, None]).T @ X
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        return AttritionRow(node, None, None, None, None, n_e, n_c, True, "singular information matrix")
    b, se = float(fit.coefficients[-1]), math.sqrt(cov[-1, -1])
    p = float(2 * norm.sf(abs(b) / se))
    return AttritionRow(node, math.exp(b), math.exp(b - Z95 * se), math.exp(b + Z95 * se), p, n_e, n_c,
                        False, note)


def attrition_table(cohort: Cohort, members: np.ndarray, nodes=EXPOSURE_NODES,
                    schema: CovariateSchema | None = None) -> list[AttritionRow]:
    return [attrition_analysis(cohort, members, node, schema) for node in nodes]
