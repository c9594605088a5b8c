"""Per-node analysis: propensity fit, distances, escalating full match, tests."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .balance import BalanceChecker, BalanceReport, covariate_indicators
from .cohort import NODES, Cohort, SportTaxonomy, membership_matrix
from .distance import SingularCovarianceError, apply_caliper, distance_matrix
from .inference import TestReport, invert_ci, outcome_vector
from .matching import InfeasibleError, MatchedDesign, default_schedule, escalate
from .propensity import (
    DesignError,
    PropensityModel,
    RankError,
    SeparationError,
    design_matrix,
    fit_balance,
)

log = logging.getLogger(__name__)


class NodeSkipped(RuntimeError):
    """A node cannot be analyzed (no exposed or no controls, or matching infeasible)."""


@dataclass(frozen=True)
class Settings:
    caliper: float = 0.2
    max_k: int = 10
    schedule: tuple[tuple[int, int], ...] | None = None
    threshold: float = 0.2
    ideal: float = 0.1
    weights: str = "exposed"
    level: float = 0.95
    exact: bool | None = None

    def escalation_schedule(self) -> list[tuple[int, int]]:
        return [tuple(s) for s in self.schedule] if self.schedule else default_schedule(self.max_k)


@dataclass
class NodeMatch:
    node: str
    design: MatchedDesign
    balance: BalanceReport
    balanced: bool
    propensity: PropensityModel | None
    counts: dict
    attempts: list = field(default_factory=list)
    notes: list = field(default_factory=list)


def one_sided_levels(cohort: Cohort, rows: np.ndarray, z: np.ndarray) -> frozenset[str]:
    """Categorical levels present in only one of the exposed and control groups.

    Such a level predicts exposure perfectly and leaves the logistic
    likelihood without a finite maximum.
    """
    out = set()
    for entry in cohort.schema.entries:
        if entry.kind == "continuous":
            continue
        codes = cohort.covariate_column(entry.name)[rows]
        in_e = set(np.unique(codes[z]))
        in_c = set(np.unique(codes[~z]))
        for k in in_e ^ in_c:
            out.add(f"{entry.name}={entry.all_levels[k]}")
    return frozenset(out)


class Study:
    """A cohort with its node memberships and shared analysis settings."""

    def __init__(self, cohort: Cohort, taxonomy: SportTaxonomy | None = None,
                 settings: Settings | None = None, members: np.ndarray | None = None,
                 design_loader=None):
        self.cohort = cohort
        self.design_loader = design_loader  # node -> saved MatchedDesign or None
        self.taxonomy = taxonomy or SportTaxonomy.default()
        self.settings = settings or Settings()
        self.members = membership_matrix(cohort, self.taxonomy) if members is None else members
        self._col = {n: j for j, n in enumerate(NODES)}
        self._matches: dict[str, NodeMatch] = {}

    def node_rows(self, node: str, available_only: bool = True) -> tuple[np.ndarray, np.ndarray]:
        """Row indices for ``node`` plus the common control group, and exposure flags."""
        exposed = self.members[:, self._col[node]]
        control = self.members[:, self._col["control"]]
        keep = exposed | control
        if available_only:
            keep &= self.cohort.available
        rows = np.flatnonzero(keep)
        return rows, exposed[rows]

    def match(self, node: str) -> NodeMatch:
        if node not in self._matches:
            saved = self.design_loader(node) if self.design_loader else None
            self._matches[node] = match_node(self, node) if saved is None else reuse_design(self, node, saved)
        return self._matches[node]

    def test(self, node: str, outcome: str, kind: str | None = None) -> TestReport:
        m = self.match(node)
        kind = kind or self.cohort.outcome_kinds[outcome]
        ids = self.cohort.ids
        col = self.cohort.outcomes[outcome]
        used = {x for s in m.design.sets for x in s.exposed + s.controls}
        values = {i: float(v) for i, v in zip(ids, col) if i in used}
        vec = outcome_vector(m.design, values)
        if vec.n_sets == 0:
            raise NodeSkipped(f"no matched set has {outcome!r} for both roles")
        stat = "proportions" if kind == "binary" else "m_test"
        if stat == "proportions" and not np.all((vec.values == 0) | (vec.values == 1)):
            raise ValueError(f"outcome {outcome!r} declared binary but has non 0/1 values")
        return invert_ci(vec, level=self.settings.level, statistic=stat, exact=self.settings.exact)


def _fit_propensity(cohort, rows, z, notes):
    drop = one_sided_levels(cohort, rows, z)
    if drop:
        notes.append(f"dropped one-sided levels from propensity model: {sorted(drop)}")
    dm = design_matrix(cohort, rows, drop_levels=drop)
    try:
        model = fit_balance(dm.matrix, z.astype(float), dm.labels)
    except (SeparationError, RankError) as exc:
        notes.append(f"propensity fit failed ({exc}); caliper disabled")
        return dm, None
    if model.fallback:
        notes.append("balance conditions did not converge; using maximum likelihood scores")
    return dm, model


def match_node(study: Study, node: str) -> NodeMatch:
    """Fit scores, build calipered rank distances, and escalate set sizes until balanced."""
    cohort, s = study.cohort, study.settings
    rows, z = study.node_rows(node)
    n_e, n_c = int(z.sum()), int((~z).sum())
    if n_e == 0 or n_c == 0:
        raise NodeSkipped(f"node {node!r} has {n_e} exposed and {n_c} control subjects")
    notes: list[str] = []
    try:
        dm, model = _fit_propensity(cohort, rows, z, notes)
    except DesignError as exc:
        raise NodeSkipped(f"node {node!r}: {exc}") from None
    X = dm.matrix[:, 1:]
    ids = cohort.ids[rows]
    try:
        D, _ = distance_matrix(X[z], X[~z], tuple(ids[z]), tuple(ids[~z]))
    except SingularCovarianceError as exc:
        raise NodeSkipped(f"node {node!r}: {exc}") from None
    if model is not None and np.isfinite(s.caliper):
        p = model.scores()
        D = apply_caliper(D, p[z], p[~z], s.caliper)
    B, labels = covariate_indicators(cohort, rows)
    check = BalanceChecker(B, labels, z, ids, s.weights, (s.ideal, s.threshold))
    try:
        result = escalate(D, check, s.escalation_schedule(), s.threshold)
    except InfeasibleError as exc:
        raise NodeSkipped(f"node {node!r}: {exc}") from None
    d = result.design
    counts = {"node": node, "exposed_before": n_e, "control_before": n_c,
              "exposed_after": d.n_exposed, "control_after": d.n_controls,
              "structure": list(d.structure), "unmatchable": len(d.unmatchable)}
    if not result.balanced:
        notes.append(f"best design leaves max |SMD| = {result.report.max_abs_after:.3f}")
    return NodeMatch(node, d, result.report, result.balanced, model, counts, result.attempts, notes)


def reuse_design(study: Study, node: str, design: MatchedDesign) -> NodeMatch:
    """Wrap a previously saved design, recomputing its balance report."""
    cohort, s = study.cohort, study.settings
    rows, z = study.node_rows(node)
    ids = cohort.ids[rows]
    known = set(ids)
    stray = [x for st in design.sets for x in st.exposed + st.controls if x not in known]
    if stray:
        raise NodeSkipped(f"saved design for {node!r} names subjects outside the node: {stray[:3]}")
    B, labels = covariate_indicators(cohort, rows)
    report = BalanceChecker(B, labels, z, ids, s.weights, (s.ideal, s.threshold))(design)
    counts = {"node": node, "exposed_before": int(z.sum()), "control_before": int((~z).sum()),
              "exposed_after": design.n_exposed, "control_after": design.n_controls,
              "structure": list(design.structure), "unmatchable": 0}
    return NodeMatch(node, design, report, report.max_abs_after < s.threshold, None, counts,
                     notes=["design reused from an earlier match run"])
