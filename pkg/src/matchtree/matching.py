"""Optimal full matching and escalation of set-size limits."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import flow
from .distance import DistanceMatrix

log = logging.getLogger(__name__)

RESOLUTION = 10**6  # integer cost units per max finite distance
PENALTY = 10**6  # forbidden arc cost, in multiples of the max finite distance

InfeasibleError = flow.InfeasibleError


@dataclass(frozen=True)
class MatchedSet:
    set_id: int
    exposed: tuple[str, ...]
    controls: tuple[str, ...]

    @property
    def size(self) -> int:
        return len(self.exposed) + len(self.controls)


@dataclass(frozen=True)
class MatchedDesign:
    sets: tuple[MatchedSet, ...]
    excluded: tuple[str, ...]
    structure: tuple[int, int]  # (max controls per exposed, max exposed per control)
    total_distance: float
    unmatchable: tuple[str, ...] = ()
    caliper_violations: int = 0

    def __post_init__(self):
        seen = set()
        kc, ke = self.structure
        for s in self.sets:
            one_exposed = len(s.exposed) == 1 and 1 <= len(s.controls) <= kc
            one_control = len(s.controls) == 1 and 1 <= len(s.exposed) <= ke
            if not (one_exposed or one_control):
                raise ValueError(f"set {s.set_id} violates structure {self.structure}")
            for sid in s.exposed + s.controls:
                if sid in seen:
                    raise ValueError(f"subject {sid!r} in more than one set")
                seen.add(sid)

    @property
    def n_exposed(self) -> int:
        return sum(len(s.exposed) for s in self.sets)

    @property
    def n_controls(self) -> int:
        return sum(len(s.controls) for s in self.sets)

    def records(self) -> list[tuple[int, str, str]]:
        """(set id, subject id, role) rows."""
        out = []
        for s in self.sets:
            out += [(s.set_id, e, "exposed") for e in s.exposed]
            out += [(s.set_id, c, "control") for c in s.controls]
        return out

    def write(self, path: str | Path, comment: str | None = None) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["set_id", "subject_id", "role"])
            w.writerows(self.records())

    @classmethod
    def read(cls, path: str | Path, structure=(1, 1)) -> "MatchedDesign":
        groups: dict[int, tuple[list, list]] = {}
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [line for line in fh if not line.startswith("#")]
        for rec in csv.DictReader(rows):
            e, c = groups.setdefault(int(rec["set_id"]), ([], []))
            (e if rec["role"] == "exposed" else c).append(rec["subject_id"])
        sets = tuple(MatchedSet(k, tuple(e), tuple(c)) for k, (e, c) in sorted(groups.items()))
        kc = max([len(s.controls) for s in sets if len(s.exposed) == 1] + [structure[0]])
        ke = max([len(s.exposed) for s in sets if len(s.controls) == 1] + [structure[1]])
        return cls(sets, (), (kc, ke), float("nan"))


def quantize(values: np.ndarray) -> np.ndarray:
    """Integer costs at 1e-6 of the largest finite distance; forbidden pairs get the penalty."""
    finite = np.isfinite(values)
    top = values[finite].max() if finite.any() else 0.0
    scale = RESOLUTION / top if top > 0 else 1.0
    out = np.empty(values.shape, dtype=np.int64)
    out[finite] = np.rint(values[finite] * scale).astype(np.int64)
    out[~finite] = PENALTY * RESOLUTION
    return out


def optimal_full_match(D: DistanceMatrix, structure: tuple[int, int] = (1, 1)) -> MatchedDesign:
    """Minimum total distance full matching under ``structure = (k_c, k_e)``.

    Every exposed subject with at least one permitted partner is matched;
    controls are used as the optimum requires.  Ties break by lexicographic
    subject id.  Raises :class:`InfeasibleError` if exposed > k_e * controls.
    """
    kc, ke = structure
    if kc < 1 or ke < 1:
        raise ValueError("structure limits must be >= 1")
    unmatchable = set(D.unmatchable())
    rows = sorted(r for r in D.rows if r not in unmatchable)
    cols = sorted(D.cols)
    if len(rows) > ke * len(cols):
        raise InfeasibleError(
            f"exposed count {len(rows)} > k_e * control count = {ke} * {len(cols)}"
        )
    sub = D.subset(rows, cols) if rows else DistanceMatrix((), tuple(cols), np.zeros((0, len(cols))))
    cost = quantize(sub.values)
    sol = flow.solve(cost, ke, kc)
    groups: dict[int, list[str]] = {}
    for r, j in zip(rows, sol.control_of):
        groups.setdefault(int(j), []).append(r)
    raw = [(tuple(members), (cols[j],)) for j, members in groups.items()]
    used_d = sub.values[np.arange(len(rows)), sol.control_of] if rows else np.zeros(0)
    finite = sub.values[np.isfinite(sub.values)]
    penalty_value = PENALTY * (finite.max() if finite.size else 0.0)
    violations = int(np.sum(~np.isfinite(used_d)))
    total = float(used_d[np.isfinite(used_d)].sum() + violations * penalty_value)
    raw.sort(key=lambda s: s[0][0])
    sets = tuple(MatchedSet(k + 1, e, c) for k, (e, c) in enumerate(raw))
    used = {x for s in sets for x in s.exposed + s.controls}
    excluded = tuple(sorted(x for x in list(D.rows) + list(D.cols) if x not in used))
    return MatchedDesign(sets, excluded, (kc, ke), total, tuple(sorted(unmatchable)), violations)


def default_schedule(max_k: int = 10) -> list[tuple[int, int]]:
    """Pairs first, then alternating (k, 1) and (1, k) for k = 2..max_k."""
    out = [(1, 1)]
    for k in range(2, max_k + 1):
        out += [(k, 1), (1, k)]
    return out


@dataclass
class EscalationResult:
    design: MatchedDesign
    report: object  # BalanceReport
    balanced: bool
    attempts: list[dict] = field(default_factory=list)


def escalate(
    D: DistanceMatrix,
    balance_check: Callable[[MatchedDesign], object],
    schedule: Sequence[tuple[int, int]] | None = None,
    threshold: float = 0.2,
) -> EscalationResult:
    """Try structures in order until every post-match |SMD| is below ``threshold``.

    ``balance_check`` maps a design to a report exposing ``max_abs_after``.
    Falls back to the design with the smallest maximum |SMD|, flagged
    unbalanced.  Raises :class:`InfeasibleError` if every structure is infeasible.
    """
    schedule = list(schedule) if schedule is not None else default_schedule()
    if not schedule:
        raise ValueError("empty escalation schedule")
    best, attempts = None, []
    for structure in schedule:
        try:
            design = optimal_full_match(D, tuple(structure))
        except InfeasibleError as exc:
            attempts.append({"structure": list(structure), "feasible": False, "reason": str(exc)})
            continue
        report = balance_check(design)
        worst = float(report.max_abs_after)
        attempts.append({"structure": list(structure), "feasible": True, "max_abs_smd": worst})
        if worst < threshold:
            return EscalationResult(design, report, True, attempts)
        if best is None or worst < best[0]:
            best = (worst, design, report)
    if best is None:
        raise InfeasibleError("every structure in the schedule is infeasible")
    log.info("no structure reached |SMD| < %s; best max |SMD| = %.3f", threshold, best[0])
    return EscalationResult(best[1], best[2], False, attempts)
