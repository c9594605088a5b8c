"""Testing in order down the exposure tree.

A node's null is tested only after its parent's null was tested and
rejected; each node has its own level.  Because every parent null is the
intersection of its children's nulls, the family-wise error rate stays at
the root level whenever the schedule respects the tree.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

from .cohort import SPLITS

log = logging.getLogger(__name__)

REJECTED, RETAINED, NOT_REACHED = "rejected", "retained", "not_reached"


class TreeError(ValueError):
    pass


@dataclass(frozen=True)
class TreeNode:
    id: str
    name: str
    parent: str | None
    alpha: float


class ExposureTree:
    """A rooted tree of exposure definitions with a level per node."""

    def __init__(self, nodes: Iterable[TreeNode]):
        self.nodes = {n.id: n for n in nodes}
        self.validate()

    def validate(self) -> None:
        if not self.nodes:
            raise TreeError("tree has no nodes")
        roots = [n.id for n in self.nodes.values() if n.parent is None]
        if len(roots) != 1:
            raise TreeError(f"tree needs exactly one root, found {len(roots)}")
        for n in self.nodes.values():
            if n.parent is not None and n.parent not in self.nodes:
                raise TreeError(f"node {n.id!r} has unknown parent {n.parent!r}")
            if not 0 < n.alpha < 1:
                raise TreeError(f"alpha for {n.id!r} must lie in (0, 1), got {n.alpha}")
        for n in self.nodes.values():
            seen, cur = {n.id}, n.parent
            while cur is not None:
                if cur in seen:
                    raise TreeError(f"parent links form a cycle through {cur!r}")
                seen.add(cur)
                cur = self.nodes[cur].parent
        for n in self.nodes.values():
            if n.parent is not None and n.alpha > self.nodes[n.parent].alpha:
                raise TreeError(
                    f"alpha for {n.id!r} ({n.alpha}) exceeds its parent's ({self.nodes[n.parent].alpha})"
                )

    @property
    def root(self) -> str:
        return next(n.id for n in self.nodes.values() if n.parent is None)

    def children(self, node_id: str) -> list[str]:
        return [n.id for n in self.nodes.values() if n.parent == node_id]

    def depth(self, node_id: str) -> int:
        d, cur = 0, self.nodes[node_id].parent
        while cur is not None:
            d, cur = d + 1, self.nodes[cur].parent
        return d

    def subtree(self, node_id: str) -> list[str]:
        out, queue = [], deque([node_id])
        while queue:
            cur = queue.popleft()
            out.append(cur)
            queue.extend(self.children(cur))
        return out

    def order(self) -> list[str]:
        """Breadth-first order from the root."""
        return self.subtree(self.root)

    @property
    def alphas(self) -> dict[str, float]:
        return {k: n.alpha for k, n in self.nodes.items()}

    def with_alphas(self, alphas: Mapping[str, float]) -> "ExposureTree":
        unknown = set(alphas) - set(self.nodes)
        if unknown:
            raise TreeError(f"alpha given for unknown nodes {sorted(unknown)}")
        return ExposureTree(
            TreeNode(n.id, n.name, n.parent, float(alphas.get(n.id, n.alpha))) for n in self.nodes.values()
        )

    def leaves_under(self, node_id: str) -> list[str]:
        return [n for n in self.subtree(node_id) if not self.children(n)]

    def to_config(self) -> list[dict]:
        return [{"id": n.id, "name": n.name, "parent": n.parent, "alpha": n.alpha} for n in self.nodes.values()]

    @classmethod
    def from_config(cls, entries: Iterable[Mapping], global_alpha: float = 0.025) -> "ExposureTree":
        """Entries carry ``id`` and ``parent``; a missing ``alpha`` comes from the default schedule."""
        entries = list(entries)
        provisional = cls(
            TreeNode(e["id"], e.get("name", e["id"]), e.get("parent"), 0.5) for e in entries
        )
        alphas = default_alpha_schedule(provisional, global_alpha)
        alphas.update({e["id"]: float(e["alpha"]) for e in entries if e.get("alpha") is not None})
        return provisional.with_alphas(alphas)

    @classmethod
    def default(cls, global_alpha: float = 0.025) -> "ExposureTree":
        parent = {c: p for p, kids in SPLITS.items() for c in kids}
        names = ["any_activity", *parent]
        provisional = cls(TreeNode(n, n.replace("_", " "), parent.get(n), 0.5) for n in names)
        return provisional.with_alphas(default_alpha_schedule(provisional, global_alpha))


def default_alpha_schedule(tree: ExposureTree, global_alpha: float) -> dict[str, float]:
    """Root and its children at ``global_alpha``; each further generation halved."""
    if not 0 < global_alpha < 1:
        raise TreeError("global alpha must lie in (0, 1)")
    return {k: global_alpha / 2 ** max(tree.depth(k) - 1, 0) for k in tree.nodes}


def co_primary_alpha(alpha: float, n_outcomes: int) -> float:
    """Bonferroni share of the overall level for each co-primary outcome."""
    return alpha / n_outcomes


@dataclass
class NodeResult:
    tested: bool = False
    p_value: float | None = None
    alpha: float = math.nan
    decision: str = NOT_REACHED
    error: str | None = None
    detail: object = None  # whatever the supplier returned beside the p-value


@dataclass
class GatekeepingTrace:
    results: dict[str, NodeResult]
    order: list[str]
    label: str = ""
    calls: int = 0

    def rejected(self) -> list[str]:
        return [k for k in self.order if self.results[k].decision == REJECTED]

    def tested(self) -> list[str]:
        return [k for k in self.order if self.results[k].tested]

    def false_rejections(self, true_nulls: Iterable[str]) -> list[str]:
        nulls = set(true_nulls)
        return [k for k in self.rejected() if k in nulls]

    def rows(self) -> list[dict]:
        out = []
        for k in self.order:
            r = self.results[k]
            out.append({"node": k, "tested": r.tested, "p_value": r.p_value, "alpha": r.alpha,
                        "decision": r.decision, "error": r.error})
        return out


def _supplied(value) -> tuple[float, object]:
    """Suppliers may return a bare p-value or an object with ``p_value``."""
    if isinstance(value, (int, float)):
        return float(value), None
    return float(value.p_value), value


def run_gatekeeping(tree: ExposureTree, p_supplier: Callable[[str], object], executor=None,
                    label: str = "") -> GatekeepingTrace:
    """Breadth-first testing in order; ``p_supplier`` is called only for reached nodes.

    The supplier returns a p-value or an object with a ``p_value`` attribute.
    If it raises, that node and its subtree stay ``not_reached`` and the node
    carries the error text.  With an ``executor``, siblings whose parent was
    rejected are evaluated concurrently.
    """
    tree.validate()
    order = tree.order()
    results = {k: NodeResult(alpha=tree.nodes[k].alpha) for k in order}
    trace = GatekeepingTrace(results, order, label)
    frontier = [tree.root]
    while frontier:
        if executor is not None and len(frontier) > 1:
            futures = [executor.submit(p_supplier, k) for k in frontier]
            outcomes = []
            for f in futures:
                try:
                    outcomes.append((f.result(), None))
                except Exception as exc:  # noqa: BLE001 - recorded on the node
                    outcomes.append((None, exc))
        else:
            outcomes = []
            for k in frontier:
                try:
                    outcomes.append((p_supplier(k), None))
                except Exception as exc:  # noqa: BLE001
                    outcomes.append((None, exc))
        trace.calls += len(frontier)
        nxt = []
        for k, (value, exc) in zip(frontier, outcomes):
            r = results[k]
            if exc is None:
                try:
                    p, detail = _supplied(value)
                    if not 0 <= p <= 1:
                        raise ValueError(f"p-value {p} outside [0, 1]")
                except (TypeError, ValueError, AttributeError) as bad:
                    exc = bad
            if exc is not None:
                log.warning("node %s: p-value supplier failed: %s", k, exc)
                r.error = f"{type(exc).__name__}: {exc}"
                continue
            r.tested, r.p_value, r.detail = True, p, detail
            r.decision = REJECTED if p < r.alpha else RETAINED
            if r.decision == REJECTED:
                nxt.extend(tree.children(k))
        frontier = nxt
    return trace


@dataclass
class FwerResult:
    reps: int
    fwer: float
    se: float
    rejection_rate: dict[str, float]
    true_nulls: list[str]
    failures: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def bound(self) -> float:
        """Nominal level plus two binomial standard errors."""
        a = self.extra.get("alpha", math.nan)
        return a + 2 * math.sqrt(a * (1 - a) / self.reps)

    def to_dict(self) -> dict:
        return {"reps": self.reps, "fwer": self.fwer, "se": self.se, "bound": self.bound,
                "rejection_rate": self.rejection_rate, "true_nulls": self.true_nulls,
                "failures": self.failures, **self.extra}


def validate_fwer(tree: ExposureTree, generator, reps: int, seed: int | None = None, *,
                  outcome: str = "phq9_total", settings=None, workers: int = 1) -> FwerResult:
    """Run simulate, match, test and gatekeep on ``reps`` synthetic cohorts.

    ``generator`` is a :class:`matchtree.simulate.GeneratorSpec`; its declared
    true nulls define a false rejection.  Replicate ``r`` draws from the
    stream seeded by ``(seed, r)``, so results do not depend on ``workers``.
    """
    from .simulate import replicate_trace  # local import: simulate depends on this module

    if reps < 1:
        raise ValueError("reps must be at least 1 for an FWER experiment")
    seed = generator.seed if seed is None else seed
    args = [(tree, generator, seed, r, outcome, settings) for r in range(reps)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            runs = list(pool.map(replicate_trace, args, chunksize=max(1, reps // (8 * workers))))
    else:
        runs = [replicate_trace(a) for a in args]
    nulls = [k for k in tree.order() if generator.true_null(k, tree, outcome)]
    hits, failures = 0, 0
    counts = dict.fromkeys(tree.order(), 0)
    for rejected, failed in runs:
        failures += failed
        if set(rejected) & set(nulls):
            hits += 1
        for k in rejected:
            counts[k] += 1
    fwer = hits / reps
    return FwerResult(
        reps, fwer, math.sqrt(fwer * (1 - fwer) / reps),
        {k: c / reps for k, c in counts.items()}, nulls, failures,
        {"alpha": tree.nodes[tree.root].alpha, "outcome": outcome, "seed": seed},
    )
