"""Integer min-cost flow on the exposed/control bipartite network.

Network: source -> exposed (lower bound 1, capacity k_c) -> control
(capacity 1 per arc) -> sink (capacity k_e per control).  With nonnegative
arc costs a second unit out of an exposed node never lowers the cost, so the
optimum sends exactly one unit per exposed node and the problem is a
transportation problem with control capacities.  It is solved by successive
shortest augmenting paths with node potentials (Dijkstra on reduced costs),
one augmentation per exposed node, each control expanded into ``k_e`` unit
slots.  The final potentials are returned so the caller can certify
optimality through the reduced-cost conditions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

INF = np.int64(1) << np.int64(62)


class InfeasibleError(ValueError):
    pass


@njit(cache=True)
def _augment_all(cost):  # pragma: no cover - compiled
    n, m = cost.shape
    inf = np.int64(1) << np.int64(62)
    u = np.zeros(n + 1, dtype=np.int64)
    v = np.zeros(m + 1, dtype=np.int64)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j]: row (1-based) holding slot j; 0 = free
    way = np.zeros(m + 1, dtype=np.int64)
    minv = np.empty(m + 1, dtype=np.int64)
    used = np.empty(m + 1, dtype=np.bool_)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv[:] = inf
        used[:] = False
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    row_slot = np.zeros(n, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j] != 0:
            row_slot[p[j] - 1] = j - 1
    return row_slot, u[1:], v[1:]


@dataclass(frozen=True)
class FlowSolution:
    control_of: np.ndarray  # control column for each exposed row
    cost: int  # integer objective
    row_potential: np.ndarray
    slot_potential: np.ndarray  # length n_controls * k_e, slot s belongs to control s // k_e
    k_e: int
    certified: bool


def solve(cost: np.ndarray, k_e: int, k_c: int = 1) -> FlowSolution:
    """Minimum-cost assignment of every row to a column, columns holding ``k_e`` rows.

    ``cost`` must be a nonnegative int64 matrix (exposed x control).
    """
    cost = np.ascontiguousarray(cost, dtype=np.int64)
    n, c = cost.shape
    if k_e < 1 or k_c < 1:
        raise ValueError("structure limits must be >= 1")
    if n == 0:
        empty = np.zeros(0, dtype=np.int64)
        return FlowSolution(empty, 0, empty, np.zeros(c * k_e, np.int64), k_e, True)
    if n > k_e * c:
        raise InfeasibleError(
            f"exposed count {n} > k_e * control count = {k_e} * {c} = {k_e * c}"
        )
    if cost.min() < 0:
        raise ValueError("costs must be nonnegative")
    slots = np.repeat(cost, k_e, axis=1)  # control j -> slots j*k_e .. j*k_e + k_e - 1
    row_slot, u, v = _augment_all(slots)
    control_of = row_slot // k_e
    total = int(cost[np.arange(n), control_of].sum())
    certified = certify(slots, row_slot, u, v, total)
    if not certified:
        raise ArithmeticError("flow solution failed its optimality certificate")
    return FlowSolution(control_of, total, u, v, k_e, certified)


def certify(slots, row_slot, u, v, total) -> bool:
    """Reduced-cost optimality check on the final potentials.

    Conditions: every arc has nonnegative reduced cost ``c - u - v``; used
    arcs have zero reduced cost; slot potentials are nonpositive and vanish on
    free slots; row potentials are nonnegative, so an extra unit out of an
    exposed node cannot pay; primal cost equals the dual objective.
    """
    n, m = slots.shape
    reduced = slots - u[:, None] - v[None, :]
    if reduced.min() < 0:
        return False
    if np.any(reduced[np.arange(n), row_slot] != 0):
        return False
    if len(np.unique(row_slot)) != n:
        return False
    free = np.ones(m, dtype=bool)
    free[row_slot] = False
    if np.any(v > 0) or np.any(v[free] != 0) or np.any(u < 0):
        return False
    return int(u.sum() + v.sum()) == total
