"""Randomization inference within matched sets.

Continuous outcomes use an m-test of a constant additive effect ``tau0``:
responses are adjusted to ``y - tau0 * z``, every within-set pair of units is
compared through Huber's psi on the scaled difference, and the exposed-role
scores are summed.  The null distribution comes from re-randomizing which
units in each set hold the exposed role.  Binary outcomes use a studentized
difference in proportions valid under the weak (average) null.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from itertools import combinations
from typing import Callable, Mapping

import numpy as np
from scipy.stats import norm

HUBER_K = 2.5
EXACT_LIMIT = 10**6


@dataclass(frozen=True)
class OutcomeVector:
    """Outcomes of matched subjects, aligned with exposure role and set index."""

    values: np.ndarray
    exposed: np.ndarray  # bool
    set_index: np.ndarray  # 0..n_sets-1
    ids: tuple[str, ...] = ()

    def __post_init__(self):
        if np.isnan(self.values).any():
            raise ValueError("outcome vector contains missing values")

    @property
    def n_sets(self) -> int:
        return int(self.set_index.max()) + 1 if self.set_index.size else 0


def outcome_vector(design, outcomes: Mapping[str, float]) -> OutcomeVector:
    """Collect matched outcomes, dropping missing values and sets left one-sided."""
    vals, roles, sets, ids = [], [], [], []
    k = 0
    for s in design.sets:
        e = [(i, outcomes[i]) for i in s.exposed if not np.isnan(outcomes[i])]
        c = [(i, outcomes[i]) for i in s.controls if not np.isnan(outcomes[i])]
        if not e or not c:
            continue
        for i, v in e:
            vals.append(v), roles.append(True), sets.append(k), ids.append(i)
        for i, v in c:
            vals.append(v), roles.append(False), sets.append(k), ids.append(i)
        k += 1
    return OutcomeVector(np.array(vals, float), np.array(roles, bool), np.array(sets, int), tuple(ids))


def huber_psi(x, k: float = HUBER_K):
    return np.clip(x, -k, k)


class _Layout:
    """Per-design index arrays reused across many tau0 evaluations."""

    def __init__(self, y: OutcomeVector):
        self.y = y
        S = y.n_sets
        self.set_size = np.bincount(y.set_index, minlength=S)
        self.n_exposed = np.bincount(y.set_index, weights=y.exposed, minlength=S).astype(int)
        self.n_control = self.set_size - self.n_exposed
        if np.any(self.set_size < 2) or np.any(self.n_exposed < 1) or np.any(self.n_control < 1):
            raise ValueError("every set needs an exposed and a control member")
        order = np.argsort(y.set_index, kind="stable")
        starts = np.concatenate([[0], np.cumsum(self.set_size)[:-1]])
        self.members = [order[a:a + n] for a, n in zip(starts, self.set_size)]
        pi, pj = [], []
        for m in self.members:
            a, b = np.triu_indices(m.size, 1)
            pi.append(m[a])
            pj.append(m[b])
        self.pi = np.concatenate(pi)
        self.pj = np.concatenate(pj)
        self.n_assignments = math.prod(math.comb(int(n), int(e)) for n, e in zip(self.set_size, self.n_exposed))

    def unit_scores(self, tau0: float) -> np.ndarray | None:
        r = self.y.values - tau0 * self.y.exposed
        diff = r[self.pi] - r[self.pj]
        absd = np.abs(diff)
        scale = np.median(absd)
        if scale == 0:
            scale = absd.mean()  # heavily tied responses
        if scale == 0:
            return None
        psi = huber_psi(diff / scale)
        n = r.size
        A = np.bincount(self.pi, weights=psi, minlength=n) - np.bincount(self.pj, weights=psi, minlength=n)
        return A / self.n_control[self.y.set_index]

    def moments(self, a: np.ndarray) -> tuple[float, float, float]:
        """Observed statistic, null expectation and null variance."""
        idx = self.y.set_index
        S = self.set_size.size
        t = float(a[self.y.exposed].sum())
        n, m = self.set_size.astype(float), self.n_exposed.astype(float)
        mean = np.bincount(idx, weights=a, minlength=S) / n
        ss = np.bincount(idx, weights=(a - mean[idx]) ** 2, minlength=S)
        expect = float(np.sum(m * mean))
        var = float(np.sum(m * (n - m) / (n * (n - 1)) * ss))
        return t, expect, var

    def exact_tails(self, a: np.ndarray, t: float) -> tuple[float, float]:
        """P(T >= t) and P(T <= t) by enumerating every within-set assignment."""
        support = np.zeros(1)
        for mem, m in zip(self.members, self.n_exposed):
            sums = np.array([a[list(c)].sum() for c in combinations(mem, int(m))])
            support = (support[:, None] + sums[None, :]).ravel()
        eps = 1e-9 * max(1.0, abs(t), float(np.abs(support).max()))
        total = support.size
        return np.count_nonzero(support >= t - eps) / total, np.count_nonzero(support <= t + eps) / total


@dataclass(frozen=True)
class TestStat:
    p_value: float
    statistic: float
    expectation: float
    variance: float
    method: str

    @property
    def deviate(self) -> float:
        if self.variance <= 0:
            return 0.0
        return (self.statistic - self.expectation) / math.sqrt(self.variance)


def _two_sided(upper: float, lower: float) -> float:
    return min(1.0, 2 * min(upper, lower))


def _m_test(layout: _Layout, tau0: float, exact: bool | None) -> TestStat:
    a = layout.unit_scores(tau0)
    if a is None:
        return TestStat(1.0, 0.0, 0.0, 0.0, "m_test_degenerate")
    t, e, v = layout.moments(a)
    use_exact = layout.n_assignments <= EXACT_LIMIT if exact is None else exact
    if use_exact:
        up, lo = layout.exact_tails(a, t)
        return TestStat(_two_sided(up, lo), t, e, v, "m_test_exact")
    if v <= 0:
        return TestStat(1.0, t, e, v, "m_test_normal")
    z = (t - e) / math.sqrt(v)
    return TestStat(_two_sided(norm.sf(z), norm.cdf(z)), t, e, v, "m_test_normal")


def m_test(design_or_vector, y=None, tau0: float = 0.0, exact: bool | None = None) -> TestStat:
    """m-test of the sharp null of a constant additive effect ``tau0``.

    Accepts an :class:`OutcomeVector` or a design plus an ``id -> outcome``
    mapping.  Exact enumeration is used when the number of within-set
    assignments is at most 10**6, else the normal approximation.
    """
    vec = design_or_vector if y is None else outcome_vector(design_or_vector, y)
    return _m_test(_Layout(vec), tau0, exact)


@dataclass(frozen=True)
class ProportionStat:
    p_value: float
    estimate: float
    variance: float

    @property
    def deviate(self) -> float:
        return 0.0 if self.variance <= 0 else self.estimate / math.sqrt(self.variance)


class _Proportions:
    def __init__(self, y: OutcomeVector):
        if not np.all((y.values == 0) | (y.values == 1)):
            raise ValueError("proportions test needs 0/1 outcomes")
        S = y.n_sets
        idx, z = y.set_index, y.exposed
        ne = np.bincount(idx, weights=z, minlength=S)
        nc = np.bincount(idx, weights=~z, minlength=S)
        self.diffs = (np.bincount(idx, weights=y.values * z, minlength=S) / ne
                      - np.bincount(idx, weights=y.values * ~z, minlength=S) / nc)
        self.w = ne / ne.sum()
        self.estimate = float(self.w @ self.diffs)
        denom = 1 - 2 * self.w + np.sum(self.w**2)
        if S < 2 or np.any(denom <= 0):
            self.variance = float("nan")
        else:
            self.variance = float(np.sum(self.w**2 / denom * (self.diffs - self.estimate) ** 2))

    def test(self, delta0: float) -> ProportionStat:
        v = self.variance
        if not np.isfinite(v):
            return ProportionStat(1.0, self.estimate, v)
        gap = self.estimate - delta0
        if v <= 0:
            return ProportionStat(1.0 if abs(gap) < 1e-12 else 0.0, self.estimate, v)
        z = gap / math.sqrt(v)
        return ProportionStat(_two_sided(norm.sf(z), norm.cdf(z)), self.estimate, v)


def proportions_test(design_or_vector, y=None, delta0: float = 0.0) -> ProportionStat:
    """Test that the exposed-count-weighted average risk difference equals ``delta0``.

    The variance is the conservative between-set estimator
    sum_s w_s^2 / (1 - 2 w_s + sum w^2) * (d_s - d)^2.
    """
    vec = design_or_vector if y is None else outcome_vector(design_or_vector, y)
    return _Proportions(vec).test(delta0)


@dataclass(frozen=True)
class TestReport:
    estimate: float
    ci_low: float
    ci_high: float
    p_value: float
    method: str
    deviate: float
    level: float = 0.95
    unbounded: bool = False
    n_sets: int = 0
    n_matched: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("ci_low", "ci_high"):
            if not math.isfinite(d[k]):
                d[k] = None
        return d


def _bisect(f: Callable[[float], bool], inside: float, outside: float, tol: float) -> float:
    """Boundary between a point where ``f`` holds and one where it fails; returns the inner end."""
    while abs(outside - inside) > tol:
        mid = (inside + outside) / 2
        if f(mid):
            inside = mid
        else:
            outside = mid
    return inside


def _invert(p_of: Callable[[float], float], estimate: float, lo: float, hi: float,
            alpha: float, tol: float) -> tuple[float, float, bool]:
    ok = lambda th: p_of(th) > alpha  # noqa: E731
    unbounded = False
    if ok(lo):
        low, unbounded = -math.inf, True
    else:
        low = _bisect(ok, estimate, lo, tol)
    if ok(hi):
        high, unbounded = math.inf, True
    else:
        high = _bisect(ok, estimate, hi, tol)
    return low, high, unbounded


def _hl_estimate(layout: _Layout, center: float, span: float, tol: float) -> float:
    """tau0 at which the m-statistic equals its null expectation."""
    def excess(th):
        a = layout.unit_scores(th)
        if a is None:
            return 0.0
        t, e, _ = layout.moments(a)
        return t - e

    lo, hi = center - span, center + span
    f_lo, f_hi = excess(lo), excess(hi)
    if f_lo == 0:
        return lo
    if f_hi == 0 or np.sign(f_lo) == np.sign(f_hi):
        return center if f_hi != 0 else hi
    while hi - lo > tol:
        mid = (lo + hi) / 2
        f_mid = excess(mid)
        if f_mid == 0:
            return mid
        if np.sign(f_mid) == np.sign(f_lo):
            lo, f_lo = mid, f_mid
        else:
            hi = mid
    return (lo + hi) / 2


def invert_ci(design_or_vector, y=None, level: float = 0.95, statistic: str = "m_test",
              exact: bool | None = None) -> TestReport:
    """Point estimate, marginal CI by test inversion, and the p-value at zero effect.

    ``statistic`` is ``"m_test"`` (continuous) or ``"proportions"`` (binary).
    """
    vec = design_or_vector if y is None else outcome_vector(design_or_vector, y)
    alpha = 1 - level
    n_sets, n_matched = vec.n_sets, vec.values.size
    if statistic == "proportions":
        prop = _Proportions(vec)
        est = prop.estimate
        low, high, unb = _invert(lambda d: prop.test(d).p_value, est, -1.0, 1.0, alpha, 1e-4)
        at0 = prop.test(0.0)
        return TestReport(est, low, high, at0.p_value, "proportions_composite", at0.deviate,
                          level, unb, n_sets, n_matched)
    if statistic != "m_test":
        raise ValueError(f"unknown statistic {statistic!r}")
    layout = _Layout(vec)
    sd = float(np.std(vec.values, ddof=1)) if vec.values.size > 1 else 0.0
    at0 = _m_test(layout, 0.0, exact)
    if sd == 0:
        return TestReport(0.0, 0.0, 0.0, at0.p_value, at0.method, at0.deviate, level, False,
                          n_sets, n_matched)
    w = layout.n_exposed / layout.n_exposed.sum()
    naive = float(w @ (np.bincount(vec.set_index, weights=vec.values * vec.exposed) / layout.n_exposed
                       - np.bincount(vec.set_index, weights=vec.values * ~vec.exposed) / layout.n_control))
    est = _hl_estimate(layout, naive, 10 * sd, 1e-6 * sd)
    p_of = lambda th: _m_test(layout, th, exact).p_value  # noqa: E731
    low, high, unb = _invert(p_of, est, est - 10 * sd, est + 10 * sd, alpha, 1e-4 * sd)
    low, high = min(low, est), max(high, est)
    return TestReport(est, low, high, at0.p_value, at0.method, at0.deviate, level, unb,
                      n_sets, n_matched)
