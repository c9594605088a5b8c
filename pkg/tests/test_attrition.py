import math

import numpy as np
import pytest

from matchtree.attrition import attrition_analysis, attrition_table, format_p
from matchtree.cohort import NODES, Cohort, CovariateSchema, Subject
from matchtree.simulate import GeneratorSpec, generate


def two_by_two(a, b, c, d):
    """Exposed available/unavailable = a/b, control available/unavailable = c/d."""
    avail = [1] * a + [0] * b + [1] * c + [0] * d
    exposed = [True] * (a + b) + [False] * (c + d)
    n = len(avail)
    y = np.array([0.0 if v else np.nan for v in avail])
    cohort = Cohort(tuple(Subject(f"s{i}", {}) for i in range(n)), CovariateSchema(()),
                    {"self_rated_unhealthy": y, "phq9_total": y}, {})
    members = np.zeros((n, len(NODES)), bool)
    members[:, NODES.index("any_activity")] = exposed
    members[:, NODES.index("control")] = ~np.array(exposed)
    return cohort, members


def test_cross_product_ratio():
    cohort, members = two_by_two(10, 10, 5, 20)
    row = attrition_analysis(cohort, members, "any_activity")
    assert row.odds_ratio == pytest.approx((10 * 20) / (10 * 5), abs=1e-6)
    # Wald SE of the log odds ratio in a 2x2 table
    se = math.sqrt(1 / 10 + 1 / 10 + 1 / 5 + 1 / 20)
    assert math.log(row.ci_low) == pytest.approx(math.log(4) - 1.96 * se, abs=1e-6)


def test_null_effect_symmetric_ci():
    cohort, members = two_by_two(10, 10, 20, 20)
    row = attrition_analysis(cohort, members, "any_activity")
    assert row.odds_ratio == pytest.approx(1.0, abs=1e-10)
    lo, hi = math.log(row.ci_low), math.log(row.ci_high)
    assert (lo + hi) / 2 == pytest.approx(math.log(row.odds_ratio), abs=1e-10)
    assert row.ci_low <= row.odds_ratio <= row.ci_high


def test_empty_group_flagged():
    cohort, members = two_by_two(10, 10, 5, 20)
    row = attrition_analysis(cohort, members, "no_sports")
    assert row.flagged and row.odds_ratio is None


def test_seven_rows_positive(small_sim):
    spec = GeneratorSpec(n=600, seed=2, confounding=0.5, attrition={"rate": 0.8, "effects": {}, "slopes": {}})
    sim = generate(spec)
    rows = attrition_table(sim.cohort, sim.members)
    assert [r.node for r in rows] == list(NODES[:-1])
    for r in rows:
        if not r.flagged:
            assert 0 < r.ci_low <= r.odds_ratio <= r.ci_high
            assert abs((math.log(r.ci_low) + math.log(r.ci_high)) / 2 - math.log(r.odds_ratio)) < 1e-10


def test_constant_availability_flagged(small_sim):
    row = attrition_analysis(small_sim.cohort, small_sim.members, "any_activity")
    assert row.flagged and "does not vary" in row.note


def test_odds_ratio_centered_at_one():
    spec = GeneratorSpec(n=300, seed=8, confounding=0.5,
                         attrition={"rate": 0.75, "effects": {}, "slopes": {"age": 0.3, "gender=female": 0.4}})
    logs = []
    for rep in range(1000):
        sim = generate(spec, replicate=rep)
        row = attrition_analysis(sim.cohort, sim.members, "any_activity")
        if not row.flagged:
            logs.append(math.log(row.odds_ratio))
    logs = np.array(logs)
    assert len(logs) > 950
    assert abs(logs.mean()) < 3 * logs.std() / math.sqrt(len(logs))


def test_format_p():
    assert format_p(0.0004) == "<0.001" and format_p(0.0312) == "0.031" and format_p(None) == "NA"
