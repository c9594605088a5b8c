import math
from concurrent.futures import ThreadPoolExecutor

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from matchtree.gatekeeper import (
    NOT_REACHED,
    REJECTED,
    RETAINED,
    ExposureTree,
    TreeError,
    TreeNode,
    co_primary_alpha,
    default_alpha_schedule,
    run_gatekeeping,
    validate_fwer,
)
from matchtree.simulate import GeneratorSpec

ORDER = ["any_activity", "any_sports", "no_sports", "any_contact", "no_contact", "any_collision", "no_collision"]
DEPRESSION = dict(zip(ORDER, [0.00, 0.00, 0.61, 0.00, 0.03, 0.01, 0.00]))
HEALTH = dict(zip(ORDER, [0.01, 0.01, 0.08, 0.01, 0.35, 0.17, 0.03]))
# bold cells of the published results table
BOLD_DEPRESSION = {"any_activity", "any_sports", "any_contact", "no_collision"}
BOLD_HEALTH = {"any_activity", "any_sports", "any_contact"}


def test_default_schedule_values():
    tree = ExposureTree.default(0.025)
    assert default_alpha_schedule(tree, 0.025) == {
        "any_activity": 0.025, "any_sports": 0.025, "no_sports": 0.025, "any_contact": 0.0125,
        "no_contact": 0.0125, "any_collision": 0.00625, "no_collision": 0.00625}
    assert tree.alphas == default_alpha_schedule(tree, 0.025)


def test_depth_one_tree():
    tree = ExposureTree.from_config([{"id": "root"}, {"id": "a", "parent": "root"}, {"id": "b", "parent": "root"}], 0.05)
    assert default_alpha_schedule(tree, 0.05) == {"root": 0.05, "a": 0.05, "b": 0.05}


def test_co_primary_split():
    assert co_primary_alpha(0.05, 2) == 0.025


@pytest.mark.parametrize("pvals, bold", [(DEPRESSION, BOLD_DEPRESSION), (HEALTH, BOLD_HEALTH)])
def test_table3_replay(pvals, bold):
    trace = run_gatekeeping(ExposureTree.default(0.025), pvals.__getitem__)
    assert set(trace.rejected()) == bold
    for node in ORDER:
        assert trace.results[node].tested
        assert trace.results[node].decision == (REJECTED if node in bold else RETAINED)


def test_root_retained_stops():
    calls = []
    trace = run_gatekeeping(ExposureTree.default(0.025), lambda k: calls.append(k) or 0.5)
    assert calls == ["any_activity"]
    assert trace.tested() == ["any_activity"]
    assert all(trace.results[k].decision == NOT_REACHED for k in ORDER[1:])


def test_all_zero_rejects_everything():
    trace = run_gatekeeping(ExposureTree.default(0.025), lambda k: 0.0)
    assert trace.rejected() == ORDER and trace.calls == 7


def test_ties_are_retained():
    trace = run_gatekeeping(ExposureTree.default(0.025), lambda k: 0.025)
    assert trace.results["any_activity"].decision == RETAINED


def test_supplier_failure_marks_subtree():
    def supplier(node):
        if node == "any_sports":
            raise RuntimeError("no controls")
        return 0.0

    trace = run_gatekeeping(ExposureTree.default(0.025), supplier)
    r = trace.results["any_sports"]
    assert not r.tested and r.decision == NOT_REACHED and "no controls" in r.error
    for k in ("any_contact", "no_contact", "any_collision", "no_collision"):
        assert trace.results[k].decision == NOT_REACHED
    assert trace.results["no_sports"].decision == REJECTED


def test_invalid_p_is_an_error():
    trace = run_gatekeeping(ExposureTree.default(0.025), lambda k: math.nan)
    assert trace.results["any_activity"].error and trace.tested() == []


def test_executor_gives_same_trace():
    with ThreadPoolExecutor(2) as ex:
        trace = run_gatekeeping(ExposureTree.default(0.025), DEPRESSION.__getitem__, executor=ex)
    assert set(trace.rejected()) == BOLD_DEPRESSION and trace.calls == 7


@pytest.mark.parametrize(
    "entries, message",
    [
        ([{"id": "a"}, {"id": "b"}], "root"),
        ([{"id": "a"}, {"id": "b", "parent": "x"}], "parent"),
        ([{"id": "a", "alpha": 0.01}, {"id": "b", "parent": "a", "alpha": 0.02}], "alpha"),
        ([{"id": "a", "alpha": 1.5}], "alpha"),
    ],
)
def test_tree_validation(entries, message):
    with pytest.raises(TreeError, match=message):
        ExposureTree.from_config(entries, 0.05).validate()


def test_cycle_rejected():
    with pytest.raises(TreeError):
        ExposureTree([TreeNode("r", "r", None, 0.05), TreeNode("a", "a", "b", 0.05),
                      TreeNode("b", "b", "a", 0.05)]).validate()


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=7, max_size=7), st.lists(st.floats(0, 1), min_size=7, max_size=7))
def test_gating_soundness_laziness_monotonicity(p, shrink):
    tree = ExposureTree.default(0.025)
    big = dict(zip(ORDER, p))
    small = {k: v * s for (k, v), s in zip(big.items(), shrink)}
    calls = []
    a = run_gatekeeping(tree, lambda k: calls.append(k) or big[k])
    b = run_gatekeeping(tree, small.__getitem__)
    assert len(calls) == len(a.tested()) == a.calls
    for trace in (a, b):
        for k in trace.tested():
            parent = tree.nodes[k].parent
            assert parent is None or trace.results[parent].decision == REJECTED
    assert set(a.rejected()) <= set(b.rejected())
    assert set(a.tested()) <= set(b.tested())


def test_zero_reps():
    with pytest.raises(ValueError):
        validate_fwer(ExposureTree.default(0.05), GeneratorSpec(n=200), 0)


def test_huge_effects_power():
    # 10 outcome SDs planted at every split: every node null is false
    spec = GeneratorSpec(n=300, seed=3, confounding=0.5).with_effects(
        "phq9_total", {"any_activity": -50.0, "any_sports": -50.0, "any_contact": -50.0, "any_collision": -50.0})
    tree = ExposureTree.default(0.05)
    res = validate_fwer(tree, spec, 100)
    assert res.true_nulls == []
    assert res.fwer == 0
    for k in ORDER:
        assert res.rejection_rate[k] >= 0.99, k


def test_global_null_smoke():
    res = validate_fwer(ExposureTree.default(0.05), GeneratorSpec(n=300, seed=4, confounding=0.5), 40)
    assert res.true_nulls == ORDER and res.failures == 0
    assert 0 <= res.fwer <= 0.2
    assert res.bound == pytest.approx(0.05 + 2 * math.sqrt(0.05 * 0.95 / 40))
