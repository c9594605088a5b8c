import csv

import pytest

from matchtree.cohort import RAW_OUTCOME_FIELDS, default_schema
from matchtree.simulate import GeneratorSpec, generate

ACCEPTANCE = pytest.StashKey[list]()

BASE_COVARIATES = {
    "age": "15", "gender": "male", "race": "white", "region": "south", "income": "q3",
    "family_structure": "two_parent_bio", "parent_education": "ba_bs", "school": "public",
}


def raw_outcomes(**overrides):
    """A complete set of raw wave-4 fields; keyword arguments replace single fields."""
    row = {k: "" for k in RAW_OUTCOME_FIELDS}
    row.update({"health": "good", "weight_lbs": "150", "height_in": "68", "bmi_category": "normal",
                "never_drinks": "no", "cage1": "no", "cage2": "no", "cage3": "no", "cage4": "no",
                "binge_episodes": "0"})
    row.update({f"phq{i}": "not at all" for i in range(1, 10)})
    row.update({f"ls{i}": "agree" for i in range(1, 5)})
    row.update(overrides)
    return row


def write_rows(path, rows, drop=()):
    """Write cohort rows (dicts with id and activities) in the default ingestion format."""
    cols = ["id", "activities", *default_schema().names, *RAW_OUTCOME_FIELDS]
    cols = [c for c in cols if c not in drop]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, cols, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({**BASE_COVARIATES, **raw_outcomes(), **r})
    return path


@pytest.fixture(scope="session")
def small_sim():
    return generate(GeneratorSpec(n=400, seed=11, confounding=0.5))


@pytest.fixture
def criterion(request):
    """Record an acceptance line; all lines are printed in the terminal summary."""

    def record(number: int, passed: bool, detail: str):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        request.config.stash.setdefault(ACCEPTANCE, []).append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
