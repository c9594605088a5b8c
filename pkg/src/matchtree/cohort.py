"""Cohort data model, ingestion, exposure classification and outcome derivation.

A cohort is a tuple of :class:`Subject` records plus a columnar outcome table.
Exposure membership is derived from each subject's free-text activity list
against a :class:`SportTaxonomy`, and lands in one of the nodes of the
exposure hierarchy::

    any_activity
    |-- any_sports
    |   |-- any_contact
    |   |   |-- any_collision
    |   |   `-- no_collision
    |   `-- no_contact
    `-- no_sports

Subjects without any activity form the common ``control`` group.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

NODES = (
    "any_activity",
    "any_sports",
    "no_sports",
    "any_contact",
    "no_contact",
    "any_collision",
    "no_collision",
    "control",
)
EXPOSURE_NODES = NODES[:-1]

# parent -> (children); every split partitions the parent
SPLITS = {
    "any_activity": ("any_sports", "no_sports"),
    "any_sports": ("any_contact", "no_contact"),
    "any_contact": ("any_collision", "no_collision"),
}

PHQ_ITEMS = tuple(f"phq{i}" for i in range(1, 10))
CAGE_ITEMS = tuple(f"cage{i}" for i in range(1, 5))
LIFE_SAT_ITEMS = tuple(f"ls{i}" for i in range(1, 5))
RAW_OUTCOME_FIELDS = (
    ("health",)
    + PHQ_ITEMS
    + ("weight_lbs", "height_in", "bmi_category", "never_drinks")
    + CAGE_ITEMS
    + ("binge_episodes",)
    + LIFE_SAT_ITEMS
)
DERIVED_OUTCOMES = {
    "self_rated_unhealthy": "binary",
    "phq9_total": "continuous",
    "bmi": "continuous",
    "overweight": "binary",
    "problematic_drinking": "binary",
    "binge_drinking": "binary",
    "life_satisfaction": "continuous",
}
PRIMARY_OUTCOMES = ("self_rated_unhealthy", "phq9_total")


class SchemaError(ValueError):
    """Input does not carry the columns or levels the schema requires."""


class IngestionError(ValueError):
    """A data row cannot be turned into a valid subject."""


def normalize_label(label: str) -> str:
    return re.sub(r"\s+", " ", label.strip()).casefold()


# ---------------------------------------------------------------------------
# schema


@dataclass(frozen=True)
class CovariateEntry:
    name: str
    kind: str  # "continuous" or "categorical"
    levels: tuple[str, ...] = ()
    missing: str = "missing"

    def __post_init__(self):
        if self.kind not in ("continuous", "categorical"):
            raise SchemaError(f"covariate {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "categorical":
            if len(self.levels) < 2:
                raise SchemaError(f"covariate {self.name!r} needs at least 2 levels")
            if self.missing in self.levels:
                raise SchemaError(f"covariate {self.name!r}: missing level listed as a regular level")

    @property
    def all_levels(self) -> tuple[str, ...]:
        """Declared levels followed by the explicit missing level."""
        return self.levels + (self.missing,)

    def parse(self, raw: str):
        if self.kind == "continuous":
            return float(raw)  # ValueError propagates; caller reports row/column
        key = normalize_label(raw)
        for level in self.levels:
            if normalize_label(level) == key:
                return level
        return self.missing


@dataclass(frozen=True)
class CovariateSchema:
    """Ordered covariate list; the order fixes design-matrix column order."""

    entries: tuple[CovariateEntry, ...]

    def __post_init__(self):
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate covariate names in schema")

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def __getitem__(self, name: str) -> CovariateEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    @classmethod
    def from_config(cls, items: Sequence[Mapping]) -> "CovariateSchema":
        entries = []
        for item in items:
            entries.append(
                CovariateEntry(
                    name=str(item["name"]),
                    kind=str(item.get("kind", "categorical")),
                    levels=tuple(str(v) for v in item.get("levels", ())),
                    missing=str(item.get("missing", "missing")),
                )
            )
        return cls(tuple(entries))

    def to_config(self) -> list[dict]:
        out = []
        for e in self.entries:
            item = {"name": e.name, "kind": e.kind}
            if e.kind == "categorical":
                item["levels"] = list(e.levels)
                item["missing"] = e.missing
            out.append(item)
        return out


def default_schema() -> CovariateSchema:
    """Baseline confounders summarized in the study's covariate table."""
    cat = lambda name, levels: CovariateEntry(name, "categorical", tuple(levels))  # noqa: E731
    return CovariateSchema(
        (
            CovariateEntry("age", "continuous"),
            cat("gender", ["male", "female"]),
            cat(
                "race",
                ["white", "black", "hispanic", "asian", "islander",
                 "native_american", "mixed", "other"],
            ),
            cat("region", ["northeast", "midwest", "south", "west"]),
            cat("income", ["q1", "q2", "q3", "q4", "q5"]),
            cat("family_structure", ["two_parent_bio", "two_parent_nonbio", "single_parent_other"]),
            cat(
                "parent_education",
                ["less_than_hs", "high_school", "aa_vocational", "ba_bs", "higher_degree"],
            ),
            cat("school", ["public", "private", "home", "other"]),
        )
    )


# ---------------------------------------------------------------------------
# taxonomy

_NON_CONTACT = ("Track", "Volleyball", "Cross Country", "Tennis", "Swimming", "Golf",
                "Racquetball", "Crew")
_CONTACT = ("Basketball", "Soccer", "Baseball", "Softball", "Gymnastics", "Field Hockey",
            "Fencing", "Flag Football", "Water Polo", "Roller Hockey")
_COLLISION = ("Football", "Wrestling", "Martial Arts", "Lacrosse", "Hockey", "Boxing",
              "Diving", "Rugby")


@dataclass(frozen=True)
class SportTaxonomy:
    non_contact: frozenset[str]
    contact: frozenset[str]
    collision: frozenset[str]
    # highest priority first; a multi-sport subject takes the first class it hits
    precedence: tuple[str, ...] = ("collision", "contact", "non_contact")

    def __post_init__(self):
        for attr in ("non_contact", "contact", "collision"):
            object.__setattr__(self, attr, frozenset(normalize_label(s) for s in getattr(self, attr)))
        if (self.non_contact & self.contact) or (self.non_contact & self.collision) or (
            self.contact & self.collision
        ):
            raise SchemaError("sport taxonomy classes overlap")
        if sorted(self.precedence) != ["collision", "contact", "non_contact"]:
            raise SchemaError(f"bad precedence {self.precedence!r}")

    @classmethod
    def default(cls) -> "SportTaxonomy":
        return cls(frozenset(_NON_CONTACT), frozenset(_CONTACT), frozenset(_COLLISION))

    @classmethod
    def from_config(cls, cfg: Mapping | None) -> "SportTaxonomy":
        if not cfg:
            return cls.default()
        base = cls.default()
        return cls(
            frozenset(cfg.get("non_contact", base.non_contact)),
            frozenset(cfg.get("contact", base.contact)),
            frozenset(cfg.get("collision", base.collision)),
            tuple(cfg.get("precedence", base.precedence)),
        )

    def sport_class(self, label: str) -> str | None:
        key = normalize_label(label)
        for name in ("non_contact", "contact", "collision"):
            if key in getattr(self, name):
                return name
        return None


# ---------------------------------------------------------------------------
# subjects and outcomes


@dataclass(frozen=True)
class Subject:
    id: str
    covariates: Mapping[str, object]
    activities: frozenset[str] = frozenset()
    raw_outcome_fields: Mapping[str, str] = field(default_factory=dict)
    wave4_present: bool = True


@dataclass(frozen=True)
class Outcomes:
    """Derived outcomes for one subject; ``None`` marks a missing value."""

    self_rated_unhealthy: int | None = None
    phq9_total: int | None = None
    bmi: float | None = None
    overweight: int | None = None
    problematic_drinking: int | None = None
    binge_drinking: int | None = None
    life_satisfaction: int | None = None

    @property
    def availability(self) -> bool:
        return self.self_rated_unhealthy is not None and self.phq9_total is not None


def classify_exposure(subject: Subject, taxonomy: SportTaxonomy) -> frozenset[str]:
    """Return the set of hierarchy nodes the subject belongs to.

    Unrecognized activities still count as (non-sport) activities.  A subject
    reporting sports from several classes is placed by ``taxonomy.precedence``.
    """
    activities = [a for a in subject.activities if normalize_label(a)]
    if not activities:
        return frozenset({"control"})
    classes = {taxonomy.sport_class(a) for a in activities} - {None}
    if not classes:
        return frozenset({"any_activity", "no_sports"})
    top = next(c for c in taxonomy.precedence if c in classes)
    if top == "non_contact":
        return frozenset({"any_activity", "any_sports", "no_contact"})
    leaf = "any_collision" if top == "collision" else "no_collision"
    return frozenset({"any_activity", "any_sports", "any_contact", leaf})


_HEALTH = {"excellent": 0, "very good": 0, "good": 0, "fair": 1, "poor": 1}
_HEALTH_CODES = {"1": 0, "2": 0, "3": 0, "4": 1, "5": 1}
_PHQ = {"not at all": 0, "several days": 1, "more than half the days": 2, "nearly every day": 3}
_LIFE_SAT = {"strongly disagree": 0, "disagree": 1, "agree": 2, "strongly agree": 3}
_YES = {"yes", "y", "true", "1"}
_NO = {"no", "n", "false", "0"}


def _blank(value) -> bool:
    return value is None or str(value).strip() == ""


def _item(value, labels: Mapping[str, int]) -> int | None:
    if _blank(value):
        return None
    key = normalize_label(str(value))
    if key in labels:
        return labels[key]
    try:
        score = int(float(key))
    except ValueError:
        return None
    return score if 0 <= score <= max(labels.values()) else None


def _flag(value) -> bool | None:
    if _blank(value):
        return None
    key = normalize_label(str(value))
    if key in _YES:
        return True
    if key in _NO:
        return False
    return None


def _number(value) -> float | None:
    if _blank(value):
        return None
    try:
        x = float(value)
    except ValueError:
        return None
    return x if math.isfinite(x) else None


def _item_sum(raw: Mapping[str, str], items: Sequence[str], labels) -> int | None:
    scores = [_item(raw.get(k), labels) for k in items]
    if any(s is None for s in scores):
        return None
    return sum(scores)


def derive_outcomes(subject: Subject) -> Outcomes:
    """Derive the primary and secondary outcomes from raw survey fields.

    Self-rated health is coded 1 for fair/poor.  Any missing PHQ-9 or life
    satisfaction item makes the total missing.  Never-drinkers score 0 on both
    drinking indicators regardless of the CAGE and episode fields.
    """
    if not subject.wave4_present:
        return Outcomes()
    raw = subject.raw_outcome_fields

    health = raw.get("health")
    unhealthy = None
    if not _blank(health):
        key = normalize_label(str(health))
        unhealthy = _HEALTH.get(key, _HEALTH_CODES.get(key))

    bmi = None
    weight, height = _number(raw.get("weight_lbs")), _number(raw.get("height_in"))
    if weight is not None and height is not None and weight > 0 and height > 0:
        bmi = 703.0 * weight / height**2

    overweight = None
    category = raw.get("bmi_category")
    if not _blank(category):
        overweight = {"underweight": 0, "normal": 0, "overweight": 1, "obese": 1}.get(
            normalize_label(str(category))
        )

    never = _flag(raw.get("never_drinks"))
    if never:
        problematic, binge = 0, 0
    else:
        cage = [_flag(raw.get(k)) for k in CAGE_ITEMS]
        problematic = None if any(c is None for c in cage) else int(sum(cage) >= 2)
        episodes = _number(raw.get("binge_episodes"))
        binge = None if episodes is None or episodes < 0 else int(episodes >= 5)

    return Outcomes(
        self_rated_unhealthy=unhealthy,
        phq9_total=_item_sum(raw, PHQ_ITEMS, _PHQ),
        bmi=bmi,
        overweight=overweight,
        problematic_drinking=problematic,
        binge_drinking=binge,
        life_satisfaction=_item_sum(raw, LIFE_SAT_ITEMS, _LIFE_SAT),
    )


# ---------------------------------------------------------------------------
# cohort


@dataclass(frozen=True)
class Cohort:
    """Subjects plus a columnar outcome table (NaN marks missing)."""

    subjects: tuple[Subject, ...]
    schema: CovariateSchema
    outcomes: Mapping[str, np.ndarray]
    outcome_kinds: Mapping[str, str]
    primary: tuple[str, ...] = PRIMARY_OUTCOMES
    _columns: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        ids = [s.id for s in self.subjects]
        if len(set(ids)) != len(ids):
            raise IngestionError("duplicate subject ids in cohort")
        for name, col in self.outcomes.items():
            if len(col) != len(self.subjects):
                raise ValueError(f"outcome column {name!r} has wrong length")

    def __len__(self) -> int:
        return len(self.subjects)

    @property
    def ids(self) -> np.ndarray:
        if "_ids" not in self._columns:
            self._columns["_ids"] = np.array([s.id for s in self.subjects], dtype=object)
        return self._columns["_ids"]

    @property
    def available(self) -> np.ndarray:
        """Both co-primary outcomes observed."""
        ok = np.ones(len(self), dtype=bool)
        for name in self.primary:
            ok &= ~np.isnan(self.outcomes[name])
        return ok

    def covariate_column(self, name: str) -> np.ndarray:
        """Continuous values as floats, categorical values as codes into ``all_levels``."""
        if name in self._columns:
            return self._columns[name]
        entry = self.schema[name]
        values = [s.covariates[name] for s in self.subjects]
        if entry.kind == "continuous":
            col = np.asarray(values, dtype=float)
        else:
            index = {lvl: i for i, lvl in enumerate(entry.all_levels)}
            col = np.fromiter((index[v] for v in values), dtype=np.int64, count=len(values))
        col.flags.writeable = False
        self._columns[name] = col
        return col


def membership_matrix(cohort: Cohort, taxonomy: SportTaxonomy) -> np.ndarray:
    """Boolean matrix, one row per subject, one column per entry of :data:`NODES`."""
    out = np.zeros((len(cohort), len(NODES)), dtype=bool)
    col = {n: j for j, n in enumerate(NODES)}
    for i, s in enumerate(cohort.subjects):
        for node in classify_exposure(s, taxonomy):
            out[i, col[node]] = True
    return out


def node_counts(members: np.ndarray) -> dict[str, int]:
    return {n: int(members[:, j].sum()) for j, n in enumerate(NODES)}


def check_partition(members: np.ndarray) -> None:
    """Raise AssertionError unless every split partitions its parent."""
    col = {n: j for j, n in enumerate(NODES)}
    act, ctl = members[:, col["any_activity"]], members[:, col["control"]]
    assert not np.any(act & ctl) and np.all(act | ctl), "activity/control split broken"
    for parent, (a, b) in SPLITS.items():
        p, ca, cb = members[:, col[parent]], members[:, col[a]], members[:, col[b]]
        assert not np.any(ca & cb), f"{a} and {b} overlap"
        assert np.array_equal(ca | cb, p), f"{a} + {b} != {parent}"


@dataclass(frozen=True)
class FileLayout:
    """How a delimited cohort file maps onto the canonical field names."""

    delimiter: str = ","
    activity_separator: str = ";"
    columns: Mapping[str, str] = field(default_factory=dict)  # canonical -> header
    derive: bool = True
    direct_outcomes: Mapping[str, str] = field(default_factory=dict)  # name -> kind
    primary: tuple[str, ...] = PRIMARY_OUTCOMES

    def header(self, canonical: str) -> str:
        return self.columns.get(canonical, canonical)

    @classmethod
    def from_config(cls, cfg: Mapping | None) -> "FileLayout":
        cfg = dict(cfg or {})
        direct = cfg.get("direct_outcomes") or {}
        return cls(
            delimiter=cfg.get("delimiter", ","),
            activity_separator=cfg.get("activity_separator", ";"),
            columns=dict(cfg.get("columns") or {}),
            derive=bool(cfg.get("derive", True)),
            direct_outcomes=dict(direct),
            primary=tuple(cfg.get("primary", PRIMARY_OUTCOMES)),
        )


def _outcome_table(subjects: Sequence[Subject], layout: FileLayout, direct_rows) -> tuple[dict, dict]:
    table, kinds = {}, {}
    if layout.derive:
        derived = [derive_outcomes(s) for s in subjects]
        for name, kind in DERIVED_OUTCOMES.items():
            vals = [getattr(o, name) for o in derived]
            table[name] = np.array([np.nan if v is None else float(v) for v in vals])
            kinds[name] = kind
    for name, kind in layout.direct_outcomes.items():
        table[name] = np.array([_number(r.get(name)) if s.wave4_present else None
                                for r, s in zip(direct_rows, subjects)], dtype=float)
        kinds[name] = kind
    for name in layout.primary:
        if name not in table:
            raise SchemaError(f"primary outcome {name!r} is neither derived nor a direct column")
    return table, kinds


def load_cohort(path: str | Path, schema: CovariateSchema, layout: FileLayout | None = None) -> Cohort:
    """Read a delimited file with a header row into a :class:`Cohort`."""
    layout = layout or FileLayout()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, delimiter=layout.delimiter)
        header = reader.fieldnames or []
        required = ["id", "activities", *schema.names]
        if layout.derive:
            required += list(RAW_OUTCOME_FIELDS)
        required += list(layout.direct_outcomes)
        for canonical in required:
            if layout.header(canonical) not in header:
                raise SchemaError(f"missing required column {canonical!r}")
        wave_col = layout.header("wave4_present")
        subjects, direct_rows, seen = [], [], set()
        for lineno, row in enumerate(reader, start=2):
            sid = (row[layout.header("id")] or "").strip()
            if not sid:
                raise IngestionError(f"line {lineno}: empty id")
            if sid in seen:
                raise IngestionError(f"line {lineno}: duplicate id {sid!r}")
            seen.add(sid)
            covs = {}
            for entry in schema.entries:
                raw = row[layout.header(entry.name)] or ""
                try:
                    covs[entry.name] = entry.parse(raw)
                except ValueError:
                    raise IngestionError(
                        f"line {lineno}: unparseable continuous value {raw!r} for {entry.name!r}"
                    ) from None
            acts = row[layout.header("activities")] or ""
            activities = frozenset(
                a.strip() for a in acts.split(layout.activity_separator) if a.strip()
            )
            wave4 = True
            if wave_col in header:
                flag = _flag(row[wave_col])
                wave4 = True if flag is None else flag
            raw_fields = {k: row[layout.header(k)] for k in RAW_OUTCOME_FIELDS
                          if layout.header(k) in header}
            subjects.append(Subject(sid, covs, activities, raw_fields, wave4))
            direct_rows.append({k: row[layout.header(k)] for k in layout.direct_outcomes})
    table, kinds = _outcome_table(subjects, layout, direct_rows)
    return Cohort(tuple(subjects), schema, table, kinds, layout.primary)


def write_cohort(cohort: Cohort, path: str | Path, layout: FileLayout | None = None) -> None:
    """Write a cohort in the ingestion format understood by :func:`load_cohort`."""
    layout = layout or FileLayout()
    cols = ["id", "activities", *cohort.schema.names, "wave4_present"]
    if layout.derive:
        cols += list(RAW_OUTCOME_FIELDS)
    cols += list(layout.direct_outcomes)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter=layout.delimiter, lineterminator="\n")
        writer.writerow([layout.header(c) for c in cols])
        for i, s in enumerate(cohort.subjects):
            row = [s.id, layout.activity_separator.join(sorted(s.activities))]
            for entry in cohort.schema.entries:
                v = s.covariates[entry.name]
                row.append(repr(float(v)) if entry.kind == "continuous" else v)
            row.append("1" if s.wave4_present else "0")
            if layout.derive:
                row += [s.raw_outcome_fields.get(k, "") for k in RAW_OUTCOME_FIELDS]
            for name in layout.direct_outcomes:
                v = cohort.outcomes[name][i]
                row.append("" if np.isnan(v) else repr(float(v)))
            writer.writerow(row)
