"""Synthetic cohorts with known node effects.

Covariates are drawn independently per schema entry.  Exposure follows the
tree through sequential logistic splits whose slopes, multiplied by a
confounding strength, tie exposure to covariates.  Outcomes add a covariate
(prognostic) term, the effects of every node a subject belongs to, and noise.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np
from scipy.special import expit, logit

from .cohort import NODES, SPLITS, Cohort, CovariateSchema, Subject, SportTaxonomy, default_schema

# split node -> parent; the split draws membership of the node among parent members
SPLIT_OF = {"any_activity": None, "any_sports": "any_activity", "any_contact": "any_sports",
            "any_collision": "any_contact"}
LEAVES = ("no_sports", "no_contact", "any_collision", "no_collision")
NON_SPORTS = ("band", "drama", "debate", "choir", "student government", "art club")

DEFAULT_COVARIATES = {
    "age": {"mean": 15.5, "sd": 1.4},
    "gender": {"male": 0.47, "female": 0.53},
    "race": {"white": 0.73, "black": 0.12, "hispanic": 0.09, "asian": 0.015, "islander": 0.003,
             "native_american": 0.013, "mixed": 0.016, "other": 0.006, "missing": 0.007},
    "region": {"northeast": 0.165, "midwest": 0.25, "south": 0.38, "west": 0.205},
    "income": {"q1": 0.17, "q2": 0.245, "q3": 0.17, "q4": 0.215, "q5": 0.2},
    "family_structure": {"two_parent_bio": 0.58, "two_parent_nonbio": 0.13, "single_parent_other": 0.29},
    "parent_education": {"less_than_hs": 0.033, "high_school": 0.325, "aa_vocational": 0.175,
                         "ba_bs": 0.255, "higher_degree": 0.21, "missing": 0.002},
    "school": {"public": 0.855, "private": 0.1, "home": 0.025, "other": 0.015, "missing": 0.005},
}

# rates follow the covariate table's group sizes: 1515 of 2088 active, 921 of 1515 in
# sports, 757 of 921 in contact sports, 303 of 757 in collision sports
DEFAULT_EXPOSURE = {
    "any_activity": {"rate": 0.726, "slopes": {
        "income=q1": -0.9, "income=q2": -0.5, "income=q5": 0.4,
        "parent_education=less_than_hs": -0.9, "parent_education=high_school": -0.5,
        "parent_education=higher_degree": 0.5, "race=hispanic": -0.5, "race=white": 0.3,
        "family_structure=single_parent_other": -0.3, "school=home": -0.8,
        "region=northeast": 0.3, "age": -0.15}},
    "any_sports": {"rate": 0.608, "slopes": {
        "gender=female": -0.6, "income=q5": 0.2, "parent_education=higher_degree": 0.2, "age": -0.2}},
    "any_contact": {"rate": 0.82, "slopes": {"gender=female": -0.8, "age": -0.2}},
    "any_collision": {"rate": 0.40, "slopes": {"gender=female": -2.0, "region=south": 0.1}},
}

DEFAULT_OUTCOMES = {
    "phq9_total": {"kind": "continuous", "baseline": 5.0, "sd": 5.0, "effects": {}, "slopes": {
        "income=q1": 1.0, "parent_education=less_than_hs": 0.8, "gender=female": 1.0,
        "family_structure=single_parent_other": 0.8, "age": 0.3, "race=white": -0.3}},
    "self_rated_unhealthy": {"kind": "binary", "baseline": 0.15, "effects": {}, "slopes": {
        "income=q1": 0.04, "parent_education=less_than_hs": 0.03,
        "family_structure=single_parent_other": 0.02, "age": 0.01}},
}


@dataclass(frozen=True)
class GeneratorSpec:
    n: int = 1500
    seed: int = 0
    confounding: float = 1.0
    prognostic: float = 1.0
    covariates: Mapping = field(default_factory=lambda: copy.deepcopy(DEFAULT_COVARIATES))
    exposure: Mapping = field(default_factory=lambda: copy.deepcopy(DEFAULT_EXPOSURE))
    outcomes: Mapping = field(default_factory=lambda: copy.deepcopy(DEFAULT_OUTCOMES))
    # logistic model for having both primary outcomes observed
    attrition: Mapping = field(default_factory=lambda: {"rate": 1.0, "effects": {}, "slopes": {}})

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("cohort size must be at least 2")
        for split, model in self.exposure.items():
            if split not in SPLIT_OF:
                raise ValueError(f"unknown exposure split {split!r}")
            if not 0 < model["rate"] < 1:
                raise ValueError(f"split rate for {split!r} must lie in (0, 1)")
        if not 0 < self.attrition.get("rate", 1.0) <= 1:
            raise ValueError("availability rate must lie in (0, 1]")
        for name, model in self.outcomes.items():
            if model["kind"] == "binary" and not 0 < model["baseline"] < 1:
                raise ValueError(f"baseline risk for {name!r} must lie in (0, 1)")
            for node in model.get("effects", {}):
                if node not in NODES[:-1]:
                    raise ValueError(f"effect planted on unknown node {node!r}")

    def with_effects(self, outcome: str, effects: Mapping[str, float]) -> "GeneratorSpec":
        outcomes = copy.deepcopy(dict(self.outcomes))
        outcomes[outcome]["effects"] = dict(effects)
        return replace(self, outcomes=outcomes)

    def path_effect(self, leaf: str, outcome: str) -> float:
        """Total effect, relative to the control group, for subjects in ``leaf``."""
        eff = self.outcomes[outcome].get("effects", {})
        return sum(eff.get(k, 0.0) for k in ancestors(leaf))

    def true_null(self, node: str, tree=None, outcome: str = "phq9_total") -> bool:
        """The node's null holds iff every leaf beneath it has zero total effect."""
        leaves = tree.leaves_under(node) if tree is not None else leaves_under(node)
        return all(self.path_effect(leaf, outcome) == 0 for leaf in leaves)

    def to_config(self) -> dict:
        return {"n": self.n, "seed": self.seed, "confounding": self.confounding,
                "prognostic": self.prognostic, "covariates": copy.deepcopy(dict(self.covariates)),
                "exposure": copy.deepcopy(dict(self.exposure)),
                "outcomes": copy.deepcopy(dict(self.outcomes)),
                "attrition": copy.deepcopy(dict(self.attrition))}

    @classmethod
    def from_config(cls, cfg: Mapping | None) -> "GeneratorSpec":
        cfg = dict(cfg or {})
        base = cls()
        outcomes = copy.deepcopy(dict(base.outcomes))
        for name, model in (cfg.get("outcomes") or {}).items():
            outcomes[name] = {**outcomes.get(name, {}), **model}
        exposure = copy.deepcopy(dict(base.exposure))
        for split, model in (cfg.get("exposure") or {}).items():
            exposure[split] = {**exposure.get(split, {}), **model}
        return cls(
            n=int(cfg.get("n", base.n)),
            seed=int(cfg.get("seed", base.seed)),
            confounding=float(cfg.get("confounding", base.confounding)),
            prognostic=float(cfg.get("prognostic", base.prognostic)),
            covariates={**base.covariates, **(cfg.get("covariates") or {})},
            exposure=exposure,
            outcomes=outcomes,
            attrition={**base.attrition, **(cfg.get("attrition") or {})},
        )


def ancestors(node: str) -> list[str]:
    """``node`` and every node above it in the default hierarchy."""
    parent = {c: p for p, kids in SPLITS.items() for c in kids}
    out = [node]
    while out[-1] in parent:
        out.append(parent[out[-1]])
    return out


def leaves_under(node: str) -> list[str]:
    return [leaf for leaf in LEAVES if node in ancestors(leaf)]


@dataclass
class Simulated:
    cohort: Cohort
    members: np.ndarray  # n x len(NODES) booleans
    spec: GeneratorSpec
    true_nulls: dict[str, dict[str, bool]]  # outcome -> node -> null holds


def rng_for(seed: int, replicate: int | None = None) -> np.random.Generator:
    key = [int(seed)] if replicate is None else [int(seed), int(replicate)]
    return np.random.default_rng(np.random.SeedSequence(key))


def _features(schema: CovariateSchema, spec: GeneratorSpec, values: dict) -> dict[str, np.ndarray]:
    feats = {}
    for entry in schema.entries:
        col = values[entry.name]
        if entry.kind == "continuous":
            m = spec.covariates[entry.name]
            feats[entry.name] = (col - m["mean"]) / m["sd"]
        else:
            for lvl in entry.all_levels:
                feats[f"{entry.name}={lvl}"] = (col == lvl).astype(float)
    return feats


def _linear(feats: dict, slopes: Mapping[str, float], n: int) -> np.ndarray:
    out = np.zeros(n)
    for name, b in slopes.items():
        if name not in feats:
            raise ValueError(f"slope on unknown feature {name!r}")
        out += b * feats[name]
    return out


def generate(spec: GeneratorSpec, replicate: int | None = None, schema: CovariateSchema | None = None,
             taxonomy: SportTaxonomy | None = None) -> Simulated:
    """Draw one cohort; ``replicate`` selects an independent stream under the same seed."""
    schema = schema or default_schema()
    taxonomy = taxonomy or SportTaxonomy.default()
    rng = rng_for(spec.seed, replicate)
    n = spec.n
    values = {}
    for entry in schema.entries:
        model = spec.covariates[entry.name]
        if entry.kind == "continuous":
            values[entry.name] = rng.normal(model["mean"], model["sd"], n)
        else:
            levels = list(entry.all_levels)
            p = np.array([float(model.get(lvl, 0.0)) for lvl in levels])
            values[entry.name] = np.array(levels, dtype=object)[rng.choice(len(levels), n, p=p / p.sum())]
    feats = _features(schema, spec, values)

    col = {k: j for j, k in enumerate(NODES)}
    members = np.zeros((n, len(NODES)), dtype=bool)
    for split, parent in SPLIT_OF.items():
        model = spec.exposure[split]
        eta = logit(model["rate"]) + spec.confounding * _linear(feats, model.get("slopes", {}), n)
        draw = rng.random(n) < expit(eta)
        eligible = np.ones(n, bool) if parent is None else members[:, col[parent]]
        members[:, col[split]] = eligible & draw
    members[:, col["control"]] = ~members[:, col["any_activity"]]
    for parent, (yes, no) in SPLITS.items():
        members[:, col[no]] = members[:, col[parent]] & ~members[:, col[yes]]

    att = spec.attrition
    if att.get("rate", 1.0) >= 1:
        available = np.ones(n, bool)
    else:
        eta = logit(att["rate"]) + _linear(feats, att.get("slopes", {}), n)
        for node, b in att.get("effects", {}).items():
            eta = eta + b * members[:, col[node]]
        available = rng.random(n) < expit(eta)

    outcomes, kinds = {}, {}
    for name, model in spec.outcomes.items():
        shift = sum(members[:, col[k]] * float(v) for k, v in model.get("effects", {}).items())
        prog = spec.prognostic * _linear(feats, model.get("slopes", {}), n)
        if model["kind"] == "continuous":
            y = model["baseline"] + prog + shift + rng.normal(0.0, model["sd"], n)
        else:
            risk = np.clip(model["baseline"] + prog + shift, 0.0, 1.0)
            y = (rng.random(n) < risk).astype(float)
        outcomes[name] = np.where(available, y, np.nan)
        kinds[name] = model["kind"]

    pools = {"no_sports": NON_SPORTS, "no_contact": sorted(taxonomy.non_contact),
             "no_collision": sorted(taxonomy.contact), "any_collision": sorted(taxonomy.collision)}
    picks = {leaf: rng.integers(0, len(pool), n) for leaf, pool in pools.items()}
    width = len(str(n - 1))
    subjects = []
    for i in range(n):
        leaf = next((lf for lf in LEAVES if members[i, col[lf]]), None)
        acts = frozenset() if leaf is None else frozenset({pools[leaf][picks[leaf][i]]})
        covs = {e.name: (float(values[e.name][i]) if e.kind == "continuous" else values[e.name][i])
                for e in schema.entries}
        subjects.append(Subject(f"s{i:0{width}d}", covs, acts, {}, bool(available[i])))
    primary = tuple(k for k in ("self_rated_unhealthy", "phq9_total") if k in outcomes) or tuple(outcomes)
    cohort = Cohort(tuple(subjects), schema, outcomes, kinds, primary)
    nulls = {name: {k: spec.true_null(k, outcome=name) for k in NODES[:-1]} for name in spec.outcomes}
    return Simulated(cohort, members, spec, nulls)


def replicate_trace(args) -> tuple[list[str], int]:
    """One FWER replicate: generate, then gatekeep with lazily matched nodes.

    Returns the rejected nodes and the number of reached nodes whose analysis failed.
    """
    from .gatekeeper import run_gatekeeping
    from .pipeline import Study

    tree, spec, seed, rep, outcome, settings = args
    sim = generate(replace(spec, seed=seed), replicate=rep)
    study = Study(sim.cohort, settings=settings, members=sim.members)
    trace = run_gatekeeping(tree, lambda node: study.test(node, outcome))
    failed = sum(1 for r in trace.results.values() if r.error is not None)
    return trace.rejected(), failed
