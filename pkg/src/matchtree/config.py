"""Run configuration: YAML defaults, user overrides, validation and hashing."""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping

import yaml

from .cohort import EXPOSURE_NODES, CovariateSchema, FileLayout, SportTaxonomy, default_schema
from .gatekeeper import ExposureTree, TreeError, co_primary_alpha, default_alpha_schedule
from .pipeline import Settings
from .simulate import GeneratorSpec

OUTCOME_TYPES = ("continuous", "binary")


class ConfigError(ValueError):
    pass


def default_config() -> dict:
    text = resources.files("matchtree").joinpath("data/default_config.yaml").read_text(encoding="utf-8")
    return yaml.safe_load(text)


def merge(base: dict, override: Mapping) -> dict:
    """Recursive dict merge; lists and scalars in ``override`` replace those in ``base``."""
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path: str | Path | None = None, overrides: Mapping | None = None) -> dict:
    cfg = default_config()
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                user = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError(f"config {path} must be a mapping at the top level")
        cfg = merge(cfg, user)
    if overrides:
        cfg = merge(cfg, {k: v for k, v in overrides.items() if v is not None})
    return cfg


def _jsonable(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def config_hash(cfg: Mapping) -> str:
    """Short digest of the resolved configuration, excluding output location and worker count."""
    keep = {k: v for k, v in cfg.items() if k not in ("outdir", "workers")}
    blob = json.dumps(_jsonable(keep), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class OutcomeSpec:
    name: str
    kind: str
    primary: bool = False


@dataclass
class RunConfig:
    raw: dict
    hash: str
    schema: CovariateSchema
    taxonomy: SportTaxonomy
    layout: FileLayout
    settings: Settings
    outcomes: list[OutcomeSpec]
    base_tree: ExposureTree

    @property
    def primary(self) -> list[OutcomeSpec]:
        return [o for o in self.outcomes if o.primary]

    @property
    def outcome_alpha(self) -> float:
        """Level for each outcome's traversal: the overall level split across primaries."""
        return co_primary_alpha(float(self.raw["alpha"]), max(len(self.primary), 1))

    def tree_for(self, global_alpha: float | None = None) -> ExposureTree:
        a = self.outcome_alpha if global_alpha is None else global_alpha
        tree = self.base_tree.with_alphas(default_alpha_schedule(self.base_tree, a))
        overrides = {e["id"]: e["alpha"] for e in self.raw.get("tree") or [] if e.get("alpha") is not None}
        overrides.update(self.raw.get("alpha_overrides") or {})
        try:
            return tree.with_alphas({k: float(v) for k, v in overrides.items()})
        except TreeError as exc:
            raise ConfigError(f"alpha schedule: {exc}") from None

    def generator(self) -> GeneratorSpec:
        sim = self.raw.get("simulation") or {}
        gen = dict(sim.get("generator") or {})
        gen.setdefault("seed", self.raw["seed"])
        try:
            return GeneratorSpec.from_config(gen)
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"simulation generator: {exc}") from None


def _float(cfg, key):
    try:
        return float(cfg[key])
    except (TypeError, ValueError):
        raise ConfigError(f"{key!r} must be a number, got {cfg[key]!r}") from None


def resolve(cfg: dict) -> RunConfig:
    """Build and validate the typed pieces of a merged config."""
    alpha = _float(cfg, "alpha")
    if not 0 < alpha < 1:
        raise ConfigError("alpha must lie in (0, 1)")
    level = _float(cfg, "level")
    if not 0 < level < 1:
        raise ConfigError("level must lie in (0, 1)")
    caliper = _float(cfg, "caliper")
    if not caliper > 0:
        raise ConfigError("caliper must be positive (use .inf to disable)")
    max_k = int(cfg["max_k"])
    if max_k < 1:
        raise ConfigError("max_k must be at least 1")
    esc = cfg.get("escalation") or {}
    schedule = esc.get("schedule")
    if schedule is not None:
        try:
            schedule = tuple((int(a), int(b)) for a, b in schedule)
        except (TypeError, ValueError):
            raise ConfigError("escalation.schedule must be a list of [k_c, k_e] pairs") from None
        if not schedule or any(a < 1 or b < 1 for a, b in schedule):
            raise ConfigError("escalation.schedule entries must be positive")
    smd = cfg.get("smd") or {}
    if smd.get("weights", "exposed") not in ("exposed", "harmonic"):
        raise ConfigError("smd.weights must be 'exposed' or 'harmonic'")
    settings = Settings(caliper=caliper, max_k=max_k, schedule=schedule,
                        threshold=float(smd.get("acceptable", 0.2)), ideal=float(smd.get("ideal", 0.1)),
                        weights=smd.get("weights", "exposed"), level=level)
    try:
        schema = CovariateSchema.from_config(cfg["schema"]) if cfg.get("schema") else default_schema()
        taxonomy = SportTaxonomy.from_config(cfg.get("taxonomy"))
        layout = FileLayout.from_config(cfg.get("layout"))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"schema/taxonomy/layout: {exc}") from None

    outcomes = []
    for item in cfg.get("outcomes") or []:
        if not isinstance(item, Mapping) or "name" not in item:
            raise ConfigError(f"outcome entries need a name: {item!r}")
        kind = item.get("type", "continuous")
        if kind not in OUTCOME_TYPES:
            raise ConfigError(f"outcome {item['name']!r}: type must be one of {OUTCOME_TYPES}")
        outcomes.append(OutcomeSpec(str(item["name"]), kind, bool(item.get("primary", False))))
    if not outcomes:
        raise ConfigError("no outcomes configured")
    if len({o.name for o in outcomes}) != len(outcomes):
        raise ConfigError("duplicate outcome names")

    try:
        tree = ExposureTree.from_config(cfg["tree"], alpha) if cfg.get("tree") else ExposureTree.default(alpha)
    except (TreeError, KeyError, TypeError) as exc:
        raise ConfigError(f"tree: {exc}") from None
    unknown = [k for k in tree.nodes if k not in EXPOSURE_NODES]
    if unknown:
        raise ConfigError(f"tree references nodes outside the exposure hierarchy: {unknown}")
    run = RunConfig(cfg, config_hash(cfg), schema, taxonomy, layout, settings, outcomes, tree)
    bad = set(cfg.get("alpha_overrides") or {}) - set(tree.nodes)
    if bad:
        raise ConfigError(f"alpha_overrides name unknown nodes {sorted(bad)}")
    run.tree_for()  # schedule must validate
    return run
