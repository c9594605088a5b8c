"""Command-line front end: match, test, attrition, simulate, report."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from pathlib import Path

import yaml

from . import __version__
from .attrition import attrition_table, format_p, format_row
from .cohort import IngestionError, SchemaError, load_cohort, write_cohort
from .config import ConfigError, RunConfig, load_config, resolve
from .gatekeeper import NOT_REACHED, run_gatekeeping, validate_fwer
from .matching import MatchedDesign
from .pipeline import NodeSkipped, Study, match_node

log = logging.getLogger("matchtree")


# ---------------------------------------------------------------------------
# output helpers


def _clean(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if hasattr(obj, "item"):  # numpy scalar
        return _clean(obj.item())
    return obj


class Output:
    def __init__(self, outdir: Path, config_hash: str):
        self.dir = Path(outdir)
        self.hash = config_hash

    def path(self, *parts) -> Path:
        p = self.dir.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def csv(self, name, header, rows) -> Path:
        p = self.path(name)
        with open(p, "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# config_hash={self.hash}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow(["" if v is None else _fmt(v) for v in r])
        return p

    def jsonl(self, name, records) -> Path:
        p = self.path(name)
        with open(p, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(_clean({"config_hash": self.hash, **rec}), sort_keys=True) + "\n")
        return p

    def text(self, name, lines) -> Path:
        p = self.path(name)
        p.write_text(f"# config_hash={self.hash}\n" + "\n".join(lines) + "\n", encoding="utf-8")
        return p


def _fmt(v):
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else ""
    return v


def _num(v, spec=".2f") -> str:
    return "NA" if v is None or not math.isfinite(v) else format(v, spec)


# ---------------------------------------------------------------------------
# context


class Context:
    def __init__(self, args):
        overrides = {"input": args.input, "outdir": args.outdir, "seed": args.seed, "workers": args.workers,
                     "alpha": args.alpha, "caliper": args.caliper, "max_k": args.max_k}
        self.raw = load_config(args.config, overrides)
        self.run: RunConfig = resolve(self.raw)
        self.out = Output(Path(self.raw["outdir"]), self.run.hash)
        self.workers = max(1, int(self.raw.get("workers") or 1))
        self._cohort = None

    @property
    def cohort(self):
        if self._cohort is None:
            path = self.raw.get("input")
            if not path:
                raise ConfigError("no input cohort given (use --input or set 'input' in the config)")
            self._cohort = load_cohort(path, self.run.schema, self.run.layout)
            log.info("loaded %d subjects from %s", len(self._cohort), path)
        return self._cohort

    def design_loader(self, node: str) -> MatchedDesign | None:
        p = self.out.dir / "designs" / f"{node}.csv"
        if not p.exists():
            return None
        with open(p, encoding="utf-8") as fh:
            first = fh.readline().strip()
        if first != f"# config_hash={self.run.hash}":
            return None
        return MatchedDesign.read(p)

    def study(self, reuse: bool = False) -> Study:
        return Study(self.cohort, self.run.taxonomy, self.run.settings,
                     design_loader=self.design_loader if reuse else None)


# ---------------------------------------------------------------------------
# match


def _match_job(args):
    study, node = args
    try:
        return match_node(study, node)
    except NodeSkipped as exc:
        return exc


def cmd_match(ctx: Context) -> dict:
    study = ctx.study()
    nodes = ctx.run.base_tree.order()
    if ctx.workers > 1:
        with ProcessPoolExecutor(ctx.workers) as pool:
            results = list(pool.map(_match_job, [(study, n) for n in nodes]))
    else:
        results = [_match_job((study, n)) for n in nodes]
    matches, records, count_rows, lines = {}, [], [], []
    lines.append(f"{'node':<14} {'E before':>8} {'C before':>8} {'E after':>8} {'C after':>8} "
                 f"{'structure':>9} {'max|SMD|':>8}  verdict")
    for node, res in zip(nodes, results):
        if isinstance(res, NodeSkipped):
            log.warning("%s", res)
            records.append({"node": node, "status": "skipped", "reason": str(res)})
            rows, z = study.node_rows(node)
            count_rows.append({"node": node, "exposed_before": int(z.sum()),
                               "control_before": int((~z).sum()), "exposed_after": 0, "control_after": 0})
            lines.append(f"{node:<14} skipped: {res}")
            continue
        study._matches[node] = res
        matches[node] = res
        c = res.counts
        count_rows.append(c)
        kc, ke = res.design.structure
        res.design.write(ctx.out.path("designs", f"{node}.csv"), f"config_hash={ctx.out.hash}")
        ctx.out.csv(f"balance/{node}.csv", ["covariate", "smd_before", "smd_after", "verdict"],
                    [(r["covariate"], r["smd_before"], r["smd_after"], r["verdict"]) for r in res.balance.rows()])
        records.append({"node": node, "status": "matched", "balanced": res.balanced, **c,
                        "balance": res.balance.summary(), "total_distance": res.design.total_distance,
                        "attempts": res.attempts, "notes": res.notes,
                        "propensity": res.propensity.to_dict() if res.propensity else None})
        verdict = res.balance.verdict if res.balanced else f"{res.balance.verdict} (unbalanced)"
        lines.append(f"{node:<14} {c['exposed_before']:>8} {c['control_before']:>8} {c['exposed_after']:>8} "
                     f"{c['control_after']:>8} {f'({kc},{ke})':>9} {res.balance.max_abs_after:>8.3f}  {verdict}")
    ctx.out.csv("counts.csv", ["node", "exposed_before", "control_before", "exposed_after", "control_after"],
                [(c["node"], c["exposed_before"], c["control_before"], c["exposed_after"], c["control_after"])
                 for c in count_rows])
    ctx.out.jsonl("match.jsonl", records)
    ctx.out.text("match.txt", lines)
    print("\n".join(lines))
    return {"study": study, "matches": matches, "counts": count_rows}


# ---------------------------------------------------------------------------
# test


def _check_outcome(cohort, spec):
    if spec.name not in cohort.outcomes:
        raise ConfigError(f"outcome {spec.name!r} is not in the cohort")
    have = cohort.outcome_kinds.get(spec.name)
    if have is not None and have != spec.kind:
        raise ConfigError(f"outcome {spec.name!r} configured as {spec.kind} but the data are {have}")


def cmd_test(ctx: Context, study: Study | None = None) -> dict:
    study = study or ctx.study(reuse=True)
    for spec in ctx.run.outcomes:
        _check_outcome(study.cohort, spec)
    tree = ctx.run.tree_for()
    executor = ThreadPoolExecutor(ctx.workers) if ctx.workers > 1 else None
    tables, records, lines, csv_rows = {}, [], [], []
    try:
        for spec in ctx.run.outcomes:
            trace = run_gatekeeping(tree, lambda node, s=spec: study.test(node, s.name, s.kind),
                                    executor=executor, label=spec.name)
            rows = []
            for node in trace.order:
                r = trace.results[node]
                rep = r.detail
                row = {"outcome": spec.name, "type": spec.kind, "primary": spec.primary, "node": node,
                       "tested": r.tested, "decision": r.decision, "alpha": r.alpha, "p_value": r.p_value,
                       "estimate": rep.estimate if rep else None, "ci_low": rep.ci_low if rep else None,
                       "ci_high": rep.ci_high if rep else None, "method": rep.method if rep else None,
                       "n_sets": rep.n_sets if rep else None, "error": r.error}
                rows.append(_clean(row))
            tables[spec.name] = rows
            records += rows
            lines += _table3_lines(spec, rows)
            csv_rows += [(r["outcome"], r["node"], r["estimate"], r["ci_low"], r["ci_high"], r["p_value"],
                          r["alpha"], r["decision"]) for r in rows]
    finally:
        if executor:
            executor.shutdown()
    ctx.out.csv("table3.csv", ["outcome", "node", "estimate", "ci_low", "ci_high", "p_value", "alpha", "decision"],
                csv_rows)
    ctx.out.jsonl("test.jsonl", records)
    ctx.out.text("table3.txt", lines)
    print("\n".join(lines))
    return {"study": study, "tables": tables}


def _table3_lines(spec, rows) -> list[str]:
    kind = "risk difference" if spec.kind == "binary" else "difference"
    role = "primary" if spec.primary else "secondary"
    out = [f"{spec.name} ({role}, {kind})",
           f"  {'node':<14} {'estimate (CI)':>26} {'p':>7} {'alpha':>8}  decision"]
    for r in rows:
        if not r["tested"]:
            note = f" [{r['error']}]" if r["error"] else ""
            out.append(f"  {r['node']:<14} {'':>26} {'':>7} {r['alpha']:>8.5f}  {NOT_REACHED}{note}")
            continue
        est = f"{_num(r['estimate'])} ({_num(r['ci_low'])}, {_num(r['ci_high'])})"
        mark = " *" if r["decision"] == "rejected" else ""
        out.append(f"  {r['node']:<14} {est:>26} {format_p(r['p_value']):>7} {r['alpha']:>8.5f}  "
                   f"{r['decision']}{mark}")
    out.append("")
    return out


# ---------------------------------------------------------------------------
# attrition


def cmd_attrition(ctx: Context) -> list:
    study = ctx.study()
    nodes = ctx.run.base_tree.order()
    rows = attrition_table(study.cohort, study.members, nodes, ctx.run.schema)
    lines = [f"{'exposure':<14} {'odds ratio (95% CI)':>22} {'p':>7}"] + [format_row(r) for r in rows]
    ctx.out.csv("table2.csv", ["node", "odds_ratio", "ci_low", "ci_high", "p_value", "flagged", "note"],
                [(r.node, r.odds_ratio, r.ci_low, r.ci_high, r.p_value, r.flagged, r.note) for r in rows])
    ctx.out.jsonl("attrition.jsonl", [r.to_dict() for r in rows])
    ctx.out.text("table2.txt", lines)
    print("\n".join(lines))
    return rows


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(ctx: Context, reps: int | None = None, export: str | None = None) -> dict:
    from .cohort import FileLayout
    from .simulate import generate

    sim_cfg = ctx.raw.get("simulation") or {}
    spec = ctx.run.generator()
    if export:
        sim = generate(spec)
        out = Path(export)
        out.mkdir(parents=True, exist_ok=True)
        layout = FileLayout(derive=False, direct_outcomes=dict(sim.cohort.outcome_kinds),
                            primary=sim.cohort.primary)
        write_cohort(sim.cohort, out / "cohort.csv", layout)
        cfg = {"input": str(out / "cohort.csv"),
               "layout": {"derive": False, "direct_outcomes": dict(sim.cohort.outcome_kinds)},
               "outcomes": [{"name": k, "type": v, "primary": k in sim.cohort.primary}
                            for k, v in sim.cohort.outcome_kinds.items()]}
        (out / "cohort_config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=False), encoding="utf-8")
        (out / "truth.json").write_text(json.dumps({"spec": spec.to_config(), "true_nulls": sim.true_nulls},
                                                   indent=1, sort_keys=True) + "\n", encoding="utf-8")
        print(f"wrote synthetic cohort of {len(sim.cohort)} subjects to {out}")
        return {"export": str(out)}
    alpha = float(sim_cfg.get("alpha", ctx.raw["alpha"]))
    outcome = sim_cfg.get("outcome", "phq9_total")
    n_reps = int(reps if reps is not None else sim_cfg.get("reps", 1000))
    tree = ctx.run.tree_for(alpha)
    res = validate_fwer(tree, spec, n_reps, int(ctx.raw["seed"]), outcome=outcome,
                        settings=ctx.run.settings, workers=ctx.workers)
    lines = [f"replications      {res.reps}",
             f"alpha             {alpha}",
             f"true nulls        {', '.join(res.true_nulls) or 'none'}",
             f"empirical FWER    {res.fwer:.4f} (SE {res.se:.4f}, bound {res.bound:.4f})",
             f"analysis failures {res.failures}",
             "rejection rate by node:"]
    lines += [f"  {k:<14} {v:.4f}" for k, v in res.rejection_rate.items()]
    ctx.out.jsonl("fwer.jsonl", [res.to_dict()])
    ctx.out.text("fwer.txt", lines)
    print("\n".join(lines))
    return res.to_dict()


# ---------------------------------------------------------------------------
# report


def cmd_report(ctx: Context) -> dict:
    from .plotting import counts_figure, forest_figure

    matched = cmd_match(ctx)
    tested = cmd_test(ctx, matched["study"])
    figs = [counts_figure(matched["counts"], ctx.out.path("figures", "counts.png"))]
    for spec in ctx.run.outcomes:
        label = "risk difference" if spec.kind == "binary" else "difference in means"
        figs.append(forest_figure(tested["tables"][spec.name], spec.name,
                                  ctx.out.path("figures", f"forest_{spec.name}.png"), label))
    for f in figs:
        print(f"wrote {f}")
    return {"figures": [str(f) for f in figs]}


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--input", help="delimited cohort file")
    common.add_argument("--config", help="YAML config merged over the defaults")
    common.add_argument("--outdir", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int, help="process/thread cap; results do not depend on it")
    common.add_argument("--alpha", type=float, help="overall FWER level across primary outcomes")
    common.add_argument("--caliper", type=float, help="caliper width in pooled SDs of the logit score")
    common.add_argument("--max-k", dest="max_k", type=int, help="largest set size tried during escalation")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="matchtree", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("match", parents=[common], help="build matched designs and balance tables per node")
    sub.add_parser("test", parents=[common], help="randomization tests gated down the exposure tree")
    sub.add_parser("attrition", parents=[common], help="odds ratios for outcome availability")
    p = sub.add_parser("simulate", parents=[common], help="empirical FWER and power on synthetic cohorts")
    p.add_argument("--reps", type=int, help="number of replications")
    p.add_argument("--export-cohort", metavar="DIR", help="write one synthetic cohort instead")
    sub.add_parser("report", parents=[common], help="match and test, then render figures")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        ctx = Context(args)
        if args.command == "match":
            cmd_match(ctx)
        elif args.command == "test":
            cmd_test(ctx)
        elif args.command == "attrition":
            cmd_attrition(ctx)
        elif args.command == "simulate":
            cmd_simulate(ctx, args.reps, args.export_cohort)
        elif args.command == "report":
            cmd_report(ctx)
    except (ConfigError, SchemaError, IngestionError, FileNotFoundError, ValueError) as exc:
        print(f"matchtree: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
