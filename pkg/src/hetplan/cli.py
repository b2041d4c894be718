"""Command-line entry point: plan, simulate, compare and trace.

Exit status: 0 ok, 1 input error, 2 infeasible or invalid plan, 3 internal
error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path
from typing import List, Optional

import yaml

from .core import (SCHEMA_VERSION, ClusterSpec, ConfigError, ModelSpec, ParallelPlan,
                   TrainConfig, load_document, plan_document, validate_plan)
from .metrics import (evaluate_metrics, homogeneous_reference, improvement_pct,
                      render_table, report_document)
from .planner import InfeasibleError, PlannerConfig, search
from .predictor import PlanError, predict
from .profiles import calibrate, parse_profiles
from .sim import trace_to_json

EXIT_OK, EXIT_INPUT, EXIT_INFEASIBLE, EXIT_INTERNAL = 0, 1, 2, 3


class _Inputs:
    """Parsed input documents plus their content digests."""

    def __init__(self, args):
        self.digests = {}
        self.raw = {}
        for key, path in (("model", args.model), ("cluster", args.cluster),
                          ("train", args.train), ("planner", getattr(args, "planner", None))):
            if path is None:
                continue
            self.digests[key] = _digest(path)
            self.raw[key] = load_document(path)
        for key in ("model", "cluster", "train"):
            if key not in self.raw:
                raise ConfigError(f"--{key} is required")
        if args.set:
            self.digests["overrides"] = hashlib.sha256("\n".join(args.set).encode()).hexdigest()
        for item in args.set or []:
            apply_override(self.raw, item)
        self.model = ModelSpec.from_dict(self.raw["model"])
        self.cluster = ClusterSpec.from_dict(self.raw["cluster"])
        self.train = TrainConfig.from_dict(self.raw["train"])
        self.planner = PlannerConfig.from_dict(self.raw.get("planner", {}))
        self.diagnostics: List[str] = []
        if getattr(args, "profiles", None):
            self.digests["profiles"] = _digest(args.profiles)
            with open(args.profiles, encoding="utf-8") as fh:
                records, diags = parse_profiles(fh)
            self.cluster, more = calibrate(records, self.model, self.cluster)
            self.diagnostics += [f"{args.profiles}: {d}" for d in diags + more]


def _digest(path) -> str:
    try:
        return "sha256:" + hashlib.sha256(Path(path).read_bytes()).hexdigest()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None


def apply_override(docs: dict, item: str) -> None:
    """Apply one dotted-path ``key=value`` override, e.g. ``model.num_layers=40``."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    path, _, text = item.partition("=")
    keys = path.strip().split(".")
    if len(keys) < 2 or keys[0] not in ("model", "cluster", "train", "planner"):
        raise ConfigError(f"override {item!r} must start with model., cluster., train. or planner.")
    node = docs.setdefault(keys[0], {})
    for key in keys[1:-1]:
        node = node[int(key)] if isinstance(node, list) else node.setdefault(key, {})
    last = keys[-1]
    value = yaml.safe_load(text)
    if isinstance(value, str):
        # YAML 1.1 reads "1e30" as a string
        try:
            value = float(value)
        except ValueError:
            pass
    if isinstance(node, list):
        node[int(last)] = value
    else:
        node[last] = value


def _dump(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def _write(path, text: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text, encoding="utf-8")


def _load_plan(path) -> tuple:
    doc = load_document(path)
    return ParallelPlan.from_dict(doc), doc.get("inputs", {})


def _report(plan, result, inp: _Inputs, reference=True, baseline_time_s=None) -> dict:
    ref = homogeneous_reference(plan, inp.model, inp.cluster, inp.train, inp.planner) if reference else None
    metrics = evaluate_metrics(plan, result, inp.model, inp.cluster, inp.train, ref, baseline_time_s)
    doc = report_document(plan, result, metrics, inp.cluster, inp.model, inp.train)
    return {"schema_version": SCHEMA_VERSION, "inputs": inp.digests, **doc}


def cmd_plan(args) -> int:
    inp = _Inputs(args)
    for d in inp.diagnostics:
        print(f"warning: {d}", file=sys.stderr)
    try:
        res = search(inp.model, inp.cluster, inp.train, inp.planner, jobs=args.jobs)
    except InfeasibleError as exc:
        print("infeasible: no plan satisfies the constraints", file=sys.stderr)
        for r in exc.reasons:
            print(f"  {r}", file=sys.stderr)
        if args.out:
            _write(Path(args.out) / "infeasible.json",
                   _dump({"schema_version": SCHEMA_VERSION, "inputs": inp.digests,
                          "reasons": list(exc.reasons)}))
        return EXIT_INFEASIBLE
    report = _report(res.plan, res.result, inp)
    if inp.diagnostics:
        report["diagnostics"] = inp.diagnostics
    out = Path(args.out or ".")
    _write(out / "plan.json", _dump(plan_document(res.plan, inp.digests)))
    _write(out / "report.json", _dump(report))
    log = [json.dumps({"inputs": inp.digests, "schema_version": SCHEMA_VERSION}, sort_keys=True)]
    log += [json.dumps(e, sort_keys=True) for e in res.log]
    _write(out / "search_log.jsonl", "\n".join(log) + "\n")
    print(render_table(report))
    return EXIT_OK


def _simulate(args, inp: _Inputs, path):
    plan, _ = _load_plan(path)
    check = validate_plan(plan, inp.model, inp.cluster, inp.train)
    if not check.ok:
        raise PlanError(check.violations)
    return plan, predict(plan, inp.model, inp.cluster, inp.train, check=False)


def cmd_simulate(args) -> int:
    inp = _Inputs(args)
    plan, result = _simulate(args, inp, args.plan)
    report = _report(plan, result, inp, reference=not args.no_reference)
    if args.out:
        _write(args.out, _dump(report))
    if args.trace_out:
        _write(args.trace_out, trace_to_json(result.trace) + "\n")
    print(render_table(report))
    return EXIT_OK


def cmd_trace(args) -> int:
    inp = _Inputs(args)
    _, result = _simulate(args, inp, args.plan)
    target = args.trace_out or args.out
    text = trace_to_json(result.trace) + "\n"
    if target:
        _write(target, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_compare(args) -> int:
    if not args.baseline:
        raise ConfigError("--baseline is required")
    inp = _Inputs(args)
    _, inputs_a = _load_plan(args.baseline)
    _, inputs_b = _load_plan(args.plan)
    ha, hb = inputs_a.get("model"), inputs_b.get("model")
    if ha and hb and ha != hb:
        print(f"plans were made for different models ({ha} vs {hb})", file=sys.stderr)
        return EXIT_INFEASIBLE
    plan_a, res_a = _simulate(args, inp, args.baseline)
    plan_b, res_b = _simulate(args, inp, args.plan)
    rep_a = _report(plan_a, res_a, inp, reference=False)
    rep_b = _report(plan_b, res_b, inp, reference=False,
                    baseline_time_s=res_a.iteration_time_s)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "inputs": inp.digests,
        "baseline": rep_a,
        "candidate": rep_b,
        "improvement_pct": rep_b["improvement_pct"],
    }
    if args.out:
        _write(args.out, _dump(doc))
    print("baseline\n" + render_table(rep_a) + "\n\ncandidate\n" + render_table(rep_b))
    print(f"\nimprovement of candidate over baseline: {doc['improvement_pct']:.2f} %")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hetplan",
                                     description="Heterogeneous-cluster pipeline planner and simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, plan_required):
        p.add_argument("--model", required=True, help="model config (YAML/JSON)")
        p.add_argument("--cluster", required=True, help="cluster config (YAML/JSON)")
        p.add_argument("--train", required=True, help="training config (YAML/JSON)")
        p.add_argument("--planner", help="planner config (YAML/JSON)")
        p.add_argument("--profiles", help="profiled layer timings (JSON lines)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted-path override, e.g. model.num_layers=40 (repeatable)")
        p.add_argument("--out", help="output path (directory for 'plan')")
        p.add_argument("--jobs", type=int, default=1, help="planner worker processes")
        if plan_required is not None:
            p.add_argument("--plan", required=plan_required, help="plan JSON")

    p = sub.add_parser("plan", help="search for the best plan")
    common(p, None)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="simulate one plan")
    common(p, True)
    p.add_argument("--trace-out", help="write the event trace JSON here")
    p.add_argument("--no-reference", action="store_true",
                   help="skip the homogeneous reference runs")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="compare a plan against a baseline plan")
    common(p, True)
    p.add_argument("--baseline", help="baseline plan JSON")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("trace", help="export the simulated event trace")
    common(p, True)
    p.add_argument("--trace-out", help="trace output path (default stdout)")
    p.set_defaults(func=cmd_trace)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except PlanError as exc:
        print("invalid plan:", file=sys.stderr)
        for v in exc.violations:
            print(f"  {v}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
