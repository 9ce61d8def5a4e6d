"""Command-line entry point: ``snapstab {run,sweep,audit,check}``.

Exit status is 0 iff every verdict is positive and every budget was met,
1 on a negative verdict, 2 on bad input.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Any, Dict, List, Optional, Sequence

from .checker import check_linearizable, history_from_json, history_to_json
from .core import ConfigurationError
from .harness import (
    BUILTIN,
    CSV_COLUMNS,
    Scenario,
    load_scenario,
    report_json,
    report_ok,
    rows_csv,
    run_scenario,
    summary_row,
    sweep,
)
from .net_sim import initial_marker, trace_jsonl


def _scenario(args: argparse.Namespace) -> Scenario:
    ref = args.scenario
    if ref in BUILTIN:
        sc = BUILTIN[ref]()
    elif os.path.exists(ref):
        sc = load_scenario(ref)
    else:
        raise ConfigurationError(f"no scenario file or built-in named {ref!r} (built-ins: {', '.join(BUILTIN)})")
    if args.seed is not None:
        sc.seed = args.seed
    if getattr(args, "trace", False):
        sc.trace = True
    return sc


def _emit(text: str, out: Optional[str], name: str) -> None:
    if out is None:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
        return
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, name), "w") as fh:
        fh.write(text if text.endswith("\n") else text + "\n")


def _write_artifacts(sc: Scenario, report: Dict[str, Any], out: Optional[str], trace: bool) -> None:
    if out is None:
        return
    os.makedirs(out, exist_ok=True)
    initial = None
    if sc.transient.get("mode", "none") != "none" and sc.transient.get("values") == "initial":
        initial = [initial_marker(k, sc.value_bytes).hex() for k in range(sc.n)]
    doc = {"n": sc.n, "initial": initial, "events": history_to_json(report["_driver"].history.events)}
    with open(os.path.join(out, "history.json"), "w") as fh:
        json.dump(doc, fh, indent=1)
    if trace:
        with open(os.path.join(out, "trace.jsonl"), "w") as fh:
            fh.write(trace_jsonl(report["_world"].trace))


def cmd_run(args: argparse.Namespace) -> int:
    sc = _scenario(args)
    report = run_scenario(sc, keep_world=True)
    if args.format == "csv":
        _emit(rows_csv([summary_row("run", sc.seed, report)]), args.out, "report.csv")
    else:
        _emit(report_json(report), args.out, "report.json")
    _write_artifacts(sc, report, args.out, args.trace)
    ok = report_ok(report)
    print(f"{'OK' if ok else 'FAIL'} {sc.name or sc.algorithm} seed={sc.seed} steps={report['steps']}", file=sys.stderr)
    return 0 if ok else 1


def cmd_sweep(args: argparse.Namespace) -> int:
    sc = _scenario(args)
    values = [int(v) for v in args.values.split(",") if v.strip()]
    rows = sweep(sc, args.axis, values)
    if args.format == "json":
        _emit(json.dumps({"schema": rows[0]["schema"], "columns": list(CSV_COLUMNS), "rows": rows}, indent=1), args.out, "sweep.json")
    else:
        _emit(rows_csv(rows), args.out, "sweep.csv")
    return 0 if all(r["linearizable"] for r in rows) else 1


def cmd_audit(args: argparse.Namespace) -> int:
    sc = _scenario(args)
    report = run_scenario(sc, keep_world=True)
    summary = {
        "initial_violations": report["initial_violations"],
        "initial_violation_sample": report["initial_violation_sample"],
        "stabilization_step": report["stabilization_step"],
        "stabilization_cycle": report["stabilization_cycle"],
        "cycles": report["cycles"],
        "final_violations": report["final_violations"],
    }
    _emit(json.dumps(summary, indent=1, sort_keys=True), args.out, "audit.json")
    _write_artifacts(sc, report, args.out, args.trace)
    return 0 if not report["final_violations"] and report["stabilization_step"] is not None else 1


def cmd_check(args: argparse.Namespace) -> int:
    with open(args.history) as fh:
        doc = json.load(fh)
    if isinstance(doc, list):
        doc = {"events": doc}
    rows = doc["events"]
    n = args.n if args.n is not None else doc.get("n")
    if n is None:
        n = 1 + max((r["node"] for r in rows), default=0)
        for r in rows:
            if r["op"] == "snapshot" and r.get("value") is not None:
                n = max(n, len(r["value"]))
    initial = doc.get("initial")
    if initial is not None:
        initial = [None if v is None else bytes.fromhex(v) for v in initial]
    history = history_from_json(rows)
    verdict = check_linearizable(history.events, n, initial, method=args.method)
    _emit(json.dumps(verdict.to_json(), indent=1, sort_keys=True), args.out, "verdict.json")
    return 0 if verdict.linearizable else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="snapstab", description="Snapshot-object simulator and checkers.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp: argparse.ArgumentParser, fmt_default: str) -> None:
        sp.add_argument("--scenario", required=True, help="scenario JSON file or built-in name")
        sp.add_argument("--seed", type=int, default=None, help="override the scenario seed")
        sp.add_argument("--out", default=None, help="output directory (default: stdout)")
        sp.add_argument("--format", choices=("csv", "json"), default=fmt_default)
        sp.add_argument("--trace", action="store_true", help="also write the full event trace")

    sp = sub.add_parser("run", help="run one scenario and print its report")
    common(sp, "json")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="run a scenario over a parameter axis")
    common(sp, "csv")
    sp.add_argument("--axis", choices=("n", "delta"), required=True)
    sp.add_argument("--values", required=True, help="comma-separated values, e.g. 3,5,7,9")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("audit", help="run a scenario and report index consistency")
    common(sp, "json")
    sp.set_defaults(func=cmd_audit)

    sp = sub.add_parser("check", help="check a recorded history for linearizability")
    sp.add_argument("--history", required=True, help="history JSON (list of events or {n, events, initial})")
    sp.add_argument("--n", type=int, default=None)
    sp.add_argument("--method", choices=("auto", "polynomial", "exhaustive"), default="auto")
    sp.add_argument("--out", default=None)
    sp.add_argument("--format", choices=("json",), default="json")
    sp.set_defaults(func=cmd_check)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
