"""Command-line entry point.

Exit codes:
  0  success
  1  invalid feeder or configuration (validate: validation failure)
  2  feeder file missing or unparseable (validate only; other commands use 1)
  3  dispatch infeasible; the provenance tag is printed
  4  solver failure (unbounded LP, iteration limit, oracle non-convergence)
  5  bench --check: an acceptance band failed
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import bench as bench_mod
from .dispatch import (DispatchError, ScenarioConfig, ScenarioError, dispatch, scenario,
                       solution_to_dict)
from .feeder import FeederError, FeederValidationError
from .fixtures import BUILTIN, resolve_feeder
from .lindist import LinearizationError, dump_system, linearize

EXIT_OK, EXIT_CONFIG, EXIT_PARSE, EXIT_INFEASIBLE, EXIT_SOLVER, EXIT_BAND = range(6)

log = logging.getLogger("lindispatch")


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _scenario_config(args: argparse.Namespace, model) -> ScenarioConfig:
    kw = {}
    if args.eps is not None:
        kw["eps"] = args.eps
    if args.v_band is not None:
        lo, hi = args.v_band
        kw["y_low"], kw["y_high"] = lo * lo, hi * hi
    sel = args.scenario
    if sel.startswith("map="):
        path = sel[4:]
        try:
            mapping = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ScenarioError(f"cannot read mode map {path}: {exc}") from exc
        if not isinstance(mapping, dict):
            raise ScenarioError(f"mode map {path} must be an object of id -> mode")
        return ScenarioConfig(name=Path(path).stem, modes=mapping, **kw)
    return scenario(sel, model, **kw)


def cmd_validate(args: argparse.Namespace) -> int:
    try:
        model = resolve_feeder(args.feeder)
    except FeederValidationError as exc:
        for d in exc.diagnostics:
            _err(str(d))
        return EXIT_CONFIG
    except FeederError as exc:
        _err(str(exc))
        return EXIT_PARSE
    n = sum(len(b.phases) for b in model.buses if not b.is_substation)
    print(f"{model.name or args.feeder}: valid ({len(model.buses)} buses, {len(model.lines)} lines, "
          f"{n} phase-nodes, {len(model.loads)} loads, {len(model.ders)} DERs)")
    return EXIT_OK


def cmd_assemble(args: argparse.Namespace) -> int:
    try:
        model = resolve_feeder(args.feeder)
        sys_ = linearize(model)
    except FeederValidationError as exc:
        for d in exc.diagnostics:
            _err(str(d))
        return EXIT_CONFIG
    except (FeederError, LinearizationError) as exc:
        _err(str(exc))
        return EXIT_CONFIG
    doc = dump_system(sys_)
    _emit(json.dumps(doc) + "\n", args.out)
    if args.out:
        print(f"wrote {len(doc['matrices'])} matrices for N={sys_.index.N} to {args.out}")
    return EXIT_OK


def _commands_table(d: dict) -> str:
    lines = [f"scenario {d['scenario']}: {d['status']}"]
    if d["status"] == "optimal":
        lines.append(f"objective {d['objective']:.6g}  VPP output {d['vpp_q']:.6g} pu")
        for c in d["commands"]:
            val = f"q={c['q']:.6f}" if "q" in c else f"v_set={c['v_set']:.6f}"
            lines.append(f"  {c['der']:<16} {c['mode']:<3} {val}")
    if "solve_time_s" in d:
        lines.append(f"LP solve time {d['solve_time_s']:.4f} s")
    return "\n".join(lines) + "\n"


def _commands_csv(d: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["der", "mode", "q", "v_set"])
    for c in d.get("commands", []):
        w.writerow([c["der"], c["mode"], repr(c["q"]) if "q" in c else "",
                    repr(c["v_set"]) if "v_set" in c else ""])
    return buf.getvalue()


def cmd_dispatch(args: argparse.Namespace) -> int:
    try:
        model = resolve_feeder(args.feeder)
        cfg = _scenario_config(args, model)
        sol = dispatch(model, cfg, tol=args.lp_tol)
    except FeederValidationError as exc:
        for d in exc.diagnostics:
            _err(str(d))
        return EXIT_CONFIG
    except (FeederError, DispatchError) as exc:
        _err(str(exc))
        return EXIT_CONFIG
    except LinearizationError as exc:
        _err(str(exc))
        return EXIT_SOLVER
    doc = solution_to_dict(sol, timing=args.timing)
    if sol.status == "infeasible":
        _err(f"infeasible: provenance {sol.provenance}")
        _err(sol.message)
        code = EXIT_INFEASIBLE
    elif not sol.optimal:
        _err(sol.message)
        code = EXIT_SOLVER
    else:
        code = EXIT_OK
    if args.out:
        fmt = args.format
        text = json.dumps(doc, indent=2) + "\n" if fmt == "json" else \
            _commands_csv(doc) if fmt == "csv" else _commands_table(doc)
        Path(args.out).write_text(text)
    sys.stdout.write(_commands_table(doc))
    return code


def cmd_bench(args: argparse.Namespace) -> int:
    try:
        model = resolve_feeder(args.feeder)
    except FeederValidationError as exc:
        for d in exc.diagnostics:
            _err(str(d))
        return EXIT_CONFIG
    except FeederError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    scenarios = bench_mod.SCENARIOS if args.scenario is None else (args.scenario,)
    try:
        result = bench_mod.run_bench(model, scenarios, eps=args.eps, lp_tol=args.lp_tol,
                                     pf_tol=args.pf_tol)
    except ScenarioError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    except bench_mod.BenchError as exc:
        _err(str(exc))
        return EXIT_SOLVER
    sys.stdout.write(bench_mod.format_table(result, timing=args.timing))
    if args.out:
        if args.format == "csv":
            text = bench_mod.format_csv(result)
        elif args.format == "table":
            text = bench_mod.format_table(result, timing=args.timing)
        else:
            text = json.dumps(result.to_dict(timing=args.timing), indent=2) + "\n"
        Path(args.out).write_text(text)
    if args.csv:
        Path(args.csv).write_text(bench_mod.format_csv(result))
    if args.check:
        checks = result.checks()
        if not args.timing:
            checks = [c for c in checks if c.criterion != "lp-runtime"]
        failed = [c for c in checks if not c.passed]
        for c in failed:
            _err(c.line())
        if failed:
            return EXIT_BAND
        print(f"all {len(checks)} acceptance checks passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lindispatch", description=__doc__.split("\n")[0],
                                formatter_class=argparse.RawDescriptionHelpFormatter,
                                epilog="built-in feeders: " + ", ".join(BUILTIN))
    p.add_argument("--verbose", "-v", action="store_true", help="log progress to standard error")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, scenario_default):
        sp.add_argument("feeder", help="feeder file or built-in name")
        sp.add_argument("--scenario", default=scenario_default,
                        help="pq | pv | vv | mixed | map=<file>")
        sp.add_argument("--out", help="machine-readable output path")
        sp.add_argument("--format", choices=("json", "csv", "table"), default="json")
        sp.add_argument("--eps", type=float, help="substation phase-imbalance tolerance (pu)")
        sp.add_argument("--lp-tol", type=float, default=1e-9, help="LP feasibility tolerance")
        sp.add_argument("--timing", action="store_true", help="report LP solve time")

    v = sub.add_parser("validate", help="parse and validate a feeder")
    v.add_argument("feeder")
    v.set_defaults(func=cmd_validate)

    a = sub.add_parser("assemble", help="dump the linearized system matrices")
    a.add_argument("feeder")
    a.add_argument("--out", help="output path (default: standard output)")
    a.set_defaults(func=cmd_assemble)

    d = sub.add_parser("dispatch", help="solve the dispatch LP for one scenario")
    common(d, "pq")
    d.add_argument("--v-band", type=float, nargs=2, metavar=("LOW", "HIGH"),
                   help="voltage magnitude band in pu (default 0.95 1.05)")
    d.set_defaults(func=cmd_dispatch)

    b = sub.add_parser("bench", help="run the scenarios against the nonlinear oracle")
    common(b, None)
    b.add_argument("--pf-tol", type=float, help="power flow convergence tolerance")
    b.add_argument("--check", action="store_true", help="exit 5 if an acceptance band fails")
    b.add_argument("--csv", help="write per-node voltage errors to this path")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
