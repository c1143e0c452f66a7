"""Command-line front end.

``gridvvo run`` solves the reference ACOPF and the relax-round-resolve
pipeline over a scenario grid and renders a result table; ``gridvvo check``
verifies a saved operating state against a case file.

Exit codes: 0 when everything succeeded or passed, 2 when a scenario found
no solution or a check failed, 1 on hard errors (unreadable input, failed
reference ACOPF).
"""

from __future__ import annotations

import argparse
import concurrent.futures as cf
import json
import logging
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .acpf import kcl_residual
from .caseio import CaseError, load_network
from .metrics import TableRow, compute_metrics, render_table
from .network import Network, OperatingState
from .nlp import NlpOptions
from .vvo import (
    INF,
    DeviceSets,
    EnumerationLimitError,
    ObjectiveConfig,
    PipelineResult,
    ReferenceInfeasibleError,
    ScenarioConfig,
    enumerate_oracle,
    run_pipeline,
    scenario_sets,
    solve_reference_acopf,
    verify_state,
)

log = logging.getLogger("gridvvo")

EXIT_OK, EXIT_ERROR, EXIT_FAILED = 0, 1, 2


@dataclass
class RunSpec:
    case: Path
    lambda_p: list[float] = field(default_factory=lambda: [1.0, 5.0, INF])
    tap_dev: list[int] = field(default_factory=lambda: [3, 16])
    cb_max: list[int] = field(default_factory=lambda: [2, 3])
    tol: float = 1e-6
    max_iter: int = 3000
    jobs: int = 1
    output: Path | None = None
    fmt: str = "text"
    enumerate: bool = False
    enumerate_limit: int = 1000
    save_states: Path | None = None

    def __post_init__(self):
        if not (self.lambda_p and self.tap_dev and self.cb_max):
            raise ValueError("scenario grid must not be empty")

    def ranges(self) -> list[tuple[int, int]]:
        """Nested device ranges: taps widen only once every CB module is allowed.

        For taps {3, 16} and CBs {2, 3} this gives (3, 2), (3, 3), (16, 3).
        """
        t_min, c_max = min(self.tap_dev), max(self.cb_max)
        return [
            (t, c)
            for t in sorted(set(self.tap_dev))
            for c in sorted(set(self.cb_max))
            if t == t_min or c == c_max
        ]

    def scenarios(self) -> list[ScenarioConfig]:
        return [
            ScenarioConfig(ObjectiveConfig(lambda_p=lp), t, c)
            for lp in self.lambda_p
            for t, c in self.ranges()
        ]


def _parse_lambda(text: str) -> list[float]:
    out = []
    for tok in text.split(","):
        tok = tok.strip().lower()
        value = INF if tok in ("inf", "infinity") else float(tok)
        if math.isnan(value) or value < 0:
            raise argparse.ArgumentTypeError(f"invalid lambda_p value {tok!r}")
        out.append(value)
    return out


def _parse_ints(text: str) -> list[int]:
    try:
        return [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def write_atomic(path: Path, text: str) -> None:
    """Write to a temporary file next to ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- run -----------------------------------------------------------------------


def _cell(args) -> PipelineResult:
    network, scenario, reference, options = args
    return run_pipeline(network, scenario, reference, options)


def _cell_row(case: str, result: PipelineResult) -> TableRow:
    lab = result.scenario.label
    return TableRow(
        case=case,
        lambda_p=lab["lambda_p"],
        tap_range=lab["tap_range"],
        cb_range=lab["cb_range"],
        metrics=result.metrics,
        status=result.status,
        failed_stage=result.stage,
        t_relax=result.t_relax,
    )


def _enumeration_report(case: str, rows: list[dict], fmt: str) -> str:
    cols = ["case", "lambda_p", "tap_range", "cb_range", "combinations",
            "pipeline_objective", "oracle_same_assignment", "oracle_best", "ratio_to_best"]
    if fmt == "json":
        return json.dumps(rows, indent=2)
    if fmt == "csv":
        lines = [",".join(cols)]
        lines += [",".join("NA" if r.get(c) is None else str(r.get(c)) for c in cols) for r in rows]
        return "\n".join(lines) + "\n"
    lines = ["enumeration oracle"]
    for r in rows:
        lines.append(
            f"  lambda_p={r['lambda_p']} taps {r['tap_range']} cbs {r['cb_range']}: "
            + (r.get("error") or
               f"{r['combinations']} combinations, pipeline {r['pipeline_objective']}, "
               f"same assignment {r['oracle_same_assignment']}, best {r['oracle_best']}, "
               f"ratio {r['ratio_to_best']}")
        )
    return "\n".join(lines) + "\n"


def cmd_run(spec: RunSpec) -> int:
    try:
        network = load_network(spec.case)
    except FileNotFoundError:
        print(f"error: case file not found: {spec.case}", file=sys.stderr)
        return EXIT_ERROR
    except (CaseError, OSError) as exc:
        print(f"error: cannot load case {spec.case}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    case = network.name or Path(spec.case).stem
    options = NlpOptions(tol=spec.tol, max_iter=spec.max_iter)

    try:
        ref = solve_reference_acopf(network, options)
    except ReferenceInfeasibleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    network = ref.network
    baseline = TableRow(
        case=case, lambda_p="--", tap_range="+-0", cb_range="1-1",
        metrics=compute_metrics(ref.state, network, ref.solution.wall_time, None),
        is_baseline=True,
    )

    scenarios = spec.scenarios()
    tasks = [(network, sc, ref.state, options) for sc in scenarios]
    if spec.jobs > 1 and len(tasks) > 1:
        with cf.ProcessPoolExecutor(max_workers=spec.jobs) as pool:
            results = list(pool.map(_cell, tasks))
    else:
        results = [_cell(t) for t in tasks]

    rows = [baseline] + [_cell_row(case, r) for r in results]
    report = render_table(rows, spec.fmt)

    if spec.enumerate:
        enum_rows = []
        for sc, res in zip(scenarios, results):
            lab = sc.label
            rec = {"case": case, **lab}
            try:
                oracle = enumerate_oracle(network, sc, spec.enumerate_limit, ref.state, options)
            except EnumerationLimitError as exc:
                rec["error"] = str(exc)
                enum_rows.append(rec)
                continue
            rec["combinations"] = len(oracle.records)
            rec["pipeline_objective"] = res.objective if res.success else None
            rec["oracle_same_assignment"] = (
                oracle.objective_for(res.rounded_tap, res.rounded_cb) if res.success else None
            )
            rec["oracle_best"] = oracle.best_objective
            if res.success and oracle.best_objective:
                rec["ratio_to_best"] = res.objective / oracle.best_objective
            enum_rows.append(rec)
        extra = _enumeration_report(case, enum_rows, spec.fmt)
        if spec.fmt == "json":
            doc = json.loads(report)
            doc["enumeration"] = json.loads(extra)
            report = json.dumps(doc, indent=2) + "\n"
        else:
            report = report + "\n" + extra

    if spec.save_states is not None:
        for res in results:
            lab = res.scenario.label
            name = f"{case}_lp{lab['lambda_p']}_t{res.scenario.tap_dev_steps}_c{res.scenario.cb_max_modules}.json"
            write_atomic(Path(spec.save_states) / name, res.to_json(indent=1))

    if spec.output is not None:
        write_atomic(spec.output, report)
    else:
        sys.stdout.write(report)
    return EXIT_OK if all(r.success for r in results) else EXIT_FAILED


# -- check -----------------------------------------------------------------------


def _load_state(path: Path) -> tuple[OperatingState, dict | None]:
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise ValueError("state file must hold a JSON object")
    scenario = doc.get("scenario")
    if "state" in doc:
        doc = doc["state"]
        if doc is None:
            raise ValueError("result file holds no state (the run did not succeed)")
    missing = [k for k in ("vm", "va", "pg", "qg", "tap", "cb") if k not in doc]
    if missing:
        raise ValueError(f"state lacks fields {missing}")
    return OperatingState.from_dict(doc), scenario


def _full_sets(network: Network) -> DeviceSets:
    a = network.arrays
    return DeviceSets(
        tuple(tuple(network.branches[k].tap_set) for k in a.transformers),
        tuple(tuple(network.shunts[k].cb_set) for k in a.cb_shunts),
    )


def cmd_check(case_path: Path, state_path: Path, tol: float = 1e-6) -> int:
    try:
        network = load_network(case_path)
    except FileNotFoundError:
        print(f"error: case file not found: {case_path}", file=sys.stderr)
        return EXIT_ERROR
    except (CaseError, OSError) as exc:
        print(f"error: cannot load case {case_path}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    try:
        state, scenario = _load_state(state_path)
        dims = (len(state.vm), len(state.pg), len(state.tap), len(state.cb))
        if dims != (network.n_bus, network.n_gen, network.n_branch, len(network.shunts)):
            raise ValueError(f"state dimensions {dims} do not match the case")
    except (OSError, ValueError, TypeError) as exc:
        print(f"error: malformed state file {state_path}: {exc}", file=sys.stderr)
        return EXIT_ERROR

    if scenario is not None:
        lp = scenario.get("lambda_p", 1.0)
        sc = ScenarioConfig(
            ObjectiveConfig(lambda_p=INF if lp == "inf" else float(lp)),
            int(scenario["tap_dev_steps"]),
            int(scenario["cb_max_modules"]),
        )
        sets = scenario_sets(network, sc)
    else:
        sets = _full_sets(network)
    res = np.abs(kcl_residual(network, state))
    print(f"max |kcl residual| = {res.max(initial=0.0):.3e} p.u.")
    problems = verify_state(network, state, sets, tol)
    if problems:
        for p in problems:
            print(f"FAIL {p}")
        return EXIT_FAILED
    print("all bounds satisfied; all devices on their discrete sets")
    return EXIT_OK


# -- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridvvo", description="Volt/VAR optimisation with discrete devices.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-vv for solver iterations)")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="reference ACOPF plus relax-round-resolve over a scenario grid")
    run.add_argument("--case", required=True, type=Path, help="MATPOWER case file")
    run.add_argument("--lambda-p", type=_parse_lambda, default=[1.0, 5.0, INF],
                     help="comma-separated dispatch weights; 'inf' pins non-slack dispatch")
    run.add_argument("--tap-dev", type=_parse_ints, default=[3, 16], help="tap deviation limits in steps")
    run.add_argument("--cb-max", type=_parse_ints, default=[2, 3], help="maximum active CB modules")
    run.add_argument("--tol", type=float, default=1e-6)
    run.add_argument("--max-iter", type=int, default=3000)
    run.add_argument("--jobs", type=int, default=1)
    run.add_argument("--output", type=Path)
    run.add_argument("--format", choices=("csv", "json", "text"), default="text")
    run.add_argument("--enumerate", action="store_true", help="compare against brute-force enumeration")
    run.add_argument("--enumerate-limit", type=int, default=1000)
    run.add_argument("--save-states", type=Path, help="directory for per-scenario result JSON files")

    check = sub.add_parser("check", help="verify a saved state against a case")
    check.add_argument("--case", required=True, type=Path)
    check.add_argument("--state", required=True, type=Path)
    check.add_argument("--tol", type=float, default=1e-6)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run":
        try:
            spec = RunSpec(
                case=args.case, lambda_p=args.lambda_p, tap_dev=args.tap_dev, cb_max=args.cb_max,
                tol=args.tol, max_iter=args.max_iter, jobs=args.jobs, output=args.output,
                fmt=args.format, enumerate=args.enumerate, enumerate_limit=args.enumerate_limit,
                save_states=args.save_states,
            )
            spec.scenarios()  # rejects out-of-range device limits early
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_ERROR
        return cmd_run(spec)
    return cmd_check(args.case, args.state, args.tol)


if __name__ == "__main__":
    sys.exit(main())
