"""Command line: run simulations, compute merge rates, compare runs, dump plans and trees.

Exit codes: 0 on success, 1 on a validation or comparison error, 2 when an
internal integrity check fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

import jsonschema

from . import __version__
from .analysis import bar_data, merge_report, render, report_csv, savings_report
from .errors import BoundsError, ComparisonError, ConfigError, IntegrityError, ProtocolError, QueryError
from .plan import SearchPlan, TrialRequest
from .sim.engine import Mode, run
from .sim.trace import busy_us, dumps_summary, read_trace, write_trace
from .spec import RunSpec, load_spec
from .stagetree import StageTree, build_stage_tree
from .tuners import Submit

logger = logging.getLogger("stageplan")

EXIT_OK, EXIT_INVALID, EXIT_INTEGRITY = 0, 1, 2


def summary_path_for(trace: str | Path) -> Path:
    p = Path(trace)
    return p.with_name(p.stem + ".summary.json")


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# ------------------------------------------------------------------ commands


def cmd_run(args: argparse.Namespace) -> int:
    spec = load_spec(args.spec)
    seed = spec.seed if args.seed is None else args.seed
    mode = Mode(args.mode) if args.mode else spec.mode
    result = run(spec.setups(), mode, spec.cost, seed=seed)
    if args.trace:
        write_trace(args.trace, result.events)
    summary = dumps_summary(result.summary)
    target = args.summary or (summary_path_for(args.trace) if args.trace else None)
    _emit(summary, str(target) if target else None)
    logger.info(
        "%s mode: %.4f GPU-hours, %.1f s end to end, executed merge rate %s",
        mode.value,
        result.summary["gpu_hours"],
        result.summary["end_to_end_s"],
        result.summary["merge_rate_executed"],
    )
    return EXIT_OK


def cmd_merge_rate(args: argparse.Namespace) -> int:
    spec = load_spec(args.spec)
    by_key: dict[str, dict[str, list]] = {}
    for s in spec.studies:
        by_key.setdefault(s.compat_key, {})[s.name] = s.configs()
    if args.json:
        out = {key: merge_report(studies).to_json(_spi(spec, studies)) for key, studies in sorted(by_key.items())}
        print(json.dumps(out, indent=2, sort_keys=True))
        return EXIT_OK
    if len(spec.studies) == 1:
        print(_frac(merge_report(next(iter(by_key.values()))).p))
        return EXIT_OK
    for key, studies in sorted(by_key.items()):
        rep = merge_report(studies)
        for name, c in sorted(rep.per_study.items()):
            print(f"{name}\tp={_frac(c.rate)}\ttotal={c.total}\tunique={c.unique}")
        if len(studies) > 1:
            print(f"{key}\tq={_frac(rep.q)}\ttotal={rep.total}\tunique={rep.unique}")
    return EXIT_OK


def _spi(spec: RunSpec, studies: dict[str, Any]) -> int:
    return next(s.steps_per_iteration for s in spec.studies if s.name in studies)


def _frac(v) -> str:
    return str(v.numerator) if v.denominator == 1 else f"{v.numerator}/{v.denominator}"


def cmd_report(args: argparse.Namespace) -> int:
    sums = []
    for trace, given in ((args.stage_trace, args.stage_summary), (args.trial_trace, args.trial_summary)):
        path = Path(given) if given else summary_path_for(trace)
        if not path.exists():
            raise ConfigError(f"no summary for {trace}: pass it explicitly or keep {path.name} next to the trace")
        summary = json.loads(path.read_text())
        events = read_trace(trace)
        if busy_us(events) != summary.get("busy_us"):
            raise ComparisonError(f"{trace} does not match summary {path}")
        sums.append(summary)
    report = savings_report(*sums)
    _emit(report_csv(report) if args.out == "csv" else render(report), args.output)
    if args.bars:
        Path(args.bars).write_text(bar_data(report))
    return EXIT_OK


def _initial_plans(spec: RunSpec) -> dict[str, SearchPlan]:
    """Plans holding each study's first round of requests, as its tuner would submit them."""
    plans: dict[str, SearchPlan] = {}
    for setup, s in zip(spec.setups(), spec.studies):
        tuner = setup.make_tuner()
        plan = plans.get(s.compat_key)
        if plan is None:
            plan = plans[s.compat_key] = SearchPlan(s.compat_key, s.hp_set)
        if s.eval_interval:
            plan.eval_intervals.add(s.eval_interval)
        for act in tuner.start():
            if isinstance(act, Submit):
                gid = f"{s.name}/{act.trial_id}"
                plan.insert_trial(TrialRequest(f"{gid}@{act.end_step}", s.name, gid, act.config.truncate(act.end_step)))
    return plans


def tree_json(tree: StageTree) -> dict[str, Any]:
    stages = []
    for st in sorted(tree.stages.values(), key=lambda s: s.key):
        stages.append(
            {
                "node": st.node,
                "start": st.start,
                "end": st.end,
                "resume": None if st.resume is None else [st.resume.node, st.resume.step],
                "parent": None if st.parent is None else list(st.parent.key),
                "requests": sorted(r.request_id for r in st.requests),
            }
        )
    return {"generation": tree.generation, "stages": stages}


def cmd_dump(args: argparse.Namespace, what: str) -> int:
    spec = load_spec(args.spec)
    plans = _initial_plans(spec)
    chunks = []
    for key, plan in sorted(plans.items()):
        if what == "plan":
            chunks.append(plan.to_dot() if args.format == "dot" else plan.to_json())
        else:
            tree = build_stage_tree(plan)
            chunks.append(tree.to_dot() if args.format == "dot" else {"compat_key": key, **tree_json(tree)})
    if args.format == "dot":
        text = "".join(chunks)
    else:
        text = json.dumps(chunks if len(chunks) > 1 else chunks[0], indent=1, sort_keys=True) + "\n"
    _emit(text, args.out)
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stageplan", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for debug logs")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate a spec in stage or trial mode")
    r.add_argument("spec")
    r.add_argument("--mode", choices=[m.value for m in Mode])
    r.add_argument("--trace", help="trace CSV output path")
    r.add_argument("--summary", help="summary JSON path (default: next to the trace, else stdout)")
    r.add_argument("--seed", type=int, help="override the spec seed")
    r.set_defaults(func=cmd_run)

    m = sub.add_parser("merge-rate", help="merge rate p per study and q per shared compat key")
    m.add_argument("spec")
    m.add_argument("--json", action="store_true", help="full report as JSON")
    m.set_defaults(func=cmd_merge_rate)

    rep = sub.add_parser("report", help="compare a stage-mode and a trial-mode run")
    rep.add_argument("--stage-trace", required=True)
    rep.add_argument("--trial-trace", required=True)
    rep.add_argument("--stage-summary")
    rep.add_argument("--trial-summary")
    rep.add_argument("--out", choices=["json", "csv"], default="json")
    rep.add_argument("--output", help="write the report here instead of stdout")
    rep.add_argument("--bars", help="also write a gnuplot bar-chart data file")
    rep.set_defaults(func=cmd_report)

    for what in ("plan", "tree"):
        d = sub.add_parser(f"dump-{what}", help=f"dump the initial {what} of every compat key")
        d.add_argument("spec")
        d.add_argument("--format", choices=["json", "dot"], default="json")
        d.add_argument("--out")
        d.set_defaults(func=lambda a, w=what: cmd_dump(a, w))
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (IntegrityError, ProtocolError) as e:
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_INTEGRITY
    except (ConfigError, ComparisonError, QueryError, BoundsError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, json.JSONDecodeError, jsonschema.ValidationError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
