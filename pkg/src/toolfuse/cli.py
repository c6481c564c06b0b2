"""Command-line entry point: ``toolfuse {fuse,run,bench,report,lut}``.

Exit codes: 0 ok, 2 bad input, 3 transport failure, 4 agent failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Sequence
from dataclasses import replace
from pathlib import Path
from typing import Any

from .agent import SUCCESS, StrategyConfig, TemplateNotFound, run_task
from .bench import (
    COMPILER,
    POLICIES,
    PROVIDER_PARALLEL,
    SEQUENTIAL,
    BenchTask,
    StateStore,
    WorkloadConfig,
    default_registry_path,
    demo_task,
    lut_evaluation,
    make_runners,
    run_benchmark,
    script_agent,
    script_fuser,
)
from .clock import RealClock, SimClock
from .executor import ExecutionBudget
from .fuser import EMPTY_PLAN, FuserConfig, oracle_fuser, request_fusion
from .fusion import FusedTool, fuse_toolset
from .gateway import (
    ApiStatusError,
    LiveSession,
    MalformedResponse,
    RecordingSession,
    ReplayMismatch,
    ReplaySession,
    Session,
    Sessions,
    TransportError,
)
from .metrics import (
    AGGREGATE_COLUMNS,
    RunReport,
    read_traces,
    write_aggregates_csv,
    write_histogram_csv,
    write_traces,
    tools_per_call_histogram,
)
from .registry import RegistryError, ToolRegistry, load_registry

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_TRANSPORT = 3
EXIT_AGENT = 4

TABLE_COLUMNS = (
    ("method", "Method"),
    ("success_rate", "Success Rate"),
    ("avg_tokens_per_task", "Avg Tokens/Task"),
    ("token_reduction", "Token Reduction"),
    ("avg_time_per_task", "Avg Time/Task"),
    ("speedup", "Speedup"),
)
TIME_KEYS = {"avg_time_per_task", "speedup"}


class InputError(Exception):
    pass


def _load_registry(path: str | None) -> ToolRegistry:
    p = Path(path) if path else default_registry_path()
    if not p.is_file():
        raise InputError(f"registry not found: {p}")
    return load_registry(p)


def _load_task(spec: str, registry: ToolRegistry) -> BenchTask:
    if spec == "demo":
        return demo_task(registry)
    p = Path(spec)
    if not p.is_file():
        raise InputError(f"bench task not found: {p}")
    return BenchTask.from_json(json.loads(p.read_text()))


def _parse_session(spec: str) -> tuple[str, str | None]:
    kind, _, arg = spec.partition(":")
    if kind == "live" and not arg:
        return kind, None
    if kind in ("replay", "oracle") and arg:
        return kind, arg
    raise InputError(f"bad session spec {spec!r}; use live, replay:<file>, or oracle:<task.json|demo>")


def _fmt(value: Any, key: str = "") -> str:
    if value is None:
        return "n/a"
    if isinstance(value, float):
        if key in ("token_reduction", "speedup"):
            return f"{value:.2f}x"
        return f"{value:.2f}"
    return str(value)


def render_table(rows: Sequence[dict[str, Any]], no_timestamps: bool = False, with_std: bool = False) -> str:
    cols = [(k, h) for k, h in TABLE_COLUMNS if not (no_timestamps and k in TIME_KEYS)]
    body = []
    for row in rows:
        cells = []
        for k, _ in cols:
            cell = _fmt(row.get(k), k)
            std = row.get(f"{k}_std")
            if with_std and std is not None:
                cell += f" ±{std:.2f}"
            cells.append(cell)
        body.append(cells)
    widths = [max(len(h), *(len(r[i]) for r in body)) if body else len(h) for i, (_, h) in enumerate(cols)]
    lines = ["  ".join(h.ljust(w) for (_, h), w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in body]
    return "\n".join(lines)


def _describe_fused(ft: FusedTool) -> str:
    return json.dumps(ft.to_function(), indent=2, sort_keys=True)


# -- commands -----------------------------------------------------------------


def cmd_fuse(args: argparse.Namespace) -> int:
    registry = _load_registry(args.registry)
    config = FuserConfig.from_file(args.config) if args.config else FuserConfig()
    kind, arg = _parse_session(args.session)
    query = args.query
    session: Session
    if kind == "oracle":
        task = _load_task(arg or "", registry)
        query = query or task.query
        session = script_fuser(task, oracle_fuser(task, registry, config.max_group_size))
    elif kind == "replay":
        session = ReplaySession(_existing(arg))
    else:
        session = LiveSession()
    if not query:
        raise InputError("--query is required unless an oracle task supplies one")
    result = request_fusion(query, registry, config, session)
    view, index = fuse_toolset(registry, result.plan)
    if not result.plan:
        print("no fusion (toolset unchanged)")
        print(f"{len(registry)} → {len(view)} tools")
        return EXIT_OK
    print("plan:")
    print(json.dumps(result.plan.to_json(), indent=2, sort_keys=True))
    print("fused tools:")
    for ft in index.fused.values():
        print(_describe_fused(ft))
    print(f"{len(registry)} → {len(view)} tools")
    return EXIT_OK


def _existing(path: str | None) -> Path:
    p = Path(path or "")
    if not p.is_file():
        raise InputError(f"file not found: {p}")
    return p


def cmd_run(args: argparse.Namespace) -> int:
    registry = _load_registry(args.registry)
    fuser_cfg = FuserConfig.from_file(args.config) if args.config else FuserConfig()
    kind, arg = _parse_session(args.session)
    strategy = StrategyConfig(
        prompting=args.prompting,
        shots=args.shots,
        agent_model=args.model,
        fuser_enabled=not args.no_fuser,
        provider_parallel_enabled=not args.no_provider_parallel,
        max_steps=args.max_steps,
    )
    query = args.query
    seed = args.seed
    if kind == "oracle":
        task = _load_task(arg or "", registry)
        query = query or task.query
        if strategy.fuser_enabled:
            policy = COMPILER
        elif strategy.provider_parallel_enabled:
            policy = PROVIDER_PARALLEL
        else:
            policy = SEQUENTIAL
        plan = oracle_fuser(task, registry, fuser_cfg.max_group_size) if policy == COMPILER else EMPTY_PLAN
        _, index = fuse_toolset(registry, plan)
        sessions = Sessions(
            agent=script_agent(task, policy, registry, index, seed=seed, group_filters=args.group_filters),
            fuser=script_fuser(task, plan, seed=seed) if policy == COMPILER else None,
        )
        clock: Any = SimClock()
    elif kind == "replay":
        sessions = Sessions(agent=ReplaySession(_existing(arg)))
        clock = SimClock()
    else:
        sessions = Sessions(agent=LiveSession())
        clock = RealClock()
    if args.record:
        Path(args.record).unlink(missing_ok=True)
        sessions = Sessions(agent=RecordingSession(sessions.agent, args.record), fuser=(
            RecordingSession(sessions.fuser, args.record) if sessions.fuser else None
        ))
    if not query:
        raise InputError("--query is required unless an oracle task supplies one")

    budget = ExecutionBudget(max_concurrency=args.max_concurrency, per_call_timeout=args.timeout)
    state = StateStore()
    outcome = run_task(
        query,
        registry,
        strategy,
        fuser_cfg,
        sessions,
        make_runners(registry, state, seed=seed, realtime=not clock.simulated),
        budget=budget,
        concurrent=not args.no_concurrent,
        clock=clock,
        task_id=args.task_id,
    )
    trace = outcome.trace
    trace.method = args.method or _method_label(strategy, not args.no_concurrent)
    print(f"status: {outcome.status}")
    print(f"steps: {outcome.steps} (tool steps: {outcome.tool_steps})")
    print(f"tokens: {trace.total_tokens} (prompt {trace.prompt_tokens}, completion {trace.completion_tokens})")
    if not args.no_timestamps:
        print(f"wall time: {trace.wall_time:.3f} s")
    print(f"fusion used: {'yes' if outcome.used_fusion else 'no'}; resets: {outcome.resets}")
    print(f"answer: {outcome.final_answer}")
    if args.trace_out:
        write_traces(args.trace_out, [trace])
        print(f"trace: {args.trace_out}")
    return EXIT_OK if outcome.status == SUCCESS else EXIT_AGENT


def _method_label(strategy: StrategyConfig, concurrent: bool) -> str:
    if strategy.fuser_enabled:
        return "compiler" if concurrent else "compiler_fused_only"
    return "provider_parallel" if strategy.provider_parallel_enabled else "sequential"


def cmd_bench(args: argparse.Namespace) -> int:
    config = WorkloadConfig.from_file(_existing(args.config)) if args.config else WorkloadConfig()
    overrides: dict[str, Any] = {}
    if args.n_tasks is not None:
        overrides["n_tasks"] = args.n_tasks
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.max_concurrency is not None:
        overrides["max_concurrency"] = args.max_concurrency
    if args.clock is not None:
        overrides["clock"] = args.clock
    config = replace(config, **overrides) if overrides else config
    policies = [p.strip() for p in args.policies.split(",") if p.strip()]
    report = run_benchmark(config, policies, repeats=args.repeats, out_dir=args.out, vary_seed=args.vary_seed)
    rows = report.rows()
    print(f"tasks: {report.oracle_totals['tasks']}; oracle groupable ops: "
          + ", ".join(f"{k} {v}" for k, v in report.oracle_totals.items() if k != "tasks"))
    print(render_table(rows, args.no_timestamps, with_std=True))
    print()
    print("parallelization rate (% of oracle-groupable ops):")
    for row in rows:
        print(f"  {row['method']}: load {_fmt(row['parallelization_load_ops'])}, "
              f"filter {_fmt(row['parallelization_filter_ops'])}, "
              f"calls with >=2 tools {_fmt(row['multi_tool_share'])}%")
    if report.ablation and not args.no_timestamps:
        a = report.ablation
        print(f"ablation: fused only {_fmt(a['fused_only_speedup']['mean'], 'speedup')}, "
              f"fused + concurrent {_fmt(a['fused_concurrent_speedup']['mean'], 'speedup')}")
    if report.lut and not args.no_timestamps:
        print(f"LUT model ({report.lut['holdout_tasks']} held-out tasks):")
        for name, m in report.lut["methods"].items():
            print(f"  {name}: predicted {m['predicted']:.3f} s/call, actual {m['actual']:.3f} s/call, "
                  f"error {m['modeling_error']:.2f}%")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
        write_aggregates_csv(out / "aggregates.csv", rows)
        write_histogram_csv(
            out / "histogram.csv",
            {p: {int(k): v for k, v in d["histogram"].items()} for p, d in report.policies.items()},
        )
        print(f"wrote {out}")
    return EXIT_OK


def _reports_from_dirs(dirs: Sequence[str]) -> list[RunReport]:
    reports: list[RunReport] = []
    for d in dirs:
        traces = read_traces(_existing_path(d))
        if not traces:
            raise InputError(f"no traces under {d}")
        method = traces[0].method or Path(d).name
        model = traces[0].model
        reports.append(RunReport.build(method, model, traces, reports[0] if reports else None))
    return reports


def _existing_path(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise InputError(f"path not found: {p}")
    return p


def cmd_report(args: argparse.Namespace) -> int:
    reports = _reports_from_dirs(args.trace_dirs)
    rows = [{"method": r.method, "model": r.model, **r.aggregates} for r in reports]
    print(render_table(rows, args.no_timestamps))
    if args.csv:
        write_aggregates_csv(args.csv, rows)
    if args.histogram_csv:
        write_histogram_csv(args.histogram_csv, {r.method: tools_per_call_histogram(r.traces) for r in reports})
    if args.json:
        Path(args.json).write_text(json.dumps([r.to_json() for r in reports], indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_lut(args: argparse.Namespace) -> int:
    traces = read_traces(_existing_path(args.trace_dir))
    if not traces:
        raise InputError(f"no traces under {args.trace_dir}")
    by_method: dict[str, list] = {}
    for t in traces:
        by_method.setdefault(t.method or "run", []).append(t)
    reports = {m: RunReport(m, ts[0].model, ts) for m, ts in by_method.items()}
    result = lut_evaluation(reports, args.holdout, args.seed)
    print(f"held-out tasks: {result['holdout_tasks']}")
    for name, m in result["methods"].items():
        line = f"{name}: predicted {m['predicted']:.4f} s/call, actual {m['actual']:.4f} s/call, " \
               f"modeling error {m['modeling_error']:.2f}%"
        if m["partial"]:
            line += f" (partial; missing {', '.join(m['partial'])})"
        print(line)
    if args.json:
        Path(args.json).write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="toolfuse", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--no-timestamps", action="store_true", help="omit wall-clock values from stdout")

    p = sub.add_parser("fuse", help="dry-run the fuser for one query")
    p.add_argument("--registry", help="registry JSON (default: packaged geospatial registry)")
    p.add_argument("--query")
    p.add_argument("--config", help="fuser config JSON")
    p.add_argument("--session", default="live", help="live | replay:<file> | oracle:<task.json|demo>")
    common(p)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("run", help="run one task through the agent loop")
    p.add_argument("--registry")
    p.add_argument("--query")
    p.add_argument("--config", help="fuser config JSON")
    p.add_argument("--session", default="live", help="live | replay:<file> | oracle:<task.json|demo>")
    p.add_argument("--prompting", choices=("cot", "react"), default="react")
    p.add_argument("--shots", choices=("zero", "few"), default="zero")
    p.add_argument("--model", default="gpt-4-turbo")
    p.add_argument("--max-steps", type=int, default=12)
    p.add_argument("--no-fuser", action="store_true", help="skip the fuser pass (baseline)")
    p.add_argument("--no-concurrent", action="store_true", help="run stage members one by one (fused only)")
    p.add_argument("--no-provider-parallel", action="store_true", help="ask for one tool call per reply")
    p.add_argument("--group-filters", action="store_true", default=None,
                   help="oracle sessions: force the provider-parallel filter grouping")
    p.add_argument("--max-concurrency", type=int, default=8)
    p.add_argument("--timeout", type=float, default=30.0, help="per-call tool timeout in seconds")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--task-id", default="task")
    p.add_argument("--method", help="method label stored in the trace")
    p.add_argument("--trace-out", help="write the task trace (JSONL)")
    p.add_argument("--record", help="record the session exchanges to a transcript")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", help="run the synthetic benchmark")
    p.add_argument("--config", help="bench config JSON")
    p.add_argument("--policies", default=",".join(POLICIES))
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--out", help="directory for report.json, CSV tables and traces")
    p.add_argument("--n-tasks", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--clock", choices=("sim", "real"))
    p.add_argument("--vary-seed", action="store_true", help="use seed+r for repeat r")
    p.add_argument("--max-concurrency", type=int)
    common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="aggregate tables from trace directories")
    p.add_argument("trace_dirs", nargs="+", help="first one is the baseline")
    p.add_argument("--csv", help=f"write aggregates CSV ({', '.join(AGGREGATE_COLUMNS)})")
    p.add_argument("--histogram-csv", help="write the tools-per-call histogram CSV")
    p.add_argument("--json", help="write the run reports as JSON")
    common(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("lut", help="fit and score the LUT latency model")
    p.add_argument("trace_dir")
    p.add_argument("--holdout", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", help="write the evaluation as JSON")
    common(p)
    p.set_defaults(func=cmd_lut)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, RegistryError, ReplayMismatch, TemplateNotFound, FileNotFoundError,
            json.JSONDecodeError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (TransportError, ApiStatusError, MalformedResponse) as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT


if __name__ == "__main__":
    sys.exit(main())
