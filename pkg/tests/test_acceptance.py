"""Acceptance suite. Each test prints one PASS/FAIL line, then asserts."""

import json
import math
import random
import threading
import time
from dataclasses import replace
from fractions import Fraction

import httpx
import pytest

from toolfuse.agent import FUSER, StrategyConfig, run_task
from toolfuse.bench import (
    COMPILER,
    FUSED_ONLY,
    MULTI,
    PROVIDER_PARALLEL,
    SEQUENTIAL,
    LatencyModel,
    StateStore,
    WorkloadConfig,
    demo_task,
    generate_workload,
    make_runners,
    oracle_fuser,
    run_benchmark,
    run_policy_task,
    script_agent,
    script_fuser,
)
from toolfuse.cli import main
from toolfuse.clock import RealClock, SimClock
from toolfuse.executor import ExecutionBudget, SubCall, conflicts, execute_plan, plan_execution
from toolfuse.fuser import FuserConfig, FusionPlan
from toolfuse.fusion import ToolCall, defuse_call, fuse_toolset, lift_arguments, toolset_wire
from toolfuse.gateway import (
    ChatRequest,
    LiveSession,
    RecordingSession,
    ReplaySession,
    ScriptedSession,
    Sessions,
    text_reply,
)
from toolfuse.metrics import (
    RunReport,
    filtered_mean,
    modeling_error,
    speedup,
    token_reduction,
)
from toolfuse.registry import validate_plan

from conftest import make_registry, tool


@pytest.fixture
def verdict(capsys):
    def report(criterion, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} {criterion}: {detail}")
        assert ok, detail

    return report


@pytest.fixture(scope="module")
def default_bench():
    t0 = time.perf_counter()
    report = run_benchmark(WorkloadConfig())
    return report, time.perf_counter() - t0


def metric(report, policy, key):
    return report.policies[policy]["metrics"][key]["mean"]


# -- C1 ----------------------------------------------------------------------

PARAM_POOL = ["a", "b", "date", "x_1", "lat", "radius"]
VALUE_POOL = [0, -3, 2.5, "", "x", "2023-10-01", True, None, [1, 2], {"k": "v"}]


def random_fusion_case(rng):
    n_tools = rng.randint(2, 9)
    cats = ["c1", "c2", "c3"]
    tools = []
    for i in range(n_tools):
        pnames = rng.sample(PARAM_POOL, rng.randint(0, 4))
        params = {p: {"type": "string", "required": rng.random() < 0.5} for p in pnames}
        tools.append(tool(f"t{i}", rng.choice(cats), params))
    reg = make_registry(tools, cats)
    groups = {}
    for cat, names in reg.category_index.items():
        if len(names) >= 2 and rng.random() < 0.8:
            groups[cat] = tuple(rng.sample(names, rng.randint(2, min(4, len(names)))))
    plan = validate_plan(reg, FusionPlan(groups))
    args = {t.name: {p.name: rng.choice(VALUE_POOL) for p in t.parameters if rng.random() < 0.7} for t in reg.tools}
    return reg, plan, args


def test_c1_fusion_round_trip(verdict):
    rng = random.Random(1)
    failures = 0
    t0 = time.perf_counter()
    for _ in range(1000):
        reg, plan, args = random_fusion_case(rng)
        view, index = fuse_toolset(reg, plan)
        recovered = []
        for entry in view:
            if entry.name in index.fused:
                call = ToolCall(entry.name, lift_arguments(entry, args))
            else:
                call = ToolCall(entry.name, args[entry.name])
            recovered += [(c.name, dict(c.arguments)) for c in defuse_call(index, call)]
        if sorted(recovered, key=lambda p: p[0]) != sorted(args.items()):
            failures += 1
    elapsed = time.perf_counter() - t0
    verdict("C1 fusion round-trip", failures == 0 and elapsed < 5,
            f"1000 cases, {failures} failures, {elapsed:.2f} s (limit 5 s)")


# -- C2 ----------------------------------------------------------------------


def random_schedule_case(rng):
    resources = ["r0", "r1", "r2", "r3", "r4"]
    tools = []
    for i in range(rng.randint(1, 7)):
        eff = {(rng.choice(resources), rng.choice(["read", "write"])) for _ in range(rng.randint(0, 4))}
        tools.append(tool(f"t{i}", "c", effects=sorted(eff)))
    reg = make_registry(tools)
    names = [rng.choice(reg.names()) for _ in range(rng.randint(1, 10))]
    return reg, [SubCall(n, {}, i) for i, n in enumerate(names)]


def effect_runner(reg, state, delay):
    def run(name, args):
        spec = reg.get(name)
        seen = tuple((r, state.get(r)) for r in sorted(spec.reads))
        time.sleep(delay)
        for w in sorted(spec.writes):
            state[w] = (name, args["seq"], seen)
        return name

    return run


def sequential_state(reg, subcalls):
    state = {}
    for c in subcalls:
        spec = reg.get(c.tool)
        seen = tuple((r, state.get(r)) for r in sorted(spec.reads))
        for w in sorted(spec.writes):
            state[w] = (c.tool, c.seq, seen)
    return state


def test_c2_scheduling_safety_and_equivalence(verdict):
    rng = random.Random(2)
    overlaps = mismatches = 0
    budget = ExecutionBudget(max_concurrency=8, per_call_timeout=5)
    t0 = time.perf_counter()
    for _ in range(1000):
        reg, subcalls = random_schedule_case(rng)
        subcalls = [replace(c, arguments={"seq": c.seq}) for c in subcalls]
        state = {}
        runner = effect_runner(reg, state, 0.0005)
        report = execute_plan(plan_execution(subcalls, reg), {n: runner for n in reg.names()}, budget, True, RealClock())
        spans = {}
        for ev in report.events:
            lo, hi = spans.get(ev.seq, (None, None))
            spans[ev.seq] = (ev.t, hi) if ev.kind == "start" else (lo, ev.t)
        for i, a in enumerate(subcalls):
            for b in subcalls[i + 1:]:
                x, y = reg.get(a.tool), reg.get(b.tool)
                if conflicts(x.reads, x.writes, y.reads, y.writes):
                    (s1, f1), (s2, f2) = spans[a.seq], spans[b.seq]
                    if s1 < f2 and s2 < f1:
                        overlaps += 1
        if state != sequential_state(reg, subcalls):
            mismatches += 1
    elapsed = time.perf_counter() - t0
    verdict("C2 scheduling safety", overlaps == 0 and mismatches == 0 and elapsed < 30,
            f"1000 cases, {overlaps} conflicting overlaps, {mismatches} state mismatches, {elapsed:.2f} s (limit 30 s)")


# -- C3 ----------------------------------------------------------------------


def demo_run(geo, fuser_reply):
    task = demo_task(geo)
    agent = script_agent(task, SEQUENTIAL, geo)
    strategy = StrategyConfig(fuser_enabled=fuser_reply is not None)
    fuser = ScriptedSession([text_reply(fuser_reply)]) if fuser_reply is not None else None
    outcome = run_task(task.query, geo, strategy, FuserConfig(), Sessions(agent, fuser),
                       make_runners(geo, StateStore()), clock=SimClock(), task_id=task.task_id)
    return outcome.trace, agent


def test_c3_fallback_identity(verdict, geo):
    baseline, base_agent = demo_run(geo, None)
    original_tools = toolset_wire(list(geo.tools))
    bad = [
        "I could not find any groupings.",
        "{}",
        '{"load_ops": ["load_db_xview1", "ghost"], "filter_ops": ["filter_date", "nope"], "x_ops": ["a", "b"]}',
    ]
    problems = []
    for reply in bad:
        trace, agent = demo_run(geo, reply)
        for req, base_req in zip(agent.requests, base_agent.requests):
            if req.to_wire()["tools"] != original_tools or req.to_wire() != base_req.to_wire():
                problems.append(f"{reply!r}: agent request differs")
                break
        got, want = trace.to_json(), baseline.to_json()
        extra = got["calls"].pop(0)
        got.pop("plan")
        want.pop("plan")
        if extra["kind"] != FUSER or extra["subcalls"] or got != want or trace.plan:
            problems.append(f"{reply!r}: trace differs beyond one fuser record")
    verdict("C3 fallback identity", not problems,
            f"{len(bad)} fuser replies, toolset identical and one extra 0-tool record" if not problems else "; ".join(problems))


# -- C4 / C5 -----------------------------------------------------------------


def test_c4_parallelization(verdict, default_bench):
    report, elapsed = default_bench
    comp_f = metric(report, COMPILER, "parallelization_filter_ops")
    pp_f = metric(report, PROVIDER_PARALLEL, "parallelization_filter_ops")
    comp_l = metric(report, COMPILER, "parallelization_load_ops")
    again = run_benchmark(WorkloadConfig())
    deterministic = again.policies == report.policies
    ok = comp_f >= 95 and abs(pp_f - 25) <= 10 and comp_l >= 99 and deterministic and elapsed < 60
    verdict("C4 parallelization", ok,
            f"compiler filter {comp_f:.2f}% (>=95), provider-parallel filter {pp_f:.2f}% (25±10), "
            f"compiler load {comp_l:.2f}% (>=99), deterministic={deterministic}, {elapsed:.2f} s (limit 60 s)")


def test_c5_multi_tool_share(verdict, default_bench):
    report, _ = default_bench
    comp = metric(report, COMPILER, "multi_tool_share")
    pp = metric(report, PROVIDER_PARALLEL, "multi_tool_share")
    verdict("C5 calls with >=2 tools", comp > pp, f"compiler {comp:.2f}% vs provider-parallel {pp:.2f}%")


# -- C6 ----------------------------------------------------------------------


def test_c6_fused_and_concurrent_speedups(verdict, geo):
    latency = LatencyModel(
        api={"fuser": 0.02, "agent_call": 0.03, "final_answer": 0.02},
        tools={"load_ops": 0.1, "filter_ops": 0.1, "plot_ops": 0.1, "doc_ops": 0.1},
        sigma=0.0,
    )
    cfg = WorkloadConfig(n_tasks=4, seed=3, mix={MULTI: 1.0}, latency=latency, clock="real")
    tasks = generate_workload(cfg, geo)
    widths = [len(t.oracle.groups.get("load_ops", ())) for t in tasks]
    seq = [run_policy_task(t, SEQUENTIAL, geo, cfg).trace for t in tasks]
    fused = [run_policy_task(t, COMPILER, geo, cfg, concurrent=False, method=FUSED_ONLY).trace for t in tasks]
    both = [run_policy_task(t, COMPILER, geo, cfg).trace for t in tasks]
    s_fused, s_both = speedup(seq, fused), speedup(seq, both)
    ok = min(widths) >= 2 and s_fused > 1.0 and s_both > s_fused
    verdict("C6 fused vs fused+concurrent", ok,
            f"measured wall times over {len(tasks)} tasks (stage-0 widths {widths}): "
            f"fused-only {s_fused:.3f}x, fused+concurrent {s_both:.3f}x")


# -- C7 ----------------------------------------------------------------------


def brute_filtered_mean(xs):
    fr = [Fraction(x) for x in xs]
    mu = sum(fr) / len(fr)
    var = sum((x - mu) ** 2 for x in fr) / len(fr)
    kept = [x for x in fr if (x - mu) ** 2 <= 4 * var]
    return float(sum(kept) / len(kept))


def trace_stub(task_id, tokens, wall):
    from toolfuse.agent import CallRecord, TaskTrace

    return TaskTrace(task_id=task_id, query="q", status="success", wall_time=wall,
                     calls=[CallRecord(kind="final_answer", prompt_tokens=tokens, completion_tokens=0)])


def test_c7_metric_exactness(verdict):
    checks = []
    for xs, hand in [([1, 1, 1, 1, 100], 20.8), ([1, 1, 1, 1, 1000], 200.8), ([1.0] * 9 + [1000.0], 1.0),
                     ([2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0], 5.0)]:
        checks.append(("filtered_mean", filtered_mean(xs), brute_filtered_mean(xs)))
        checks.append(("filtered_mean hand", filtered_mean(xs), hand))
    preds, acts = [1.1, 0.9, 2.0], [1.0, 1.0, 2.5]
    brute = 100 * math.sqrt(sum(((p - a) / a) ** 2 for p, a in zip(preds, acts)) / 3)
    checks.append(("modeling_error", modeling_error(preds, acts), brute))
    checks.append(("modeling_error hand", modeling_error([1.1], [1.0]), 10.0))
    base = [trace_stub("a", 2952, 8.98), trace_stub("b", 2952, 8.98)]
    cand = [trace_stub("a", 2130, 7.40), trace_stub("b", 2130, 7.40)]
    checks.append(("token_reduction", token_reduction(base, cand), 2952 / 2130))
    checks.append(("speedup", speedup(base, cand), 8.98 / 7.40))
    bad = [(name, got, want) for name, got, want in checks if not math.isclose(got, want, rel_tol=1e-9)]
    verdict("C7 metrics exactness", not bad,
            f"{len(checks)} fixtures within 1e-9 relative" if not bad else f"mismatches: {bad}")


# -- C8 ----------------------------------------------------------------------


def test_c8_lut_model(verdict, default_bench):
    const = run_benchmark(WorkloadConfig(latency=LatencyModel(sigma=0.0)))
    const_err = {m: v["modeling_error"] for m, v in const.lut["methods"].items()}
    const_partial = any(v["partial"] for v in const.lut["methods"].values())
    noisy_err = {m: v["modeling_error"] for m, v in default_bench[0].lut["methods"].items()}
    ok = all(e == 0.0 for e in const_err.values()) and not const_partial and all(e <= 25 for e in noisy_err.values())
    verdict("C8 LUT model", ok,
            "constant latencies " + ", ".join(f"{m} {e:.4f}%" for m, e in const_err.items())
            + "; lognormal 20% holdout " + ", ".join(f"{m} {e:.2f}%" for m, e in noisy_err.items()) + " (<=25%)")


# -- C9 ----------------------------------------------------------------------


def fake_server(task, geo):
    """OpenAI-compatible endpoint that answers from the scripted sessions."""
    plan = oracle_fuser(task, geo)
    _, index = fuse_toolset(geo, plan)
    agent = script_agent(task, COMPILER, geo, index)
    fuser = script_fuser(task, plan)

    def handle(request: httpx.Request) -> httpx.Response:
        req = ChatRequest.from_wire(json.loads(request.content))
        session = fuser if req.tool_choice == "none" else agent
        return httpx.Response(200, json=session.chat(req).to_wire())

    return httpx.MockTransport(handle)


def test_c9_determinism(verdict, tmp_path, geo, capsys):
    out = tmp_path / "bench"
    code = main(["bench", "--repeats", "3", "--out", str(out), "--no-timestamps"])
    capsys.readouterr()
    report = json.loads((out / "report.json").read_text())
    stds = [v["std"] for doc in report["policies"].values() for v in doc["metrics"].values() if v is not None]
    zero_dev = code == 0 and stds and all(s == 0.0 for s in stds)

    replayed = []
    for task in (demo_task(geo), *generate_workload(WorkloadConfig(n_tasks=5, seed=9, mix={MULTI: 1.0}), geo)):
        path = tmp_path / f"{task.task_id}.jsonl"
        live = LiveSession(base_url="http://fake.local/v1", api_key="k", transport=fake_server(task, geo))
        rec = RecordingSession(live, path)
        strategy = StrategyConfig()
        first = run_task(task.query, geo, strategy, FuserConfig(), Sessions(rec), make_runners(geo, StateStore()),
                         clock=SimClock(), task_id=task.task_id).trace
        second = run_task(task.query, geo, strategy, FuserConfig(), Sessions(ReplaySession(path, strict=True)),
                          make_runners(geo, StateStore()), clock=SimClock(), task_id=task.task_id).trace
        replayed.append((first, second))
    live_report = RunReport.build("live", "m", [a for a, _ in replayed])
    replay_report = RunReport.build("replay", "m", [b for _, b in replayed])
    same = live_report.aggregates == replay_report.aggregates and all(a == b for a, b in replayed)
    verdict("C9 determinism", bool(zero_dev) and same,
            f"bench repeats=3 max std {max(stds) if stds else 'n/a'}; "
            f"record/replay of {len(replayed)} live exchanges identical={same}")
