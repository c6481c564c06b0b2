import threading
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from toolfuse.clock import SimClock
from toolfuse.executor import (
    ExecutionBudget,
    ExecutionPlan,
    SubCall,
    ToolOutput,
    conflicts,
    execute_plan,
    plan_execution,
    serial,
    simulate_stage,
)
from toolfuse.registry import UnknownToolError

from conftest import make_registry, tool


def calls(*names):
    return [SubCall(n, {}, i) for i, n in enumerate(names)]


def stage_names(plan):
    return [[c.tool for c in s] for s in plan.stages]


def test_plan_examples(geo):
    assert stage_names(plan_execution(calls("load_db_xview1", "load_db_fair1m"), geo)) == [
        ["load_db_xview1", "load_db_fair1m"]
    ]
    assert stage_names(plan_execution(calls("filter_date", "filter_loc"), geo)) == [["filter_date"], ["filter_loc"]]
    assert plan_execution([], geo) == ExecutionPlan()

    reg = make_registry([
        tool("load_a", "l", effects=[("ds_a", "write")]),
        tool("load_b", "l", effects=[("ds_b", "write")]),
        tool("filter_x", "f", effects=[("ds_a", "read"), ("ds_a", "write")]),
        tool("filter_y", "f", effects=[("ds_a", "read"), ("ds_a", "write")]),
    ])
    assert stage_names(plan_execution(calls("load_a", "load_b", "filter_x", "filter_y"), reg)) == [
        ["load_a", "load_b"], ["filter_x"], ["filter_y"]
    ]
    with pytest.raises(UnknownToolError):
        plan_execution(calls("nope"), reg)


def sleeper(seconds):
    def run(tool, args):
        time.sleep(seconds)
        return tool
    return run


def test_concurrent_flag_timing(geo):
    plan = plan_execution(calls("load_db_xview1", "load_db_fair1m"), geo)
    runners = {"load_db_xview1": sleeper(0.1), "load_db_fair1m": sleeper(0.1)}
    t0 = time.perf_counter()
    on = execute_plan(plan, runners, concurrent=True)
    mid = time.perf_counter()
    off = execute_plan(plan, runners, concurrent=False)
    end = time.perf_counter()
    assert mid - t0 < 0.18
    assert end - mid >= 0.2
    assert [r.value for r in on.results] == [r.value for r in off.results]


def test_stage_failure_stops_later_stages(geo):
    started = []

    def boom(tool, args):
        started.append(tool)
        raise RuntimeError("disk full")

    def ok(tool, args):
        started.append(tool)
        return "ok"

    plan = plan_execution(calls("load_db_xview1", "load_db_fair1m", "filter_date"), geo)
    report = execute_plan(plan, {"load_db_xview1": boom, "load_db_fair1m": ok, "filter_date": ok})
    assert report.failed_stage == 0 and not report.ok
    assert "filter_date" not in started
    assert sorted(started) == ["load_db_fair1m", "load_db_xview1"]
    assert [c.tool for c in report.skipped] == ["filter_date"]
    assert report.results[0].error == "RuntimeError: disk full"


def test_empty_and_missing_runner(geo):
    assert execute_plan(ExecutionPlan(), {}).results == []
    report = execute_plan(plan_execution(calls("plot"), geo), {})
    assert not report.results[0].ok and "no runner" in report.results[0].error


def test_timeout_becomes_error(geo):
    plan = plan_execution(calls("plot"), geo)
    report = execute_plan(plan, {"plot": sleeper(0.3)}, ExecutionBudget(per_call_timeout=0.05))
    assert not report.ok and "timed out" in report.results[0].error


def test_serial_runner_never_overlaps():
    reg = make_registry([tool(f"t{i}", "c", effects=[(f"r{i}", "write")]) for i in range(4)])
    active, peak, lock = [0], [0], threading.Lock()

    @serial
    def shared(tool, args):
        with lock:
            active[0] += 1
            peak[0] = max(peak[0], active[0])
        time.sleep(0.02)
        with lock:
            active[0] -= 1
        return tool

    plan = plan_execution(calls("t0", "t1", "t2", "t3"), reg)
    assert len(plan.stages) == 1
    execute_plan(plan, {f"t{i}": shared for i in range(4)})
    assert peak[0] == 1


def test_results_in_seq_order_regardless_of_completion(geo):
    plan = plan_execution(calls("load_db_xview1", "load_db_fair1m", "load_db_dota"), geo)
    runners = {"load_db_xview1": sleeper(0.06), "load_db_fair1m": sleeper(0.03), "load_db_dota": sleeper(0.0)}
    report = execute_plan(plan, runners)
    assert [r.seq for r in report.results] == [0, 1, 2]
    assert all(r.finished >= r.started for r in report.results)
    assert len(report.events) == 6


def test_sim_clock_timestamps(geo):
    plan = plan_execution(calls("load_db_xview1", "load_db_fair1m", "filter_date"), geo)
    durations = {"load_db_xview1": 0.5, "load_db_fair1m": 0.25, "filter_date": 0.125}
    runners = {k: (lambda d: lambda t, a: ToolOutput(t, d))(v) for k, v in durations.items()}
    clock = SimClock()
    report = execute_plan(plan, runners, clock=clock)
    assert [(r.started, r.finished) for r in report.results] == [(0.0, 0.5), (0.0, 0.25), (0.5, 0.625)]
    assert clock.now() == 0.625
    clock = SimClock()
    execute_plan(plan, runners, concurrent=False, clock=clock)
    assert clock.now() == 0.875


def test_simulate_stage_worker_limit():
    assert simulate_stage(0.0, [1.0, 1.0, 1.0], True, 2) == [(0.0, 1.0), (0.0, 1.0), (1.0, 2.0)]
    assert simulate_stage(1.0, [1.0, 2.0], False, 8) == [(1.0, 2.0), (2.0, 4.0)]
    assert simulate_stage(0.0, [1.0, 1.0], True, 8, ["k", "k"]) == [(0.0, 1.0), (1.0, 2.0)]


def brute_force_stages(subcalls, registry):
    """Reference: a call's stage is one past the latest earlier call it conflicts with."""
    stage = {}
    ordered = sorted(subcalls, key=lambda c: c.seq)
    for i, c in enumerate(ordered):
        a = registry.get(c.tool)
        s = 0
        for prev in ordered[:i]:
            b = registry.get(prev.tool)
            if conflicts(a.reads, a.writes, b.reads, b.writes):
                s = max(s, stage[prev.seq] + 1)
        stage[c.seq] = s
    return stage


@st.composite
def effect_lists(draw):
    resources = ["r0", "r1", "r2", "r3"]
    n_tools = draw(st.integers(1, 6))
    tools = []
    for i in range(n_tools):
        eff = draw(st.lists(st.tuples(st.sampled_from(resources), st.sampled_from(["read", "write"])), unique=True, max_size=4))
        tools.append(tool(f"t{i}", "c", effects=eff))
    reg = make_registry(tools)
    names = draw(st.lists(st.sampled_from(reg.names()), max_size=10))
    return reg, [SubCall(n, {}, i) for i, n in enumerate(names)]


@settings(max_examples=300, deadline=None)
@given(effect_lists())
def test_plan_matches_brute_force_and_invariants(case):
    reg, subcalls = case
    plan = plan_execution(subcalls, reg)
    assert plan.stage_of() == brute_force_stages(subcalls, reg)
    assert sorted(c.seq for c in plan.calls()) == [c.seq for c in subcalls]
    for s in plan.stages:
        for i, a in enumerate(s):
            for b in s[i + 1:]:
                x, y = reg.get(a.tool), reg.get(b.tool)
                assert not conflicts(x.reads, x.writes, y.reads, y.writes)
