"""Stage planning and execution of de-fused sub-calls.

Sub-calls that touch disjoint resources share a stage and may run at the
same time; a sub-call that writes a resource another one reads or writes is
pushed to a later stage, keeping the original order among conflicting calls.
"""

from __future__ import annotations

import heapq
import json
import logging
import threading
from collections.abc import Callable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from dataclasses import dataclass, field
from typing import Any

from .clock import RealClock, SimClock
from .registry import ToolRegistry

logger = logging.getLogger(__name__)

DIRECT = "direct"
DEFUSED = "defused"
PROVIDER_PARALLEL = "provider_parallel"

Runner = Callable[[str, dict[str, Any]], Any]


@dataclass(frozen=True)
class SubCall:
    tool: str
    arguments: Mapping[str, Any]
    seq: int
    origin: str = DIRECT
    fused_from: str | None = None
    call_id: str | None = None


@dataclass(frozen=True)
class ExecutionPlan:
    stages: tuple[tuple[SubCall, ...], ...] = ()

    def __len__(self) -> int:
        return len(self.stages)

    def calls(self) -> list[SubCall]:
        return sorted((c for s in self.stages for c in s), key=lambda c: c.seq)

    def stage_of(self) -> dict[int, int]:
        return {c.seq: i for i, s in enumerate(self.stages) for c in s}


@dataclass(frozen=True)
class ExecutionBudget:
    max_concurrency: int = 8
    per_call_timeout: float = 30.0
    max_failures_before_reset: int = 3

    def __post_init__(self) -> None:
        if self.max_concurrency < 1 or self.per_call_timeout <= 0 or self.max_failures_before_reset < 1:
            raise ValueError("execution budget values must be positive")


@dataclass(frozen=True)
class ToolOutput:
    """What a runner may return instead of a bare value.

    ``duration`` is the declared cost of the call; under a simulated clock
    it is the time the call takes.
    """

    value: Any
    duration: float | None = None


@dataclass(frozen=True)
class ToolResult:
    tool: str
    seq: int
    ok: bool
    value: str | None
    error: str | None
    started: float
    finished: float
    stage: int = 0

    @property
    def duration(self) -> float:
        return self.finished - self.started


@dataclass(frozen=True)
class TraceEvent:
    kind: str  # "start" | "finish"
    seq: int
    tool: str
    stage: int
    t: float


@dataclass
class ExecutionReport:
    results: list[ToolResult] = field(default_factory=list)
    events: list[TraceEvent] = field(default_factory=list)
    failed_stage: int | None = None
    skipped: list[SubCall] = field(default_factory=list)
    stage_times: list[tuple[float, float]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.failed_stage is None


def conflicts(
    reads_a: frozenset[str], writes_a: frozenset[str], reads_b: frozenset[str], writes_b: frozenset[str]
) -> bool:
    """True when the two calls share a resource and at least one writes it."""
    return bool(writes_a & (reads_b | writes_b)) or bool(writes_b & reads_a)


def plan_execution(subcalls: Sequence[SubCall], registry: ToolRegistry) -> ExecutionPlan:
    """Greedy earliest-stage list scheduling in ``seq`` order.

    A call lands right after the latest stage holding an earlier call it
    conflicts with (stage 0 when there is none). Raises UnknownToolError for
    tools missing from the registry.
    """
    last_write: dict[str, int] = {}
    last_access: dict[str, int] = {}
    stages: list[list[SubCall]] = []
    for call in sorted(subcalls, key=lambda c: c.seq):
        spec = registry.get(call.tool)
        stage = 0
        for r in spec.reads:
            if r in last_write:
                stage = max(stage, last_write[r] + 1)
        for r in spec.writes:
            if r in last_access:
                stage = max(stage, last_access[r] + 1)
        while len(stages) <= stage:
            stages.append([])
        stages[stage].append(call)
        for r in spec.reads | spec.writes:
            last_access[r] = max(last_access.get(r, -1), stage)
        for r in spec.writes:
            last_write[r] = max(last_write.get(r, -1), stage)
    return ExecutionPlan(tuple(tuple(s) for s in stages))


def simulate_stage(
    start: float,
    durations: Sequence[float],
    concurrent: bool,
    max_concurrency: int,
    serial_keys: Sequence[object | None] | None = None,
) -> list[tuple[float, float]]:
    """Start/finish times for one stage's members, in the given order.

    Concurrent stages use list scheduling over ``max_concurrency`` workers;
    members sharing a non-None serial key never overlap.
    """
    out: list[tuple[float, float]] = []
    if not concurrent:
        t = start
        for d in durations:
            out.append((t, t + d))
            t = t + d
        return out
    workers = [start] * min(max_concurrency, max(len(durations), 1))
    heapq.heapify(workers)
    serial_free: dict[object, float] = {}
    keys = serial_keys or [None] * len(durations)
    for d, key in zip(durations, keys):
        free = heapq.heappop(workers)
        s = free if key is None else max(free, serial_free.get(key, start))
        f = s + d
        if key is not None:
            serial_free[key] = f
        heapq.heappush(workers, f)
        out.append((s, f))
    return out


def render_value(value: Any) -> str:
    if isinstance(value, str):
        return value
    try:
        return json.dumps(value, sort_keys=True, default=str)
    except (TypeError, ValueError):
        return str(value)


class _Run:
    """State for one execute_plan call."""

    def __init__(self, runners: Mapping[str, Runner], budget: ExecutionBudget, clock: Any) -> None:
        self.runners = runners
        self.budget = budget
        self.clock = clock
        self.events: list[TraceEvent] = []
        self._events_lock = threading.Lock()
        self._serial_locks: dict[int, threading.Lock] = {}

    def emit(self, kind: str, call: SubCall, stage: int, t: float) -> None:
        with self._events_lock:
            self.events.append(TraceEvent(kind, call.seq, call.tool, stage, t))

    def serial_lock(self, runner: Runner) -> Any:
        if not getattr(runner, "serial", False):
            return nullcontext()
        with self._events_lock:
            return self._serial_locks.setdefault(id(runner), threading.Lock())

    def invoke(self, call: SubCall) -> tuple[bool, Any, float | None]:
        runner = self.runners.get(call.tool)
        if runner is None:
            return False, f"no runner registered for {call.tool!r}", None
        try:
            out = runner(call.tool, dict(call.arguments))
        except Exception as exc:  # runner failures become error results
            return False, f"{type(exc).__name__}: {exc}", None
        if isinstance(out, ToolOutput):
            return True, out.value, out.duration
        return True, out, None

    def run_real(self, call: SubCall, stage: int) -> ToolResult:
        runner = self.runners.get(call.tool)
        with self.serial_lock(runner) if runner else nullcontext():
            box: dict[str, Any] = {}

            def target() -> None:
                box["out"] = self.invoke(call)

            started = self.clock.now()
            self.emit("start", call, stage, started)
            worker = threading.Thread(target=target, daemon=True, name=f"tool-{call.tool}")
            worker.start()
            worker.join(self.budget.per_call_timeout)
            finished = self.clock.now()
            if worker.is_alive():
                # the thread is abandoned; its stage is marked failed below
                ok, value = False, f"timed out after {self.budget.per_call_timeout}s"
            else:
                ok, value, _ = box["out"]
            self.emit("finish", call, stage, finished)
        return _result(call, stage, ok, value, started, finished)

    def run_stage_real(self, members: Sequence[SubCall], stage: int, concurrent: bool) -> list[ToolResult]:
        if not concurrent or len(members) == 1:
            return [self.run_real(c, stage) for c in members]
        workers = min(self.budget.max_concurrency, len(members))
        with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="stage") as pool:
            futures = [pool.submit(self.run_real, c, stage) for c in members]
            return [f.result() for f in futures]

    def run_stage_sim(self, members: Sequence[SubCall], stage: int, concurrent: bool) -> list[ToolResult]:
        outcomes = [self.invoke(c) for c in members]
        timeout = self.budget.per_call_timeout
        durations = [min(d or 0.0, timeout) for _, _, d in outcomes]
        keys = [
            id(self.runners[c.tool]) if getattr(self.runners.get(c.tool), "serial", False) else None
            for c in members
        ]
        times = simulate_stage(self.clock.now(), durations, concurrent, self.budget.max_concurrency, keys)
        results = []
        for call, (ok, value, d), (s, f) in zip(members, outcomes, times):
            if d is not None and d > timeout:
                ok, value = False, f"timed out after {timeout}s"
            self.emit("start", call, stage, s)
            self.emit("finish", call, stage, f)
            results.append(_result(call, stage, ok, value, s, f))
        if times:
            self.clock.set(max(f for _, f in times))
        return results


def _result(call: SubCall, stage: int, ok: bool, value: Any, started: float, finished: float) -> ToolResult:
    return ToolResult(
        tool=call.tool,
        seq=call.seq,
        ok=ok,
        value=render_value(value) if ok else None,
        error=None if ok else str(value),
        started=started,
        finished=finished,
        stage=stage,
    )


def execute_plan(
    plan: ExecutionPlan,
    runners: Mapping[str, Runner],
    budget: ExecutionBudget | None = None,
    concurrent: bool = True,
    clock: RealClock | SimClock | None = None,
) -> ExecutionReport:
    """Run the stages in order.

    With ``concurrent`` on, stage members run simultaneously (bounded by
    ``budget.max_concurrency``); off, they run one by one in seq order.
    A failed member lets the rest of its stage finish, then later stages are
    skipped. Results come back in seq order.

    Under a SimClock, runners are called inline and timestamps come from
    their declared durations.
    """
    budget = budget or ExecutionBudget()
    clock = clock or RealClock()
    run = _Run(runners, budget, clock)
    report = ExecutionReport()
    for i, members in enumerate(plan.stages):
        stage_start = clock.now()
        if clock.simulated:
            results = run.run_stage_sim(members, i, concurrent)
        else:
            results = run.run_stage_real(members, i, concurrent)
        report.stage_times.append((stage_start, clock.now()))
        report.results.extend(results)
        if not all(r.ok for r in results):
            report.failed_stage = i
            report.skipped = [c for s in plan.stages[i + 1 :] for c in s]
            logger.info("stage %d failed; skipping %d sub-calls", i, len(report.skipped))
            break
    report.results.sort(key=lambda r: r.seq)
    report.events = sorted(run.events, key=lambda e: (e.t, e.kind != "finish", e.seq))
    return report


def serial(runner: Runner) -> Runner:
    """Mark a runner as unsafe for concurrent calls."""
    runner.serial = True  # type: ignore[attr-defined]
    return runner
