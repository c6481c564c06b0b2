"""Function-calling loop with an optional fuser pass and a one-shot fuser-bypass reset."""

from __future__ import annotations

import json
import logging
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

from .clock import RealClock, SimClock
from .executor import (
    DEFUSED,
    DIRECT,
    PROVIDER_PARALLEL,
    ExecutionBudget,
    Runner,
    SubCall,
    execute_plan,
    plan_execution,
)
from .fuser import EMPTY_PLAN, FuserConfig, request_fusion
from .fusion import FusionIndex, ToolCall, ToolView, defuse_call, fuse_toolset
from .gateway import ApiStatusError, ChatRequest, Message, Sessions, TransportError
from .registry import ToolRegistry, UnknownToolError

logger = logging.getLogger(__name__)

FUSER = "fuser"
AGENT_CALL = "agent_call"
FINAL_ANSWER = "final_answer"

SUCCESS = "success"
FAILURE = "failure"
RESET_EXHAUSTED = "reset_exhausted"


class TemplateNotFound(FileNotFoundError):
    pass


@dataclass(frozen=True)
class StrategyConfig:
    prompting: str = "react"  # "cot" | "react"
    shots: str = "zero"  # "zero" | "few"
    examples: tuple[str, ...] = ()  # few-shot dialogues; packaged ones when empty
    agent_model: str = "gpt-4-turbo"
    fuser_enabled: bool = True
    provider_parallel_enabled: bool = True
    max_steps: int = 12

    def __post_init__(self) -> None:
        if self.prompting not in ("cot", "react"):
            raise ValueError(f"unknown prompting scheme {self.prompting!r}")
        if self.shots not in ("zero", "few"):
            raise ValueError(f"shots must be 'zero' or 'few', got {self.shots!r}")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


@dataclass
class SubCallRecord:
    tool: str
    arguments: dict[str, Any]
    seq: int
    stage: int
    origin: str = DIRECT
    fused_from: str | None = None
    ok: bool | None = None  # None: skipped after an earlier stage failed
    started: float | None = None
    finished: float | None = None
    error: str | None = None

    @property
    def duration(self) -> float | None:
        if self.started is None or self.finished is None:
            return None
        return self.finished - self.started


@dataclass
class CallRecord:
    kind: str
    attempt: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0
    latency: float = 0.0
    selected: list[str] = field(default_factory=list)  # tool names as the model chose them
    subcalls: list[SubCallRecord] = field(default_factory=list)
    stages: list[list[int]] = field(default_factory=list)
    concurrent: bool = True
    max_concurrency: int = 1
    failures: list[str] = field(default_factory=list)

    @property
    def tools_selected(self) -> int:
        return len(self.subcalls)

    @property
    def tool_names(self) -> list[str]:
        return [s.tool for s in self.subcalls]

    @property
    def fused(self) -> list[bool]:
        return [name.startswith("fused__") for name in self.selected]

    @property
    def tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> CallRecord:
        doc = dict(doc)
        doc["subcalls"] = [SubCallRecord(**s) for s in doc.get("subcalls", [])]
        return cls(**doc)


@dataclass
class TaskTrace:
    task_id: str
    query: str
    method: str = ""
    model: str = ""
    status: str = FAILURE
    final_answer: str = ""
    used_fusion: bool = False
    resets: int = 0
    wall_time: float = 0.0
    calls: list[CallRecord] = field(default_factory=list)
    plan: dict[str, list[str]] = field(default_factory=dict)
    gold: list[dict[str, Any]] | None = None
    oracle: dict[str, list[str]] | None = None

    @property
    def prompt_tokens(self) -> int:
        return sum(c.prompt_tokens for c in self.calls)

    @property
    def completion_tokens(self) -> int:
        return sum(c.completion_tokens for c in self.calls)

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    @property
    def agent_calls(self) -> list[CallRecord]:
        return [c for c in self.calls if c.kind != FUSER]

    def executed(self) -> list[SubCallRecord]:
        return [s for c in self.calls for s in c.subcalls if s.ok is not None]

    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> TaskTrace:
        doc = dict(doc)
        doc["calls"] = [CallRecord.from_json(c) for c in doc.get("calls", [])]
        return cls(**doc)


@dataclass
class TaskOutcome:
    final_answer: str
    status: str
    steps: int  # agent API calls, final answer included, fuser excluded
    trace: TaskTrace
    used_fusion: bool
    resets: int

    @property
    def tool_steps(self) -> int:
        return sum(1 for c in self.trace.calls if c.kind == AGENT_CALL)


def _template_root(templates_dir: str | Path | None) -> Any:
    if templates_dir is not None:
        return Path(templates_dir)
    return resources.files("toolfuse").joinpath("templates")


def _read_template(root: Any, rel: str) -> str:
    target = root.joinpath(rel)
    try:
        return target.read_text()
    except (FileNotFoundError, IsADirectoryError, NotADirectoryError) as exc:
        raise TemplateNotFound(f"missing prompt template: {target}") from exc


def load_examples(templates_dir: str | Path | None = None) -> tuple[str, ...]:
    root = _template_root(templates_dir).joinpath("examples")
    try:
        entries = sorted((p for p in root.iterdir() if p.name.endswith(".txt")), key=lambda p: p.name)
    except (FileNotFoundError, NotADirectoryError) as exc:
        raise TemplateNotFound(f"missing examples directory: {root}") from exc
    return tuple(p.read_text().strip() for p in entries)


def build_agent_prompt(
    query: str, strategy: StrategyConfig, templates_dir: str | Path | None = None
) -> list[Message]:
    """System + user seed for the agent. Identical whether or not fusion runs."""
    root = _template_root(templates_dir)
    system = _read_template(root, f"system/{strategy.prompting}.txt").strip()
    if strategy.shots == "few":
        examples = strategy.examples or load_examples(templates_dir)
        system += "\n\nExamples:\n\n" + "\n\n".join(examples)
    return [Message("system", system), Message("user", query)]


class _Attempt:
    """One pass of the select -> defuse -> plan -> execute loop."""

    def __init__(self, ctx: _Task, attempt: int, view: Sequence[ToolView], index: FusionIndex) -> None:
        self.ctx = ctx
        self.attempt = attempt
        self.tools = [t.to_function() for t in view]
        self.index = index
        self.failures = 0

    def run(self) -> str:
        ctx = self.ctx
        messages = list(ctx.seed)
        parallel = None if ctx.strategy.provider_parallel_enabled else False
        for _ in range(ctx.strategy.max_steps):
            request = ChatRequest(
                model=ctx.strategy.agent_model,
                messages=tuple(messages),
                tools=self.tools,
                tool_choice="auto",
                parallel_tool_calls=parallel,
            )
            response = ctx.sessions.agent.chat(request)
            ctx.clock.advance(response.latency)
            ctx.steps += 1
            usage = response.usage
            record = CallRecord(
                kind=AGENT_CALL if response.tool_calls else FINAL_ANSWER,
                attempt=self.attempt,
                prompt_tokens=usage.prompt_tokens if usage else 0,
                completion_tokens=usage.completion_tokens if usage else 0,
                latency=response.latency,
                selected=[c.name for c in response.tool_calls],
                concurrent=ctx.concurrent,
                max_concurrency=ctx.budget.max_concurrency,
            )
            ctx.trace.calls.append(record)
            if not response.tool_calls:
                ctx.trace.final_answer = response.message.content or ""
                return SUCCESS
            messages.append(response.message)
            messages.extend(self.handle_tool_calls(response.message.tool_calls or (), record))
            if self.failures >= ctx.budget.max_failures_before_reset:
                return RESET_EXHAUSTED
        return FAILURE

    def handle_tool_calls(self, tool_calls: Sequence[Any], record: CallRecord) -> list[Message]:
        ctx = self.ctx
        multi = len(tool_calls) > 1
        subcalls: list[SubCall] = []
        errors: dict[str, str] = {}
        fused_ids: set[str] = set()
        for tc in tool_calls:
            try:
                args = json.loads(tc.arguments) if tc.arguments.strip() else {}
                if not isinstance(args, dict):
                    raise ValueError("arguments must be a JSON object")
            except ValueError as exc:
                errors[tc.id] = f"ERROR: could not parse arguments for {tc.name}: {exc}"
                record.failures.append(f"parse:{tc.name}")
                self.failures += 1
                continue
            try:
                parts = defuse_call(self.index, ToolCall(tc.name, args, tc.id))
            except UnknownToolError:
                errors[tc.id] = f"ERROR: unknown tool {tc.name}"
                record.failures.append(f"unknown:{tc.name}")
                self.failures += 1
                continue
            for part in parts:
                if part.fused_from:
                    fused_ids.add(tc.id)
                    origin = DEFUSED
                else:
                    origin = PROVIDER_PARALLEL if multi else DIRECT
                for w in part.warnings:
                    logger.warning("%s: %s", tc.name, w)
                if part.missing_required:
                    logger.warning("%s missing required %s", part.name, part.missing_required)
                subcalls.append(
                    SubCall(
                        tool=part.name,
                        arguments=dict(part.arguments),
                        seq=len(subcalls),
                        origin=origin,
                        fused_from=part.fused_from,
                        call_id=tc.id,
                    )
                )
        if fused_ids:
            ctx.trace.used_fusion = True

        plan = plan_execution(subcalls, ctx.registry)
        report = execute_plan(plan, ctx.runners, ctx.budget, ctx.concurrent, ctx.clock)
        if not report.ok:
            record.failures.append(f"stage:{report.failed_stage}")
            self.failures += 1

        stage_of = plan.stage_of()
        by_seq = {r.seq: r for r in report.results}
        record.stages = [[c.seq for c in s] for s in plan.stages]
        for sc in subcalls:
            r = by_seq.get(sc.seq)
            record.subcalls.append(
                SubCallRecord(
                    tool=sc.tool,
                    arguments=dict(sc.arguments),
                    seq=sc.seq,
                    stage=stage_of[sc.seq],
                    origin=sc.origin,
                    fused_from=sc.fused_from,
                    ok=None if r is None else r.ok,
                    started=None if r is None else r.started,
                    finished=None if r is None else r.finished,
                    error=None if r is None else r.error,
                )
            )

        per_call: dict[str, list[SubCallRecord]] = {}
        for sc, rec in zip(subcalls, record.subcalls):
            per_call.setdefault(sc.call_id or "", []).append(rec)
        replies = []
        for tc in tool_calls:
            if tc.id in errors:
                content = errors[tc.id]
            else:
                content = _render_outcome(per_call.get(tc.id, []), by_seq, fused=tc.id in fused_ids)
            replies.append(Message("tool", content, tool_call_id=tc.id))
        return replies


def _render_outcome(records: Sequence[SubCallRecord], by_seq: Mapping[int, Any], fused: bool) -> str:
    items = []
    for rec in records:
        r = by_seq.get(rec.seq)
        if r is None:
            items.append({"tool": rec.tool, "status": "skipped"})
        elif r.ok:
            items.append({"tool": rec.tool, "status": "ok", "result": r.value})
        else:
            items.append({"tool": rec.tool, "status": "error", "error": r.error})
    if not fused and len(items) == 1:
        item = items[0]
        if item["status"] == "ok":
            return item["result"]
        return f"ERROR: {item.get('error', 'skipped after an earlier failure')}"
    return json.dumps(items, sort_keys=True)


@dataclass
class _Task:
    registry: ToolRegistry
    strategy: StrategyConfig
    sessions: Sessions
    runners: Mapping[str, Runner]
    budget: ExecutionBudget
    concurrent: bool
    clock: Any
    seed: list[Message]
    trace: TaskTrace
    steps: int = 0


def run_task(
    query: str,
    registry: ToolRegistry,
    strategy: StrategyConfig,
    fuser_cfg: FuserConfig,
    sessions: Sessions,
    runners: Mapping[str, Runner],
    budget: ExecutionBudget | None = None,
    concurrent: bool = True,
    clock: RealClock | SimClock | None = None,
    task_id: str = "task",
    templates_dir: str | Path | None = None,
) -> TaskOutcome:
    """Answer one query, fusing tools first when the strategy allows it.

    Failures (unparseable arguments, unknown tools, failed stages) are
    counted; reaching ``budget.max_failures_before_reset`` restarts the task
    once from the original conversation with the full, unfused toolset.
    Transport errors also trigger that reset and propagate when it is spent.
    """
    budget = budget or ExecutionBudget()
    clock = clock or RealClock()
    t0 = clock.now()
    trace = TaskTrace(task_id=task_id, query=query, model=strategy.agent_model)
    seed = build_agent_prompt(query, strategy, templates_dir)
    ctx = _Task(registry, strategy, sessions, runners, budget, concurrent, clock, seed, trace)

    plan = EMPTY_PLAN
    if strategy.fuser_enabled:
        try:
            result = request_fusion(query, registry, fuser_cfg, sessions.fuser_or_agent())
        except (TransportError, ApiStatusError) as exc:
            logger.warning("fuser call failed (%s); continuing with the full toolset", exc)
            trace.calls.append(CallRecord(kind=FUSER, failures=[f"transport:{exc}"]))
        else:
            clock.advance(result.response.latency)
            usage = result.response.usage
            trace.calls.append(
                CallRecord(
                    kind=FUSER,
                    prompt_tokens=usage.prompt_tokens if usage else 0,
                    completion_tokens=usage.completion_tokens if usage else 0,
                    latency=result.response.latency,
                )
            )
            plan = result.plan
    trace.plan = plan.to_json()

    view, index = fuse_toolset(registry, plan)
    full_view, full_index = fuse_toolset(registry, EMPTY_PLAN)
    status = FAILURE
    resets = 0
    try:
        status = _Attempt(ctx, 0, view, index).run()
    except (TransportError, ApiStatusError) as exc:
        logger.warning("agent call failed (%s); resetting", exc)
        status = RESET_EXHAUSTED
    if status == RESET_EXHAUSTED:
        resets = 1
        trace.used_fusion = False
        logger.info("resetting %s with the full toolset, fuser bypassed", task_id)
        status = _Attempt(ctx, 1, full_view, full_index).run()

    trace.status = status
    trace.resets = resets
    trace.wall_time = clock.now() - t0
    return TaskOutcome(
        final_answer=trace.final_answer,
        status=status,
        steps=ctx.steps,
        trace=trace,
        used_fusion=trace.used_fusion,
        resets=resets,
    )

