import json

import pytest

from toolfuse.agent import (
    AGENT_CALL,
    FINAL_ANSWER,
    FUSER,
    RESET_EXHAUSTED,
    SUCCESS,
    StrategyConfig,
    TaskTrace,
    TemplateNotFound,
    build_agent_prompt,
    run_task,
)
from toolfuse.bench import StateStore, make_runners
from toolfuse.clock import SimClock
from toolfuse.fuser import FuserConfig
from toolfuse.gateway import (
    ScriptedSession,
    Sessions,
    ToolCallWire,
    TransportError,
    Usage,
    text_reply,
    tool_reply,
)
from toolfuse.gateway import ChatResponse, Message

DEMO_PLAN = '{"load_ops": ["load_db_xview1", "load_db_fair1m"], "filter_ops": ["filter_date", "filter_loc"]}'
DATE = {"start": "2023-10-01", "end": "2023-10-31"}
LOC = {"lat": 40.7, "lon": -74.2, "radius": 50}
FUSED_STEP = [
    ("fused__load_db_xview1__load_db_fair1m", {}),
    ("fused__filter_date__filter_loc", {**{f"filter_date__{k}": v for k, v in DATE.items()},
                                        **{f"filter_loc__{k}": v for k, v in LOC.items()}}),
]
SEQUENTIAL = [("load_db_xview1", {}), ("load_db_fair1m", {}), ("filter_date", DATE), ("filter_loc", LOC)]


def run(geo, agent_script, fuser_script=None, strategy=None, state=None, **kw):
    state = state if state is not None else StateStore()
    agent = ScriptedSession(agent_script)
    fuser = ScriptedSession(fuser_script) if fuser_script is not None else None
    outcome = run_task(
        "Show me airplanes at NYC from October 2023 on xview1 and FAIR1M images",
        geo,
        strategy or StrategyConfig(fuser_enabled=fuser is not None),
        FuserConfig(),
        Sessions(agent, fuser),
        make_runners(geo, state),
        clock=SimClock(),
        **kw,
    )
    return outcome, agent, state


def test_demo_fused_scenario(geo):
    outcome, agent, _ = run(geo, [tool_reply(FUSED_STEP), text_reply("done")], [text_reply(DEMO_PLAN)])
    assert outcome.status == SUCCESS and outcome.used_fusion
    assert outcome.steps == 2
    assert [c.kind for c in outcome.trace.calls] == [FUSER, AGENT_CALL, FINAL_ANSWER]
    first = outcome.trace.calls[1]
    assert first.tool_names == ["load_db_xview1", "load_db_fair1m", "filter_date", "filter_loc"]
    assert first.stages == [[0, 1], [2], [3]]
    assert len(agent.requests[0].tools) == 28
    # one tool message per fused call, listing constituent outcomes
    tool_msgs = [m for m in agent.requests[1].messages if m.role == "tool"]
    assert len(tool_msgs) == 2
    assert [item["tool"] for item in json.loads(tool_msgs[1].content)] == ["filter_date", "filter_loc"]


def test_demo_sequential_baseline(geo):
    script = [tool_reply([c]) for c in SEQUENTIAL] + [text_reply("done")]
    outcome, agent, _ = run(geo, script)
    assert outcome.status == SUCCESS and not outcome.used_fusion
    assert outcome.steps == 5 and outcome.tool_steps == 4
    assert len(agent.requests[0].tools) == 30


def test_fusion_transparency(geo):
    _, _, fused_state = run(geo, [tool_reply(FUSED_STEP), text_reply("done")], [text_reply(DEMO_PLAN)])
    _, _, seq_state = run(geo, [tool_reply([c]) for c in SEQUENTIAL] + [text_reply("done")])
    assert fused_state.snapshot() == seq_state.snapshot() and fused_state.values


def bad_args_reply():
    return ChatResponse(Message("assistant", None, tool_calls=(ToolCallWire("x", "fused__filter_date__filter_loc", "{oops"),)))


def test_unparseable_arguments_trigger_one_reset(geo):
    script = [bad_args_reply() for _ in range(3)] + [tool_reply([("filter_date", DATE)]), text_reply("done")]
    fuser = ScriptedSession([text_reply(DEMO_PLAN)])
    agent = ScriptedSession(script)
    outcome = run_task("q", geo, StrategyConfig(), FuserConfig(), Sessions(agent, fuser), make_runners(geo, StateStore()),
                       clock=SimClock())
    assert outcome.status == SUCCESS and outcome.resets == 1 and not outcome.used_fusion
    assert len(fuser.requests) == 1
    assert len(agent.requests[3].tools) == 30
    assert not any(n.startswith("fused__") for n in agent.requests[3].tool_names())
    assert [m.role for m in agent.requests[3].messages] == ["system", "user"]
    assert outcome.steps == 5 <= 12 * (1 + outcome.resets)


def test_second_exhaustion(geo):
    outcome, _, _ = run(geo, [bad_args_reply() for _ in range(6)], [text_reply(DEMO_PLAN)])
    assert outcome.status == RESET_EXHAUSTED and outcome.resets == 1


def test_unknown_tool_counts_as_failure(geo):
    script = [tool_reply([("ghost", {})]) for _ in range(3)] + [text_reply("done")]
    outcome, agent, _ = run(geo, script)
    assert outcome.resets == 1 and outcome.status == SUCCESS
    assert agent.requests[1].messages[-1].content == "ERROR: unknown tool ghost"


def test_max_steps_failure(geo):
    script = [tool_reply([("plot", {})]) for _ in range(3)]
    outcome, _, _ = run(geo, script, strategy=StrategyConfig(fuser_enabled=False, max_steps=3))
    assert outcome.status == "failure" and outcome.steps == 3


def test_token_totals_equal_usage_sum(geo):
    script = [tool_reply([c], usage=Usage(100 + i, 7)) for i, c in enumerate(SEQUENTIAL)] + [text_reply("d", Usage(9, 1))]
    outcome, _, _ = run(geo, script, [text_reply("{}", Usage(50, 5))])
    assert outcome.trace.total_tokens == sum(100 + i + 7 for i in range(4)) + 10 + 55


class FailingSession:
    def __init__(self, failures, then=()):
        self.failures = failures
        self.then = list(then)
        self.calls = 0

    def chat(self, request):
        self.calls += 1
        if self.calls <= self.failures:
            raise TransportError("down")
        return self.then.pop(0)


def test_fuser_transport_failure_falls_back(geo):
    outcome = run_task("q", geo, StrategyConfig(), FuserConfig(),
                       Sessions(ScriptedSession([text_reply("done")]), FailingSession(1)),
                       make_runners(geo, StateStore()), clock=SimClock())
    assert outcome.status == SUCCESS and outcome.trace.plan == {}
    assert outcome.trace.calls[0].kind == FUSER and outcome.trace.calls[0].tools_selected == 0


def test_agent_transport_error_resets_then_propagates(geo):
    ok = FailingSession(1, [text_reply("done")])
    outcome = run_task("q", geo, StrategyConfig(fuser_enabled=False), FuserConfig(), Sessions(ok),
                       make_runners(geo, StateStore()), clock=SimClock())
    assert outcome.resets == 1 and outcome.status == SUCCESS
    with pytest.raises(TransportError):
        run_task("q", geo, StrategyConfig(fuser_enabled=False), FuserConfig(), Sessions(FailingSession(2)),
                 make_runners(geo, StateStore()), clock=SimClock())


def test_prompts(tmp_path):
    react_few = build_agent_prompt("q?", StrategyConfig(prompting="react", shots="few"))
    assert [m.role for m in react_few] == ["system", "user"]
    assert "Thought:" in react_few[0].content and "Examples:" in react_few[0].content
    assert "load_db_fmow" in react_few[0].content and react_few[1].content == "q?"
    cot = build_agent_prompt("q?", StrategyConfig(prompting="cot"))
    assert len(cot) == 2 and "Examples:" not in cot[0].content
    fused = build_agent_prompt("q?", StrategyConfig(fuser_enabled=True))
    plain = build_agent_prompt("q?", StrategyConfig(fuser_enabled=False))
    assert fused == plain
    with pytest.raises(TemplateNotFound):
        build_agent_prompt("q?", StrategyConfig(), templates_dir=tmp_path)


def test_parallel_tool_calls_flag(geo):
    _, agent, _ = run(geo, [text_reply("d")], strategy=StrategyConfig(fuser_enabled=False, provider_parallel_enabled=False))
    assert agent.requests[0].to_wire()["parallel_tool_calls"] is False
    _, agent, _ = run(geo, [text_reply("d")], strategy=StrategyConfig(fuser_enabled=False))
    assert "parallel_tool_calls" not in agent.requests[0].to_wire()


def test_trace_json_round_trip(geo):
    outcome, _, _ = run(geo, [tool_reply(FUSED_STEP), text_reply("done")], [text_reply(DEMO_PLAN)])
    doc = json.loads(json.dumps(outcome.trace.to_json()))
    assert TaskTrace.from_json(doc) == outcome.trace
