"""Pre-execution grouping of similar tools, LLM-driven or from a gold sequence."""

from __future__ import annotations

import json
import logging
import re
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import TYPE_CHECKING, Any

from .gateway import ChatRequest, ChatResponse, Message, Session
from .registry import ToolRegistry, validate_plan

if TYPE_CHECKING:
    from .bench import BenchTask

logger = logging.getLogger(__name__)

DEFAULT_INTENTS = "1. load->filter->plot; 2. UI/web; 3. Doc retrieval"

DEFAULT_EXAMPLES = (
    "Example 1: Plot on the map the fmow images in Europe from June 2012\n"
    "Thought 1: The user is asking for images of a specific dataset, so I need to load them.\n"
    "Thought 2: The images are restricted to a month (therefore a date range) and a "
    "continent (therefore a location).\n"
    '"Action": To complete the task I would call\n'
    "- load_db(..load the fmow images..)\n"
    "- filter_loc(..filter in Europe..)\n"
    "- filter_date(..filter from June 2012..)\n"
    "Answer: {'load_ops': ['load_db'], 'filter_ops': ['filter_loc', 'filter_date']}",
)

_PLACEHOLDER = re.compile(r"\{(question|tool_list|categories|examples|intents)\}")


@dataclass(frozen=True)
class FusionPlan:
    """Category -> ordered tool names proposed for fusion."""

    groups: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "groups", {k: tuple(v) for k, v in self.groups.items() if v}
        )

    def __bool__(self) -> bool:
        return bool(self.groups)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FusionPlan):
            return NotImplemented
        return dict(self.groups) == dict(other.groups)

    def __hash__(self) -> int:
        return hash(tuple(sorted(self.groups.items())))

    def to_json(self) -> dict[str, list[str]]:
        return {k: list(v) for k, v in self.groups.items()}


EMPTY_PLAN = FusionPlan()


@dataclass(frozen=True)
class FuserConfig:
    intent_examples: tuple[str, ...] = DEFAULT_EXAMPLES
    intents_preamble: str = DEFAULT_INTENTS
    fuser_model: str = "gpt-4-turbo"
    max_group_size: int = 4
    template: str | None = None  # overrides the packaged prompt template

    def __post_init__(self) -> None:
        if self.max_group_size < 2:
            raise ValueError("max_group_size must be >= 2")

    @classmethod
    def from_file(cls, path: str | Path) -> FuserConfig:
        """Load a JSON config; ``template_path`` points at an editable prompt file."""
        path = Path(path)
        doc = json.loads(path.read_text())
        template = doc.get("template")
        if "template_path" in doc:
            template = (path.parent / doc["template_path"]).read_text()
        return cls(
            intent_examples=tuple(doc.get("intent_examples", DEFAULT_EXAMPLES)),
            intents_preamble=doc.get("intents_preamble", DEFAULT_INTENTS),
            fuser_model=doc.get("fuser_model", "gpt-4-turbo"),
            max_group_size=int(doc.get("max_group_size", 4)),
            template=template,
        )


def default_template() -> str:
    return resources.files("toolfuse").joinpath("templates/fuser.txt").read_text()


def answer_format(categories: Iterable[str]) -> str:
    inner = ", ".join(f"'{c}': [..]" for c in categories)
    return "{" + inner + ", ..}"


def render_template(template: str, values: Mapping[str, str]) -> str:
    # Only known placeholders are substituted, so literal braces survive.
    return _PLACEHOLDER.sub(lambda m: values.get(m.group(1), m.group(0)), template)


def build_fuser_prompt(
    query: str, registry: ToolRegistry, config: FuserConfig
) -> tuple[str, str]:
    """Return ``(system_text, user_text)`` for the fuser call."""
    tool_list = "\n".join(f"- {t.name}: {t.description}" for t in registry.tools)
    values = {
        "question": query,
        "tool_list": tool_list,
        "categories": answer_format(registry.categories),
        "examples": "\n\n".join(config.intent_examples),
        "intents": config.intents_preamble,
    }
    system = render_template(config.template or default_template(), values)
    return system, query


def parse_fusion_reply(raw: str | None, registry: ToolRegistry | None = None) -> FusionPlan:
    """Pull the first balanced JSON object out of a model reply.

    Prose and code fences around the object are tolerated. Non-list values
    and non-string entries are ignored; nothing is validated against the
    registry here.
    """
    obj = _first_json_object(raw or "")
    if not isinstance(obj, dict):
        return EMPTY_PLAN
    groups: dict[str, tuple[str, ...]] = {}
    for key, value in obj.items():
        if not isinstance(value, list):
            continue
        names = tuple(v for v in value if isinstance(v, str))
        if names:
            groups[str(key)] = names
    return FusionPlan(groups)


def _first_json_object(text: str) -> Any:
    decoder = json.JSONDecoder()
    start = text.find("{")
    while start != -1:
        try:
            obj, _ = decoder.raw_decode(text, start)
            return obj
        except json.JSONDecodeError:
            pass
        # Model replies often quote the answer format with single quotes.
        end = _balanced_end(text, start)
        if end is not None:
            candidate = text[start : end + 1]
            try:
                return json.loads(candidate.replace("'", '"'))
            except json.JSONDecodeError:
                pass
        start = text.find("{", start + 1)
    return None


def _balanced_end(text: str, start: int) -> int | None:
    depth = 0
    quote: str | None = None
    escaped = False
    for i in range(start, len(text)):
        ch = text[i]
        if quote:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == quote:
                quote = None
        elif ch in "\"'":
            quote = ch
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return i
    return None


def truncate_plan(plan: FusionPlan, max_group_size: int) -> FusionPlan:
    return FusionPlan({k: v[:max_group_size] for k, v in plan.groups.items()})


@dataclass(frozen=True)
class FuserResult:
    plan: FusionPlan
    response: ChatResponse
    raw_plan: FusionPlan


def fuser_request(query: str, registry: ToolRegistry, config: FuserConfig) -> ChatRequest:
    system, user = build_fuser_prompt(query, registry, config)
    return ChatRequest(
        model=config.fuser_model,
        messages=[Message("system", system), Message("user", user)],
        tools=[t.to_function() for t in registry.tools],
        tool_choice="none",
    )


def request_fusion(
    query: str, registry: ToolRegistry, config: FuserConfig, session: Session
) -> FuserResult:
    """Run the fuser call and keep the raw response for tracing.

    Gateway errors propagate; every other failure degrades to the empty plan.
    """
    response = session.chat(fuser_request(query, registry, config))
    try:
        raw = parse_fusion_reply(response.message.content, registry)
        plan = truncate_plan(validate_plan(registry, raw), config.max_group_size)
    except Exception:  # malformed replies must never be fatal
        logger.exception("fuser reply could not be interpreted; using empty plan")
        raw, plan = EMPTY_PLAN, EMPTY_PLAN
    if raw and not plan:
        logger.info("fuser plan collapsed during validation: %s", raw.to_json())
    return FuserResult(plan=plan, response=response, raw_plan=raw)


def propose_fusion(
    query: str, registry: ToolRegistry, config: FuserConfig, session: Session
) -> FusionPlan:
    return request_fusion(query, registry, config, session).plan


def oracle_fuser(
    task: BenchTask | Sequence[str] | Sequence[Mapping[str, Any]],
    registry: ToolRegistry,
    max_group_size: int = 4,
) -> FusionPlan:
    """Group a gold tool sequence by category without asking a model.

    Accepts a BenchTask, a list of tool names, or a list of gold calls
    (mappings with a ``name`` key).
    """
    seq = getattr(task, "gold_sequence", task)
    names = [s if isinstance(s, str) else s["name"] for s in seq]
    by_cat: dict[str, list[str]] = {}
    for name in names:
        group = by_cat.setdefault(registry.get(name).category, [])
        if name not in group:
            group.append(name)
    return FusionPlan(
        {c: tuple(g[:max_group_size]) for c, g in by_cat.items() if len(g) >= 2}
    )
