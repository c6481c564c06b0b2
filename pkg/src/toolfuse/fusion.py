"""Compile fusion groups into multi-tool definitions and split them back apart."""

from __future__ import annotations

import hashlib
import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any, Union

from .fuser import FusionPlan
from .registry import RESERVED_PREFIX, Param, ToolRegistry, ToolSpec, UnknownToolError, parameters_schema

logger = logging.getLogger(__name__)

MAX_NAME_LEN = 64
TRUNCATED_PREFIX_LEN = 48
SEP = "__"
DESCRIPTION_HEADER = "Performs in one step: "


@dataclass(frozen=True)
class FusedTool:
    name: str
    description: str
    category: str
    parameters: tuple[Param, ...]
    constituents: tuple[str, ...]
    # fused parameter name -> (constituent tool, original parameter name)
    ownership: Mapping[str, tuple[str, str]]

    def to_function(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "description": self.description,
            "parameters": parameters_schema(self.parameters),
        }


ToolView = Union[ToolSpec, FusedTool]


@dataclass(frozen=True)
class FusionIndex:
    fused: Mapping[str, FusedTool] = field(default_factory=dict)
    replaced: frozenset[str] = frozenset()
    originals: frozenset[str] = frozenset()  # every registry tool name

    def owner_of(self, tool_name: str) -> FusedTool | None:
        for ft in self.fused.values():
            if tool_name in ft.constituents:
                return ft
        return None


@dataclass(frozen=True)
class ToolCall:
    """One tool invocation. ``fused_from`` is set on sub-calls produced by de-fusion."""

    name: str
    arguments: Mapping[str, Any]
    call_id: str | None = None
    fused_from: str | None = None
    missing_required: tuple[str, ...] = ()
    warnings: tuple[str, ...] = ()


def fused_name(constituents: Sequence[str]) -> str:
    """``fused__a__b``; names over 64 chars keep a 48-char prefix plus an
    8-hex sha256 digest of the full untruncated name."""
    if len(constituents) < 2:
        raise ValueError("a fused tool needs at least two constituents")
    full = RESERVED_PREFIX + SEP.join(constituents)
    if len(full) <= MAX_NAME_LEN:
        return full
    digest = hashlib.sha256(full.encode()).hexdigest()[:8]
    return full[:TRUNCATED_PREFIX_LEN] + digest


def merge_parameters(
    specs: Sequence[ToolSpec],
) -> tuple[tuple[Param, ...], dict[str, tuple[str, str]]]:
    merged: list[Param] = []
    ownership: dict[str, tuple[str, str]] = {}
    for spec in specs:
        for p in spec.parameters:
            new_name = f"{spec.name}{SEP}{p.name}"
            merged.append(
                Param(
                    name=new_name,
                    type=p.type,
                    description=f"[for {spec.name}] {p.description}",
                    required=p.required,
                    enum=p.enum,
                    items=p.items,
                )
            )
            ownership[new_name] = (spec.name, p.name)
    return tuple(merged), ownership


def build_fused_tool(specs: Sequence[ToolSpec]) -> FusedTool:
    params, ownership = merge_parameters(specs)
    description = DESCRIPTION_HEADER + "; ".join(f"{s.name}: {s.description}" for s in specs)
    return FusedTool(
        name=fused_name([s.name for s in specs]),
        description=description,
        category=specs[0].category,
        parameters=params,
        constituents=tuple(s.name for s in specs),
        ownership=ownership,
    )


def fuse_toolset(
    registry: ToolRegistry, plan: FusionPlan
) -> tuple[list[ToolView], FusionIndex]:
    """Replace each group's constituents with one fused tool.

    The fused tool takes the position of its group's first constituent.
    The plan must already be validated.
    """
    fused: dict[str, FusedTool] = {}
    slot: dict[str, FusedTool] = {}  # group's first constituent -> fused tool
    replaced: set[str] = set()
    for names in plan.groups.values():
        ft = build_fused_tool([registry.get(n) for n in names])
        if ft.name in registry:
            raise ValueError(f"fused name {ft.name!r} collides with a registry tool")
        fused[ft.name] = ft
        slot[names[0]] = ft
        replaced.update(names)

    view: list[ToolView] = []
    for tool in registry.tools:
        if tool.name in slot:
            view.append(slot[tool.name])
        elif tool.name not in replaced:
            view.append(tool)
    index = FusionIndex(
        fused=fused, replaced=frozenset(replaced), originals=frozenset(registry.names())
    )
    return view, index


def toolset_wire(view: Sequence[ToolView]) -> list[dict[str, Any]]:
    return [{"type": "function", "function": t.to_function()} for t in view]


def lift_arguments(fused: FusedTool, per_tool: Mapping[str, Mapping[str, Any]]) -> dict[str, Any]:
    """Inverse of de-fusion: constituent arguments -> fused argument map."""
    out: dict[str, Any] = {}
    for tool in fused.constituents:
        for pname, value in per_tool.get(tool, {}).items():
            out[f"{tool}{SEP}{pname}"] = value
    return out


def defuse_call(index: FusionIndex, call: ToolCall) -> list[ToolCall]:
    """Expand a fused call into constituent calls in group order.

    Original tool names pass through unchanged. Arguments whose prefix names
    no constituent are dropped with a warning; missing required arguments
    are attached to the affected sub-call.
    """
    ft = index.fused.get(call.name)
    if ft is None:
        if call.name not in index.originals:
            raise UnknownToolError(call.name)
        return [call]

    routed: dict[str, dict[str, Any]] = {t: {} for t in ft.constituents}
    dropped: list[str] = []
    for key, value in call.arguments.items():
        owner = ft.ownership.get(key)
        if owner is not None:
            routed[owner[0]][owner[1]] = value
            continue
        # Tool names never contain SEP, so the first SEP splits off the owner.
        tool, sep, pname = key.partition(SEP)
        if sep and pname and tool in routed:
            routed[tool][pname] = value
        else:
            dropped.append(key)
    if dropped:
        logger.warning("dropped arguments %s from fused call %s", dropped, call.name)

    required: dict[str, list[str]] = {t: [] for t in ft.constituents}
    for fused_param in ft.parameters:
        if fused_param.required:
            tool, pname = ft.ownership[fused_param.name]
            required[tool].append(pname)

    out = []
    for i, tool in enumerate(ft.constituents):
        args = routed[tool]
        missing = tuple(p for p in required[tool] if p not in args)
        warnings = tuple(f"dropped unknown argument {k!r}" for k in dropped) if i == 0 else ()
        out.append(
            ToolCall(
                name=tool,
                arguments=args,
                call_id=call.call_id,
                fused_from=ft.name,
                missing_required=missing,
                warnings=warnings,
            )
        )
    return out
