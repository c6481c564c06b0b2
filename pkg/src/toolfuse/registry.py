"""Tool definitions, categories, resource effects, and fusion-plan validation."""

from __future__ import annotations

import json
import re
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any

if TYPE_CHECKING:
    from .fuser import FusionPlan

NAME_RE = re.compile(r"^[a-z][a-z0-9_]*$")
PARAM_TYPES = ("string", "number", "integer", "boolean", "array", "enum")
# Fused tool names are minted under this prefix.
RESERVED_PREFIX = "fused__"


class RegistryError(ValueError):
    """A registry document failed validation at ``location``."""

    def __init__(self, message: str, location: str = "") -> None:
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


class _Obj(dict):
    """JSON object that remembers keys seen more than once."""

    duplicates: tuple[str, ...] = ()


def _pairs_hook(pairs: list[tuple[str, Any]]) -> _Obj:
    obj = _Obj()
    dups = []
    for k, v in pairs:
        if k in obj:
            dups.append(k)
        obj[k] = v
    obj.duplicates = tuple(dups)
    return obj


class UnknownToolError(LookupError):
    def __init__(self, name: str) -> None:
        self.name = name
        super().__init__(f"unknown tool: {name!r}")


@dataclass(frozen=True)
class ResourceEffect:
    resource: str
    mode: str  # "read" | "write"


@dataclass(frozen=True)
class Param:
    name: str
    type: str
    description: str = ""
    required: bool = False
    enum: tuple[Any, ...] | None = None
    items: Mapping[str, Any] | None = None

    def to_schema(self) -> dict[str, Any]:
        """JSON-schema property for the function-calling wire shape."""
        if self.type == "enum":
            out: dict[str, Any] = {"type": "string", "enum": list(self.enum or ())}
        else:
            out = {"type": self.type}
            if self.type == "array":
                out["items"] = dict(self.items) if self.items else {}
        out["description"] = self.description
        return out

    def to_doc(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "type": self.type,
            "description": self.description,
            "required": self.required,
        }
        if self.enum is not None:
            out["enum"] = list(self.enum)
        if self.items is not None:
            out["items"] = dict(self.items)
        return out


def parameters_schema(params: Iterable[Param]) -> dict[str, Any]:
    params = list(params)
    return {
        "type": "object",
        "properties": {p.name: p.to_schema() for p in params},
        "required": [p.name for p in params if p.required],
    }


@dataclass(frozen=True)
class ToolSpec:
    name: str
    description: str
    category: str
    parameters: tuple[Param, ...] = ()
    effects: tuple[ResourceEffect, ...] = ()

    @property
    def reads(self) -> frozenset[str]:
        return frozenset(e.resource for e in self.effects if e.mode == "read")

    @property
    def writes(self) -> frozenset[str]:
        return frozenset(e.resource for e in self.effects if e.mode == "write")

    def to_function(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "description": self.description,
            "parameters": parameters_schema(self.parameters),
        }

    def to_doc(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "description": self.description,
            "category": self.category,
            "effects": [{"resource": e.resource, "mode": e.mode} for e in self.effects],
            "parameters": {p.name: p.to_doc() for p in self.parameters},
        }


@dataclass(frozen=True)
class ToolRegistry:
    """Immutable, ordered set of tools; safe to share between threads."""

    tools: tuple[ToolSpec, ...] = ()
    categories: tuple[str, ...] = ()
    _by_name: dict[str, ToolSpec] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        self._by_name.update({t.name: t for t in self.tools})

    @property
    def category_index(self) -> dict[str, list[str]]:
        index: dict[str, list[str]] = {c: [] for c in self.categories}
        for t in self.tools:
            index[t.category].append(t.name)
        return index

    def __len__(self) -> int:
        return len(self.tools)

    def __iter__(self) -> Iterator[ToolSpec]:
        return iter(self.tools)

    def __contains__(self, name: object) -> bool:
        return name in self._by_name

    def get(self, name: str) -> ToolSpec:
        try:
            return self._by_name[name]
        except KeyError:
            raise UnknownToolError(name) from None

    def names(self) -> list[str]:
        return [t.name for t in self.tools]


def _parse_param(name: str, body: Any, where: str) -> Param:
    if not isinstance(body, Mapping):
        raise RegistryError("parameter must be an object", where)
    ptype = body.get("type")
    if ptype not in PARAM_TYPES:
        raise RegistryError(f"unsupported parameter type {ptype!r}", where)
    enum = body.get("enum")
    if ptype == "enum":
        if not isinstance(enum, list) or not enum:
            raise RegistryError("enum parameter needs a non-empty 'enum' list", where)
    required = body.get("required", False)
    if not isinstance(required, bool):
        raise RegistryError("'required' must be a boolean", where)
    return Param(
        name=name,
        type=ptype,
        description=str(body.get("description", "")),
        required=required,
        enum=tuple(enum) if enum is not None else None,
        items=body.get("items"),
    )


def _parse_tool(raw: Any, where: str, categories: set[str]) -> ToolSpec:
    if not isinstance(raw, Mapping):
        raise RegistryError("tool entry must be an object", where)
    name = raw.get("name")
    if not isinstance(name, str) or not NAME_RE.match(name):
        raise RegistryError(f"invalid tool name {name!r}", where)
    if "__" in name:
        # "__" separates tool and parameter names in fused schemas
        raise RegistryError(f"tool name {name!r} may not contain '__'", where)
    where = f"{where} ({name})"
    category = raw.get("category")
    if category not in categories:
        raise RegistryError(f"unknown category {category!r}", where)

    params_raw = raw.get("parameters", {})
    if isinstance(params_raw, list):
        # list form allows duplicates to be detected; mapping form cannot carry them
        pairs = []
        for i, p in enumerate(params_raw):
            if not isinstance(p, Mapping) or "name" not in p:
                raise RegistryError("parameter entry needs a name", f"{where}.parameters[{i}]")
            pairs.append((p["name"], p))
    elif isinstance(params_raw, Mapping):
        for dup in getattr(params_raw, "duplicates", ()):
            raise RegistryError(f"duplicate parameter name {dup!r}", f"{where}.parameters")
        pairs = list(params_raw.items())
    else:
        raise RegistryError("'parameters' must be an object or list", where)
    seen: set[str] = set()
    params = []
    for pname, body in pairs:
        if pname in seen:
            raise RegistryError(f"duplicate parameter name {pname!r}", f"{where}.parameters")
        seen.add(pname)
        params.append(_parse_param(pname, body, f"{where}.parameters.{pname}"))

    effects = []
    seen_eff: set[tuple[str, str]] = set()
    for i, e in enumerate(raw.get("effects", [])):
        loc = f"{where}.effects[{i}]"
        if not isinstance(e, Mapping) or e.get("mode") not in ("read", "write"):
            raise RegistryError("effect needs a resource and mode read|write", loc)
        key = (str(e.get("resource", "")), e["mode"])
        if not key[0]:
            raise RegistryError("effect resource must be non-empty", loc)
        if key in seen_eff:
            raise RegistryError(f"duplicate effect {key}", loc)
        seen_eff.add(key)
        effects.append(ResourceEffect(*key))

    return ToolSpec(
        name=name,
        description=str(raw.get("description", "")),
        category=category,
        parameters=tuple(params),
        effects=tuple(effects),
    )


def load_registry(source: str | Path | Mapping[str, Any]) -> ToolRegistry:
    """Build a validated registry from a JSON document, path, or parsed mapping.

    Raises RegistryError naming the offending location for a malformed
    document, duplicate tool or parameter names, and unknown categories.
    """
    if isinstance(source, Path):
        try:
            doc = json.loads(source.read_text(), object_pairs_hook=_pairs_hook)
        except json.JSONDecodeError as exc:
            raise RegistryError(f"malformed JSON: {exc}", str(source)) from exc
    elif isinstance(source, str):
        try:
            doc = json.loads(source, object_pairs_hook=_pairs_hook)
        except json.JSONDecodeError as exc:
            raise RegistryError(f"malformed JSON: {exc}", "document") from exc
    else:
        doc = source
    if not isinstance(doc, Mapping):
        raise RegistryError("registry document must be an object", "document")
    cats = doc.get("categories", [])
    if not isinstance(cats, list) or not all(isinstance(c, str) and NAME_RE.match(c) for c in cats):
        raise RegistryError("'categories' must be a list of identifiers", "categories")
    if len(set(cats)) != len(cats):
        raise RegistryError("duplicate category", "categories")
    raw_tools = doc.get("tools", [])
    if not isinstance(raw_tools, list):
        raise RegistryError("'tools' must be a list", "tools")

    tools: list[ToolSpec] = []
    seen: set[str] = set()
    for i, raw in enumerate(raw_tools):
        tool = _parse_tool(raw, f"tools[{i}]", set(cats))
        if tool.name in seen:
            raise RegistryError(f"duplicate tool name {tool.name!r}", f"tools[{i}]")
        seen.add(tool.name)
        tools.append(tool)
    return ToolRegistry(tools=tuple(tools), categories=tuple(cats))


def dump_registry(registry: ToolRegistry) -> dict[str, Any]:
    return {
        "categories": list(registry.categories),
        "tools": [t.to_doc() for t in registry.tools],
    }


def category_of(registry: ToolRegistry, name: str) -> str:
    return registry.get(name).category


def validate_plan(registry: ToolRegistry, plan: FusionPlan) -> FusionPlan:
    """Strip a fusion plan down to what the registry can honour.

    Unknown names, names whose category differs from the group key, and
    repeated names are removed; groups left with fewer than two tools are
    dropped. Never raises.
    """
    from .fuser import FusionPlan

    groups: dict[str, tuple[str, ...]] = {}
    for category, names in plan.groups.items():
        kept: list[str] = []
        for name in names:
            if name in kept or name not in registry:
                continue
            if registry.get(name).category != category:
                continue
            kept.append(name)
        if len(kept) >= 2:
            groups[category] = tuple(kept)
    return FusionPlan(groups)
