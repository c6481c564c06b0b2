"""Chat-completions wire subset plus live, recording, replay, and scripted sessions."""

from __future__ import annotations

import json
import os
import threading
import time
from collections import Counter
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Protocol

import httpx

ROLES = ("system", "user", "assistant", "tool")
TOOL_CHOICES = ("auto", "none", "required")

BASE_URL_ENV = "TOOLFUSE_BASE_URL"
API_KEY_ENV = "TOOLFUSE_API_KEY"


class GatewayError(RuntimeError):
    pass


class TransportError(GatewayError):
    pass


class ApiStatusError(GatewayError):
    def __init__(self, status: int, body: str) -> None:
        self.status = status
        super().__init__(f"endpoint returned HTTP {status}: {body[:200]}")


class MalformedResponse(GatewayError):
    pass


class ReplayMismatch(GatewayError):
    def __init__(self, message: str, diff: dict[str, Any] | None = None) -> None:
        self.diff = diff or {}
        super().__init__(message + (f": {json.dumps(self.diff, default=str)}" if diff else ""))


class SessionExhausted(GatewayError):
    pass


@dataclass(frozen=True)
class ToolCallWire:
    id: str
    name: str
    arguments: str  # JSON text, exactly as the model produced it


@dataclass(frozen=True)
class Message:
    role: str
    content: str | None = None
    tool_call_id: str | None = None
    tool_calls: tuple[ToolCallWire, ...] | None = None

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"invalid role {self.role!r}")
        if self.role == "tool" and not self.tool_call_id:
            raise ValueError("tool messages need a tool_call_id")

    def to_wire(self) -> dict[str, Any]:
        out: dict[str, Any] = {"role": self.role, "content": self.content}
        if self.tool_call_id is not None:
            out["tool_call_id"] = self.tool_call_id
        if self.tool_calls is not None:
            out["tool_calls"] = [
                {"id": c.id, "type": "function", "function": {"name": c.name, "arguments": c.arguments}}
                for c in self.tool_calls
            ]
        return out

    @classmethod
    def from_wire(cls, doc: dict[str, Any]) -> Message:
        calls = doc.get("tool_calls")
        return cls(
            role=doc["role"],
            content=doc.get("content"),
            tool_call_id=doc.get("tool_call_id"),
            tool_calls=None
            if calls is None
            else tuple(
                ToolCallWire(c["id"], c["function"]["name"], c["function"]["arguments"]) for c in calls
            ),
        )


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: Sequence[Message]
    tools: Sequence[dict[str, Any]] | None = None  # {name, description, parameters}
    tool_choice: str = "auto"
    parallel_tool_calls: bool | None = None

    def __post_init__(self) -> None:
        if self.tool_choice not in TOOL_CHOICES:
            raise ValueError(f"invalid tool_choice {self.tool_choice!r}")

    def tool_names(self) -> list[str]:
        return [t["name"] for t in self.tools or ()]

    def to_wire(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "model": self.model,
            "messages": [m.to_wire() for m in self.messages],
        }
        if self.tools is not None:
            out["tools"] = [{"type": "function", "function": dict(t)} for t in self.tools]
        out["tool_choice"] = self.tool_choice
        if self.parallel_tool_calls is not None:
            out["parallel_tool_calls"] = self.parallel_tool_calls
        return out

    @classmethod
    def from_wire(cls, doc: dict[str, Any]) -> ChatRequest:
        tools = doc.get("tools")
        return cls(
            model=doc["model"],
            messages=tuple(Message.from_wire(m) for m in doc["messages"]),
            tools=None if tools is None else tuple(t["function"] for t in tools),
            tool_choice=doc.get("tool_choice", "auto"),
            parallel_tool_calls=doc.get("parallel_tool_calls"),
        )


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens


@dataclass(frozen=True)
class ChatResponse:
    message: Message
    usage: Usage | None = None  # None only in scripts, filled in by the session
    latency: float = 0.0

    @property
    def tool_calls(self) -> tuple[ToolCallWire, ...]:
        return self.message.tool_calls or ()

    def to_wire(self) -> dict[str, Any]:
        usage = self.usage or Usage()
        return {
            "choices": [{"message": self.message.to_wire()}],
            "usage": {
                "prompt_tokens": usage.prompt_tokens,
                "completion_tokens": usage.completion_tokens,
                "total_tokens": usage.total_tokens,
            },
        }

    @classmethod
    def from_wire(cls, doc: Any, latency: float = 0.0) -> ChatResponse:
        try:
            msg = Message.from_wire(doc["choices"][0]["message"])
            u = doc.get("usage") or {}
            usage = Usage(int(u.get("prompt_tokens", 0)), int(u.get("completion_tokens", 0)))
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise MalformedResponse(f"unexpected response shape: {exc!r}") from exc
        if usage.prompt_tokens < 0 or usage.completion_tokens < 0:
            raise MalformedResponse("negative token usage")
        ids = [c.id for c in msg.tool_calls or ()]
        if len(ids) != len(set(ids)):
            raise MalformedResponse("duplicate tool_call ids")
        return cls(message=msg, usage=usage, latency=latency)


class Session(Protocol):
    def chat(self, request: ChatRequest) -> ChatResponse: ...


class _Serial:
    """One in-flight request per session."""

    def __init__(self) -> None:
        self._lock = threading.Lock()


class LiveSession(_Serial):
    """Posts to ``{base_url}/chat/completions`` on an OpenAI-compatible endpoint."""

    def __init__(
        self,
        base_url: str | None = None,
        api_key: str | None = None,
        timeout: float = 120.0,
        transport: httpx.BaseTransport | None = None,
    ) -> None:
        super().__init__()
        base_url = base_url or os.environ.get(BASE_URL_ENV) or "https://api.openai.com/v1"
        api_key = api_key or os.environ.get(API_KEY_ENV) or os.environ.get("OPENAI_API_KEY", "")
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = httpx.Client(
            base_url=base_url.rstrip("/"), headers=headers, timeout=timeout, transport=transport
        )

    def chat(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            t0 = time.perf_counter()
            try:
                resp = self._client.post("/chat/completions", json=request.to_wire())
            except httpx.TransportError as exc:
                raise TransportError(str(exc)) from exc
            latency = time.perf_counter() - t0
        if resp.status_code >= 400:
            raise ApiStatusError(resp.status_code, resp.text)
        try:
            doc = resp.json()
        except ValueError as exc:
            raise MalformedResponse("response body is not JSON") from exc
        return ChatResponse.from_wire(doc, latency=latency)

    def close(self) -> None:
        self._client.close()


@dataclass(frozen=True)
class TranscriptEntry:
    request: dict[str, Any]
    response: dict[str, Any]
    latency: float

    def to_json(self) -> dict[str, Any]:
        return {"request": self.request, "response": self.response, "latency": self.latency}


def load_transcript(path: str | Path) -> list[TranscriptEntry]:
    entries = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            doc = json.loads(line)
            entries.append(TranscriptEntry(doc["request"], doc["response"], float(doc["latency"])))
    return entries


class RecordingSession(_Serial):
    """Tees every exchange of ``inner`` into a JSON-lines transcript."""

    def __init__(self, inner: Session, sink: str | Path) -> None:
        super().__init__()
        self.inner = inner
        self.sink = Path(sink)
        self.sink.parent.mkdir(parents=True, exist_ok=True)
        self.sink.touch()

    def chat(self, request: ChatRequest) -> ChatResponse:
        response = self.inner.chat(request)
        entry = TranscriptEntry(request.to_wire(), response.to_wire(), response.latency)
        with self._lock, self.sink.open("a") as fh:
            fh.write(json.dumps(entry.to_json(), sort_keys=True) + "\n")
        return response


def record_mode(session: Session, sink: str | Path) -> RecordingSession:
    return RecordingSession(session, sink)


def _match_key(req: dict[str, Any]) -> dict[str, Any]:
    return {
        "model": req.get("model"),
        "tool_choice": req.get("tool_choice", "auto"),
        "roles": [m.get("role") for m in req.get("messages", [])],
        "tools": sorted(Counter(t["function"]["name"] for t in req.get("tools") or []).items()),
    }


class ReplaySession(_Serial):
    """Serves recorded responses in order.

    Requests are matched on model, tool_choice, message-role sequence, and
    the multiset of tool names; ``strict`` demands the full request match.
    """

    def __init__(self, transcript: str | Path | Iterable[TranscriptEntry], strict: bool = False) -> None:
        super().__init__()
        if isinstance(transcript, (str, Path)):
            transcript = load_transcript(transcript)
        self.entries = list(transcript)
        self.strict = strict
        self.position = 0

    def chat(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            if self.position >= len(self.entries):
                raise ReplayMismatch(f"transcript exhausted after {len(self.entries)} exchanges")
            entry = self.entries[self.position]
            actual = request.to_wire()
            want, got = _match_key(entry.request), _match_key(actual)
            if want != got:
                diff = {k: {"expected": want[k], "actual": got[k]} for k in want if want[k] != got[k]}
                raise ReplayMismatch(f"request {self.position} does not match transcript", diff)
            if self.strict and entry.request != actual:
                raise ReplayMismatch(f"request {self.position} differs from transcript (strict)")
            self.position += 1
        return ChatResponse.from_wire(entry.response, latency=entry.latency)


UsageFn = Callable[[ChatRequest], Usage]


class ScriptedSession(_Serial):
    """Emits pre-built responses in order, ignoring request content.

    A scripted response without ``usage`` gets one from ``usage_fn`` (or
    zero usage). With ``realtime`` the session sleeps for each response's
    declared latency.
    """

    def __init__(
        self,
        responses: Sequence[ChatResponse],
        usage_fn: UsageFn | None = None,
        realtime: bool = False,
    ) -> None:
        super().__init__()
        self.responses = list(responses)
        self.usage_fn = usage_fn
        self.realtime = realtime
        self.position = 0
        self.requests: list[ChatRequest] = []

    def chat(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            if self.position >= len(self.responses):
                raise SessionExhausted(f"scripted session exhausted after {len(self.responses)} responses")
            response = self.responses[self.position]
            self.position += 1
            self.requests.append(request)
        if response.usage is None:
            response = replace(response, usage=self.usage_fn(request) if self.usage_fn else Usage())
        if self.realtime and response.latency > 0:
            time.sleep(response.latency)
        return response


def scripted_session(
    script: Sequence[ChatResponse], usage_fn: UsageFn | None = None, realtime: bool = False
) -> ScriptedSession:
    return ScriptedSession(script, usage_fn=usage_fn, realtime=realtime)


def text_reply(content: str, usage: Usage | None = None, latency: float = 0.0) -> ChatResponse:
    return ChatResponse(Message("assistant", content), usage, latency)


def tool_reply(
    calls: Sequence[tuple[str, dict[str, Any]]] | Sequence[ToolCallWire],
    usage: Usage | None = None,
    latency: float = 0.0,
    id_prefix: str = "call",
) -> ChatResponse:
    wires = []
    for i, c in enumerate(calls):
        if isinstance(c, ToolCallWire):
            wires.append(c)
        else:
            name, args = c
            wires.append(ToolCallWire(f"{id_prefix}_{i}", name, json.dumps(args, sort_keys=True)))
    return ChatResponse(Message("assistant", None, tool_calls=tuple(wires)), usage, latency)


@dataclass
class Sessions:
    agent: Session
    fuser: Session | None = None

    def fuser_or_agent(self) -> Session:
        return self.fuser if self.fuser is not None else self.agent


def conversation_chars(request: ChatRequest) -> int:
    return len(json.dumps(request.to_wire(), sort_keys=True))


@dataclass(frozen=True)
class CharTokenUsage:
    """Non-physical token model: ceil(serialized request chars / 4) prompt tokens."""

    chars_per_token: int = 4
    completion_tokens: int = 60

    def __call__(self, request: ChatRequest) -> Usage:
        chars = conversation_chars(request)
        return Usage(-(-chars // self.chars_per_token), self.completion_tokens)
