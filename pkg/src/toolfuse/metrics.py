"""Run-level metrics, parallelization analysis, and the LUT latency model.

Every aggregate here is a pure function of task traces, so numbers
recomputed from trace files on disk match the in-memory values exactly.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter, defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Union

from .agent import FUSER, SUCCESS, TaskTrace
from .executor import simulate_stage

AGGREGATE_COLUMNS = (
    "method",
    "model",
    "tasks",
    "success_rate",
    "correctness_rate",
    "avg_tokens_per_task",
    "token_reduction",
    "avg_time_per_task",
    "speedup",
)
HISTOGRAM_COLUMNS = ("method", "tools_per_call", "percent")


def filtered_mean(samples: Sequence[float]) -> float:
    """Mean after one pass of two-sigma outlier rejection.

    Uses the population standard deviation and a closed interval
    [mu - 2 sigma, mu + 2 sigma]. The membership test runs in exact rational
    arithmetic, so samples sitting on the boundary are kept deterministically.
    """
    if not samples:
        raise ValueError("filtered_mean needs at least one sample")
    if min(samples) == max(samples):
        return float(samples[0])
    exact = [Fraction(x) for x in samples]
    n = len(exact)
    mu = sum(exact) / n
    var = sum((x - mu) ** 2 for x in exact) / n
    kept = [x for x, e in zip(samples, exact) if (e - mu) ** 2 <= 4 * var]
    return math.fsum(kept) / len(kept)


TraceSet = Union["RunReport", Iterable[TaskTrace]]


def _traces(obj: TraceSet) -> list[TaskTrace]:
    return list(obj.traces) if isinstance(obj, RunReport) else list(obj)


def success_rate(traces: TraceSet) -> float:
    ts = _traces(traces)
    if not ts:
        raise ValueError("no traces")
    return 100.0 * sum(t.status == SUCCESS for t in ts) / len(ts)


def canonical_args(args: Mapping[str, Any]) -> str:
    return json.dumps(args, sort_keys=True, separators=(",", ":"))


def correctness_rate(traces: TraceSet) -> float | None:
    """Share of executed constituent invocations that match the gold sequence.

    Returns None when any trace lacks gold data or nothing was invoked.
    """
    correct = total = 0
    for t in _traces(traces):
        if t.gold is None:
            return None
        remaining = Counter((g["name"], canonical_args(g.get("arguments", {}))) for g in t.gold)
        for sub in t.executed():
            total += 1
            key = (sub.tool, canonical_args(sub.arguments))
            if remaining[key] > 0:
                remaining[key] -= 1
                correct += 1
    if total == 0:
        return None
    return 100.0 * correct / total


def avg_tokens_per_task(traces: TraceSet) -> float:
    ts = _traces(traces)
    return math.fsum(t.total_tokens for t in ts) / len(ts)


def avg_time_per_task(traces: TraceSet) -> float:
    return filtered_mean([t.wall_time for t in _traces(traces)])


def _same_tasks(a: list[TaskTrace], b: list[TaskTrace]) -> None:
    if sorted(t.task_id for t in a) != sorted(t.task_id for t in b):
        raise ValueError("baseline and candidate were run on different task sets")


def token_reduction(baseline: TraceSet, candidate: TraceSet) -> float:
    a, b = _traces(baseline), _traces(candidate)
    _same_tasks(a, b)
    return avg_tokens_per_task(a) / avg_tokens_per_task(b)


def speedup(baseline: TraceSet, candidate: TraceSet) -> float:
    a, b = _traces(baseline), _traces(candidate)
    _same_tasks(a, b)
    return avg_time_per_task(a) / avg_time_per_task(b)


@dataclass(frozen=True)
class OracleAnnotation:
    """Parallelizable operations an ideal agent would group, per category."""

    groups: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    @property
    def counts(self) -> dict[str, int]:
        return {c: len(g) for c, g in self.groups.items()}

    @property
    def stages(self) -> list[tuple[str, ...]]:
        return list(self.groups.values())

    def to_json(self) -> dict[str, list[str]]:
        return {k: list(v) for k, v in self.groups.items()}


def parallelization_rate(
    traces: TraceSet,
    category: str,
    annotations: Mapping[str, OracleAnnotation] | None = None,
) -> float:
    """Percent of oracle-parallelizable ops of ``category`` that the run
    executed together with another member of their group in one API call.

    Annotations default to the oracle stored on each trace.
    """
    grouped = total = 0
    for t in _traces(traces):
        if annotations is not None:
            ann = annotations[t.task_id]
        else:
            ann = OracleAnnotation({k: tuple(v) for k, v in (t.oracle or {}).items()})
        members = set(ann.groups.get(category, ()))
        if not members:
            continue
        total += len(members)
        hit: set[str] = set()
        for call in t.calls:
            in_call = [s.tool for s in call.subcalls if s.ok is not None and s.tool in members]
            if len(in_call) >= 2:
                hit.update(in_call)
        grouped += len(hit)
    if total == 0:
        raise KeyError(f"category {category!r} absent from oracle annotations")
    return 100.0 * grouped / total


def tools_per_call(traces: TraceSet) -> list[int]:
    """Constituent tools per API call; fuser and final-answer calls count 0."""
    return [0 if c.kind == FUSER else c.tools_selected for t in _traces(traces) for c in t.calls]


def tools_per_call_histogram(traces: TraceSet) -> dict[int, float]:
    counts = Counter(tools_per_call(traces))
    n = sum(counts.values())
    return {k: 100.0 * counts[k] / n for k in sorted(counts)}


def tools_per_call_mean(traces: TraceSet) -> float:
    """Average tools per API call, the per-call reading of parallelization."""
    values = tools_per_call(traces)
    return math.fsum(values) / len(values) if values else 0.0


def share_at_least(histogram: Mapping[int, float], k: int = 2) -> float:
    return math.fsum(p for n, p in histogram.items() if n >= k)


# -- LUT latency model --------------------------------------------------------


def api_key(kind: str) -> str:
    return f"api:{kind}"


def tool_key(name: str) -> str:
    return f"tool:{name}"


@dataclass
class LatencyLUT:
    means: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return {"means": self.means, "counts": self.counts}


def build_lut(traces: TraceSet) -> LatencyLUT:
    samples: dict[str, list[float]] = defaultdict(list)
    for t in _traces(traces):
        for call in t.calls:
            samples[api_key(call.kind)].append(call.latency)
            for sub in call.subcalls:
                if sub.duration is not None:
                    samples[tool_key(sub.tool)].append(sub.duration)
    return LatencyLUT(
        means={k: filtered_mean(v) for k, v in sorted(samples.items())},
        counts={k: len(v) for k, v in sorted(samples.items())},
    )


@dataclass(frozen=True)
class Prediction:
    seconds_per_call: float
    missing: tuple[str, ...] = ()

    @property
    def partial(self) -> bool:
        return bool(self.missing)


def predict_runtime(lut: LatencyLUT, trace: TaskTrace) -> Prediction:
    """LUT-predicted task runtime divided by the number of API calls.

    Walks the solution path in order: each API call adds its key's mean;
    each executed stage adds its tools' means, overlapping them when the
    call ran its stages concurrently.
    """
    missing: list[str] = []

    def look(key: str) -> float:
        if key in lut.means:
            return lut.means[key]
        if key not in missing:
            missing.append(key)
        return 0.0

    total = 0.0
    for call in trace.calls:
        total += look(api_key(call.kind))
        by_seq = {s.seq: s for s in call.subcalls}
        for stage in call.stages:
            members = [by_seq[q] for q in stage if by_seq[q].ok is not None]
            if not members:
                continue
            durations = [look(tool_key(s.tool)) for s in members]
            times = simulate_stage(total, durations, call.concurrent, call.max_concurrency)
            total = max(f for _, f in times)
    n = len(trace.calls)
    return Prediction(total / n if n else 0.0, tuple(missing))


def actual_runtime(trace: TaskTrace) -> float:
    n = len(trace.calls)
    return trace.wall_time / n if n else 0.0


def modeling_error(predictions: Sequence[float], actuals: Sequence[float]) -> float:
    """Root-mean-square percentage error."""
    if len(predictions) != len(actuals) or not predictions:
        raise ValueError("need equal-length, non-empty predictions and actuals")
    if any(a == 0 for a in actuals):
        raise ValueError("actual runtime of zero")
    sq = [((p - a) / a) ** 2 for p, a in zip(predictions, actuals)]
    return math.sqrt(math.fsum(sq) / len(sq)) * 100.0


# -- reports and files --------------------------------------------------------


def compute_aggregates(traces: Sequence[TaskTrace]) -> dict[str, Any]:
    return {
        "tasks": len(traces),
        "success_rate": success_rate(traces),
        "correctness_rate": correctness_rate(traces),
        "avg_tokens_per_task": avg_tokens_per_task(traces),
        "avg_time_per_task": avg_time_per_task(traces),
    }


@dataclass
class RunReport:
    method: str
    model: str
    traces: list[TaskTrace]
    aggregates: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def build(
        cls, method: str, model: str, traces: Sequence[TaskTrace], baseline: RunReport | None = None
    ) -> RunReport:
        report = cls(method, model, list(traces), compute_aggregates(traces))
        report.aggregates["token_reduction"] = token_reduction(baseline, report) if baseline else None
        report.aggregates["speedup"] = speedup(baseline, report) if baseline else None
        return report

    def to_json(self) -> dict[str, Any]:
        return {
            "method": self.method,
            "model": self.model,
            "aggregates": self.aggregates,
            "traces": [t.to_json() for t in self.traces],
        }

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> RunReport:
        traces = [TaskTrace.from_json(t) for t in doc["traces"]]
        report = cls(doc["method"], doc["model"], traces, dict(doc["aggregates"]))
        fresh = compute_aggregates(traces)
        stale = {k: (report.aggregates.get(k), v) for k, v in fresh.items() if report.aggregates.get(k) != v}
        if stale:
            raise ValueError(f"cached aggregates disagree with traces: {stale}")
        return report


def write_traces(path: str | Path, traces: Iterable[TaskTrace]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for t in traces:
            fh.write(json.dumps(t.to_json(), sort_keys=True) + "\n")
    return path


def read_traces(path: str | Path) -> list[TaskTrace]:
    """Read one ``.jsonl`` trace file, or every one under a directory."""
    path = Path(path)
    files = sorted(path.rglob("*.jsonl")) if path.is_dir() else [path]
    out = []
    for f in files:
        for line in f.read_text().splitlines():
            if line.strip():
                out.append(TaskTrace.from_json(json.loads(line)))
    return out


def write_aggregates_csv(path: str | Path, rows: Iterable[Mapping[str, Any]]) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=AGGREGATE_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k) for k in AGGREGATE_COLUMNS})


def write_histogram_csv(path: str | Path, histograms: Mapping[str, Mapping[int, float]]) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTOGRAM_COLUMNS)
        for method, hist in histograms.items():
            for k, pct in hist.items():
                writer.writerow([method, k, pct])
