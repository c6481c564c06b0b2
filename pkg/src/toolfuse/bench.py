"""Seeded synthetic geospatial workloads, scripted agent policies, and the
three-way comparison harness (sequential / provider-parallel / compiler)."""

from __future__ import annotations

import json
import math
import random
import statistics
import threading
import time
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any

from .agent import AGENT_CALL, FINAL_ANSWER, FUSER, StrategyConfig, TaskOutcome, TaskTrace, run_task
from .clock import RealClock, SimClock
from .executor import ExecutionBudget, ToolOutput
from .fuser import EMPTY_PLAN, FuserConfig, FusionPlan, oracle_fuser
from .fusion import FusionIndex, fuse_toolset, lift_arguments
from .gateway import (
    CharTokenUsage,
    RecordingSession,
    ScriptedSession,
    Sessions,
    text_reply,
    tool_reply,
)
from .metrics import (
    OracleAnnotation,
    RunReport,
    actual_runtime,
    build_lut,
    canonical_args,
    modeling_error,
    parallelization_rate,
    predict_runtime,
    share_at_least,
    speedup,
    tools_per_call_histogram,
    tools_per_call_mean,
    write_traces,
)
from .registry import ToolRegistry, ToolSpec, load_registry

SEQUENTIAL = "sequential"
PROVIDER_PARALLEL = "provider_parallel"
COMPILER = "compiler"
POLICIES = (SEQUENTIAL, PROVIDER_PARALLEL, COMPILER)
FUSED_ONLY = "compiler_fused_only"

MULTI = "multi_load_filter"
SINGLE = "single_load_filter"
QA = "no_tool_qa"
KINDS = (MULTI, SINGLE, QA)

PARALLEL_CATEGORIES = ("load_ops", "filter_ops")


class ScriptingError(ValueError):
    """A scripted policy cannot express the gold sequence with the given toolset."""


def default_registry_path() -> Path:
    return Path(str(resources.files("toolfuse").joinpath("data/geo_registry.json")))


def default_registry() -> ToolRegistry:
    return load_registry(default_registry_path())


# -- configuration ------------------------------------------------------------


@dataclass(frozen=True)
class LatencyModel:
    """Mean latencies in seconds with mean-preserving lognormal noise.

    ``tools`` is keyed by tool name or category; a name wins. Draws are
    seeded by a string key so the same call always gets the same latency.
    Dyadic defaults keep simulated sums exact.
    """

    api: Mapping[str, float] = field(
        default_factory=lambda: {FUSER: 1.0, AGENT_CALL: 1.5, FINAL_ANSWER: 1.0}
    )
    tools: Mapping[str, float] = field(
        default_factory=lambda: {"load_ops": 0.75, "filter_ops": 0.25, "plot_ops": 0.5, "doc_ops": 0.5}
    )
    sigma: float = 0.25

    def draw(self, mean: float, key: str) -> float:
        if self.sigma == 0:
            return mean
        rng = random.Random(key)
        return mean * math.exp(rng.gauss(-self.sigma**2 / 2, self.sigma))

    def tool_mean(self, spec: ToolSpec) -> float:
        if spec.name in self.tools:
            return self.tools[spec.name]
        return self.tools.get(spec.category, 0.5)

    def tool_duration(self, spec: ToolSpec, args: Mapping[str, Any], seed: int) -> float:
        return self.draw(self.tool_mean(spec), f"{seed}:tool:{spec.name}:{canonical_args(args)}")

    def api_latency(self, kind: str, key: str) -> float:
        return self.draw(self.api.get(kind, 1.0), f"{key}:api:{kind}")


@dataclass(frozen=True)
class WorkloadConfig:
    n_tasks: int = 200
    seed: int = 0
    mix: Mapping[str, float] = field(default_factory=lambda: {MULTI: 0.5, SINGLE: 0.3, QA: 0.2})
    registry: str | None = None  # path; the packaged geospatial registry when None
    p_filter_group: float = 0.25
    max_group_size: int = 4
    latency: LatencyModel = field(default_factory=LatencyModel)
    clock: str = "sim"  # "sim" | "real"
    max_concurrency: int = 8
    per_call_timeout: float = 30.0
    holdout: float = 0.2

    def __post_init__(self) -> None:
        if self.n_tasks < 1:
            raise ValueError("n_tasks must be >= 1")
        unknown = set(self.mix) - set(KINDS)
        if unknown:
            raise ValueError(f"unknown task kinds in mix: {sorted(unknown)}")
        if any(w < 0 for w in self.mix.values()) or not math.isclose(sum(self.mix.values()), 1.0, abs_tol=1e-9):
            raise ValueError("mix weights must be non-negative and sum to 1")
        if self.clock not in ("sim", "real"):
            raise ValueError(f"clock must be 'sim' or 'real', got {self.clock!r}")
        if not 0.0 <= self.p_filter_group <= 1.0 or not 0.0 < self.holdout < 1.0:
            raise ValueError("p_filter_group must lie in [0, 1] and holdout in (0, 1)")

    def load_registry(self) -> ToolRegistry:
        return load_registry(Path(self.registry)) if self.registry else default_registry()

    def budget(self) -> ExecutionBudget:
        return ExecutionBudget(max_concurrency=self.max_concurrency, per_call_timeout=self.per_call_timeout)

    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> WorkloadConfig:
        doc = dict(doc)
        if "latency" in doc:
            doc["latency"] = LatencyModel(**doc["latency"])
        return cls(**doc)

    @classmethod
    def from_file(cls, path: str | Path) -> WorkloadConfig:
        return cls.from_json(json.loads(Path(path).read_text()))


# -- workload -----------------------------------------------------------------


@dataclass(frozen=True)
class BenchTask:
    task_id: str
    kind: str
    query: str
    gold_sequence: tuple[Mapping[str, Any], ...]
    oracle: OracleAnnotation
    seed: int = 0

    @property
    def tool_names(self) -> list[str]:
        return [g["name"] for g in self.gold_sequence]

    def to_json(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "kind": self.kind,
            "query": self.query,
            "gold_sequence": [dict(g) for g in self.gold_sequence],
            "oracle": self.oracle.to_json(),
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> BenchTask:
        return cls(
            task_id=doc["task_id"],
            kind=doc.get("kind", MULTI),
            query=doc["query"],
            gold_sequence=tuple(dict(g) for g in doc["gold_sequence"]),
            oracle=OracleAnnotation({k: tuple(v) for k, v in doc.get("oracle", {}).items()}),
            seed=doc.get("seed", 0),
        )


DATASETS = {
    "xview1": "xview1",
    "fair1m": "FAIR1M",
    "fmow": "fMoW",
    "dota": "DOTA",
    "dior": "DIOR",
    "nwpu": "NWPU",
    "sentinel2": "Sentinel-2",
}
GENERIC_DATASETS = ("spacenet", "inria", "landcover_ai")
PLACES = {
    "NYC": (40.71, -74.01),
    "Paris": (48.86, 2.35),
    "Tokyo": (35.68, 139.69),
    "Cairo": (30.04, 31.24),
    "Sydney": (-33.87, 151.21),
    "Rio de Janeiro": (-22.91, -43.17),
    "Nairobi": (-1.29, 36.82),
    "Seattle": (47.61, -122.33),
}
CLASSES = ("airplanes", "ships", "storage tanks", "vehicles", "bridges", "stadiums", "harbors")
MONTHS = (
    "January", "February", "March", "April", "May", "June",
    "July", "August", "September", "October", "November", "December",
)
FILTERS = (
    "filter_date", "filter_loc", "filter_class", "filter_cloud", "filter_resolution",
    "filter_sensor", "filter_area", "filter_confidence", "filter_season", "filter_tile",
)
PLOTS = ("plot", "plot_heatmap", "plot_bbox", "plot_timeseries")
QA_TEMPLATES = (
    "What is the spatial resolution of {ds} imagery?",
    "Which sensors were used to collect {ds}?",
    "How many object classes does {ds} annotate?",
    "Summarize the licensing terms of {ds}.",
)


def _filter_call(name: str, rng: random.Random, ctx: dict[str, Any]) -> tuple[dict[str, Any], str]:
    if name == "filter_date":
        year, month = ctx["year"], ctx["month"]
        last = (28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31, 31)[month - 1] if month != 2 else 28
        args = {"start": f"{year}-{month:02d}-01", "end": f"{year}-{month:02d}-{last}"}
        return args, f"from {MONTHS[month - 1]} {year}"
    if name == "filter_loc":
        lat, lon = PLACES[ctx["place"]]
        return {"lat": lat, "lon": lon, "radius": rng.choice((25, 50, 100))}, f"at {ctx['place']}"
    if name == "filter_class":
        return {"class_name": ctx["cls"]}, f"containing {ctx['cls']}"
    if name == "filter_cloud":
        v = rng.choice((0.1, 0.2, 0.3))
        return {"max_cover": v}, f"with under {int(v * 100)}% cloud cover"
    if name == "filter_resolution":
        v = rng.choice((0.3, 0.5, 1.0))
        return {"max_gsd": v}, f"at {v} m resolution or finer"
    if name == "filter_sensor":
        v = rng.choice(("optical", "sar", "multispectral"))
        return {"sensor": v}, f"from {v} sensors"
    if name == "filter_area":
        v = rng.choice((1, 5, 10))
        return {"min_km2": v}, f"covering at least {v} km2"
    if name == "filter_confidence":
        v = rng.choice((0.5, 0.7, 0.9))
        return {"min_score": v}, f"with detection confidence above {v}"
    if name == "filter_season":
        v = rng.choice(("spring", "summer", "autumn", "winter"))
        return {"season": v}, f"taken in {v}"
    if name == "filter_tile":
        v = f"{rng.randint(10, 60)}{rng.choice('CDEFGHJKLMN')}"
        return {"tile_id": v}, f"in tile {v}"
    raise KeyError(name)


def _plot_call(name: str, rng: random.Random) -> tuple[dict[str, Any], str]:
    if name == "plot":
        return {"style": rng.choice(("points", "boxes"))}, "on the map"
    if name == "plot_heatmap":
        return {"cell_km": rng.choice((1, 5))}, "as a heatmap"
    if name == "plot_bbox":
        return {"color": rng.choice(("red", "yellow"))}, "with bounding boxes"
    return {"interval": rng.choice(("week", "month"))}, "as a time series"


def _load_calls(datasets: Sequence[str], rng: random.Random) -> list[dict[str, Any]]:
    calls = []
    for ds in datasets:
        if ds in DATASETS:
            calls.append({"name": f"load_db_{ds}", "arguments": {"max_images": rng.choice((100, 500, 1000))}})
        else:
            calls.append({"name": "load_db", "arguments": {"dataset": ds}})
    return calls


def _tool_task(rng: random.Random, n_loads: int, n_filters: int) -> tuple[str, list[dict[str, Any]]]:
    ctx = {
        "place": rng.choice(sorted(PLACES)),
        "cls": rng.choice(CLASSES),
        "year": rng.randint(2015, 2023),
        "month": rng.randint(1, 12),
    }
    if n_loads == 1:
        datasets = [rng.choice(sorted(DATASETS) + list(GENERIC_DATASETS))]
    else:
        datasets = rng.sample(sorted(DATASETS), n_loads)
    gold = _load_calls(datasets, rng)
    filters = sorted(rng.sample(FILTERS, n_filters), key=FILTERS.index)
    clauses = []
    for name in filters:
        args, clause = _filter_call(name, rng, ctx)
        gold.append({"name": name, "arguments": args})
        clauses.append(clause)
    plot = rng.choice(PLOTS)
    pargs, pclause = _plot_call(plot, rng)
    gold.append({"name": plot, "arguments": pargs})
    names = [DATASETS.get(d, d) for d in datasets]
    ds_text = names[0] if len(names) == 1 else ", ".join(names[:-1]) + " and " + names[-1]
    query = f"Show me {ctx['cls']} {' '.join(clauses)} on {ds_text} images, plotted {pclause}"
    return query, gold


def annotate(gold: Sequence[Mapping[str, Any]], registry: ToolRegistry, max_group_size: int = 4) -> OracleAnnotation:
    return OracleAnnotation(dict(oracle_fuser(gold, registry, max_group_size).groups))


def generate_workload(config: WorkloadConfig, registry: ToolRegistry | None = None) -> list[BenchTask]:
    """Deterministic task list for ``config.seed``."""
    registry = registry or config.load_registry()
    rng = random.Random(config.seed)
    kinds = [k for k in KINDS if config.mix.get(k, 0) > 0]
    weights = [config.mix[k] for k in kinds]
    tasks = []
    for i in range(config.n_tasks):
        kind = rng.choices(kinds, weights)[0]
        task_seed = rng.randrange(2**31)
        trng = random.Random(task_seed)
        if kind == MULTI:
            query, gold = _tool_task(trng, trng.randint(2, 3), trng.randint(2, 4))
        elif kind == SINGLE:
            query, gold = _tool_task(trng, 1, trng.randint(1, 3))
        else:
            ds = trng.choice(sorted(DATASETS.values()))
            query, gold = trng.choice(QA_TEMPLATES).format(ds=ds), []
        tasks.append(
            BenchTask(
                task_id=f"t{i:04d}",
                kind=kind,
                query=query,
                gold_sequence=tuple(gold),
                oracle=annotate(gold, registry, config.max_group_size),
                seed=task_seed,
            )
        )
    return tasks


def demo_task(registry: ToolRegistry | None = None) -> BenchTask:
    """The two-dataset airplane query: two loads, date and location filters, one plot."""
    registry = registry or default_registry()
    gold = (
        {"name": "load_db_xview1", "arguments": {}},
        {"name": "load_db_fair1m", "arguments": {}},
        {"name": "filter_date", "arguments": {"start": "2023-10-01", "end": "2023-10-31"}},
        {"name": "filter_loc", "arguments": {"lat": 40.71, "lon": -74.01, "radius": 50}},
        {"name": "plot", "arguments": {}},
    )
    return BenchTask(
        task_id="demo",
        kind=MULTI,
        query="Show me airplanes at NYC from October 2023 on xview1 and FAIR1M images",
        gold_sequence=gold,
        oracle=annotate(gold, registry),
    )


def oracle_totals(tasks: Sequence[BenchTask]) -> dict[str, int]:
    totals: dict[str, int] = {"tasks": len(tasks), **{c: 0 for c in PARALLEL_CATEGORIES}}
    for t in tasks:
        for cat, n in t.oracle.counts.items():
            totals[cat] = totals.get(cat, 0) + n
    return totals


# -- in-memory tools ----------------------------------------------------------


class StateStore:
    """Per-task resource state. A write records the writer, its canonical
    arguments, and every value it read, so equal final states imply the
    same dataflow."""

    def __init__(self) -> None:
        self.values: dict[str, Any] = {}
        self._lock = threading.Lock()

    def apply(self, spec: ToolSpec, args: Mapping[str, Any]) -> None:
        with self._lock:
            reads = tuple((r, self.values.get(r)) for r in sorted(spec.reads))
            for w in sorted(spec.writes):
                self.values[w] = (spec.name, canonical_args(args), reads)

    def snapshot(self) -> dict[str, Any]:
        with self._lock:
            return dict(self.values)


def make_runners(
    registry: ToolRegistry,
    state: StateStore,
    latency: LatencyModel | None = None,
    seed: int = 0,
    realtime: bool = False,
) -> dict[str, Any]:
    """Runners for every registry tool. Under ``realtime`` each call sleeps
    for its drawn duration; otherwise the duration is only declared."""
    latency = latency or LatencyModel()

    def runner(tool: str, args: dict[str, Any]) -> ToolOutput:
        spec = registry.get(tool)
        duration = latency.tool_duration(spec, args, seed)
        if realtime:
            time.sleep(duration)
        state.apply(spec, args)
        return ToolOutput({"tool": tool, "updated": sorted(spec.writes)}, duration)

    return {name: runner for name in registry.names()}


def run_gold(registry: ToolRegistry, task: BenchTask) -> dict[str, Any]:
    state = StateStore()
    for g in task.gold_sequence:
        state.apply(registry.get(g["name"]), g.get("arguments", {}))
    return state.snapshot()


# -- scripted sessions --------------------------------------------------------


Batch = list[tuple[str, dict[str, Any]]]


def policy_batches(
    task: BenchTask,
    policy: str,
    registry: ToolRegistry,
    index: FusionIndex | None = None,
    group_filters: bool = False,
) -> list[Batch]:
    """Tool calls per agent reply for one policy."""
    gold = [(g["name"], dict(g.get("arguments", {}))) for g in task.gold_sequence]
    if policy == SEQUENTIAL:
        return [[g] for g in gold]
    if policy == PROVIDER_PARALLEL:
        batches: list[Batch] = []
        prev_cat = None
        for name, args in gold:
            cat = registry.get(name).category
            groupable = cat == "load_ops" or (cat == "filter_ops" and group_filters)
            if groupable and cat == prev_cat:
                batches[-1].append((name, args))
            else:
                batches.append([(name, args)])
            prev_cat = cat if groupable else None
        return batches
    if policy == COMPILER:
        index = index or FusionIndex(originals=frozenset(registry.names()))
        per_tool = dict(gold)
        batches = []
        emitted: set[str] = set()
        fused_run = False
        for name, args in gold:
            if name not in index.originals:
                raise ScriptingError(f"gold tool {name!r} is not in the registry")
            owner = index.owner_of(name)
            if owner is None:
                batches.append([(name, args)])
                fused_run = False
                continue
            missing = [c for c in owner.constituents if c not in per_tool]
            if missing:
                raise ScriptingError(f"fused tool {owner.name} covers {missing}, absent from the gold sequence")
            if owner.name in emitted:
                continue
            emitted.add(owner.name)
            call = (owner.name, lift_arguments(owner, {c: per_tool[c] for c in owner.constituents}))
            if fused_run:
                batches[-1].append(call)
            else:
                batches.append([call])
            fused_run = True
        return batches
    raise ValueError(f"unknown policy {policy!r}")


def filter_draw(task: BenchTask, seed: int, p: float) -> bool:
    return random.Random(f"{seed}:{task.task_id}:filters").random() < p


def script_agent(
    task: BenchTask,
    policy: str,
    registry: ToolRegistry,
    index: FusionIndex | None = None,
    latency: LatencyModel | None = None,
    seed: int = 0,
    p_filter_group: float = 0.25,
    group_filters: bool | None = None,
    realtime: bool = False,
) -> ScriptedSession:
    """Agent replies for ``policy``: tool replies in order, then a final answer.

    Usage is derived from each request's serialized size. ``group_filters``
    overrides the seeded provider-parallel filter draw.
    """
    latency = latency or LatencyModel()
    if group_filters is None:
        group_filters = filter_draw(task, seed, p_filter_group)
    batches = policy_batches(task, policy, registry, index, group_filters)
    key = f"{seed}:{task.task_id}:{policy}"
    replies = [
        tool_reply(b, latency=latency.api_latency(AGENT_CALL, f"{key}:{i}"), id_prefix=f"{task.task_id}_{i}")
        for i, b in enumerate(batches)
    ]
    answer = f"Completed: {task.query}" if task.gold_sequence else f"Answer to: {task.query}"
    replies.append(text_reply(answer, latency=latency.api_latency(FINAL_ANSWER, f"{key}:{len(batches)}")))
    return ScriptedSession(replies, usage_fn=CharTokenUsage(), realtime=realtime)


def script_fuser(
    task: BenchTask,
    plan: FusionPlan,
    latency: LatencyModel | None = None,
    seed: int = 0,
    realtime: bool = False,
) -> ScriptedSession:
    latency = latency or LatencyModel()
    reply = text_reply(
        json.dumps(plan.to_json(), sort_keys=True),
        latency=latency.api_latency(FUSER, f"{seed}:{task.task_id}:fuser"),
    )
    return ScriptedSession([reply], usage_fn=CharTokenUsage(), realtime=realtime)


def strategy_for(policy: str, base: StrategyConfig | None = None) -> StrategyConfig:
    base = base or StrategyConfig()
    return replace(base, fuser_enabled=policy == COMPILER, provider_parallel_enabled=policy != SEQUENTIAL)


@dataclass
class ScenarioRun:
    outcome: TaskOutcome
    state: dict[str, Any]

    @property
    def trace(self) -> TaskTrace:
        return self.outcome.trace


def run_policy_task(
    task: BenchTask,
    policy: str,
    registry: ToolRegistry,
    config: WorkloadConfig | None = None,
    strategy: StrategyConfig | None = None,
    concurrent: bool = True,
    seed: int | None = None,
    group_filters: bool | None = None,
    record_to: str | Path | None = None,
    method: str | None = None,
) -> ScenarioRun:
    """Run one task under a scripted policy against in-memory tools."""
    config = config or WorkloadConfig()
    seed = config.seed if seed is None else seed
    real = config.clock == "real"
    plan = oracle_fuser(task, registry, config.max_group_size) if policy == COMPILER else EMPTY_PLAN
    _, index = fuse_toolset(registry, plan)
    agent = script_agent(
        task, policy, registry, index, config.latency, seed, config.p_filter_group, group_filters, realtime=real
    )
    fuser = script_fuser(task, plan, config.latency, seed, realtime=real) if policy == COMPILER else None
    sessions = Sessions(agent=agent, fuser=fuser)
    if record_to is not None:
        sessions = Sessions(
            agent=RecordingSession(agent, record_to),
            fuser=RecordingSession(fuser, record_to) if fuser else None,
        )
    state = StateStore()
    outcome = run_task(
        task.query,
        registry,
        strategy_for(policy, strategy),
        FuserConfig(max_group_size=config.max_group_size),
        sessions,
        make_runners(registry, state, config.latency, seed, realtime=real),
        budget=config.budget(),
        concurrent=concurrent,
        clock=RealClock() if real else SimClock(),
        task_id=task.task_id,
    )
    trace = outcome.trace
    trace.method = method or policy
    trace.gold = [dict(g) for g in task.gold_sequence]
    trace.oracle = task.oracle.to_json()
    return ScenarioRun(outcome, state.snapshot())


def record_scenario(
    task: BenchTask,
    policy: str,
    path: str | Path,
    registry: ToolRegistry | None = None,
    config: WorkloadConfig | None = None,
    group_filters: bool | None = None,
) -> ScenarioRun:
    """Run a scripted scenario and write its exchanges to a replayable transcript."""
    path = Path(path)
    if path.exists():
        path.unlink()
    registry = registry or default_registry()
    return run_policy_task(task, policy, registry, config, group_filters=group_filters, record_to=path)


# -- benchmark ----------------------------------------------------------------


def mean_std(values: Sequence[float | None]) -> dict[str, float] | None:
    if not values or any(v is None for v in values):
        return None
    vals = [float(v) for v in values]  # type: ignore[arg-type]
    return {"mean": math.fsum(vals) / len(vals), "std": statistics.pstdev(vals) if len(vals) > 1 else 0.0}


def _run_metrics(report: RunReport) -> dict[str, Any]:
    traces = report.traces
    out: dict[str, Any] = dict(report.aggregates)
    for cat in PARALLEL_CATEGORIES:
        try:
            out[f"parallelization_{cat}"] = parallelization_rate(traces, cat)
        except KeyError:
            out[f"parallelization_{cat}"] = None
    hist = tools_per_call_histogram(traces)
    out["tools_per_call_mean"] = tools_per_call_mean(traces)
    out["multi_tool_share"] = share_at_least(hist, 2)
    return out


@dataclass
class BenchReport:
    config: dict[str, Any]
    oracle_totals: dict[str, int]
    repeats: int
    policies: dict[str, dict[str, Any]]
    ablation: dict[str, Any]
    lut: dict[str, Any]

    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    def rows(self) -> list[dict[str, Any]]:
        """One flat row per policy with repeat means, for tables and CSV."""
        rows = []
        for name, doc in self.policies.items():
            row: dict[str, Any] = {"method": name, "model": doc["model"]}
            for k, v in doc["metrics"].items():
                row[k] = None if v is None else v["mean"]
                row[f"{k}_std"] = None if v is None else v["std"]
            rows.append(row)
        return rows


def run_benchmark(
    config: WorkloadConfig,
    policies: Sequence[str] = POLICIES,
    strategy: StrategyConfig | None = None,
    repeats: int = 1,
    out_dir: str | Path | None = None,
    vary_seed: bool = False,
) -> BenchReport:
    """Run every policy ``repeats`` times over the workload.

    The first policy is the baseline for token reduction and speedup. When
    the compiler policy runs, it is also run with concurrency off to split
    the gain from fusion alone and from concurrent execution. Repeats reuse
    the configured seed unless ``vary_seed`` is set.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    for p in policies:
        if p not in POLICIES:
            raise ValueError(f"unknown policy {p!r}")
    registry = config.load_registry()
    strategy = strategy or StrategyConfig()
    tasks0 = generate_workload(config, registry)
    gold_states = {t.task_id: run_gold(registry, t) for t in tasks0}

    per_policy: dict[str, list[dict[str, Any]]] = {p: [] for p in policies}
    histograms: dict[str, dict[int, float]] = {}
    mismatches: dict[str, int] = {p: 0 for p in policies}
    ablation_runs: list[dict[str, float]] = []
    first_reports: dict[str, RunReport] = {}

    for r in range(repeats):
        seed = config.seed + r if vary_seed else config.seed
        cfg = replace(config, seed=seed)
        tasks = tasks0 if seed == config.seed else generate_workload(cfg, registry)
        states = gold_states if seed == config.seed else {t.task_id: run_gold(registry, t) for t in tasks}
        baseline: RunReport | None = None
        for policy in policies:
            runs = [run_policy_task(t, policy, registry, cfg, strategy) for t in tasks]
            mismatches[policy] += sum(run.state != states[t.task_id] for run, t in zip(runs, tasks))
            report = RunReport.build(policy, strategy.agent_model, [run.trace for run in runs], baseline)
            baseline = baseline or report
            per_policy[policy].append(_run_metrics(report))
            if r == 0:
                first_reports[policy] = report
                histograms[policy] = tools_per_call_histogram(report.traces)
                if out_dir is not None:
                    write_traces(Path(out_dir) / policy / "traces.jsonl", report.traces)
            if out_dir is not None and r > 0:
                write_traces(Path(out_dir) / policy / f"traces_r{r}.jsonl", report.traces)
        if COMPILER in policies and baseline is not None:
            fused_only = [
                run_policy_task(t, COMPILER, registry, cfg, strategy, concurrent=False, method=FUSED_ONLY).trace
                for t in tasks
            ]
            concurrent_traces = first_reports[COMPILER].traces if r == 0 else None
            if concurrent_traces is None:
                concurrent_traces = [run_policy_task(t, COMPILER, registry, cfg, strategy).trace for t in tasks]
            ablation_runs.append(
                {
                    "fused_only_speedup": speedup(baseline, fused_only),
                    "fused_concurrent_speedup": speedup(baseline, concurrent_traces),
                }
            )
            if r == 0:
                first_reports[FUSED_ONLY] = RunReport.build(FUSED_ONLY, strategy.agent_model, fused_only, baseline)
                if out_dir is not None:
                    write_traces(Path(out_dir) / FUSED_ONLY / "traces.jsonl", fused_only)

    policy_docs = {}
    for policy in policies:
        runs = per_policy[policy]
        policy_docs[policy] = {
            "model": strategy.agent_model,
            "metrics": {k: mean_std([run[k] for run in runs]) for k in runs[0]},
            "histogram": {str(k): v for k, v in histograms[policy].items()},
            "state_mismatches": mismatches[policy],
        }
    ablation = {}
    if ablation_runs:
        ablation = {k: mean_std([a[k] for a in ablation_runs]) for k in ablation_runs[0]}

    return BenchReport(
        config=config.to_json(),
        oracle_totals=oracle_totals(tasks0),
        repeats=repeats,
        policies=policy_docs,
        ablation=ablation,
        lut=lut_evaluation(first_reports, config.holdout, config.seed),
    )


def holdout_split(task_ids: Sequence[str], fraction: float, seed: int) -> tuple[set[str], set[str]]:
    ids = sorted(task_ids)
    n_hold = max(1, math.ceil(fraction * len(ids)))
    held = set(random.Random(f"{seed}:holdout").sample(ids, n_hold))
    return set(ids) - held, held


def lut_evaluation(reports: Mapping[str, RunReport], holdout: float, seed: int) -> dict[str, Any]:
    """Fit one LUT on the training split of every method, score each method's holdout."""
    if not reports:
        return {}
    ids = {t.task_id for rep in reports.values() for t in rep.traces}
    train, held = holdout_split(sorted(ids), holdout, seed)
    lut = build_lut([t for rep in reports.values() for t in rep.traces if t.task_id in train])
    out: dict[str, Any] = {"holdout_tasks": len(held), "methods": {}}
    for name, rep in reports.items():
        test = [t for t in rep.traces if t.task_id in held]
        preds = [predict_runtime(lut, t) for t in test]
        pred_vals = [p.seconds_per_call for p in preds]
        actual = [actual_runtime(t) for t in test]
        out["methods"][name] = {
            "predicted": math.fsum(pred_vals) / len(pred_vals),
            "actual": math.fsum(actual) / len(actual),
            "modeling_error": modeling_error(pred_vals, actual),
            "partial": sorted({k for p in preds for k in p.missing}),
        }
    return out
