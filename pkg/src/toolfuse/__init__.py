"""Fuse similar tools into multi-tool functions before an LLM agent picks
them, then de-fuse and schedule the resulting sub-calls."""

from .agent import StrategyConfig, TaskOutcome, TaskTrace, run_task
from .executor import ExecutionBudget, ExecutionPlan, SubCall, execute_plan, plan_execution
from .fuser import EMPTY_PLAN, FuserConfig, FusionPlan, oracle_fuser, propose_fusion
from .fusion import FusedTool, FusionIndex, ToolCall, defuse_call, fuse_toolset
from .gateway import ChatRequest, ChatResponse, LiveSession, ReplaySession, ScriptedSession, Sessions
from .registry import ToolRegistry, ToolSpec, load_registry, validate_plan

__version__ = "0.1.0"

__all__ = [
    "EMPTY_PLAN",
    "ChatRequest",
    "ChatResponse",
    "ExecutionBudget",
    "ExecutionPlan",
    "FusedTool",
    "FuserConfig",
    "FusionIndex",
    "FusionPlan",
    "LiveSession",
    "ReplaySession",
    "ScriptedSession",
    "Sessions",
    "StrategyConfig",
    "SubCall",
    "TaskOutcome",
    "TaskTrace",
    "ToolCall",
    "ToolRegistry",
    "ToolSpec",
    "defuse_call",
    "execute_plan",
    "fuse_toolset",
    "load_registry",
    "oracle_fuser",
    "plan_execution",
    "propose_fusion",
    "run_task",
    "validate_plan",
]
