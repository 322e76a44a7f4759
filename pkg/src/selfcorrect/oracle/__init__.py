"""Language/vision oracle contract: prompts, parsers, live and scripted backends."""
from __future__ import annotations

from .client import (
    DECOMPOSITION_CONFIG,
    PLANNER_CONFIG,
    HttpChatClient,
    OracleClientConfig,
    OracleUnavailable,
    ReplayClient,
)
from .decompose import (
    ChatBoundaryOracle,
    ChatSubtaskProposer,
    ScriptedBoundaryOracle,
    propose_subtasks_scripted,
)
from .planners import ChatPlanner, ForcedTransitPlanner, PlannerQuery, ScriptedPlanner
from .prompts import (
    BoundaryResponse,
    DecisionKind,
    PlannerDecision,
    PlannerParseError,
    PlannerRequest,
    format_decision,
    parse_boundary_response,
    parse_planner_response,
    parse_subtask_response,
    render_boundary_prompt,
    render_planner_prompt,
    render_subtask_prompt,
)

__all__ = [
    "BoundaryResponse", "ChatBoundaryOracle", "ChatPlanner", "ChatSubtaskProposer", "DECOMPOSITION_CONFIG",
    "DecisionKind", "ForcedTransitPlanner", "HttpChatClient", "OracleClientConfig", "OracleUnavailable",
    "PLANNER_CONFIG", "PlannerDecision", "PlannerParseError", "PlannerQuery", "PlannerRequest", "ReplayClient",
    "ScriptedBoundaryOracle", "ScriptedPlanner", "format_decision", "parse_boundary_response",
    "parse_planner_response", "parse_subtask_response", "propose_subtasks_scripted", "render_boundary_prompt",
    "render_planner_prompt", "render_subtask_prompt",
]
