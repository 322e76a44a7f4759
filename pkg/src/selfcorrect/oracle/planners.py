"""Failure predictor / planner backends.

Every backend is a callable ``planner(query) -> PlannerDecision`` and may
raise :class:`PlannerParseError` (malformed model output) or
:class:`OracleUnavailable` (backend down).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Protocol

import numpy as np

from ..core import InvalidInputError
from ..sim import SimWorldState, SubtaskKind, TaskScript, dist, effect_holds
from .client import ChatBackend
from .prompts import DecisionKind, PlannerDecision, parse_planner_response, render_planner_prompt


@dataclass(frozen=True)
class PlannerQuery:
    instruction: str
    subtasks: tuple[str, ...]
    current: int
    views: Mapping[str, str]
    world: SimWorldState | None = None
    script: TaskScript | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "subtasks", tuple(self.subtasks))
        if not 0 <= self.current < len(self.subtasks):
            raise InvalidInputError(f"current subtask index {self.current} out of range")

    @property
    def current_subtask(self) -> str:
        return self.subtasks[self.current]


class Planner(Protocol):
    def __call__(self, query: PlannerQuery) -> PlannerDecision: ...


def _transit_target(q: PlannerQuery) -> str:
    return q.subtasks[min(q.current + 1, len(q.subtasks) - 1)]


@dataclass
class ForcedTransitPlanner:
    """Always proceeds; turns the controller into plain chunked execution."""

    calls: int = 0

    def __call__(self, q: PlannerQuery) -> PlannerDecision:
        self.calls += 1
        return PlannerDecision(_transit_target(q), DecisionKind.TRANSIT, "correction disabled",
                               decision_basis="forced transit")


def _world_evidence(world: SimWorldState, script: TaskScript, idx: int) -> tuple[list[str], list[str]]:
    spec = script.subtasks[idx]
    o = world.obj(spec.object_id)
    g = world.gripper
    front = [f"gripper {dist(g.pos, o.pos):.3f} m from {o.id}",
             f"{o.id} {'held' if o.held else 'not held'}"]
    target = spec.target_id
    if target is None:
        target = next((s.target_id for s in script.subtasks[idx:] if s.object_id == o.id and s.target_id), None)
    if target is not None:
        front.append(f"{o.id} {dist(o.pos, world.targets[target].center):.3f} m from {target}")
    wrist = [f"gripper {'closed' if g.gripper_width < 0.5 else 'open'}",
             f"{o.id} {'between fingers' if o.held else 'not between fingers'}"]
    return front, wrist


@dataclass
class ScriptedPlanner:
    """Geometric stand-in for the vision-language planner.

    Transits when the current subtask's effect is on track (loose radius);
    otherwise backtracks to the earliest subtask of the same object chain
    whose effect does not hold. ``rho`` is a false-negative rate: the chance
    of transiting anyway when a backtrack is warranted.
    """

    rho: float = 0.0
    seed: int = 0
    calls: int = 0
    history: list[tuple[int, int, str]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not 0.0 <= self.rho <= 1.0:
            raise InvalidInputError("rho must lie in [0, 1]")

    def __call__(self, q: PlannerQuery) -> PlannerDecision:
        if q.world is None or q.script is None:
            raise InvalidInputError("scripted planner needs the simulator world and task script")
        if list(q.subtasks) != q.script.instructions:
            raise InvalidInputError("query subtasks differ from the task script")
        self.calls += 1
        world, script, k = q.world, q.script, q.current
        front, wrist = _world_evidence(world, script, k)
        on_track = effect_holds(world, script, k, loose=True)
        if not on_track and self.rho > 0.0:
            u = np.random.default_rng([self.seed, world.rng_seed, world.step, k]).random()
            on_track = bool(u < self.rho)
        if on_track:
            d = PlannerDecision(_transit_target(q), DecisionKind.TRANSIT,
                                f"{q.current_subtask} is on track to succeed.", tuple(front), tuple(wrist),
                                "high", "none observed", "agree", "both views consistent",
                                "high likelihood, continue")
        else:
            oid = script.subtasks[k].object_id
            chain = [i for i in range(k + 1) if script.subtasks[i].object_id == oid]
            j = next(i for i in chain if not effect_holds(world, script, i))
            kind = script.subtasks[k].kind
            risk = {SubtaskKind.REACH: "gripper misaligned with object",
                    SubtaskKind.GRASP: "object not secured",
                    SubtaskKind.TRANSPORT: "object off target",
                    SubtaskKind.RELEASE: "object released off target"}[kind]
            d = PlannerDecision(q.subtasks[j], DecisionKind.BACKTRACK,
                                f"{q.current_subtask} will fail: {risk}; restart from {q.subtasks[j]}.",
                                tuple(front), tuple(wrist), "low", risk, "agree",
                                "front shows global misalignment", "low likelihood, reposition")
        self.history.append((world.step, k, d.kind.value))
        return d


@dataclass
class ChatPlanner:
    """Planner backed by a chat client (live HTTP or transcript replay)."""

    client: ChatBackend
    calls: int = 0

    def __call__(self, q: PlannerQuery) -> PlannerDecision:
        self.calls += 1
        request = render_planner_prompt(q.instruction, q.subtasks, q.current_subtask, q.views)
        text = self.client.complete(request.to_messages())
        return parse_planner_response(text, q.subtasks, q.current)
