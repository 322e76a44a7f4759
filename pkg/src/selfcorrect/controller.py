"""Closed-loop subtask execution with failure prediction, backtracking and retry.

Each subtask visit runs in two phases. In MONITOR the controller debounces
the policy's progress signal; once progress is confirmed high, the planner
either lets the subtask finish (COMPLETE phase, waiting for a confirmed stop
signal) or names a subtask to backtrack to. A backtrack reverse-executes the
recorded steps back to that subtask's start, then retries with a chunk picked
by consensus over ``samples`` policy draws.

Subtask indices are 0-based here.
"""
from __future__ import annotations

import enum
import json
import logging
import time
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Protocol

from .core import (
    ActionChunk,
    ActionStep,
    InvalidInputError,
    RobotState,
    TrajectoryLog,
    derive_seed,
    reverse_step,
)
from .mbr import HypothesisSet, Metric, Mode, select
from .oracle.client import OracleUnavailable
from .oracle.planners import Planner, PlannerQuery
from .oracle.prompts import DecisionKind, PlannerParseError
from .sim import SimEnv

log = logging.getLogger(__name__)

COMPONENTS = ("vlm", "action_rollout", "sampling", "mbr", "backtrack")
STREAM_SINGLE = 0
STREAM_RETRY = 1
STREAM_ALWAYS = 2


class Phase(str, enum.Enum):
    MONITOR = "monitor"
    COMPLETE = "complete"


@dataclass(frozen=True)
class EpisodeConfig:
    tau_p: float = 0.9
    chunk_size: int = 8
    samples: int = 8
    max_retries: int = 3
    t_max: int = 400
    stop_binarize: float = 0.5
    metric: Metric = Metric.L2
    mbr_mode: Mode = Mode.DENSITY
    mbr_enabled: bool = True
    always_mbr: bool = False
    cutoff_on_backtrack: bool = False
    normalize_features: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "metric", Metric.parse(self.metric))
        object.__setattr__(self, "mbr_mode", Mode(self.mbr_mode))
        if not 0.0 < self.tau_p <= 1.0:
            raise InvalidInputError("tau_p must lie in (0, 1]")
        if self.samples < 2:
            raise InvalidInputError("samples must be >= 2")
        if self.max_retries < 0:
            raise InvalidInputError("max_retries must be >= 0")
        if self.t_max < 0:
            raise InvalidInputError("t_max must be >= 0")
        if self.chunk_size < 1:
            raise InvalidInputError("chunk_size must be >= 1")


@dataclass(frozen=True)
class ConfirmState:
    first_seen: bool = False
    consec: int = 0
    gap: int = 0


def confirm(state: ConfirmState, high: bool) -> tuple[ConfirmState, bool]:
    """Debounce one binary signal.

    Fires on two consecutive highs, or on a high that recurs after at least
    two low steps following an earlier high.
    """
    if high:
        consec = state.consec + 1
        fired = consec >= 2 or (state.first_seen and state.gap >= 2)
        return ConfirmState(True, consec, 0), fired
    if state.first_seen:
        return ConfirmState(True, 0, state.gap + 1), False
    return state, False


class Policy(Protocol):
    def __call__(self, world, subtask_index: int, seed: int) -> ActionChunk: ...


class TickClock:
    """Deterministic clock: each reading advances by ``tick``."""

    def __init__(self, tick: float = 1.0):
        self.now = 0.0
        self.tick = tick

    def __call__(self) -> float:
        self.now += self.tick
        return self.now


@dataclass
class EpisodeState:
    k: int
    phase: Phase
    queue: deque
    retries: list[int]
    t: int
    log: TrajectoryLog
    subtask_start_states: list[RobotState | None]
    subtask_start_index: list[int]
    path: list[ActionStep]
    confirm: ConfirmState = field(default_factory=ConfirmState)
    done: bool = False
    result: str | None = None
    cause: str | None = None


@dataclass
class EpisodeOutcome:
    result: str
    cause: str
    steps_used: int
    backtracks: list[tuple[int, int, int]]
    decisions: list[dict]
    component_timings: dict[str, float]
    retries: list[int]
    counters: dict[str, int]
    trace: list[dict]
    final_subtask: int
    log: TrajectoryLog | None = None

    @property
    def success(self) -> bool:
        return self.result == "success"

    @property
    def shares(self) -> dict[str, float]:
        total = sum(self.component_timings.values())
        if total <= 0:
            return {c: 0.0 for c in COMPONENTS}
        return {c: 100.0 * self.component_timings.get(c, 0.0) / total for c in COMPONENTS}

    def to_json_dict(self, include_trace: bool = True) -> dict:
        d = {
            "result": self.result,
            "cause": self.cause,
            "steps_used": self.steps_used,
            "final_subtask": self.final_subtask,
            "backtracks": [{"from": a, "to": b, "t": t} for a, b, t in self.backtracks],
            "decisions": self.decisions,
            "retries": self.retries,
            "counters": self.counters,
            "component_timings": self.component_timings,
            "component_shares_percent": self.shares,
        }
        if include_trace:
            d["trace"] = self.trace
        return d

    def to_json(self, include_trace: bool = True) -> str:
        return json.dumps(self.to_json_dict(include_trace), sort_keys=True)


class Controller:
    """Runs one episode against a :class:`SimEnv`."""

    def __init__(self, env: SimEnv, policy: Policy, planner: Planner, cfg: EpisodeConfig = EpisodeConfig(),
                 clock: Callable[[], float] = time.perf_counter, instruction: str | None = None):
        self.env = env
        self.policy = policy
        self.planner = planner
        self.cfg = cfg
        self.clock = clock
        self.script = env.script
        self.subtasks = tuple(self.script.instructions)
        self.instruction = instruction or self.script.instruction
        self.K = len(self.subtasks)
        self.timings = {c: 0.0 for c in COMPONENTS}
        self.counters = {"policy_calls": 0, "oracle_calls": 0, "mbr_calls": 0, "reverse_steps": 0}
        self.trace: list[dict] = []
        self.decisions: list[dict] = []
        self.backtracks: list[tuple[int, int, int]] = []
        start = env.robot_state
        self.state = EpisodeState(
            k=0, phase=Phase.MONITOR, queue=deque(), retries=[0] * self.K, t=0,
            log=TrajectoryLog([start], [], subtask_index_per_step=[], meta={"instruction": self.instruction}),
            subtask_start_states=[start] + [None] * (self.K - 1),
            subtask_start_index=[0] + [0] * (self.K - 1),
            path=[],
        )
        if self.K == 0:
            raise InvalidInputError("task has no subtasks")
        if self.cfg.t_max == 0:
            self._finish("failure", "timeout")

    # -- bookkeeping ------------------------------------------------------

    def _timed(self, component: str, fn, *args):
        t0 = self.clock()
        out = fn(*args)
        self.timings[component] += self.clock() - t0
        return out

    def _event(self, name: str, **fields) -> None:
        self.trace.append({"t": self.state.t, "k": self.state.k, "event": name, **fields})

    def _finish(self, result: str, cause: str) -> None:
        self.state.done = True
        self.state.result = result
        self.state.cause = cause
        self._event("end", result=result, cause=cause)

    # -- sampling -----------------------------------------------------------

    def _sample(self, seed: int) -> ActionChunk:
        chunk = self.policy(self.env.observe(), self.state.k, seed)
        chunk.check_size(self.cfg.chunk_size)
        self.counters["policy_calls"] += 1
        return chunk

    def _sample_set(self, stream: int) -> list[ActionChunk]:
        t = self.state.t
        return [self._sample(derive_seed(self.cfg.seed, t, i, stream)) for i in range(self.cfg.samples)]

    def _select(self, chunks: list[ActionChunk], reason: str) -> ActionChunk:
        def run():
            hyps = HypothesisSet.from_chunks(self.env.robot_state, chunks, self.cfg.chunk_size)
            return select(hyps, self.cfg.metric, self.cfg.mbr_mode, self.cfg.normalize_features)

        res = self._timed("mbr", run)
        self.counters["mbr_calls"] += 1
        self._event("mbr", reason=reason, selected=res.selected_index, n=len(chunks))
        return chunks[res.selected_index]

    def _fill_queue(self) -> None:
        if self.cfg.always_mbr and self.cfg.mbr_enabled:
            chunks = self._timed("sampling", self._sample_set, STREAM_ALWAYS)
            self._event("sample", n=len(chunks), queued=len(self.state.queue))
            chunk = self._select(chunks, "fresh")
        else:
            seed = derive_seed(self.cfg.seed, self.state.t, 0, STREAM_SINGLE)
            chunk = self._timed("sampling", self._sample, seed)
            self._event("sample", n=1, queued=len(self.state.queue))
        self.state.queue.extend(chunk.steps)

    # -- main loop ------------------------------------------------------------

    def step(self) -> EpisodeState:
        s = self.state
        if s.done:
            raise RuntimeError("episode already terminated")
        if not s.queue:
            self._fill_queue()
        a: ActionStep = s.queue.popleft()
        if not (0.0 <= a.stop <= 1.0 and 0.0 <= a.progress <= 1.0):
            log.debug("clamping out-of-range stop/progress at t=%d", s.t)
        a = a.clamped()
        eff = self._timed("action_rollout", self.env.execute, a)
        s.path.append(eff)
        s.log.append(eff, self.env.robot_state, s.k)
        s.t += 1
        if self.env.succeeded():
            self._finish("success", "task predicate satisfied")
            return s
        if s.phase is Phase.MONITOR:
            s.confirm, fired = confirm(s.confirm, a.progress >= self.cfg.tau_p)
            if fired:
                self._planner_check()
        else:
            s.confirm, fired = confirm(s.confirm, a.stop >= self.cfg.stop_binarize)
            if fired:
                self._advance()
        if not s.done and s.t >= self.cfg.t_max:
            self._finish("failure", "timeout")
        return s

    def _advance(self) -> None:
        s = self.state
        self._event("advance", to=s.k + 1)
        s.k += 1
        s.phase = Phase.MONITOR
        s.confirm = ConfirmState()
        s.queue.clear()
        if s.k >= self.K:
            s.k = self.K - 1
            self._finish("failure", "all subtasks completed without task success")
            return
        s.subtask_start_states[s.k] = self.env.robot_state
        s.subtask_start_index[s.k] = len(s.path)

    def _to_complete(self) -> None:
        self.state.phase = Phase.COMPLETE
        self.state.confirm = ConfirmState()

    def _planner_check(self) -> None:
        s = self.state
        q = PlannerQuery(self.instruction, self.subtasks, s.k, dict(zip(("FRONT", "WRIST"), self.env.views())),
                         self.env.observe(), self.script)
        self.counters["oracle_calls"] += 1
        t0 = self.clock()
        try:
            d = self.planner(q)
            j = d.validate(self.subtasks, s.k)
        except PlannerParseError as e:
            self.timings["vlm"] += self.clock() - t0
            self.decisions.append({"t": s.t, "k": s.k, "kind": "parse_error", "error": str(e)})
            self._event("oracle", kind="parse_error")
            self._to_complete()
            return
        except InvalidInputError as e:
            self.timings["vlm"] += self.clock() - t0
            log.warning("planner named an invalid subtask (%s); treating as transit", e)
            self.decisions.append({"t": s.t, "k": s.k, "kind": "invalid", "error": str(e)})
            self._event("oracle", kind="invalid")
            self._to_complete()
            return
        except OracleUnavailable as e:
            self.timings["vlm"] += self.clock() - t0
            self._event("oracle", kind="unavailable")
            self._finish("failure", f"oracle unavailable: {e}")
            return
        self.timings["vlm"] += self.clock() - t0
        self.decisions.append({"t": s.t, "k": s.k, "kind": d.kind.value, "target": j, "decision": d.to_json_dict()})
        self._event("oracle", kind=d.kind.value, target=j)
        if d.kind is DecisionKind.BACKTRACK:
            if self.cfg.cutoff_on_backtrack:
                self._finish("failure", "predicted failure")
                return
            if s.retries[j] < self.cfg.max_retries:
                self._backtrack(j)
                return
            self._event("budget_exhausted", target=j)
        self._to_complete()

    def _backtrack(self, j: int) -> None:
        s = self.state
        s.retries[j] += 1
        from_k = s.k
        self._timed("backtrack", self.restore, j)
        if s.done:
            return
        self.backtracks.append((from_k, j, s.t))
        s.queue.clear()
        s.k = j
        s.phase = Phase.MONITOR
        s.confirm = ConfirmState()
        chunks = self._timed("sampling", self._sample_set, STREAM_RETRY)
        self._event("sample", n=len(chunks), queued=len(s.queue), reason="retry")
        chunk = self._select(chunks, "backtrack") if self.cfg.mbr_enabled else chunks[0]
        s.queue.extend(chunk.steps)

    def restore(self, j: int) -> None:
        """Reverse-execute the recorded path back to the start of subtask ``j``."""
        s = self.state
        if j > s.k:
            raise InvalidInputError(f"cannot restore forward to subtask {j} from {s.k}")
        start = s.subtask_start_index[j]
        to_undo = s.path[start:]
        m = len(to_undo)
        self._event("restore", target=j, steps=m)
        hold = 1.0 if self.env.robot_state.gripper_width < 0.5 else 0.0
        target_width = s.subtask_start_states[j].gripper_width
        final_cmd = 1.0 if target_width < 0.5 else 0.0
        for i, step in enumerate(reversed(to_undo)):
            if s.t >= self.cfg.t_max:
                self._finish("failure", "timeout during restore")
                return
            cmd = final_cmd if i == m - 1 else hold
            eff = self.env.execute(replace(reverse_step(step), gripper=cmd))
            s.path.pop()
            s.log.append(eff, self.env.robot_state, j)
            s.t += 1
            self.counters["reverse_steps"] += 1
        del s.path[start:]

    def run(self) -> EpisodeOutcome:
        while not self.state.done:
            self.step()
        return self.outcome()

    def outcome(self, keep_log: bool = False) -> EpisodeOutcome:
        s = self.state
        return EpisodeOutcome(
            result=s.result or "failure", cause=s.cause or "not terminated", steps_used=s.t,
            backtracks=list(self.backtracks), decisions=list(self.decisions),
            component_timings=dict(self.timings), retries=list(s.retries), counters=dict(self.counters),
            trace=list(self.trace), final_subtask=s.k, log=s.log if keep_log else None,
        )


def run_episode(env: SimEnv, policy: Policy, planner: Planner, cfg: EpisodeConfig = EpisodeConfig(),
                clock: Callable[[], float] = time.perf_counter, keep_log: bool = False) -> EpisodeOutcome:
    c = Controller(env, policy, planner, cfg, clock)
    while not c.state.done:
        c.step()
    return c.outcome(keep_log)


def validate_trace(outcome: EpisodeOutcome, cfg: EpisodeConfig) -> list[str]:
    """Check an outcome's trace against the control-loop rules; returns violations."""
    problems: list[str] = []
    oracle_calls = 0
    for ev in outcome.trace:
        kind = ev["event"]
        if kind == "sample" and ev["queued"] != 0:
            problems.append(f"t={ev['t']}: policy sampled with {ev['queued']} queued steps")
        elif kind == "oracle":
            oracle_calls += 1
            if oracle_calls > 1:
                problems.append(f"t={ev['t']}: second oracle call in one visit of subtask {ev['k']}")
        elif kind in ("advance", "restore"):
            oracle_calls = 0
    for j, r in enumerate(outcome.retries):
        if r > cfg.max_retries:
            problems.append(f"subtask {j} retried {r} > {cfg.max_retries} times")
    if len(outcome.backtracks) > sum(outcome.retries):
        problems.append("more backtracks than retries")
    retry_mbr = sum(1 for ev in outcome.trace if ev["event"] == "mbr" and ev.get("reason") == "backtrack")
    if cfg.mbr_enabled and retry_mbr != len(outcome.backtracks):
        problems.append(f"{retry_mbr} retry selections for {len(outcome.backtracks)} backtracks")
    return problems
