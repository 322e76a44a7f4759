"""Synthetic tabletop world, scripted expert and stochastic mock policy.

The world is a point gripper plus point objects on a table. A grasp happens
on the open->closed transition when an object lies within the grasp radius;
opening drops the held object where it is. The mock policy follows the
expert with Gaussian motion noise, except that with probability ``p_fail``
a sample aims at a goal displaced horizontally by ``failure_offset``, so
correct samples cluster and failures scatter.
"""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .core import (
    ActionChunk,
    ActionStep,
    InvalidInputError,
    RobotState,
    Subtask,
    TrajectoryLog,
    Vec3,
    apply_step,
)

WORKSPACE_LO: Vec3 = (0.0, -0.6, 0.0)
WORKSPACE_HI: Vec3 = (1.0, 0.6, 0.6)
HOME: Vec3 = (0.4, 0.0, 0.3)
TABLE_Z = 0.02
PROGRESS_FLOOR = 0.05


class SubtaskKind(str, enum.Enum):
    REACH = "reach"
    GRASP = "grasp"
    TRANSPORT = "transport"
    RELEASE = "release"


@dataclass(frozen=True)
class SimObject:
    id: str
    pos: Vec3
    held: bool = False


@dataclass(frozen=True)
class GoalRegion:
    center: Vec3
    radius: float


@dataclass(frozen=True)
class SimWorldState:
    gripper: RobotState
    objects: tuple[SimObject, ...]
    targets: dict[str, GoalRegion]
    rng_seed: int = 0
    step: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "objects", tuple(self.objects))
        if sum(o.held for o in self.objects) > 1:
            raise InvalidInputError("more than one held object")

    def obj(self, object_id: str) -> SimObject:
        for o in self.objects:
            if o.id == object_id:
                return o
        raise InvalidInputError(f"unknown object {object_id!r}")

    @property
    def held(self) -> SimObject | None:
        return next((o for o in self.objects if o.held), None)

    def to_json_dict(self) -> dict:
        return {
            "gripper": self.gripper.to_list(),
            "objects": [{"id": o.id, "pos": list(o.pos), "held": o.held} for o in self.objects],
            "targets": {k: {"center": list(g.center), "radius": g.radius} for k, g in self.targets.items()},
            "rng_seed": self.rng_seed,
            "step": self.step,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "SimWorldState":
        return cls(
            gripper=RobotState.from_list(d["gripper"]),
            objects=tuple(SimObject(o["id"], tuple(o["pos"]), bool(o.get("held", False))) for o in d["objects"]),
            targets={k: GoalRegion(tuple(g["center"]), float(g["radius"])) for k, g in d["targets"].items()},
            rng_seed=int(d.get("rng_seed", 0)),
            step=int(d.get("step", 0)),
        )


@dataclass(frozen=True)
class SubtaskSpec:
    instruction: str
    kind: SubtaskKind
    object_id: str
    target_id: str | None = None
    ref_distance: float = PROGRESS_FLOOR


@dataclass(frozen=True)
class TaskScript:
    name: str
    instruction: str
    subtasks: tuple[SubtaskSpec, ...]
    grasp_radius: float = 0.02
    place_radius: float = 0.03
    track_radius: float = 0.05

    def __post_init__(self) -> None:
        object.__setattr__(self, "subtasks", tuple(self.subtasks))
        names = [s.instruction for s in self.subtasks]
        if len(set(names)) != len(names):
            raise InvalidInputError("subtask instructions must be unique")
        grasped: set[str] = set()
        moved: set[str] = set()
        for s in self.subtasks:
            if s.kind is SubtaskKind.GRASP:
                grasped.add(s.object_id)
            elif s.kind is SubtaskKind.TRANSPORT:
                if s.object_id not in grasped:
                    raise InvalidInputError(f"transport of {s.object_id!r} before its grasp")
                if s.target_id is None:
                    raise InvalidInputError("transport needs a target")
                moved.add(s.object_id)
            elif s.kind is SubtaskKind.RELEASE:
                if s.object_id not in moved:
                    raise InvalidInputError(f"release of {s.object_id!r} before its transport")

    @property
    def instructions(self) -> list[str]:
        return [s.instruction for s in self.subtasks]

    def index(self, instruction: str) -> int:
        try:
            return self.instructions.index(instruction)
        except ValueError:
            raise InvalidInputError(f"unknown subtask {instruction!r}") from None

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["subtasks"] = [{**asdict(s), "kind": s.kind.value} for s in self.subtasks]
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "TaskScript":
        subs = tuple(SubtaskSpec(s["instruction"], SubtaskKind(s["kind"]), s["object_id"],
                                 s.get("target_id"), float(s.get("ref_distance", PROGRESS_FLOOR)))
                     for s in d["subtasks"])
        return cls(d["name"], d["instruction"], subs, float(d.get("grasp_radius", 0.02)),
                   float(d.get("place_radius", 0.03)), float(d.get("track_radius", 0.05)))


@dataclass(frozen=True)
class MockPolicyConfig:
    noise_sigma: float = 0.002
    p_fail: float = 0.3
    failure_offset: float = 0.1
    progress_noise: float = 0.02
    rot_sigma: float = 0.002
    max_step: float = 0.02
    max_rot_step: float = 0.05
    stop_tol: float = 0.004
    chunk_size: int = 8
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("noise_sigma", "failure_offset", "progress_noise", "rot_sigma"):
            if getattr(self, name) < 0:
                raise InvalidInputError(f"{name} must be nonnegative")
        if not 0.0 <= self.p_fail <= 1.0:
            raise InvalidInputError("p_fail must lie in [0, 1]")
        if self.max_step <= 0 or self.chunk_size < 1:
            raise InvalidInputError("max_step and chunk_size must be positive")

    @classmethod
    def from_json_dict(cls, d: dict) -> "MockPolicyConfig":
        return cls(**d)


# -- geometry helpers -------------------------------------------------------

def _sub(a: Sequence[float], b: Sequence[float]) -> Vec3:
    return (a[0] - b[0], a[1] - b[1], a[2] - b[2])


def _add(a: Sequence[float], b: Sequence[float]) -> Vec3:
    return (a[0] + b[0], a[1] + b[1], a[2] + b[2])


def _norm(a: Sequence[float]) -> float:
    return math.sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2])


def dist(a: Sequence[float], b: Sequence[float]) -> float:
    return _norm(_sub(a, b))


def clamp_to_workspace(p: Sequence[float]) -> Vec3:
    return tuple(min(hi, max(lo, float(x))) for x, lo, hi in zip(p, WORKSPACE_LO, WORKSPACE_HI))  # type: ignore[return-value]


def _is_open(width: float) -> bool:
    return width >= 0.5


# -- world dynamics ---------------------------------------------------------

def env_step_effective(world: SimWorldState, step: ActionStep,
                       script: TaskScript | None = None) -> tuple[SimWorldState, ActionStep]:
    """Advance the world; also return the step as actually executed.

    Workspace clamping can shorten the translation, and the returned step
    carries the shortened delta so that reversing it is exact.
    """
    grasp_radius = script.grasp_radius if script is not None else 0.02
    g0 = world.gripper
    g1 = apply_step(g0, step)
    pos = clamp_to_workspace(g1.pos)
    eff_dpos = _sub(pos, g0.pos)
    if pos != g1.pos:
        g1 = RobotState(pos, g1.rot, g1.gripper_width)
    eff = step if eff_dpos == step.dpos else ActionStep(eff_dpos, step.drot, step.gripper, step.stop, step.progress)

    objects = [replace(o, pos=_add(o.pos, eff_dpos)) if o.held else o for o in world.objects]
    opened, closed = _is_open(g0.gripper_width), _is_open(g1.gripper_width)
    if opened and not closed and not any(o.held for o in objects):
        best, best_d = None, grasp_radius
        for i, o in enumerate(objects):
            d = dist(o.pos, g1.pos)
            if d <= best_d:
                best, best_d = i, d
        if best is not None:
            objects[best] = replace(objects[best], held=True)
    elif closed and not opened:
        objects = [replace(o, held=False) if o.held else o for o in objects]
    new = SimWorldState(g1, tuple(objects), world.targets, world.rng_seed, world.step + 1)
    return new, eff


def env_step(world: SimWorldState, step: ActionStep, script: TaskScript | None = None) -> SimWorldState:
    return env_step_effective(world, step, script)[0]


def simulate(world: SimWorldState, chunk: ActionChunk | Iterable[ActionStep],
             script: TaskScript | None = None) -> SimWorldState:
    steps = chunk.steps if isinstance(chunk, ActionChunk) else chunk
    for s in steps:
        world = env_step(world, s, script)
    return world


# -- task predicates --------------------------------------------------------

def _in_region(world: SimWorldState, object_id: str, target_id: str, radius: float) -> bool:
    return dist(world.obj(object_id).pos, world.targets[target_id].center) <= radius


def _release_target(script: TaskScript, idx: int) -> str | None:
    spec = script.subtasks[idx]
    if spec.target_id is not None:
        return spec.target_id
    for s in reversed(script.subtasks[:idx]):
        if s.object_id == spec.object_id and s.kind is SubtaskKind.TRANSPORT:
            return s.target_id
    return None


def raw_effect(world: SimWorldState, script: TaskScript, idx: int, loose: bool = False) -> bool:
    """Whether subtask ``idx``'s own postcondition holds in ``world``.

    ``loose`` swaps the tight radii for the track radius; this is the
    forecasting check used while a motion is still finishing.
    """
    spec = script.subtasks[idx]
    o = world.obj(spec.object_id)
    if spec.kind is SubtaskKind.REACH:
        r = script.track_radius if loose else script.grasp_radius
        return o.held or dist(world.gripper.pos, o.pos) <= r
    if spec.kind is SubtaskKind.GRASP:
        return o.held
    target = _release_target(script, idx)
    r = script.track_radius if loose else script.place_radius
    if spec.kind is SubtaskKind.TRANSPORT:
        return _in_region(world, o.id, target, r)
    return not o.held and _in_region(world, o.id, target, script.place_radius)


def effect_holds(world: SimWorldState, script: TaskScript, idx: int, loose: bool = False) -> bool:
    """Subtask effect, closed under later effects of the same object's chain."""
    oid = script.subtasks[idx].object_id
    if raw_effect(world, script, idx, loose):
        return True
    for j in range(idx + 1, len(script.subtasks)):
        s = script.subtasks[j]
        if s.object_id == oid and s.kind in (SubtaskKind.TRANSPORT, SubtaskKind.RELEASE) \
                and raw_effect(world, script, j):
            return True
    return False


def task_success(world: SimWorldState, script: TaskScript) -> bool:
    placed = {}
    for i, s in enumerate(script.subtasks):
        if s.kind is SubtaskKind.RELEASE:
            placed[s.object_id] = _release_target(script, i)
    if not placed:
        return False
    for oid, tid in placed.items():
        o = world.obj(oid)
        if o.held or not _in_region(world, oid, tid, script.place_radius):
            return False
    return True


def goal_distance(world: SimWorldState, script: TaskScript, idx: int) -> float:
    """Scalar distance-to-goal used for mid-subtask hypothesis labels."""
    spec = script.subtasks[idx]
    o = world.obj(spec.object_id)
    if spec.kind in (SubtaskKind.REACH, SubtaskKind.GRASP):
        return 0.0 if o.held else dist(world.gripper.pos, o.pos)
    target = world.targets[_release_target(script, idx)]
    d = dist(o.pos, target.center)
    if spec.kind is SubtaskKind.RELEASE and o.held:
        d += script.place_radius
    return d


# -- expert and mock policy -------------------------------------------------

def subtask_goal(world: SimWorldState, script: TaskScript, idx: int) -> tuple[Vec3, float, float]:
    """(gripper goal position, command while approaching, command on arrival)."""
    spec = script.subtasks[idx]
    o = world.obj(spec.object_id)
    g = world.gripper.pos
    if spec.kind is SubtaskKind.REACH:
        return (g if o.held else o.pos), 0.0, 0.0
    if spec.kind is SubtaskKind.GRASP:
        return (g if o.held else o.pos), 0.0, 1.0
    if spec.kind is SubtaskKind.TRANSPORT:
        c = world.targets[spec.target_id].center
        goal = _add(c, _sub(g, o.pos)) if o.held else c
        return goal, 1.0, 1.0
    return g, 1.0, 0.0


def _plan(world: SimWorldState, script: TaskScript, idx: int, cfg: MockPolicyConfig,
          displacement: Vec3 | None = None) -> list[ActionStep]:
    goal, approach_cmd, arrive_cmd = subtask_goal(world, script, idx)
    if displacement is not None:
        goal = clamp_to_workspace(_add(goal, displacement))
    ref = max(script.subtasks[idx].ref_distance, PROGRESS_FLOOR)
    final_width = 0.0 if arrive_cmd >= 0.5 else 1.0
    state = world.gripper
    steps = []
    for _ in range(cfg.chunk_size):
        d = _sub(goal, state.pos)
        n = _norm(d)
        scale = 1.0 if n <= cfg.max_step else cfg.max_step / n
        dpos = (d[0] * scale, d[1] * scale, d[2] * scale)
        drot = tuple(-max(-cfg.max_rot_step, min(cfg.max_rot_step, r)) for r in state.rot)
        arrived = dist(_add(state.pos, dpos), goal) <= cfg.stop_tol
        cmd = arrive_cmd if arrived else approach_cmd
        state = apply_step(state, ActionStep(dpos, drot, cmd))
        remaining = dist(state.pos, goal)
        gripper_ok = state.gripper_width == final_width
        prog = min(1.0, max(0.0, 1.0 - remaining / ref))
        if not gripper_ok:
            prog = min(prog, 0.5)
        stop = 1.0 if remaining <= cfg.stop_tol and gripper_ok else 0.0
        steps.append(ActionStep(dpos, drot, cmd, stop, prog))
    return steps


def bin_progress(p: float) -> float:
    return math.floor(10.0 * min(1.0, max(0.0, p)) + 1e-9) / 10.0


def expert_chunk(world: SimWorldState, script: TaskScript, idx: int,
                 cfg: MockPolicyConfig | None = None, origin_seed: int = 0) -> ActionChunk:
    cfg = cfg or MockPolicyConfig(noise_sigma=0.0, p_fail=0.0, progress_noise=0.0, rot_sigma=0.0)
    steps = [replace(s, progress=bin_progress(s.progress)) for s in _plan(world, script, idx, cfg)]
    return ActionChunk(tuple(steps), origin_seed)


def sample_is_failure(cfg: MockPolicyConfig, seed: int) -> bool:
    """Whether the sample drawn with ``seed`` is a displaced-goal failure."""
    return bool(np.random.default_rng(seed).random() < cfg.p_fail)


def mock_policy_sample(world: SimWorldState, script: TaskScript, idx: int,
                       cfg: MockPolicyConfig, seed: int) -> ActionChunk:
    rng = np.random.default_rng(seed)
    failing = rng.random() < cfg.p_fail
    angle = rng.uniform(0.0, 2.0 * math.pi)
    displacement = None
    if failing and cfg.failure_offset > 0:
        displacement = (cfg.failure_offset * math.cos(angle), cfg.failure_offset * math.sin(angle), 0.0)
    plan = _plan(world, script, idx, cfg, displacement)
    h = cfg.chunk_size
    dpos_noise = rng.normal(0.0, cfg.noise_sigma, (h, 3)) if cfg.noise_sigma > 0 else np.zeros((h, 3))
    drot_noise = rng.normal(0.0, cfg.rot_sigma, (h, 3)) if cfg.rot_sigma > 0 else np.zeros((h, 3))
    p_noise = rng.normal(0.0, cfg.progress_noise, h) if cfg.progress_noise > 0 else np.zeros(h)
    steps = []
    for i, s in enumerate(plan):
        steps.append(ActionStep(
            _add(s.dpos, dpos_noise[i]), _add(s.drot, drot_noise[i]), s.gripper, s.stop,
            bin_progress(s.progress + float(p_noise[i]))))
    return ActionChunk(tuple(steps), int(seed))


@dataclass
class MockPolicy:
    """Callable policy bound to a task: ``policy(world, subtask_index, seed)``."""

    script: TaskScript
    cfg: MockPolicyConfig = field(default_factory=MockPolicyConfig)
    calls: int = 0

    def __call__(self, world: SimWorldState, idx: int, seed: int) -> ActionChunk:
        self.calls += 1
        return mock_policy_sample(world, self.script, idx, self.cfg, seed)

    @property
    def chunk_size(self) -> int:
        return self.cfg.chunk_size


def label_hypothesis(world: SimWorldState, script: TaskScript, idx: int, chunk: ActionChunk,
                     cfg: MockPolicyConfig | None = None, mid_fraction: float = 0.5) -> bool:
    """Success label of one chunk executed from ``world`` for subtask ``idx``.

    True when the subtask effect holds at chunk end, or when the chunk cuts
    the distance-to-goal by at least ``mid_fraction`` of what the expert
    chunk would have achieved from the same state.
    """
    end = simulate(world, chunk, script)
    if effect_holds(end, script, idx):
        return True
    d0 = goal_distance(world, script, idx)
    exp_cfg = MockPolicyConfig(noise_sigma=0.0, p_fail=0.0, progress_noise=0.0, rot_sigma=0.0,
                               chunk_size=len(chunk),
                               **({} if cfg is None else {"max_step": cfg.max_step, "stop_tol": cfg.stop_tol}))
    expert_end = simulate(world, expert_chunk(world, script, idx, exp_cfg), script)
    expert_gain = d0 - goal_distance(expert_end, script, idx)
    if expert_gain <= 1e-9:
        return False
    return d0 - goal_distance(end, script, idx) >= mid_fraction * expert_gain


class SimEnv:
    """Stateful wrapper the controller drives; keeps the world history."""

    def __init__(self, world: SimWorldState, script: TaskScript, keep_history: bool = False):
        self.world = world
        self.script = script
        self.keep_history = keep_history
        self.history: list[SimWorldState] = [world] if keep_history else []

    def observe(self) -> SimWorldState:
        return self.world

    @property
    def robot_state(self) -> RobotState:
        return self.world.gripper

    def execute(self, step: ActionStep) -> ActionStep:
        self.world, eff = env_step_effective(self.world, step, self.script)
        if self.keep_history:
            self.history.append(self.world)
        return eff

    def succeeded(self) -> bool:
        return task_success(self.world, self.script)

    def views(self) -> tuple[str, str]:
        # no rendering: opaque references identifying the snapshot
        return (f"sim://front/{self.world.rng_seed}/{self.world.step}",
                f"sim://wrist/{self.world.rng_seed}/{self.world.step}")


# -- scenarios --------------------------------------------------------------

TASKS = ("pick_place", "pick_place_two")

_OBJECT_NAMES = (("red_block", "red block"), ("blue_mug", "blue mug"))
_TARGET_NAMES = (("plate", "plate"), ("basket", "basket"))


def chain_instructions(object_name: str, target_name: str) -> list[str]:
    """Subtask wording for one pick-and-place chain."""
    return [
        f"Move the gripper to the {object_name}",
        f"Close the gripper to grasp the {object_name}",
        f"Move the gripper with the {object_name} to the {target_name}",
        f"Open the gripper to release the {object_name} on the {target_name}",
    ]


def _chain(obj: tuple[str, str], tgt: tuple[str, str], start: Vec3, obj_pos: Vec3,
           tgt_pos: Vec3) -> list[SubtaskSpec]:
    oid, oname = obj
    tid, tname = tgt
    reach, grasp, transport, release = chain_instructions(oname, tname)
    return [
        SubtaskSpec(reach, SubtaskKind.REACH, oid, None, dist(start, obj_pos)),
        SubtaskSpec(grasp, SubtaskKind.GRASP, oid),
        SubtaskSpec(transport, SubtaskKind.TRANSPORT, oid, tid, dist(obj_pos, tgt_pos)),
        SubtaskSpec(release, SubtaskKind.RELEASE, oid, tid),
    ]


def _spread_points(rng: np.random.Generator, n: int, min_sep: float) -> list[Vec3]:
    pts: list[Vec3] = []
    while len(pts) < n:
        p = (float(rng.uniform(0.3, 0.7)), float(rng.uniform(-0.3, 0.3)), TABLE_Z)
        if all(dist(p, q) >= min_sep for q in pts):
            pts.append(p)
    return pts


def make_scenario(task: str = "pick_place", seed: int = 0) -> tuple[SimWorldState, TaskScript]:
    """Seeded initial world and task script."""
    if task not in TASKS:
        raise InvalidInputError(f"unknown task {task!r}; choose from {TASKS}")
    rng = np.random.default_rng([seed, TASKS.index(task)])
    n_obj = 1 if task == "pick_place" else 2
    pts = _spread_points(rng, 2 * n_obj, 0.15)
    objs, tgts = pts[:n_obj], pts[n_obj:]
    specs: list[SubtaskSpec] = []
    start = HOME
    for i in range(n_obj):
        specs += _chain(_OBJECT_NAMES[i], _TARGET_NAMES[i], start, objs[i], tgts[i])
        start = tgts[i]
    if n_obj == 1:
        instruction = f"put the {_OBJECT_NAMES[0][1]} on the {_TARGET_NAMES[0][1]}"
    else:
        instruction = (f"put the {_OBJECT_NAMES[0][1]} on the {_TARGET_NAMES[0][1]} and "
                       f"put the {_OBJECT_NAMES[1][1]} in the {_TARGET_NAMES[1][1]}")
    script = TaskScript(task, instruction, tuple(specs))
    world = SimWorldState(
        gripper=RobotState(HOME, (0.0, 0.0, 0.0), 1.0),
        objects=tuple(SimObject(_OBJECT_NAMES[i][0], objs[i]) for i in range(n_obj)),
        targets={_TARGET_NAMES[i][0]: GoalRegion(tgts[i], script.place_radius) for i in range(n_obj)},
        rng_seed=int(seed),
    )
    return world, script


@dataclass(frozen=True)
class Scenario:
    task: str
    seed: int
    episode_seed: int

    def build(self) -> tuple[SimWorldState, TaskScript]:
        return make_scenario(self.task, self.seed)

    def to_json_dict(self, policy: MockPolicyConfig | None = None) -> dict:
        world, script = self.build()
        d = {"task": self.task, "seed": self.seed, "episode_seed": self.episode_seed,
             "world": world.to_json_dict(), "script": script.to_json_dict()}
        if policy is not None:
            d["policy"] = asdict(policy)
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "Scenario":
        return cls(d["task"], int(d["seed"]), int(d["episode_seed"]))


def generate_scenarios(tasks: Sequence[str], episodes: int, base_seed: int = 0) -> list[Scenario]:
    out = []
    for t in tasks:
        for e in range(episodes):
            out.append(Scenario(t, base_seed * 100_003 + e, base_seed * 7_919 + e))
    return out


# -- scripted demonstrations for the segmenter ----------------------------

def scripted_demonstration(world: SimWorldState, script: TaskScript, rng: np.random.Generator,
                           window: int = 4, max_dwell: int = 3, max_step: float = 0.02,
                           yaw_range: float = 0.3) -> tuple[TrajectoryLog, list[Subtask]]:
    """Noise-free demonstration plus its ground-truth subtask boundaries.

    Boundaries follow the look-ahead convention of windowed primitives: a
    gripper subtask covers the ``window`` steps whose look-ahead sees the
    gripper actuate (the actuation is its last step), the final release runs
    to the end of the demonstration, and motion subtasks fill the gaps.
    """
    states = [world.gripper]
    steps: list[ActionStep] = []
    flips: list[tuple[int, int]] = []   # (subtask index, step of gripper actuation)
    cmd = 0.0
    n = len(script.subtasks)

    def push(step: ActionStep) -> None:
        nonlocal world
        world, eff = env_step_effective(world, step, script)
        steps.append(eff)
        states.append(world.gripper)

    for idx, spec in enumerate(script.subtasks):
        if spec.kind in (SubtaskKind.REACH, SubtaskKind.TRANSPORT):
            goal, _, _ = subtask_goal(world, script, idx)
            total_yaw = float(rng.uniform(-yaw_range, yaw_range)) if spec.kind is SubtaskKind.TRANSPORT else 0.0
            n_steps = max(window + 1, math.ceil(dist(world.gripper.pos, goal) / max_step))
            start = world.gripper.pos
            for i in range(1, n_steps + 1):
                p = tuple(s + (g - s) * i / n_steps for s, g in zip(start, goal))
                push(ActionStep(_sub(p, world.gripper.pos), (0.0, 0.0, total_yaw / n_steps), cmd))
        else:
            for _ in range(int(rng.integers(0, max_dwell + 1))):
                push(ActionStep(gripper=cmd))
            cmd = 1.0 if spec.kind is SubtaskKind.GRASP else 0.0
            push(ActionStep(gripper=cmd))
            flips.append((idx, len(steps) - 1))
            if idx == n - 1:
                for _ in range(window):
                    push(ActionStep(gripper=cmd))
    T = len(steps)
    bounds: list[tuple[int, int]] = [(-1, -1)] * n
    for idx, a in flips:
        end = T - 1 if idx == n - 1 else a
        bounds[idx] = (a - window + 1, end)
    prev_end = -1
    for idx in range(n):
        if bounds[idx] == (-1, -1):
            nxt = next((bounds[j][0] for j in range(idx + 1, n) if bounds[j] != (-1, -1)), T)
            bounds[idx] = (prev_end + 1, nxt - 1)
        prev_end = bounds[idx][1]
    gt = [Subtask(spec.instruction, s, e) for spec, (s, e) in zip(script.subtasks, bounds)]
    log = TrajectoryLog(states, steps, meta={"instruction": script.instruction,
                                             "subtask_instructions": script.instructions})
    return log, gt


def inject_gripper_noise(log: TrajectoryLog, sigma: float, rng: np.random.Generator) -> TrajectoryLog:
    noisy = [RobotState(s.pos, s.rot, float(np.clip(s.gripper_width + rng.normal(0.0, sigma), 0.0, 1.0)))
             for s in log.states]
    return TrajectoryLog(noisy, list(log.executed), subtasks=log.subtasks, meta=dict(log.meta))
