"""Action/state value types, pose integration and reverse execution.

Every real is a 64-bit float. Rotations are Euler deltas wrapped per axis
to (-pi, pi]. ``gripper_width`` is the normalised finger opening (1 = open);
an ``ActionStep.gripper`` command of 1 means *close*.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

TAU = 2.0 * math.pi
GRIPPER_BINARIZE = 0.5
DEFAULT_CHUNK_SIZE = 8

Vec3 = tuple[float, float, float]
ZERO3: Vec3 = (0.0, 0.0, 0.0)


class InvalidInputError(ValueError):
    """Raised for non-finite or structurally invalid inputs."""


class TilingError(ValueError):
    """Subtask ranges do not tile the trajectory."""


def wrap_angle(x: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    w = math.remainder(x, TAU)
    if w <= -math.pi:
        w += TAU
    return w


def derive_seed(*keys: int) -> int:
    """Stable 32-bit seed from a tuple of nonnegative integer keys."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def _vec3(v: Iterable[float]) -> Vec3:
    t = tuple(float(x) for x in v)
    if len(t) != 3:
        raise InvalidInputError(f"expected 3 components, got {len(t)}")
    return t  # type: ignore[return-value]


def _clamp01(x: float) -> float:
    return 0.0 if x < 0.0 else 1.0 if x > 1.0 else x


def _all_finite(*values: float) -> bool:
    return all(math.isfinite(v) for v in values)


@dataclass(frozen=True, slots=True)
class ActionStep:
    """One 9-dim control vector: translation, rotation, gripper, stop, progress."""

    dpos: Vec3 = ZERO3
    drot: Vec3 = ZERO3
    gripper: float = 0.0
    stop: float = 0.0
    progress: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "dpos", _vec3(self.dpos))
        object.__setattr__(self, "drot", _vec3(self.drot))
        vals = (*self.dpos, *self.drot, self.gripper, self.stop, self.progress)
        if not _all_finite(*vals):
            raise InvalidInputError(f"non-finite action step: {vals}")

    def clamped(self) -> "ActionStep":
        """Copy with gripper, stop and progress clamped to [0, 1]."""
        return ActionStep(self.dpos, self.drot, _clamp01(self.gripper),
                          _clamp01(self.stop), _clamp01(self.progress))

    def to_list(self) -> list[float]:
        return [*self.dpos, *self.drot, self.gripper, self.stop, self.progress]

    @classmethod
    def from_list(cls, v: Sequence[float]) -> "ActionStep":
        if len(v) == 7:
            v = [*v, 0.0, 0.0]
        if len(v) != 9:
            raise InvalidInputError(f"action step needs 7 or 9 values, got {len(v)}")
        return cls(tuple(v[0:3]), tuple(v[3:6]), float(v[6]), float(v[7]), float(v[8]))


@dataclass(frozen=True, slots=True)
class ActionChunk:
    steps: tuple[ActionStep, ...]
    origin_seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))
        if not self.steps:
            raise InvalidInputError("empty action chunk")

    def __len__(self) -> int:
        return len(self.steps)

    def check_size(self, chunk_size: int) -> None:
        if len(self.steps) != chunk_size:
            raise InvalidInputError(
                f"chunk has {len(self.steps)} steps, expected {chunk_size}")

    def as_array(self) -> np.ndarray:
        return np.array([s.to_list() for s in self.steps], dtype=np.float64)

    @classmethod
    def from_array(cls, arr: Sequence[Sequence[float]], origin_seed: int = 0) -> "ActionChunk":
        return cls(tuple(ActionStep.from_list(list(row)) for row in arr), int(origin_seed))

    @classmethod
    def zeros(cls, chunk_size: int, gripper: float = 0.0, origin_seed: int = 0) -> "ActionChunk":
        return cls(tuple(ActionStep(gripper=gripper) for _ in range(chunk_size)), origin_seed)


@dataclass(frozen=True, slots=True)
class RobotState:
    pos: Vec3 = ZERO3
    rot: Vec3 = ZERO3
    gripper_width: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "pos", _vec3(self.pos))
        object.__setattr__(self, "rot", _vec3(self.rot))
        vals = (*self.pos, *self.rot, self.gripper_width)
        if not _all_finite(*vals):
            raise InvalidInputError(f"non-finite robot state: {vals}")
        if not 0.0 <= self.gripper_width <= 1.0:
            raise InvalidInputError(f"gripper_width {self.gripper_width} outside [0, 1]")

    def to_list(self) -> list[float]:
        return [*self.pos, *self.rot, self.gripper_width]

    @classmethod
    def from_list(cls, v: Sequence[float]) -> "RobotState":
        if len(v) != 7:
            raise InvalidInputError(f"robot state needs 7 values, got {len(v)}")
        return cls(tuple(v[0:3]), tuple(v[3:6]), float(v[6]))

    def pose_error(self, other: "RobotState") -> float:
        """Max per-component deviation; rotations compared on the circle."""
        dp = max(abs(a - b) for a, b in zip(self.pos, other.pos))
        dr = max(abs(wrap_angle(a - b)) for a, b in zip(self.rot, other.rot))
        return max(dp, dr)


def gripper_width_for(command: float) -> float:
    """Width reached instantly by a gripper command (>= 0.5 closes)."""
    return 0.0 if command >= GRIPPER_BINARIZE else 1.0


def apply_step(state: RobotState, step: ActionStep) -> RobotState:
    x, y, z = state.pos
    u, v, w = state.rot
    dx, dy, dz = step.dpos
    du, dv, dw = step.drot
    return RobotState(
        (x + dx, y + dy, z + dz),
        (wrap_angle(u + du), wrap_angle(v + dv), wrap_angle(w + dw)),
        gripper_width_for(step.gripper),
    )


def reverse_step(step: ActionStep) -> ActionStep:
    """Negate the motion; gripper/stop/progress ride along untouched."""
    dx, dy, dz = step.dpos
    du, dv, dw = step.drot
    return ActionStep((-dx, -dy, -dz), (-du, -dv, -dw), step.gripper, step.stop, step.progress)


def integrate_chunk(state: RobotState, chunk: ActionChunk) -> list[RobotState]:
    out = []
    for step in chunk.steps:
        state = apply_step(state, step)
        out.append(state)
    return out


@dataclass(frozen=True, slots=True)
class Subtask:
    instruction: str
    start: int
    end: int

    def __post_init__(self) -> None:
        if self.start > self.end:
            raise TilingError(f"subtask {self.instruction!r} has start {self.start} > end {self.end}")

    @property
    def duration(self) -> int:
        return self.end - self.start + 1


def validate_tiling(subtasks: Sequence[Subtask], n_steps: int) -> None:
    """Raise :class:`TilingError` unless ``subtasks`` tile ``[0, n_steps-1]``."""
    if not subtasks:
        raise TilingError("no subtasks")
    expected = 0
    for s in subtasks:
        if s.start != expected:
            kind = "gap" if s.start > expected else "overlap"
            raise TilingError(f"{kind} before {s.instruction!r}: starts at {s.start}, expected {expected}")
        expected = s.end + 1
    if expected != n_steps:
        raise TilingError(f"subtasks cover [0, {expected - 1}], trajectory has {n_steps} steps")


@dataclass
class TrajectoryLog:
    states: list[RobotState]
    executed: list[ActionStep]
    subtask_index_per_step: list[int] | None = None
    subtasks: list[Subtask] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.states) != len(self.executed) + 1:
            raise InvalidInputError(
                f"{len(self.states)} states for {len(self.executed)} steps (need steps + 1)")
        if self.subtask_index_per_step is not None and len(self.subtask_index_per_step) != len(self.executed):
            raise InvalidInputError("subtask_index_per_step length differs from executed")

    def __len__(self) -> int:
        return len(self.executed)

    def consistency_error(self) -> float:
        """Largest deviation between ``states[i+1]`` and ``apply_step(states[i], executed[i])``.

        Recorded demonstrations (continuous gripper, sensor noise) need not
        satisfy this; logs produced by the controller do to ~1e-12.
        """
        worst = 0.0
        for s0, a, s1 in zip(self.states, self.executed, self.states[1:]):
            pred = apply_step(s0, a)
            worst = max(worst, pred.pose_error(s1), abs(pred.gripper_width - s1.gripper_width))
        return worst

    def append(self, step: ActionStep, state: RobotState, subtask: int | None = None) -> None:
        self.executed.append(step)
        self.states.append(state)
        if self.subtask_index_per_step is not None:
            self.subtask_index_per_step.append(-1 if subtask is None else subtask)

    def to_json_dict(self) -> dict:
        d: dict = {
            "states": [s.to_list() for s in self.states],
            "executed": [a.to_list() for a in self.executed],
        }
        if self.subtasks is not None:
            d["subtasks"] = [{"instruction": s.instruction, "start": s.start, "end": s.end}
                             for s in self.subtasks]
        if self.subtask_index_per_step is not None:
            d["subtask_index_per_step"] = list(self.subtask_index_per_step)
        d.update(self.meta)
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "TrajectoryLog":
        subtasks = None
        if d.get("subtasks") is not None:
            subtasks = [Subtask(s["instruction"], int(s["start"]), int(s["end"])) for s in d["subtasks"]]
        known = {"states", "executed", "subtasks", "subtask_index_per_step"}
        return cls(
            states=[RobotState.from_list(s) for s in d["states"]],
            executed=[ActionStep.from_list(a) for a in d["executed"]],
            subtask_index_per_step=d.get("subtask_index_per_step"),
            subtasks=subtasks,
            meta={k: v for k, v in d.items() if k not in known},
        )


def schema_path() -> Path:
    return Path(__file__).with_name("schemas") / "trajectory_log.schema.json"


def _validator():
    import jsonschema

    with schema_path().open(encoding="utf-8") as f:
        schema = json.load(f)
    return jsonschema.Draft202012Validator(schema)


def iter_logs(path: str | Path, validate: bool = True) -> Iterator[TrajectoryLog]:
    """Yield logs from a JSONL file, one object per line."""
    validator = _validator() if validate else None
    with Path(path).open(encoding="utf-8") as f:
        for line_num, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                data = json.loads(line)
                if validator is not None:
                    validator.validate(data)
                yield TrajectoryLog.from_json_dict(data)
            except Exception as e:
                raise InvalidInputError(f"{path}:{line_num}: {e}") from e


def read_logs(path: str | Path, validate: bool = True) -> list[TrajectoryLog]:
    return list(iter_logs(path, validate))


def write_logs(path: str | Path, logs: Iterable[TrajectoryLog]) -> None:
    with Path(path).open("w", encoding="utf-8") as f:
        for log in logs:
            f.write(json.dumps(log.to_json_dict()) + "\n")
