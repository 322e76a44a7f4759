"""Demonstration segmentation into subtasks and 9-dim training labels.

Pipeline: windowed movement primitives -> gripper vote segments -> idle
filtering -> subtask alignment (direct pairing when counts match, boundary
oracle otherwise) -> labeled dataset with stop/progress targets.

Axis words: forward/backward = +x/-x, left/right = +y/-y, up/down = +z/-z,
tilt up/down = +pitch/-pitch, rotate counterclockwise/clockwise = +yaw/-yaw.
Roll has no word and is ignored.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .core import (
    ActionStep,
    InvalidInputError,
    RobotState,
    Subtask,
    TilingError,
    TrajectoryLog,
    validate_tiling,
)

log = logging.getLogger(__name__)

MAX_FINGER_DISTANCE = 0.04
GRIP_VOTE_THRESHOLDS = (0.028, 0.030, 0.032)
GRID_POINTS = 50
GRID_HALF_WIDTH = 0.01
GRID_FLOOR = 1e-4
OVERLAP_WEIGHT = 1.0
STOP_WEIGHT = 2.5
LAST_STEP_WEIGHT = 8

# (positive word, negative word) per state component x, y, z, roll, pitch, yaw
AXIS_WORDS: tuple[tuple[str, str] | None, ...] = (
    ("move forward", "move backward"),
    ("move left", "move right"),
    ("move up", "move down"),
    None,
    ("tilt up", "tilt down"),
    ("rotate counterclockwise", "rotate clockwise"),
)
TRANSLATION_WORDS = frozenset(w for pair in AXIS_WORDS[:3] for w in pair)
CLOSE_WORD = "close gripper"
OPEN_WORD = "open gripper"
GRIPPER_WORDS = frozenset((CLOSE_WORD, OPEN_WORD))


class AlignmentUnavailable(RuntimeError):
    """Counts mismatch and the boundary oracle could not supply boundaries."""


@dataclass(frozen=True)
class Thresholds:
    trans: float = 0.02
    rot: float = 0.0075
    grip: float = 0.03

    def __post_init__(self) -> None:
        if not (self.trans > 0 and self.rot > 0 and self.grip > 0):
            raise InvalidInputError("thresholds must be positive")

    @classmethod
    def parse(cls, text: str) -> "Thresholds":
        parts = [float(p) for p in text.replace(" ", "").split(",")]
        if len(parts) != 3:
            raise InvalidInputError("thresholds need three comma-separated values: trans,rot,grip")
        return cls(*parts)


@dataclass(frozen=True)
class MovementLabel:
    components: tuple[str, ...] = ()

    @property
    def is_stop(self) -> bool:
        return not self.components

    @property
    def has_translation(self) -> bool:
        return any(c in TRANSLATION_WORDS for c in self.components)

    @property
    def gripper(self) -> int:
        """-1 closing, +1 opening, 0 idle."""
        if CLOSE_WORD in self.components:
            return -1
        if OPEN_WORD in self.components:
            return 1
        return 0

    @property
    def text(self) -> str:
        return ", ".join(self.components) if self.components else "stop"

    def __str__(self) -> str:
        return self.text


@dataclass(frozen=True)
class GripperSegment:
    label: int
    start: int
    end: int

    @property
    def length(self) -> int:
        return self.end - self.start + 1


@dataclass
class SubtaskPlan:
    subtasks: list[Subtask]
    method: str = "direct"
    warnings: list[str] = field(default_factory=list)

    @property
    def instructions(self) -> list[str]:
        return [s.instruction for s in self.subtasks]

    def to_json_dict(self) -> dict:
        return {"method": self.method, "warnings": list(self.warnings),
                "subtasks": [{"instruction": s.instruction, "start": s.start, "end": s.end} for s in self.subtasks]}


@dataclass(frozen=True)
class LabeledRecord:
    observation: str
    target: ActionStep
    instruction: str
    weight: int

    def to_json_dict(self) -> dict:
        return {"observation": self.observation, "action": self.target.to_list(),
                "instruction": self.instruction, "weight": self.weight}


@dataclass
class LabeledDataset:
    records: list[LabeledRecord]

    def __len__(self) -> int:
        return len(self.records)


# -- primitives ---------------------------------------------------------------

def normalize_gripper(p1: float, p2: float) -> float:
    """Finger positions (m) -> opening fraction in [0, 1]."""
    return min(1.0, max(0.0, abs(p1 - p2) / MAX_FINGER_DISTANCE))


def _state_matrix(log_: TrajectoryLog) -> np.ndarray:
    return np.array([[*s.pos, *s.rot, s.gripper_width] for s in log_.states], dtype=np.float64)


def _window_deltas(log_: TrajectoryLog, window: int) -> np.ndarray:
    """(T, 7) deltas state[t+window] - state[t]; the last ``window`` rows repeat the last computable one."""
    if window < 1:
        raise InvalidInputError("window must be >= 1")
    T = len(log_)
    if T <= window:
        raise InvalidInputError(f"log has {T} steps; need more than window={window}")
    s = _state_matrix(log_)
    n = T - window
    d = s[window:window + n] - s[:n]
    # rotations compared on the circle
    d[:, 3:6] = np.remainder(d[:, 3:6] + math.pi, 2.0 * math.pi) - math.pi
    return np.concatenate([d, np.repeat(d[-1:], window, axis=0)])


def _label_row(row: np.ndarray, th: Thresholds) -> MovementLabel:
    comps = []
    for axis, words in enumerate(AXIS_WORDS):
        if words is None:
            continue
        limit = th.trans if axis < 3 else th.rot
        if row[axis] > limit:
            comps.append(words[0])
        elif row[axis] < -limit:
            comps.append(words[1])
    if row[6] < -th.grip:
        comps.append(CLOSE_WORD)
    elif row[6] > th.grip:
        comps.append(OPEN_WORD)
    return MovementLabel(tuple(comps))


def extract_primitives(log_: TrajectoryLog, th: Thresholds = Thresholds(), window: int = 4) -> list[MovementLabel]:
    return [_label_row(r, th) for r in _window_deltas(log_, window)]


def _score_counts(deltas: np.ndarray, th: Thresholds, trans: float) -> tuple[int, int]:
    moving_t = (np.abs(deltas[:, 0:3]) > trans).any(axis=1)
    moving_r = (np.abs(deltas[:, [4, 5]]) > th.rot).any(axis=1)
    grip = np.abs(deltas[:, 6]) > th.grip
    overlaps = int(np.count_nonzero(moving_t & grip))
    stops = int(np.count_nonzero(~moving_t & ~moving_r & ~grip))
    return overlaps, stops


def threshold_score(labels: Sequence[MovementLabel]) -> float:
    overlaps = sum(1 for lab in labels if lab.has_translation and lab.gripper != 0)
    stops = sum(1 for lab in labels if lab.is_stop)
    return OVERLAP_WEIGHT * overlaps + STOP_WEIGHT * stops


@dataclass(frozen=True)
class ThresholdSearch:
    thresholds: Thresholds
    score: float
    candidates: tuple[float, ...]
    scores: tuple[float, ...]


def threshold_grid(tau: float) -> np.ndarray:
    return np.maximum(np.linspace(tau - GRID_HALF_WIDTH, tau + GRID_HALF_WIDTH, GRID_POINTS), GRID_FLOOR)


def search_trans_threshold(log_: TrajectoryLog, th: Thresholds = Thresholds(), window: int = 4) -> ThresholdSearch:
    """Grid search over the translation threshold; only ``trans`` changes.

    The starting value itself is scored too, so a flat objective keeps it.
    """
    deltas = _window_deltas(log_, window)
    tau0 = th.trans
    cands = [tau0, *(float(x) for x in threshold_grid(tau0))]
    scores = []
    for c in cands:
        o, s = _score_counts(deltas, th, c)
        scores.append(OVERLAP_WEIGHT * o + STOP_WEIGHT * s)
    best = min(range(len(cands)), key=lambda i: (scores[i], abs(cands[i] - tau0), cands[i]))
    return ThresholdSearch(replace(th, trans=cands[best]), scores[best], tuple(cands), tuple(scores))


def optimize_trans_threshold(log_: TrajectoryLog, th: Thresholds = Thresholds(), window: int = 4) -> Thresholds:
    return search_trans_threshold(log_, th, window).thresholds


# -- gripper segments ---------------------------------------------------------

def round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def gripper_votes(log_: TrajectoryLog, window: int = 4,
                  thresholds: Sequence[float] = GRIP_VOTE_THRESHOLDS) -> list[int]:
    dg = _window_deltas(log_, window)[:, 6]
    out = []
    for d in dg:
        votes = [(-1 if d < -g else 1 if d > g else 0) for g in thresholds]
        out.append(round_half_away(sum(votes) / len(votes)))
    return out


def segments_from_labels(labels: Sequence[int]) -> list[GripperSegment]:
    segs: list[GripperSegment] = []
    start = 0
    for t in range(1, len(labels) + 1):
        if t == len(labels) or labels[t] != labels[start]:
            segs.append(GripperSegment(labels[start], start, t - 1))
            start = t
    return segs


def detect_gripper_segments(log_: TrajectoryLog, window: int = 4,
                            thresholds: Sequence[float] = GRIP_VOTE_THRESHOLDS) -> list[GripperSegment]:
    return segments_from_labels(gripper_votes(log_, window, thresholds))


def check_segments(segs: Sequence[GripperSegment], n_steps: int | None = None) -> None:
    if not segs:
        raise TilingError("no segments")
    expected = 0
    for a, b in zip(segs, segs[1:]):
        if a.label == b.label:
            raise TilingError(f"adjacent segments share label {a.label} at {b.start}")
    for s in segs:
        if s.start != expected or s.end < s.start:
            raise TilingError(f"segment {s} breaks tiling at {expected}")
        expected = s.end + 1
    if n_steps is not None and expected != n_steps:
        raise TilingError(f"segments cover {expected} steps, trajectory has {n_steps}")


def filter_idle_segments(segs: Sequence[GripperSegment]) -> list[GripperSegment]:
    """Absorb short idle gaps inside a same-label gripper run, to a fixpoint."""
    out = list(segs)
    changed = True
    while changed:
        changed = False
        for i in range(1, len(out) - 1):
            left, mid, right = out[i - 1], out[i], out[i + 1]
            if mid.label == 0 and left.label == right.label != 0 and left.length + right.length > mid.length:
                out[i - 1:i + 2] = [GripperSegment(left.label, left.start, right.end)]
                changed = True
                break
    return out


# -- alignment ----------------------------------------------------------------

def downsample_primitives(labels: Sequence, max_len: int = 100) -> tuple[list, list[int], int]:
    """Keep every ``stride``-th label; returns (labels, kept indices, stride)."""
    if not labels:
        raise InvalidInputError("no labels to downsample")
    if max_len < 1:
        raise InvalidInputError("max_len must be >= 1")
    T = len(labels)
    if T <= max_len:
        return list(labels), list(range(T)), 1
    stride = -(-T // max_len)
    idx = list(range(0, T, stride))
    return [labels[i] for i in idx], idx, stride


def project_boundary(b: int, stride: int, T: int) -> int:
    return min(T - 1, max(0, b * stride))


def _clamp_overlaps(ranges: list[tuple[int, int]], names: Sequence[str], warnings: list[str]) -> list[tuple[int, int]]:
    out = list(ranges)
    for i in range(len(out) - 1):
        (s0, e0), (s1, e1) = out[i], out[i + 1]
        if e0 >= s1:
            mid = (e0 + s1) // 2
            warnings.append(f"overlap between {names[i]!r} and {names[i + 1]!r} at [{s1}, {e0}] clamped at {mid}")
            out[i] = (s0, mid)
            out[i + 1] = (mid + 1, e1)
    return out


BoundaryOracleFn = Callable[[str, Sequence[str], Sequence[str]], object]


def align_subtasks(subtasks: Sequence[str], segments: Sequence[GripperSegment], log_: TrajectoryLog,
                   boundary_oracle: BoundaryOracleFn | None, instruction: str = "",
                   primitives: Sequence[MovementLabel] | None = None, max_len: int = 100,
                   th: Thresholds = Thresholds(), window: int = 4) -> SubtaskPlan:
    if not subtasks:
        raise InvalidInputError("empty subtask list")
    T = len(log_)
    check_segments(segments, T)
    warnings: list[str] = []
    if len(subtasks) == len(segments):
        ranges = [(s.start, s.end) for s in segments]
        method = "direct"
    else:
        if boundary_oracle is None:
            raise AlignmentUnavailable(f"{len(subtasks)} subtasks vs {len(segments)} segments and no boundary oracle")
        prims = list(primitives) if primitives is not None else extract_primitives(log_, th, window)
        small, _, stride = downsample_primitives([p.text for p in prims], max_len)
        try:
            resp = boundary_oracle(instruction, list(subtasks), small)
            local = resp.ranges(subtasks)
        except Exception as e:
            raise AlignmentUnavailable(f"boundary oracle failed: {e}") from e
        local = _clamp_overlaps(local, subtasks, warnings)
        validate_tiling([Subtask(n, s, e) for n, (s, e) in zip(subtasks, local)], len(small))
        starts = [project_boundary(s, stride, T) for s, _ in local]
        ranges = [(starts[i], (starts[i + 1] - 1) if i + 1 < len(starts) else T - 1) for i in range(len(starts))]
        method = "oracle"
    ranges = _clamp_overlaps(ranges, subtasks, warnings)
    for w in warnings:
        log.warning(w)
    plan = [Subtask(n, s, e) for n, (s, e) in zip(subtasks, ranges)]
    validate_tiling(plan, T)
    return SubtaskPlan(plan, method, warnings)


# -- dataset emission -----------------------------------------------------------

def progress_label(t: int, start: int, end: int) -> float:
    if t == end:
        return 1.0
    return (10 * (t - start) // (end - start + 1)) / 10.0


def emit_dataset(plan: SubtaskPlan, log_: TrajectoryLog, log_id: str = "traj") -> LabeledDataset:
    validate_tiling(plan.subtasks, len(log_))
    records = []
    for sub in plan.subtasks:
        for t in range(sub.start, sub.end + 1):
            a = log_.executed[t]
            last = t == sub.end
            target = ActionStep(a.dpos, a.drot, min(1.0, max(0.0, a.gripper)), 1.0 if last else 0.0,
                                progress_label(t, sub.start, sub.end))
            records.append(LabeledRecord(f"{log_id}/{t}", target, sub.instruction, LAST_STEP_WEIGHT if last else 1))
    return LabeledDataset(records)


# -- raw ingestion ------------------------------------------------------------

def axis_angle_to_euler(v: Sequence[float]) -> tuple[float, float, float]:
    from scipy.spatial.transform import Rotation

    return tuple(float(x) for x in Rotation.from_rotvec(np.asarray(v, dtype=np.float64)).as_euler("xyz"))


def ingest_raw(record: dict) -> TrajectoryLog:
    """Convert a raw demonstration record into a :class:`TrajectoryLog`.

    Expected keys: ``ee_pos`` (T+1 x 3), ``ee_axis_angle`` (T+1 x 3),
    ``finger_positions`` (T+1 x 2) and ``actions`` (T x 7: deltas plus a
    gripper command in [-1, 1], -1 = open). Other keys pass through as meta.
    """
    pos, aa, fingers, actions = (record[k] for k in ("ee_pos", "ee_axis_angle", "finger_positions", "actions"))
    if not (len(pos) == len(aa) == len(fingers) == len(actions) + 1):
        raise InvalidInputError("raw record needs T+1 states for T actions")
    states = [RobotState(tuple(p), axis_angle_to_euler(r), normalize_gripper(*f)) for p, r, f in zip(pos, aa, fingers)]
    steps = [ActionStep(tuple(a[0:3]), tuple(a[3:6]), 1.0 if a[6] > 0 else 0.0) for a in actions]
    meta = {k: v for k, v in record.items() if k not in ("ee_pos", "ee_axis_angle", "finger_positions", "actions")}
    return TrajectoryLog(states, steps, meta=meta)


# -- full pipeline and reports ----------------------------------------------------

@dataclass
class Decomposition:
    plan: SubtaskPlan
    thresholds: Thresholds
    segments: list[GripperSegment]
    primitives: list[MovementLabel]
    dataset: LabeledDataset


def decompose_log(log_: TrajectoryLog, subtasks: Sequence[str] | None = None,
                  proposer: Callable[[str], list[str]] | None = None,
                  boundary_oracle: BoundaryOracleFn | None = None, th: Thresholds = Thresholds(),
                  max_len: int = 100, window: int = 4, optimize: bool = True, log_id: str = "traj") -> Decomposition:
    instruction = str(log_.meta.get("instruction", ""))
    if subtasks is None:
        subtasks = log_.meta.get("subtask_instructions")
    if subtasks is None:
        if proposer is None:
            raise InvalidInputError("no subtask list and no proposer")
        subtasks = proposer(instruction)
    if optimize:
        th = optimize_trans_threshold(log_, th, window)
    prims = extract_primitives(log_, th, window)
    segs = filter_idle_segments(detect_gripper_segments(log_, window))
    check_segments(segs, len(log_))
    plan = align_subtasks(subtasks, segs, log_, boundary_oracle, instruction, prims, max_len, th, window)
    return Decomposition(plan, th, segs, prims, emit_dataset(plan, log_, log_id))


@dataclass(frozen=True)
class BoundaryErrors:
    absolute: tuple[int, ...]
    n_steps: int

    @property
    def mean_abs(self) -> float:
        return float(np.mean(self.absolute)) if self.absolute else 0.0

    @property
    def mean_rel_percent(self) -> float:
        return 100.0 * self.mean_abs / self.n_steps

    def to_json_dict(self) -> dict:
        return {"absolute_steps": list(self.absolute), "mean_abs_steps": self.mean_abs,
                "mean_rel_percent": self.mean_rel_percent, "n_steps": self.n_steps}


def boundary_errors(pred: Sequence[Subtask], truth: Sequence[Subtask], n_steps: int) -> BoundaryErrors:
    """Absolute deviation of each internal boundary (subtask starts after the first)."""
    if len(pred) != len(truth):
        raise InvalidInputError(f"{len(pred)} predicted vs {len(truth)} true subtasks")
    return BoundaryErrors(tuple(abs(p.start - q.start) for p, q in zip(pred[1:], truth[1:])), n_steps)
