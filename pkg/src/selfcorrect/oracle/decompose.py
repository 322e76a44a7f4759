"""Subtask proposal and boundary inference backends."""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Protocol, Sequence

from ..core import InvalidInputError
from ..sim import chain_instructions
from .client import ChatBackend
from .prompts import (
    BoundaryResponse,
    parse_boundary_response,
    parse_subtask_response,
    render_boundary_prompt,
    render_subtask_prompt,
)

CLOSE_WORD = "close gripper"
OPEN_WORD = "open gripper"


class SubtaskProposer(Protocol):
    def __call__(self, instruction: str) -> list[str]: ...


class BoundaryOracle(Protocol):
    def __call__(self, instruction: str, subtasks: Sequence[str], primitives: Sequence[str]) -> BoundaryResponse: ...


_PUT = re.compile(r"(?:put|place|pick up)\s+the\s+(.+?)\s+(?:on|in|into|onto)\s+the\s+(.+?)(?=\s+and\s+|\s*$)",
                  re.IGNORECASE)


def propose_subtasks_scripted(instruction: str) -> list[str]:
    """Offline proposer for "put the X on the Y [and put ...]" instructions."""
    matches = _PUT.findall(instruction.strip().rstrip("."))
    if not matches:
        raise InvalidInputError(f"cannot decompose instruction {instruction!r} offline")
    out: list[str] = []
    for obj, target in matches:
        out += chain_instructions(obj, target)
    return out


@dataclass
class ChatSubtaskProposer:
    client: ChatBackend

    def __call__(self, instruction: str) -> list[str]:
        text = self.client.complete([{"role": "user", "content": render_subtask_prompt(instruction)}])
        return parse_subtask_response(text)


def gripper_word(subtask: str) -> str | None:
    s = subtask.lower()
    if s.startswith("close the gripper"):
        return CLOSE_WORD
    if s.startswith("open the gripper"):
        return OPEN_WORD
    return None


def _runs(primitives: Sequence[str], word: str, min_len: int) -> list[tuple[int, int]]:
    out, start = [], None
    for i, p in enumerate([*primitives, ""]):
        if word in p:
            start = i if start is None else start
        elif start is not None:
            if i - start >= min_len:
                out.append((start, i - 1))
            start = None
    return out


def _split(lo: int, hi: int, n: int) -> list[tuple[int, int]]:
    """Split [lo, hi] into n contiguous nonempty-as-possible pieces."""
    length = hi - lo + 1
    bounds = [lo + (length * i) // n for i in range(n + 1)]
    return [(bounds[i], bounds[i + 1] - 1) for i in range(n)]


@dataclass
class ScriptedBoundaryOracle:
    """Rule-based boundary inference over a primitive sequence.

    Gripper subtasks are matched in order to runs of the matching gripper
    word (runs shorter than ``min_run`` are treated as noise); motion
    subtasks share the gaps between them evenly.
    """

    min_run: int = 2
    calls: int = 0

    def __call__(self, instruction: str, subtasks: Sequence[str], primitives: Sequence[str]) -> BoundaryResponse:
        self.calls += 1
        L = len(primitives)
        if not subtasks or L < len(subtasks):
            raise InvalidInputError("need at least one primitive per subtask")
        anchors: dict[int, tuple[int, int]] = {}
        pos = 0
        for k, s in enumerate(subtasks):
            word = gripper_word(s)
            if word is None:
                continue
            runs = [r for r in _runs(primitives, word, self.min_run) if r[0] >= pos] or \
                [r for r in _runs(primitives, word, 1) if r[0] >= pos]
            if runs:
                anchors[k] = runs[0]
                pos = runs[0][1] + 1
        ranges: list[tuple[int, int] | None] = [None] * len(subtasks)
        for k, r in anchors.items():
            ranges[k] = r
        # stretch the last anchor to the end when nothing follows it
        if anchors:
            last = max(anchors)
            if last == len(subtasks) - 1:
                ranges[last] = (anchors[last][0], L - 1)
        k = 0
        while k < len(subtasks):
            if ranges[k] is not None:
                k += 1
                continue
            m = k
            while m < len(subtasks) and ranges[m] is None:
                m += 1
            lo = ranges[k - 1][1] + 1 if k > 0 else 0
            hi = ranges[m][0] - 1 if m < len(subtasks) else L - 1
            if hi - lo + 1 < m - k:
                return self._even(subtasks, L)
            for i, piece in zip(range(k, m), _split(lo, hi, m - k)):
                ranges[i] = piece
            k = m
        # absorb gaps left between adjacent anchors into the earlier range
        for i in range(len(ranges) - 1):
            if ranges[i][1] + 1 < ranges[i + 1][0]:
                ranges[i] = (ranges[i][0], ranges[i + 1][0] - 1)
        if ranges[0][0] != 0:
            ranges[0] = (0, ranges[0][1])
        labeled = {s: r for s, r in zip(subtasks, ranges)}
        return BoundaryResponse(labeled, "gripper runs anchor grasp and release; motion fills the gaps",
                                tuple(subtasks))

    @staticmethod
    def _even(subtasks: Sequence[str], L: int) -> BoundaryResponse:
        labeled = {s: r for s, r in zip(subtasks, _split(0, L - 1, len(subtasks)))}
        return BoundaryResponse(labeled, "no usable gripper runs; even split", tuple(subtasks))


@dataclass
class ChatBoundaryOracle:
    client: ChatBackend

    def __call__(self, instruction: str, subtasks: Sequence[str], primitives: Sequence[str]) -> BoundaryResponse:
        prompt = render_boundary_prompt(instruction, subtasks, primitives)
        text = self.client.complete([{"role": "user", "content": prompt}])
        return parse_boundary_response(text, subtasks)
