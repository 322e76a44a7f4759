"""Prompt rendering and structured-response parsing for the language oracles.

Templates live in ``templates/*.txt`` and are filled with plain string
replacement, so literal braces in the template text need no escaping.
"""
from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Mapping, Sequence

from ..core import InvalidInputError

VIEW_TAGS = ("FRONT", "WRIST")


class PlannerParseError(ValueError):
    """Planner output could not be parsed or validated; ``raw`` holds the text."""

    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


class DecisionKind(str, enum.Enum):
    TRANSIT = "transit"
    BACKTRACK = "backtrack"


LIKELIHOODS = ("high", "medium", "low")
AGREEMENTS = ("agree", "partial", "disagree")


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    return resources.files(__package__).joinpath("templates", f"{name}.txt").read_text(encoding="utf-8")


def _fill(template: str, values: Mapping[str, str]) -> str:
    for key, val in values.items():
        template = template.replace("{" + key + "}", val)
    return template


def _require_text(name: str, value: str) -> str:
    if not isinstance(value, str) or not value.strip():
        raise InvalidInputError(f"{name} must be a nonempty string")
    return value


def format_subtask_list(subtasks: Sequence[str]) -> str:
    return json.dumps(list(subtasks), ensure_ascii=False)


def format_primitive_dict(primitives: Sequence[str]) -> str:
    return "{" + ", ".join(f"{i}: {json.dumps(p, ensure_ascii=False)}" for i, p in enumerate(primitives)) + "}"


def render_subtask_prompt(instruction: str) -> str:
    _require_text("instruction", instruction)
    return _fill(load_template("subtask_proposal"), {"language_instruction": instruction})


def render_boundary_prompt(instruction: str, subtasks: Sequence[str], primitives: Sequence[str]) -> str:
    _require_text("instruction", instruction)
    if not subtasks:
        raise InvalidInputError("subtask list is empty")
    if not primitives:
        raise InvalidInputError("primitive sequence is empty")
    return _fill(load_template("boundary_inference"), {
        "language_instruction": instruction,
        "subtasks": format_subtask_list(subtasks),
        "trajectory_features": format_primitive_dict(primitives),
    })


@dataclass(frozen=True)
class PlannerRequest:
    """Rendered planner text plus the two tagged camera views."""

    text: str
    views: tuple[tuple[str, str], ...]

    def to_messages(self) -> list[dict]:
        content: list[dict] = [{"type": "text", "text": self.text}]
        for tag, ref in self.views:
            content.append({"type": "text", "text": f"{tag}:"})
            content.append({"type": "image_url", "image_url": {"url": ref}})
        return [{"role": "user", "content": content}]


def render_planner_prompt(instruction: str, subtasks: Sequence[str], current: str,
                          views: Mapping[str, str]) -> PlannerRequest:
    _require_text("instruction", instruction)
    if current not in subtasks:
        raise InvalidInputError(f"current subtask {current!r} not in the subtask list")
    if set(views) != set(VIEW_TAGS):
        raise InvalidInputError(f"planner needs exactly the views {VIEW_TAGS}, got {sorted(views)}")
    for tag in VIEW_TAGS:
        _require_text(f"{tag} view", views[tag])
    text = _fill(load_template("failure_planner"), {
        "language_instruction": instruction,
        "subtasks": format_subtask_list(subtasks),
        "current_subtask": current,
    })
    return PlannerRequest(text, tuple((tag, views[tag]) for tag in VIEW_TAGS))


# -- planner decisions ------------------------------------------------------

@dataclass(frozen=True)
class PlannerDecision:
    next_subtask: str
    kind: DecisionKind
    reason: str
    front_evidence: tuple[str, ...] = ()
    wrist_evidence: tuple[str, ...] = ()
    success_likelihood: str = "high"
    key_risks: str = "none"
    view_agreement: str = "agree"
    view_note: str = ""
    decision_basis: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", DecisionKind(self.kind))
        object.__setattr__(self, "front_evidence", tuple(self.front_evidence))
        object.__setattr__(self, "wrist_evidence", tuple(self.wrist_evidence))
        if self.success_likelihood not in LIKELIHOODS:
            raise InvalidInputError(f"success_likelihood must be one of {LIKELIHOODS}")
        if self.view_agreement not in AGREEMENTS:
            raise InvalidInputError(f"view_agreement must be one of {AGREEMENTS}")

    def validate(self, subtasks: Sequence[str], current: str | int) -> int:
        """Check the decision against the subtask list; return the target index."""
        cur = current if isinstance(current, int) else list(subtasks).index(current)
        if self.next_subtask not in subtasks:
            raise InvalidInputError(f"next_subtask {self.next_subtask!r} is not in the subtask list")
        j = list(subtasks).index(self.next_subtask)
        if self.kind is DecisionKind.TRANSIT and j not in (cur, cur + 1):
            raise InvalidInputError(f"transit must name the current or following subtask, got index {j}")
        if self.kind is DecisionKind.BACKTRACK and j > cur:
            raise InvalidInputError(f"backtrack target {j} is after the current subtask {cur}")
        return j

    def to_json_dict(self) -> dict:
        return {
            "next_subtask": self.next_subtask,
            "type": self.kind.value,
            "reason": self.reason,
            "front_view_evidence": list(self.front_evidence),
            "wrist_view_evidence": list(self.wrist_evidence),
            "assessment": {
                "success_likelihood": self.success_likelihood,
                "key_risks": self.key_risks,
                "view_agreement": self.view_agreement,
                "view_note": self.view_note,
                "decision_basis": self.decision_basis,
            },
        }


def format_decision(d: PlannerDecision) -> str:
    """Render a decision in the planner's output format."""
    agreement = f"{d.view_agreement}; {d.view_note}" if d.view_note else d.view_agreement
    lines = [f"next_subtask: {d.next_subtask}", f"type: {d.kind.value}", f"reason: {d.reason}", "",
             "front_view_evidence:"]
    lines += [f"  - {e}" for e in d.front_evidence]
    lines += ["", "wrist_view_evidence:"]
    lines += [f"  - {e}" for e in d.wrist_evidence]
    lines += ["", "assessment:",
              f"  - success_likelihood: {d.success_likelihood}",
              f"  - key_risks: {d.key_risks}",
              f"  - view_agreement: {agreement}",
              f"  - decision_basis: {d.decision_basis}"]
    return "\n".join(lines) + "\n"


_FENCE = re.compile(r"^\s*```[\w-]*\s*$")
_KEY = re.compile(r"^[\s>*_-]*\**([a-z_]+)\**\s*:\s*(.*)$", re.IGNORECASE)
_TOP = ("next_subtask", "type", "reason")
_SECTIONS = ("front_view_evidence", "wrist_view_evidence", "assessment")
_ASSESS = ("success_likelihood", "key_risks", "view_agreement", "decision_basis")


def _strip_md(s: str) -> str:
    return s.strip().strip("*`").strip()


def parse_planner_response(text: str, subtasks: Sequence[str] | None = None,
                           current: str | int | None = None) -> PlannerDecision:
    """Parse planner output; raises :class:`PlannerParseError` with the raw text."""
    top: dict[str, str] = {}
    sections: dict[str, list[str]] = {}
    assess: dict[str, str] = {}
    section: str | None = None
    last_top: str | None = None
    lines = text.splitlines()
    fences = [i for i, ln in enumerate(lines) if _FENCE.match(ln)]
    if len(fences) >= 2:
        # prose around a fenced answer is ignored
        lines = lines[fences[0] + 1:fences[-1]]
    for raw_line in lines:
        if _FENCE.match(raw_line):
            continue
        line = raw_line.rstrip()
        if not line.strip():
            last_top = None
            continue
        bullet = line.lstrip().startswith(("-", "*")) and not line.lstrip().startswith("**")
        m = _KEY.match(line)
        key = m.group(1).lower() if m else None
        if key in _TOP and not (section and bullet):
            if key in top:
                raise PlannerParseError(f"duplicate field {key!r}", text)
            top[key] = _strip_md(m.group(2))
            section, last_top = None, key
        elif key in _SECTIONS and not bullet:
            if key in sections:
                raise PlannerParseError(f"duplicate section {key!r}", text)
            sections[key] = []
            section, last_top = key, None
        elif section == "assessment" and bullet and key in _ASSESS:
            assess[key] = _strip_md(m.group(2))
        elif section in ("front_view_evidence", "wrist_view_evidence") and bullet:
            sections[section].append(_strip_md(line.lstrip()[1:]))
        elif last_top == "reason":
            top["reason"] = f"{top['reason']} {line.strip()}".strip()
        else:
            raise PlannerParseError(f"unexpected line {line.strip()!r}", text)

    missing = [k for k in _TOP if not top.get(k)] + [k for k in _SECTIONS if k not in sections] \
        + [k for k in _ASSESS if not assess.get(k)]
    if missing:
        raise PlannerParseError(f"missing fields: {', '.join(missing)}", text)
    kind = top["type"].lower()
    if kind not in (k.value for k in DecisionKind):
        raise PlannerParseError(f"type must be transit or backtrack, got {top['type']!r}", text)
    agreement, _, note = assess["view_agreement"].partition(";")
    try:
        decision = PlannerDecision(
            next_subtask=top["next_subtask"],
            kind=DecisionKind(kind),
            reason=top["reason"],
            front_evidence=tuple(sections["front_view_evidence"]),
            wrist_evidence=tuple(sections["wrist_view_evidence"]),
            success_likelihood=assess["success_likelihood"].lower(),
            key_risks=assess["key_risks"],
            view_agreement=agreement.strip().lower(),
            view_note=note.strip(),
            decision_basis=assess["decision_basis"],
        )
        if subtasks is not None:
            decision.validate(subtasks, current if current is not None else decision.next_subtask)
    except (InvalidInputError, ValueError) as e:
        raise PlannerParseError(str(e), text) from e
    return decision


# -- subtask proposal and boundary responses --------------------------------

def parse_subtask_response(text: str) -> list[str]:
    m = re.search(r"Subtasks\s*:\s*(\[.*?\])", text, re.DOTALL)
    if not m:
        raise InvalidInputError("no 'Subtasks: [...]' list in response")
    try:
        subtasks = json.loads(m.group(1))
    except json.JSONDecodeError as e:
        raise InvalidInputError(f"malformed subtask list: {e}") from e
    if not subtasks or not all(isinstance(s, str) and s.strip() for s in subtasks):
        raise InvalidInputError("subtask list must hold nonempty strings")
    return [s.strip() for s in subtasks]


@dataclass(frozen=True)
class BoundaryResponse:
    labeled: dict[str, tuple[int, int]]
    reasoning: str = ""
    order: tuple[str, ...] = field(default=())

    def ranges(self, subtasks: Sequence[str]) -> list[tuple[int, int]]:
        missing = [s for s in subtasks if s not in self.labeled]
        if missing:
            raise InvalidInputError(f"boundary response lacks subtasks: {missing}")
        return [self.labeled[s] for s in subtasks]

    def to_text(self) -> str:
        body = ", ".join(f"{json.dumps(k, ensure_ascii=False)}: [{s}, {e}]" for k, (s, e) in self.labeled.items())
        return f"Labeled_dict: {{{body}}}\nReasoning: {json.dumps(self.reasoning, ensure_ascii=False)}\n"


def parse_boundary_response(text: str, subtasks: Sequence[str]) -> BoundaryResponse:
    start = text.find("Labeled_dict")
    start = text.find("{", start if start >= 0 else 0)
    if start < 0:
        raise InvalidInputError("no labeled dictionary in boundary response")
    depth = 0
    for end in range(start, len(text)):
        depth += {"{": 1, "}": -1}.get(text[end], 0)
        if depth == 0:
            break
    else:
        raise InvalidInputError("unterminated labeled dictionary")
    try:
        raw = json.loads(text[start:end + 1])
    except json.JSONDecodeError as e:
        raise InvalidInputError(f"malformed labeled dictionary: {e}") from e
    labeled: dict[str, tuple[int, int]] = {}
    for key, rng in raw.items():
        m = re.fullmatch(r"subtask_(\d+)", key)
        name = key if key in subtasks else (subtasks[int(m.group(1)) - 1] if m and 0 < int(m.group(1)) <= len(subtasks) else None)
        if name is None:
            raise InvalidInputError(f"unknown subtask {key!r} in boundary response")
        if not (isinstance(rng, list) and len(rng) == 2 and all(isinstance(v, int) for v in rng)):
            raise InvalidInputError(f"range for {key!r} must be [start, end]")
        labeled[name] = (rng[0], rng[1])
    reasoning = ""
    m = re.search(r"Reasoning\s*:\s*(.*)", text[end + 1:], re.DOTALL)
    if m:
        reasoning = m.group(1).strip()
        if reasoning.startswith('"') and reasoning.endswith('"'):
            try:
                reasoning = json.loads(reasoning)
            except json.JSONDecodeError:
                reasoning = reasoning[1:-1]
    return BoundaryResponse(labeled, reasoning, tuple(labeled))
