from __future__ import annotations

import hashlib
import json
from pathlib import Path

import pytest
import requests
from hypothesis import given, settings
from hypothesis import strategies as st

from selfcorrect.core import ActionStep, InvalidInputError
from selfcorrect.oracle import (
    DECOMPOSITION_CONFIG,
    PLANNER_CONFIG,
    BoundaryResponse,
    ChatBoundaryOracle,
    ChatPlanner,
    ChatSubtaskProposer,
    DecisionKind,
    HttpChatClient,
    OracleClientConfig,
    OracleUnavailable,
    PlannerDecision,
    PlannerParseError,
    PlannerQuery,
    ReplayClient,
    ScriptedBoundaryOracle,
    ScriptedPlanner,
    format_decision,
    parse_boundary_response,
    parse_planner_response,
    parse_subtask_response,
    propose_subtasks_scripted,
    render_boundary_prompt,
    render_planner_prompt,
    render_subtask_prompt,
)
from selfcorrect.sim import SimEnv, expert_chunk, make_scenario

HERE = Path(__file__).parent
GOLDEN = HERE / "golden"
FIXTURES = HERE / "fixtures"
SUBS = ["Move the gripper to the red block", "Close the gripper to grasp the red block",
        "Move the gripper with the red block to the plate", "Open the gripper to release the red block on the plate"]
PRIMS = ["move forward, move down", "move down", "stop", "close gripper", "move up", "move left", "open gripper"]
VIEWS = {"FRONT": "sim://front/0", "WRIST": "sim://wrist/0"}


def sha(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


# -- rendering -----------------------------------------------------------------

def test_subtask_prompt_golden():
    out = render_subtask_prompt("open the drawer")
    assert out == (GOLDEN / "subtask_prompt.txt").read_text(encoding="utf-8")
    assert sha(out) == sha((GOLDEN / "subtask_prompt.txt").read_text(encoding="utf-8"))
    assert '1) "Move the gripper ..."' in out
    assert "1. Task: open the drawer\n" in out


def test_boundary_prompt_golden():
    out = render_boundary_prompt("put the red block on the plate", SUBS, PRIMS)
    assert out == (GOLDEN / "boundary_prompt.txt").read_text(encoding="utf-8")
    assert 'Do NOT segment a new subtask just because you see a "stop".' in out


def test_planner_prompt_golden():
    req = render_planner_prompt("put the red block on the plate", SUBS, SUBS[2], VIEWS)
    assert req.text == (GOLDEN / "planner_prompt.txt").read_text(encoding="utf-8")
    assert "Default to transit when success appears reasonably likely" in req.text


def test_rendering_is_pure():
    a = render_boundary_prompt("x", SUBS, PRIMS)
    b = render_boundary_prompt("x", list(SUBS), tuple(PRIMS))
    assert a.encode() == b.encode()


def test_primitive_dictionary_keys():
    out = render_boundary_prompt("x", SUBS[:2], ["move up", "stop"])
    assert 'trajectory_features = {0: "move up", 1: "stop"}' in out


@pytest.mark.parametrize("bad", ["", "   "])
def test_empty_instruction_rejected(bad):
    with pytest.raises(InvalidInputError):
        render_subtask_prompt(bad)
    with pytest.raises(InvalidInputError):
        render_boundary_prompt(bad, SUBS, PRIMS)


def test_planner_request_has_two_views():
    req = render_planner_prompt("put the red block on the plate", SUBS, SUBS[0], VIEWS)
    content = req.to_messages()[0]["content"]
    images = [c for c in content if c["type"] == "image_url"]
    assert [i["image_url"]["url"] for i in images] == ["sim://front/0", "sim://wrist/0"]
    assert [c["text"] for c in content if c["type"] == "text"][1:] == ["FRONT:", "WRIST:"]


def test_planner_request_validation():
    with pytest.raises(InvalidInputError):
        render_planner_prompt("x", SUBS, "Pick up the bowl", VIEWS)
    with pytest.raises(InvalidInputError):
        render_planner_prompt("x", SUBS, SUBS[0], {"FRONT": "a"})
    with pytest.raises(InvalidInputError):
        render_planner_prompt("x", SUBS, SUBS[0], {"FRONT": "a", "WRIST": "b", "SIDE": "c"})


# -- planner parsing -------------------------------------------------------------

def test_fenced_transcript_matches_hand_extraction():
    client = ReplayClient.from_file(FIXTURES / "planner_transcript.jsonl")
    expected = json.loads((FIXTURES / "planner_transcript_expected.json").read_text())
    for exp in expected:
        d = parse_planner_response(client.complete([]), SUBS, 2)
        assert d.to_json_dict() == exp


def test_well_formed_transit():
    text = format_decision(PlannerDecision(SUBS[2], "transit", "all good", decision_basis="clear"))
    assert parse_planner_response(text, SUBS, 1).kind is DecisionKind.TRANSIT


def test_mutated_fixtures_rejected():
    base = json.loads((FIXTURES / "planner_transcript_expected.json").read_text())[1]
    assert base["type"] == "transit"
    mutations = json.loads((FIXTURES / "planner_mutations.json").read_text())
    assert len(mutations) >= 10
    for name, text in mutations.items():
        with pytest.raises(PlannerParseError) as err:
            parse_planner_response(text, SUBS, 1)
        assert err.value.raw == text, name


def test_unmutated_base_parses_at_same_position():
    text = ReplayClient.from_file(FIXTURES / "planner_transcript.jsonl").responses[1]
    assert parse_planner_response(text, SUBS, 1).next_subtask == SUBS[2]


words = st.text(st.characters(whitelist_categories=("L", "N"), whitelist_characters=" ,.'"), min_size=1, max_size=40) \
    .map(str.strip).filter(lambda s: s and ";" not in s)
bullets = st.lists(words, max_size=5)


@st.composite
def decisions(draw):
    cur = draw(st.integers(0, len(SUBS) - 1))
    kind = draw(st.sampled_from(list(DecisionKind)))
    if kind is DecisionKind.TRANSIT:
        j = draw(st.sampled_from([cur, min(cur + 1, len(SUBS) - 1)]))
    else:
        j = draw(st.integers(0, cur))
    d = PlannerDecision(SUBS[j], kind, draw(words), tuple(draw(bullets)), tuple(draw(bullets)),
                        draw(st.sampled_from(["high", "medium", "low"])), draw(words),
                        draw(st.sampled_from(["agree", "partial", "disagree"])), draw(st.just("") | words),
                        draw(words))
    return d, cur


@settings(max_examples=200)
@given(decisions())
def test_format_parse_round_trip(dc):
    d, cur = dc
    assert parse_planner_response(format_decision(d), SUBS, cur) == d


def test_decision_validation_rules():
    assert PlannerDecision(SUBS[1], "transit", "r").validate(SUBS, 0) == 1
    assert PlannerDecision(SUBS[0], "transit", "r").validate(SUBS, 0) == 0
    with pytest.raises(InvalidInputError):
        PlannerDecision(SUBS[3], "transit", "r").validate(SUBS, 1)
    with pytest.raises(InvalidInputError):
        PlannerDecision(SUBS[2], "backtrack", "r").validate(SUBS, 1)
    assert PlannerDecision(SUBS[1], "backtrack", "r").validate(SUBS, 1) == 1


# -- subtask and boundary responses ------------------------------------------------

def test_parse_subtask_response():
    text = 'Subtasks: ["Move the gripper to the drawer handle", "Close the gripper to grasp the handle"]\nReasoning: "x"'
    assert parse_subtask_response(text) == ["Move the gripper to the drawer handle",
                                            "Close the gripper to grasp the handle"]
    with pytest.raises(InvalidInputError):
        parse_subtask_response("nothing here")


def test_parse_boundary_response_numbered_keys():
    text = ReplayClient.from_file(FIXTURES / "boundary_transcript.jsonl").responses[0]
    r = parse_boundary_response(text, SUBS)
    assert r.ranges(SUBS) == [(0, 2), (3, 3), (4, 5), (6, 6)]
    assert r.reasoning == "gripper closes at 3 and opens at 6"


def test_boundary_round_trip_by_name():
    r = BoundaryResponse({s: (i, i) for i, s in enumerate(SUBS)}, 'quote " inside')
    assert parse_boundary_response(r.to_text(), SUBS) == BoundaryResponse(r.labeled, r.reasoning, tuple(SUBS))


def test_boundary_unknown_key_rejected():
    with pytest.raises(InvalidInputError):
        parse_boundary_response('Labeled_dict: {"subtask_9": [0, 1]}', SUBS)


def test_chat_boundary_oracle_over_replay():
    oracle = ChatBoundaryOracle(ReplayClient.from_file(FIXTURES / "boundary_transcript.jsonl"))
    assert oracle("put the red block on the plate", SUBS, PRIMS).ranges(SUBS)[1] == (3, 3)


def test_chat_subtask_proposer_over_replay():
    client = ReplayClient(['Subtasks: ["Move the gripper to the handle", "Close the gripper"]'])
    assert ChatSubtaskProposer(client)("open the drawer") == ["Move the gripper to the handle", "Close the gripper"]


def test_scripted_proposer():
    assert propose_subtasks_scripted("put the red block on the plate") == SUBS
    assert len(propose_subtasks_scripted("put the red block on the plate and put the cup in the bowl")) == 8
    with pytest.raises(InvalidInputError):
        propose_subtasks_scripted("dance")


def test_scripted_boundary_oracle_anchors_gripper_runs():
    prims = ["move forward"] * 5 + ["close gripper"] * 3 + ["move up"] * 6 + ["open gripper"] * 4
    r = ScriptedBoundaryOracle()("x", SUBS, prims).ranges(SUBS)
    assert r == [(0, 4), (5, 7), (8, 13), (14, 17)]


# -- client -------------------------------------------------------------------------

class FakeResponse:
    def __init__(self, status, body=None):
        self.status_code, self._body = status, body

    def json(self):
        if self._body is None:
            raise ValueError("no body")
        return self._body


class FakeSession:
    def __init__(self, responses):
        self.responses, self.posts = list(responses), []

    def post(self, url, json, headers, timeout):
        self.posts.append((url, json, headers, timeout))
        r = self.responses.pop(0)
        if isinstance(r, Exception):
            raise r
        return r


def ok(text):
    return FakeResponse(200, {"choices": [{"message": {"content": text}}]})


def test_client_presets():
    assert (DECOMPOSITION_CONFIG.model, DECOMPOSITION_CONFIG.temperature) == ("gpt-4.1", 0.2)
    assert (PLANNER_CONFIG.model, PLANNER_CONFIG.temperature) == ("gpt-5.2", 1.0)
    assert OracleClientConfig(max_retries=3).delays() == [1.0, 2.0, 4.0]
    with pytest.raises(InvalidInputError):
        OracleClientConfig(temperature=2.5)
    with pytest.raises(InvalidInputError):
        OracleClientConfig(max_retries=-1)


def test_client_retries_then_succeeds(monkeypatch, tmp_path):
    monkeypatch.setenv("OPENAI_API_KEY", "k")
    sleeps = []
    session = FakeSession([FakeResponse(503), requests.ConnectionError("reset"), ok("hello")])
    tr = tmp_path / "t.jsonl"
    c = HttpChatClient(OracleClientConfig(endpoint="http://x/v1/"), session, sleeps.append, tr)
    assert c.complete([{"role": "user", "content": "hi"}]) == "hello"
    assert sleeps == [1.0, 2.0]
    url, payload, headers, _ = session.posts[0]
    assert url == "http://x/v1/chat/completions" and headers["Authorization"] == "Bearer k"
    assert payload["model"] == "gpt-5.2" and payload["temperature"] == 1.0
    entry = json.loads(tr.read_text())
    assert entry["response"] == "hello" and entry["attempts"] == 3
    assert ReplayClient.from_file(tr).complete([]) == "hello"


def test_client_gives_up_after_budget(monkeypatch, tmp_path):
    monkeypatch.setenv("OPENAI_API_KEY", "k")
    sleeps = []
    c = HttpChatClient(OracleClientConfig(max_retries=2), FakeSession([FakeResponse(500)] * 3), sleeps.append,
                       tmp_path / "t.jsonl")
    with pytest.raises(OracleUnavailable, match="3 attempts"):
        c.complete([])
    assert sleeps == [1.0, 2.0]
    assert json.loads((tmp_path / "t.jsonl").read_text())["error"] == "HTTP 500"


def test_client_does_not_retry_client_errors(monkeypatch):
    monkeypatch.setenv("OPENAI_API_KEY", "k")
    sleeps = []
    c = HttpChatClient(OracleClientConfig(), FakeSession([FakeResponse(400)]), sleeps.append)
    with pytest.raises(OracleUnavailable):
        c.complete([])
    assert sleeps == []


def test_client_requires_key(monkeypatch):
    monkeypatch.delenv("OPENAI_API_KEY", raising=False)
    with pytest.raises(OracleUnavailable):
        HttpChatClient(OracleClientConfig(), FakeSession([])).complete([])


def test_replay_exhaustion():
    r = ReplayClient(["a"])
    r.complete([])
    with pytest.raises(OracleUnavailable):
        r.complete([])


# -- planners -------------------------------------------------------------------------

def _query(world, script, k):
    return PlannerQuery(script.instruction, script.instructions, k, VIEWS, world, script)


def _expert_to(world, script, k):
    env = SimEnv(world, script)
    for idx in range(k + 1):
        for _ in range(30):
            for step in expert_chunk(env.world, script, idx).steps:
                env.execute(step)
    return env.world


def test_scripted_planner_transits_when_object_held():
    world, script = make_scenario("pick_place", 0)
    w = _expert_to(world, script, 1)
    assert w.held is not None
    d = ScriptedPlanner()(_query(w, script, 1))
    assert d.kind is DecisionKind.TRANSIT and d.next_subtask == script.instructions[2]


def test_scripted_planner_backtracks_to_grasp_after_drop():
    world, script = make_scenario("pick_place", 0)
    w = _expert_to(world, script, 1)
    env = SimEnv(w, script)
    env.execute(ActionStep(gripper=0.0))          # drop
    env.execute(ActionStep((0.0, 0.0, 0.05), gripper=0.0))
    d = ScriptedPlanner()(_query(env.world, script, 2))
    assert d.kind is DecisionKind.BACKTRACK
    assert d.next_subtask in script.instructions[:2]


def test_scripted_planner_deterministic_at_rho_zero():
    world, script = make_scenario("pick_place", 3)
    a = [ScriptedPlanner()(_query(world, script, k)) for k in range(4)]
    b = [ScriptedPlanner()(_query(world, script, k)) for k in range(4)]
    assert a == b


def test_scripted_planner_requires_world():
    world, script = make_scenario("pick_place", 0)
    with pytest.raises(InvalidInputError):
        ScriptedPlanner()(PlannerQuery(script.instruction, script.instructions, 0, VIEWS))


def test_chat_planner_over_replay():
    world, script = make_scenario("pick_place", 0)
    text = format_decision(PlannerDecision(script.instructions[1], "transit", "fine", decision_basis="ok"))
    d = ChatPlanner(ReplayClient([text]))(_query(world, script, 0))
    assert d.next_subtask == script.instructions[1]
