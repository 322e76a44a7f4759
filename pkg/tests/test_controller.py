from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import pytest

from selfcorrect.controller import (
    ConfirmState,
    Controller,
    EpisodeConfig,
    Phase,
    TickClock,
    confirm,
    run_episode,
    validate_trace,
)
from selfcorrect.core import InvalidInputError, derive_seed
from selfcorrect.oracle import (
    DecisionKind,
    ForcedTransitPlanner,
    OracleUnavailable,
    PlannerDecision,
    PlannerParseError,
    ScriptedPlanner,
)
from selfcorrect.sim import MockPolicy, MockPolicyConfig, SimEnv, expert_chunk, make_scenario, mock_policy_sample

from oracles import fired_oracle


def run_confirm(signals):
    st, out = ConfirmState(), []
    for s in signals:
        st, f = confirm(st, s)
        out.append(f)
    return out


H, L = True, False

# hand-built table for all strings up to length 3
TABLE = {
    (L,): [0], (H,): [0],
    (L, L): [0, 0], (L, H): [0, 0], (H, L): [0, 0], (H, H): [0, 1],
    (L, L, L): [0, 0, 0], (L, L, H): [0, 0, 0], (L, H, L): [0, 0, 0], (L, H, H): [0, 0, 1],
    (H, L, L): [0, 0, 0], (H, L, H): [0, 0, 0], (H, H, L): [0, 1, 0], (H, H, H): [0, 1, 1],
}


def test_confirm_examples():
    assert run_confirm([H, H]) == [False, True]
    assert run_confirm([H, L, L, H]) == [False, False, False, True]
    assert run_confirm([H, L, H]) == [False, False, False]


def test_confirm_hand_table():
    for sig, expect in TABLE.items():
        assert run_confirm(sig) == [bool(x) for x in expect], sig


def test_confirm_exhaustive_up_to_six():
    for n in range(1, 7):
        for sig in itertools.product([False, True], repeat=n):
            assert run_confirm(sig) == fired_oracle(sig), sig


def test_isolated_highs_never_confirm():
    # a single high with no earlier high can never fire
    for n in range(1, 7):
        for k in range(n):
            sig = [False] * n
            sig[k] = True
            assert not any(run_confirm(sig))


def test_confirm_counters_nonnegative():
    for sig in itertools.product([False, True], repeat=6):
        st = ConfirmState()
        for s in sig:
            st, _ = confirm(st, s)
            assert st.consec >= 0 and st.gap >= 0
            assert not (st.consec > 0 and st.gap > 0)


# -- helpers ------------------------------------------------------------------------

@dataclass
class ExpertPolicy:
    script: object
    calls: int = 0

    def __call__(self, world, idx, seed):
        self.calls += 1
        return expert_chunk(world, self.script, idx)


@dataclass
class StubPlanner:
    decision: object
    calls: int = 0

    def __call__(self, q):
        self.calls += 1
        if isinstance(self.decision, Exception):
            raise self.decision
        return self.decision(q) if callable(self.decision) else self.decision


def make_controller(policy=None, planner=None, task="pick_place", seed=0, **cfg):
    world, script = make_scenario(task, seed)
    env = SimEnv(world, script)
    policy = policy or MockPolicy(script, MockPolicyConfig())
    planner = planner or ScriptedPlanner()
    return Controller(env, policy, planner, EpisodeConfig(**cfg), TickClock()), script


# -- step mechanics ------------------------------------------------------------------

def test_fresh_step_samples_once():
    c, script = make_controller(ExpertPolicy(make_scenario()[1]))
    c.step()
    assert c.policy.calls == 1 and len(c.state.queue) == c.cfg.chunk_size - 1


def test_progress_confirmation_calls_oracle_once():
    c, script = make_controller(ExpertPolicy(make_scenario()[1]), StubPlanner(None))
    c.planner.decision = lambda q: PlannerDecision(q.subtasks[q.current], "transit", "ok", decision_basis="b")
    calls_at = []
    while not c.state.done and c.state.k == 0:
        before = c.planner.calls
        c.step()
        calls_at.append(c.planner.calls - before)
    assert sum(calls_at) == 1 and max(calls_at) == 1


def test_expert_rollout_succeeds_without_backtracks():
    for task in ("pick_place", "pick_place_two"):
        for seed in range(5):
            world, script = make_scenario(task, seed)
            out = run_episode(SimEnv(world, script), ExpertPolicy(script), ScriptedPlanner(), EpisodeConfig())
            assert out.success and out.backtracks == [], (task, seed)


def test_scripted_planner_never_backtracks_on_expert():
    world, script = make_scenario("pick_place_two", 7)
    planner = ScriptedPlanner()
    run_episode(SimEnv(world, script), ExpertPolicy(script), planner, EpisodeConfig())
    assert planner.calls > 0 and all(kind == "transit" for *_, kind in planner.history)


def _to_monitor_fire(c):
    """Step until the next planner call is about to happen."""
    while not c.state.done:
        before = c.counters["oracle_calls"]
        c.step()
        if c.counters["oracle_calls"] > before:
            return


def test_transit_moves_to_complete_queue_untouched():
    c, script = make_controller(ExpertPolicy(make_scenario()[1]), StubPlanner(None))
    c.planner.decision = lambda q: PlannerDecision(q.subtasks[q.current], "transit", "ok", decision_basis="b")
    _to_monitor_fire(c)
    assert c.state.phase is Phase.COMPLETE
    assert not any(ev["event"] in ("restore", "mbr") for ev in c.trace)


def _backtrack_to_current(q):
    return PlannerDecision(q.subtasks[q.current], "backtrack", "will fail", decision_basis="b")


def test_backtrack_samples_n_and_selects_once():
    c, script = make_controller(planner=StubPlanner(_backtrack_to_current), samples=8)
    calls0 = None
    while not c.state.done:
        before_policy, before_oracle = c.counters["policy_calls"], c.counters["oracle_calls"]
        c.step()
        if c.counters["oracle_calls"] > before_oracle:
            calls0 = c.counters["policy_calls"] - before_policy
            break
    assert calls0 == 8
    assert c.counters["mbr_calls"] == 1 and c.state.retries[0] == 1
    assert len(c.state.queue) == c.cfg.chunk_size and c.state.phase is Phase.MONITOR


def test_backtrack_at_budget_goes_complete():
    c, script = make_controller(planner=StubPlanner(_backtrack_to_current), max_retries=3)
    c.state.retries[0] = 3
    _to_monitor_fire(c)
    assert c.state.phase is Phase.COMPLETE
    assert not any(ev["event"] == "restore" for ev in c.trace)
    assert any(ev["event"] == "budget_exhausted" for ev in c.trace)


def test_retries_never_exceed_budget():
    world, script = make_scenario("pick_place", 1)
    cfg = EpisodeConfig(max_retries=2, t_max=600)
    out = run_episode(SimEnv(world, script), MockPolicy(script, MockPolicyConfig()), StubPlanner(_backtrack_to_current),
                      cfg)
    assert max(out.retries) <= 2 and len(out.backtracks) <= len(script.subtasks) * 2
    assert validate_trace(out, cfg) == []


def test_restore_executes_m_reverse_steps_and_returns_pose():
    c, script = make_controller(ExpertPolicy(make_scenario()[1]))
    for _ in range(13):
        c.step()
    start = c.state.subtask_start_states[0]
    m = len(c.state.path)
    c.restore(0)
    assert c.counters["reverse_steps"] == m
    assert c.env.robot_state.pose_error(start) <= 1e-6
    assert c.env.robot_state.gripper_width == start.gripper_width
    assert c.state.t == 26


def test_restore_to_current_start_permitted():
    c, _ = make_controller(ExpertPolicy(make_scenario()[1]))
    c.restore(0)
    assert c.counters["reverse_steps"] == 0


def test_restore_forward_rejected():
    c, _ = make_controller()
    with pytest.raises(InvalidInputError):
        c.restore(2)


def test_restore_counts_against_t_max():
    c, _ = make_controller(ExpertPolicy(make_scenario()[1]), t_max=14)
    for _ in range(10):
        c.step()
    c.restore(0)
    assert c.state.done and c.state.result == "failure" and c.state.t == 14


def test_t_max_zero_fails_immediately():
    world, script = make_scenario()
    out = run_episode(SimEnv(world, script), ExpertPolicy(script), ScriptedPlanner(), EpisodeConfig(t_max=0))
    assert out.result == "failure" and out.steps_used == 0


@dataclass
class FlakyTransport:
    """Fails the transport subtask until the planner has asked for a backtrack."""

    script: object
    broken: bool = True

    def __call__(self, world, idx, seed):
        if idx == 2 and self.broken:
            cfg = MockPolicyConfig(noise_sigma=0.0, p_fail=1.0, progress_noise=0.0, rot_sigma=0.0)
            return mock_policy_sample(world, self.script, idx, cfg, seed)
        return expert_chunk(world, self.script, idx)


def test_scripted_failure_recovered_by_backtrack():
    world, script = make_scenario("pick_place", 0)
    policy = FlakyTransport(script)
    inner = ScriptedPlanner()

    def planner(q):
        d = inner(q)
        if d.kind is DecisionKind.BACKTRACK:
            policy.broken = False
        return d

    out = run_episode(SimEnv(world, script), policy, StubPlanner(planner), EpisodeConfig())
    assert out.success and len(out.backtracks) >= 1
    assert out.backtracks[0][0] == 2


def test_no_correction_fails_same_scenario():
    world, script = make_scenario("pick_place", 0)
    out = run_episode(SimEnv(world, script), FlakyTransport(script), ForcedTransitPlanner(),
                      EpisodeConfig(mbr_enabled=False))
    assert not out.success


def test_parse_error_treated_as_transit():
    c, _ = make_controller(planner=StubPlanner(PlannerParseError("garbled", "raw")))
    _to_monitor_fire(c)
    assert c.state.phase is Phase.COMPLETE and c.decisions[-1]["kind"] == "parse_error"


def test_invalid_subtask_treated_as_transit():
    bad = lambda q: PlannerDecision(q.subtasks[-1], "transit", "skip", decision_basis="b")  # noqa: E731
    c, _ = make_controller(ExpertPolicy(make_scenario()[1]), StubPlanner(bad))
    _to_monitor_fire(c)
    assert c.state.phase is Phase.COMPLETE and c.decisions[-1]["kind"] == "invalid"


def test_oracle_unavailable_fails_episode():
    c, _ = make_controller(planner=StubPlanner(OracleUnavailable("down")))
    _to_monitor_fire(c)
    assert c.state.done and c.state.result == "failure" and "unavailable" in c.state.cause


def test_cutoff_stops_at_predicted_failure():
    c, _ = make_controller(planner=StubPlanner(_backtrack_to_current), cutoff_on_backtrack=True)
    _to_monitor_fire(c)
    assert c.state.done and c.state.cause == "predicted failure"


def test_deterministic_outcome_bytes():
    def once():
        world, script = make_scenario("pick_place_two", 4)
        return run_episode(SimEnv(world, script), MockPolicy(script, MockPolicyConfig()), ScriptedPlanner(),
                           EpisodeConfig(seed=4), TickClock()).to_json()

    assert once() == once()


def test_trace_validator_over_many_episodes():
    for seed in range(15):
        world, script = make_scenario("pick_place", seed)
        for cfg in (EpisodeConfig(seed=seed), EpisodeConfig(seed=seed, always_mbr=True)):
            out = run_episode(SimEnv(world, script), MockPolicy(script, MockPolicyConfig()), ScriptedPlanner(), cfg)
            assert validate_trace(out, cfg) == []
            assert len(out.backtracks) <= sum(out.retries)


def test_validator_detects_violations():
    world, script = make_scenario("pick_place", 0)
    cfg = EpisodeConfig()
    out = run_episode(SimEnv(world, script), MockPolicy(script, MockPolicyConfig()), ScriptedPlanner(), cfg)
    out.trace.insert(1, {"t": 0, "k": 0, "event": "sample", "n": 1, "queued": 3})
    out.retries[0] = 9
    problems = validate_trace(out, cfg)
    assert any("queued" in p for p in problems) and any("retried" in p for p in problems)


def test_no_correction_is_plain_chunked_execution():
    world, script = make_scenario("pick_place", 2)
    pcfg = MockPolicyConfig()
    cfg = EpisodeConfig(mbr_enabled=False, seed=2)
    out = run_episode(SimEnv(world, script), MockPolicy(script, pcfg), ForcedTransitPlanner(), cfg, keep_log=True)
    samples = [ev for ev in out.trace if ev["event"] == "sample"]
    assert all(ev["n"] == 1 for ev in samples)
    assert out.counters["mbr_calls"] == 0 and out.counters["reverse_steps"] == 0
    # replay: each chunk comes from the single-sample stream at the step it was drawn
    env = SimEnv(world, script)
    executed = []
    for i, ev in enumerate(samples):
        nxt = samples[i + 1]["t"] if i + 1 < len(samples) else out.steps_used
        chunk = mock_policy_sample(env.world, script, ev["k"], pcfg, derive_seed(cfg.seed, ev["t"], 0, 0))
        for step in chunk.steps[: nxt - ev["t"]]:
            executed.append(env.execute(step.clamped()))
    assert executed == out.log.executed


def test_log_consistent_with_states():
    world, script = make_scenario("pick_place", 5)
    out = run_episode(SimEnv(world, script), MockPolicy(script, MockPolicyConfig()), ScriptedPlanner(),
                      EpisodeConfig(seed=5), keep_log=True)
    assert out.log.consistency_error() <= 1e-9


def test_config_validation():
    for bad in ({"tau_p": 0.0}, {"samples": 1}, {"max_retries": -1}, {"t_max": -1}, {"chunk_size": 0}):
        with pytest.raises(InvalidInputError):
            EpisodeConfig(**bad)


def test_shares_sum_to_100():
    world, script = make_scenario("pick_place", 3)
    out = run_episode(SimEnv(world, script), MockPolicy(script, MockPolicyConfig()), ScriptedPlanner(),
                      EpisodeConfig(seed=3), TickClock())
    assert sum(out.shares.values()) == pytest.approx(100.0)
    assert np.isclose(sum(out.to_json_dict()["component_shares_percent"].values()), 100.0)
