"""Offline evaluation: chunk-selection success estimates, sweeps, recovery runs.

The selection estimate treats N independent rollouts of one episode as
hypotheses. Every rollout is sliced at the shared decision steps
``0, H, 2H, ...``; at each step a selector picks one rollout's chunk, and
the estimate is the mean, over episodes, of the per-episode hit rate.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .controller import COMPONENTS, EpisodeConfig, EpisodeOutcome, run_episode
from .core import ActionChunk, ActionStep, InvalidInputError, derive_seed
from .mbr import Metric, Mode, density_from_matrix, extract_features, pairwise_distances, select_from_matrix
from .oracle.planners import ForcedTransitPlanner, ScriptedPlanner
from .sim import MockPolicy, MockPolicyConfig, Scenario, SimEnv, label_hypothesis

log = logging.getLogger(__name__)

N_VALUES = (4, 8, 16, 32, 64)
METRICS = tuple(m.value for m in Metric)


@dataclass
class OutcomeMatrix:
    """Per-episode ``(|T_e|, N)`` success labels plus ``(|T_e|, N, 6H)`` features."""

    z: list[np.ndarray]
    features: list[np.ndarray] | None = None
    chunk_size: int = 8

    def __post_init__(self) -> None:
        self.z = [np.asarray(a, dtype=bool) for a in self.z]
        if not self.z:
            raise InvalidInputError("outcome matrix has no episodes")
        n = self.z[0].shape[1] if self.z[0].ndim == 2 else -1
        for e, a in enumerate(self.z):
            if a.ndim != 2 or a.shape[1] != n:
                raise InvalidInputError(f"episode {e}: z must be (|T_e|, N) with a common N")
            if a.shape[0] == 0:
                raise InvalidInputError(f"episode {e} has no decision steps")
        if self.features is not None:
            if len(self.features) != len(self.z):
                raise InvalidInputError("features and z disagree on episode count")
            for e, (f, a) in enumerate(zip(self.features, self.z)):
                if f.shape[:2] != a.shape:
                    raise InvalidInputError(f"episode {e}: features shape {f.shape} vs z {a.shape}")

    @property
    def n_episodes(self) -> int:
        return len(self.z)

    @property
    def n_hypotheses(self) -> int:
        return self.z[0].shape[1]

    def decision_steps(self, e: int) -> list[int]:
        return [i * self.chunk_size for i in range(self.z[e].shape[0])]

    def prefix(self, n: int) -> "OutcomeMatrix":
        """Restrict every hypothesis set to its first ``n`` members."""
        if not 2 <= n <= self.n_hypotheses:
            raise InvalidInputError(f"prefix {n} outside [2, {self.n_hypotheses}]")
        feats = None if self.features is None else [f[:, :n] for f in self.features]
        return OutcomeMatrix([a[:, :n] for a in self.z], feats, self.chunk_size)

    def base_rate(self) -> float:
        return float(np.mean([a.mean() for a in self.z]))


Selector = Callable[[OutcomeMatrix, int, int], int]


@dataclass(frozen=True)
class RandomSelector:
    """Uniform pick keyed by (seed, trial, e, t); cells never share streams."""

    seed: int = 0
    trial: int = 0

    def __call__(self, z: OutcomeMatrix, e: int, t: int) -> int:
        return int(np.random.default_rng([self.seed, self.trial, e, t]).integers(z.n_hypotheses))


@dataclass(frozen=True)
class MbrSelector:
    metric: Metric = Metric.L2
    mode: Mode = Mode.DENSITY
    normalize_features: bool = False

    def __call__(self, z: OutcomeMatrix, e: int, t: int) -> int:
        if z.features is None:
            raise InvalidInputError("MBR selection needs features")
        m = pairwise_distances(z.features[e][t], self.metric, self.normalize_features)
        res = select_from_matrix(m) if Mode(self.mode) is Mode.STANDARD else density_from_matrix(m)
        return res.selected_index


@dataclass(frozen=True)
class FixedSelector:
    index: int = 0

    def __call__(self, z: OutcomeMatrix, e: int, t: int) -> int:
        return self.index


def selections(z: OutcomeMatrix, selector: Selector) -> list[list[int]]:
    return [[selector(z, e, t) for t in range(z.z[e].shape[0])] for e in range(z.n_episodes)]


def per_episode_rates(z: OutcomeMatrix, selector: Selector) -> np.ndarray:
    out = np.empty(z.n_episodes)
    for e in range(z.n_episodes):
        hits = 0
        for t in range(z.z[e].shape[0]):
            hits += int(z.z[e][t, selector(z, e, t)])
        out[e] = hits / z.z[e].shape[0]
    return out


def estimate_psucc(z: OutcomeMatrix, selector: Selector) -> float:
    """Mean over episodes of the per-episode hit rate of ``selector``."""
    total = 0.0
    for rate in per_episode_rates(z, selector):
        total += float(rate)
    return total / z.n_episodes


def bootstrap_ci(values: np.ndarray, n_boot: int = 1000, seed: int = 0, level: float = 0.95) -> tuple[float, float]:
    values = np.asarray(values, dtype=np.float64)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(values), size=(n_boot, len(values)))
    means = values[idx].mean(axis=1)
    lo, hi = np.quantile(means, [(1 - level) / 2, 1 - (1 - level) / 2])
    return float(lo), float(hi)


# -- recording rollouts ----------------------------------------------------------

@dataclass
class RecordedEpisode:
    z: np.ndarray
    features: np.ndarray
    rollout_success: np.ndarray


def record_episode(scenario: Scenario, n_rollouts: int, policy_cfg: MockPolicyConfig,
                   episode_cfg: EpisodeConfig = EpisodeConfig()) -> RecordedEpisode:
    """Roll out the uncorrected policy ``n_rollouts`` times and slice at ``0, H, 2H, ...``."""
    H = policy_cfg.chunk_size
    world0, script = scenario.build()
    runs = []
    for n in range(n_rollouts):
        env = SimEnv(world0, script, keep_history=True)
        cfg = EpisodeConfig(**{**_cfg_fields(episode_cfg), "chunk_size": H, "mbr_enabled": False,
                               "always_mbr": False, "cutoff_on_backtrack": False,
                               "seed": derive_seed(scenario.episode_seed, n)})
        out = run_episode(env, MockPolicy(script, policy_cfg), ForcedTransitPlanner(), cfg, keep_log=True)
        runs.append((env.history, out))
    longest = max(len(out.log) for _, out in runs)
    n_dec = max(1, -(-longest // H))
    z = np.zeros((n_dec, n_rollouts), dtype=bool)
    feats = np.zeros((n_dec, n_rollouts, 6 * H))
    last_k = len(script.subtasks) - 1
    for n, (history, out) in enumerate(runs):
        steps, ks = out.log.executed, out.log.subtask_index_per_step
        for i in range(n_dec):
            t = i * H
            world = history[min(t, len(history) - 1)]
            k = ks[t] if t < len(ks) else out.final_subtask
            sl = list(steps[t:t + H])
            grip = sl[-1].gripper if sl else (1.0 if world.gripper.gripper_width < 0.5 else 0.0)
            sl += [ActionStep(gripper=grip)] * (H - len(sl))
            chunk = ActionChunk(tuple(sl), n)
            feats[i, n] = extract_features(world.gripper, chunk)
            z[i, n] = label_hypothesis(world, script, min(k, last_k), chunk, policy_cfg)
    return RecordedEpisode(z, feats, np.array([o.success for _, o in runs]))


def _cfg_fields(cfg: EpisodeConfig) -> dict:
    return {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}


def record_outcomes(scenarios: Sequence[Scenario], n_rollouts: int, policy_cfg: MockPolicyConfig,
                    episode_cfg: EpisodeConfig = EpisodeConfig()) -> OutcomeMatrix:
    recs = [record_episode(s, n_rollouts, policy_cfg, episode_cfg) for s in scenarios]
    return OutcomeMatrix([r.z for r in recs], [r.features for r in recs], policy_cfg.chunk_size)


# -- sweeps -----------------------------------------------------------------------

@dataclass(frozen=True)
class SweepSpec:
    n_values: tuple[int, ...] = (8,)
    metrics: tuple[str, ...] = ("l2",)
    episodes: int = 200
    tasks: tuple[str, ...] = ("pick_place",)
    paired_seeds: bool = True
    mode: Mode = Mode.DENSITY
    base_seed: int = 0
    selector_seed: int = 0
    n_boot: int = 1000

    def __post_init__(self) -> None:
        if not self.n_values or not self.metrics or not self.tasks:
            raise InvalidInputError("sweep spec needs n_values, metrics and tasks")
        if self.episodes < 1:
            raise InvalidInputError("episodes must be >= 1")
        if min(self.n_values) < 2:
            raise InvalidInputError("every N must be >= 2")
        for m in self.metrics:
            Metric.parse(m)


@dataclass(frozen=True)
class SweepRow:
    task: str
    n: int
    metric: str
    random: float
    mbr: float
    delta: float
    ci_low: float
    ci_high: float

    def to_json_dict(self) -> dict:
        return asdict(self)


@dataclass
class SweepReport:
    rows: list[SweepRow]
    base_rates: dict[str, float]
    seconds: float = 0.0
    meta: dict = field(default_factory=dict)

    def row(self, n: int, metric: str = "l2", task: str | None = None) -> SweepRow:
        for r in self.rows:
            if r.n == n and r.metric == Metric.parse(metric).value and (task is None or r.task == task):
                return r
        raise KeyError((n, metric, task))

    def to_json_dict(self) -> dict:
        return {"rows": [r.to_json_dict() for r in self.rows], "base_rates": self.base_rates, "meta": self.meta}

    def to_text(self) -> str:
        head = f"{'task':<16}{'N':>4}  {'metric':<6}{'random':>9}{'MBR':>9}{'delta':>9}  95% CI"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(f"{r.task:<16}{r.n:>4}  {r.metric:<6}{r.random:>9.4f}{r.mbr:>9.4f}{r.delta:>+9.4f}"
                         f"  [{r.ci_low:+.4f}, {r.ci_high:+.4f}]")
        return "\n".join(lines)

    def to_csv(self) -> str:
        cols = list(SweepRow.__dataclass_fields__)
        out = [",".join(cols)]
        for r in self.rows:
            out.append(",".join(str(getattr(r, c)) for c in cols))
        return "\n".join(out) + "\n"


def compare_selectors(z: OutcomeMatrix, metric: str | Metric, mode: Mode, selector_seed: int = 0,
                      n_boot: int = 1000, boot_seed: int = 0) -> tuple[float, float, tuple[float, float]]:
    rand = per_episode_rates(z, RandomSelector(selector_seed))
    mbr = per_episode_rates(z, MbrSelector(Metric.parse(metric), mode))
    p_rand = estimate_psucc(z, RandomSelector(selector_seed))
    p_mbr = estimate_psucc(z, MbrSelector(Metric.parse(metric), mode))
    return p_rand, p_mbr, bootstrap_ci(mbr - rand, n_boot, boot_seed)


def run_sweep(spec: SweepSpec, policy_cfg: MockPolicyConfig = MockPolicyConfig(),
              episode_cfg: EpisodeConfig = EpisodeConfig(), outcomes: dict[str, OutcomeMatrix] | None = None) -> SweepReport:
    """Random-vs-consensus selection over shared hypothesis sets.

    Hypothesis sets for smaller N are prefixes of the largest one, so every
    cell of the table is evaluated on nested, paired data.
    """
    t0 = time.perf_counter()
    n_max = max(spec.n_values)
    rows: list[SweepRow] = []
    base: dict[str, float] = {}
    for ti, task in enumerate(spec.tasks):
        if outcomes is not None and task in outcomes:
            full = outcomes[task]
        else:
            scen = [Scenario(task, spec.base_seed * 100_003 + e,
                             spec.base_seed * 7_919 + e if spec.paired_seeds else derive_seed(spec.base_seed, ti, e))
                    for e in range(spec.episodes)]
            full = record_outcomes(scen, n_max, policy_cfg, episode_cfg)
        base[task] = full.base_rate()
        for n in spec.n_values:
            z = full.prefix(n)
            for metric in spec.metrics:
                m = Metric.parse(metric).value
                p_rand, p_mbr, (lo, hi) = compare_selectors(z, m, spec.mode, spec.selector_seed, spec.n_boot)
                rows.append(SweepRow(task, n, m, p_rand, p_mbr, p_mbr - p_rand, lo, hi))
    return SweepReport(rows, base, time.perf_counter() - t0,
                       {"mode": Mode(spec.mode).value, "episodes": spec.episodes, "n_values": list(spec.n_values),
                        "policy": asdict(policy_cfg)})


# -- recovery comparison ------------------------------------------------------------

RECOVERY_MODES = ("no_correction", "full", "always_mbr", "cutoff")


def mode_setup(mode: str, rho: float = 0.0, seed: int = 0):
    if mode == "no_correction":
        return ForcedTransitPlanner(), {"mbr_enabled": False}
    if mode == "full":
        return ScriptedPlanner(rho, seed), {}
    if mode == "always_mbr":
        return ScriptedPlanner(rho, seed), {"always_mbr": True}
    if mode == "cutoff":
        return ScriptedPlanner(rho, seed), {"cutoff_on_backtrack": True}
    raise InvalidInputError(f"unknown mode {mode!r}; choose from {RECOVERY_MODES}")


@dataclass
class RecoveryReport:
    success: dict[str, float]
    backtracks: dict[str, float]
    steps: dict[str, float]
    per_episode: dict[str, list[bool]]
    outcomes: dict[str, list[EpisodeOutcome]] = field(default_factory=dict, repr=False)

    def to_json_dict(self) -> dict:
        return {"success_rate": self.success, "mean_backtracks": self.backtracks, "mean_steps": self.steps,
                "episodes": len(next(iter(self.per_episode.values()), []))}

    def to_text(self) -> str:
        head = f"{'mode':<15}{'success':>9}{'backtracks':>12}{'steps':>9}"
        lines = [head, "-" * len(head)]
        for m in self.success:
            lines.append(f"{m:<15}{self.success[m]:>9.3f}{self.backtracks[m]:>12.2f}{self.steps[m]:>9.1f}")
        return "\n".join(lines)


def run_recovery_comparison(scenarios: Sequence[Scenario], policy_cfg: MockPolicyConfig = MockPolicyConfig(),
                            episode_cfg: EpisodeConfig = EpisodeConfig(), modes: Sequence[str] = RECOVERY_MODES,
                            rho: float = 0.0, clock: Callable[[], float] = time.perf_counter) -> RecoveryReport:
    success, bts, steps, per, outs = {}, {}, {}, {}, {}
    for mode in modes:
        results = []
        for sc in scenarios:
            planner, overrides = mode_setup(mode, rho, sc.episode_seed)
            world, script = sc.build()
            cfg = EpisodeConfig(**{**_cfg_fields(episode_cfg), **overrides, "seed": sc.episode_seed})
            results.append(run_episode(SimEnv(world, script), MockPolicy(script, policy_cfg), planner, cfg, clock))
        per[mode] = [o.success for o in results]
        success[mode] = float(np.mean(per[mode]))
        bts[mode] = float(np.mean([len(o.backtracks) for o in results]))
        steps[mode] = float(np.mean([o.steps_used for o in results]))
        outs[mode] = results
    return RecoveryReport(success, bts, steps, per, outs)


# -- runtime shares -------------------------------------------------------------------

@dataclass(frozen=True)
class RuntimeShares:
    seconds: dict[str, float]
    percent: dict[str, float]

    def to_json_dict(self) -> dict:
        return {"seconds": self.seconds, "percent": self.percent}

    def to_text(self) -> str:
        lines = [f"{'component':<16}{'seconds':>12}{'share %':>10}"]
        for c in COMPONENTS:
            lines.append(f"{c:<16}{self.seconds[c]:>12.6f}{self.percent[c]:>10.2f}")
        return "\n".join(lines)


def report_runtime_shares(outcomes: Sequence[EpisodeOutcome]) -> RuntimeShares:
    totals = {c: 0.0 for c in COMPONENTS}
    for o in outcomes:
        for c in COMPONENTS:
            if c not in o.component_timings:
                log.warning("outcome lacks a %s timing; counting it as zero", c)
                continue
            totals[c] += float(o.component_timings[c])
    grand = sum(totals.values())
    if grand <= 0:
        raise InvalidInputError("no recorded time in any component")
    return RuntimeShares(totals, {c: 100.0 * v / grand for c, v in totals.items()})
