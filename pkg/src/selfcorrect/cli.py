"""Command-line entry point: ``selfcorrect <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .controller import EpisodeConfig, run_episode
from .core import ActionChunk, InvalidInputError, RobotState, read_logs
from .evaluation import (
    METRICS,
    N_VALUES,
    RECOVERY_MODES,
    MbrSelector,
    OutcomeMatrix,
    RandomSelector,
    SweepSpec,
    bootstrap_ci,
    estimate_psucc,
    per_episode_rates,
    record_outcomes,
    report_runtime_shares,
    run_recovery_comparison,
    run_sweep,
)
from .mbr import HypothesisSet, Metric, Mode, select
from .oracle import (
    DECOMPOSITION_CONFIG,
    PLANNER_CONFIG,
    ChatBoundaryOracle,
    ChatPlanner,
    ForcedTransitPlanner,
    HttpChatClient,
    ReplayClient,
    ScriptedBoundaryOracle,
    ScriptedPlanner,
    propose_subtasks_scripted,
)
from .segmenter import Thresholds, boundary_errors, decompose_log
from .sim import TASKS, MockPolicy, MockPolicyConfig, Scenario, SimEnv, generate_scenarios, make_scenario

log = logging.getLogger("selfcorrect")


def _dump(obj, path: Path | None = None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path is None:
        print(text)
    else:
        Path(path).write_text(text + "\n", encoding="utf-8")


def _csv_list(cast):
    return lambda s: [cast(x) for x in s.split(",") if x]


def _read_scenarios(path: str | None, tasks: Sequence[str], episodes: int, seed: int) -> tuple[list[Scenario], dict | None]:
    if path is None:
        return generate_scenarios(tasks, episodes, seed), None
    scen, policy = [], None
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                d = json.loads(line)
                scen.append(Scenario.from_json_dict(d))
                policy = d.get("policy", policy)
    return scen, policy


def _policy_cfg(args, bundled: dict | None = None) -> MockPolicyConfig:
    # precedence: explicit flags, then --policy-config, then a scenario bundle
    base = dict(bundled or {})
    if getattr(args, "policy_config", None):
        base.update(json.loads(Path(args.policy_config).read_text(encoding="utf-8")))
    if getattr(args, "p_fail", None) is not None:
        base["p_fail"] = args.p_fail
    if getattr(args, "noise_sigma", None) is not None:
        base["noise_sigma"] = args.noise_sigma
    if getattr(args, "chunk_size", None) is not None:
        base["chunk_size"] = args.chunk_size
    try:
        return MockPolicyConfig(**base)
    except TypeError as e:
        raise InvalidInputError(f"bad policy settings: {e}") from e


# -- mbr-select --------------------------------------------------------------

def cmd_mbr_select(args) -> int:
    start = RobotState()
    chunks = []
    src = sys.stdin if args.input == "-" else open(args.input, encoding="utf-8")
    with src:
        for line in src:
            if not line.strip():
                continue
            d = json.loads(line)
            if isinstance(d, dict) and "start_state" in d:
                start = RobotState.from_list(d["start_state"])
                continue
            steps = d["steps"] if isinstance(d, dict) else d
            seed = d.get("origin_seed", len(chunks)) if isinstance(d, dict) else len(chunks)
            chunks.append(ActionChunk.from_array(steps, seed))
    hyps = HypothesisSet.from_chunks(start, chunks, args.chunk_size)
    res = select(hyps, args.metric, args.mode, args.normalize_features)
    out = res.to_json_dict()
    out["origin_seed"] = chunks[res.selected_index].origin_seed
    _dump(out)
    return 0


# -- decompose --------------------------------------------------------------------

def _boundary_oracle(name: str, args):
    if name == "none":
        return None
    if name == "scripted":
        return ScriptedBoundaryOracle()
    if name == "replay":
        return ChatBoundaryOracle(ReplayClient.from_file(args.transcript))
    return ChatBoundaryOracle(HttpChatClient(DECOMPOSITION_CONFIG if args.endpoint is None else
                                             DECOMPOSITION_CONFIG.__class__(**{**asdict(DECOMPOSITION_CONFIG),
                                                                              "endpoint": args.endpoint}),
                                             transcript_path=args.transcript))


def cmd_decompose(args) -> int:
    th = Thresholds.parse(args.thresholds)
    oracle = _boundary_oracle(args.oracle, args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    plans, errors = [], []
    with (out_dir / "dataset.jsonl").open("w", encoding="utf-8") as ds:
        for i, lg in enumerate(read_logs(args.input)):
            log_id = str(lg.meta.get("id", f"traj{i}"))
            res = decompose_log(lg, proposer=propose_subtasks_scripted, boundary_oracle=oracle, th=th,
                                max_len=args.max_primitive_len, optimize=not args.no_optimize, log_id=log_id)
            plans.append({"id": log_id, "thresholds": asdict(res.thresholds), **res.plan.to_json_dict()})
            for rec in res.dataset.records:
                ds.write(json.dumps(rec.to_json_dict()) + "\n")
            if args.report and lg.subtasks is not None:
                err = boundary_errors(res.plan.subtasks, lg.subtasks, len(lg))
                errors.append({"id": log_id, **err.to_json_dict()})
    _dump({"plans": plans}, out_dir / "plans.json")
    summary = {"logs": len(plans), "plans": str(out_dir / "plans.json"), "dataset": str(out_dir / "dataset.jsonl"),
               "methods": {m: sum(p["method"] == m for p in plans) for m in ("direct", "oracle")}}
    if args.report:
        abs_all = [a for e in errors for a in e["absolute_steps"]]
        summary["boundary_error"] = {
            "logs_with_truth": len(errors),
            "mean_abs_steps": float(np.mean(abs_all)) if abs_all else 0.0,
            "mean_rel_percent": float(np.mean([e["mean_rel_percent"] for e in errors])) if errors else 0.0,
        }
        _dump({"per_log": errors, **summary["boundary_error"]}, out_dir / "boundary_report.json")
    _dump(summary)
    return 0


# -- run-episode -------------------------------------------------------------------

def _planner(args):
    if args.no_correction or args.oracle == "none":
        return ForcedTransitPlanner()
    if args.oracle == "scripted":
        return ScriptedPlanner(args.rho, args.seed)
    if args.oracle == "replay":
        return ChatPlanner(ReplayClient.from_file(args.transcript))
    cfg = PLANNER_CONFIG if args.endpoint is None else PLANNER_CONFIG.__class__(
        **{**asdict(PLANNER_CONFIG), "endpoint": args.endpoint})
    return ChatPlanner(HttpChatClient(cfg, transcript_path=args.transcript))


def cmd_run_episode(args) -> int:
    world, script = make_scenario(args.task, args.scenario_seed)
    pcfg = _policy_cfg(args)
    cfg = EpisodeConfig(tau_p=args.tau_p, chunk_size=pcfg.chunk_size, samples=args.samples,
                        max_retries=args.retries, t_max=args.t_max, metric=args.metric, mbr_mode=args.mbr_mode,
                        mbr_enabled=not args.no_correction, always_mbr=args.always_mbr,
                        cutoff_on_backtrack=args.cutoff, seed=args.seed)
    out = run_episode(SimEnv(world, script), MockPolicy(script, pcfg), _planner(args), cfg)
    d = out.to_json_dict(include_trace=args.trace)
    d["config"] = {**asdict(cfg), "metric": cfg.metric.value, "mbr_mode": cfg.mbr_mode.value}
    _dump(d)
    return 0 if out.success else 1


# -- gen-scenarios ------------------------------------------------------------------

def cmd_gen_scenarios(args) -> int:
    pcfg = _policy_cfg(args)
    scen = generate_scenarios(args.tasks, args.episodes, args.seed)
    with open(args.out, "w", encoding="utf-8") as f:
        for s in scen:
            f.write(json.dumps(s.to_json_dict(pcfg), sort_keys=True) + "\n")
    print(f"wrote {len(scen)} scenarios to {args.out}")
    return 0


# -- eval-psucc / sweep --------------------------------------------------------------

def _write_report(report_dir: str | None, name: str, payload: dict, csv_text: str | None, figures) -> None:
    if report_dir is None:
        return
    d = Path(report_dir)
    d.mkdir(parents=True, exist_ok=True)
    _dump(payload, d / f"{name}.json")
    if csv_text is not None:
        (d / f"{name}.csv").write_text(csv_text, encoding="utf-8")
    for fig in figures:
        fig(d)


def cmd_eval_psucc(args) -> int:
    if args.outcomes:
        data = np.load(args.outcomes)
        E = int(data["episodes"])
        z = OutcomeMatrix([data[f"z{e}"] for e in range(E)], [data[f"f{e}"] for e in range(E)], int(data["H"]))
    else:
        scen, bundled = _read_scenarios(args.scenarios, args.tasks, args.episodes, args.seed)
        pcfg = _policy_cfg(args, bundled)
        z = record_outcomes(scen, args.samples, pcfg)
        if args.save_outcomes:
            arrays = {f"z{e}": a for e, a in enumerate(z.z)} | {f"f{e}": a for e, a in enumerate(z.features)}
            np.savez_compressed(args.save_outcomes, episodes=z.n_episodes, H=z.chunk_size, **arrays)
    z = z.prefix(min(args.samples, z.n_hypotheses))
    rand_sel, mbr_sel = RandomSelector(args.selector_seed), MbrSelector(Metric.parse(args.metric), Mode(args.mode))
    p_rand, p_mbr = estimate_psucc(z, rand_sel), estimate_psucc(z, mbr_sel)
    lo, hi = bootstrap_ci(per_episode_rates(z, mbr_sel) - per_episode_rates(z, rand_sel), args.n_boot)
    result = {"episodes": z.n_episodes, "N": z.n_hypotheses, "metric": Metric.parse(args.metric).value,
              "mode": args.mode, "random": p_rand, "mbr": p_mbr, "delta": p_mbr - p_rand,
              "ci95": [lo, hi], "base_rate": z.base_rate()}
    if args.json:
        _dump(result)
    else:
        print(f"{'N':>4}  {'metric':<6}{'random':>9}{'MBR':>9}{'delta':>9}  95% CI")
        print(f"{result['N']:>4}  {result['metric']:<6}{p_rand:>9.4f}{p_mbr:>9.4f}{p_mbr - p_rand:>+9.4f}"
              f"  [{lo:+.4f}, {hi:+.4f}]")
    csv = "N,metric,mode,random,mbr,delta,ci_low,ci_high\n" + \
        f"{result['N']},{result['metric']},{args.mode},{p_rand},{p_mbr},{p_mbr - p_rand},{lo},{hi}\n"
    if args.emit_csv:
        Path(args.emit_csv).write_text(csv, encoding="utf-8")
    _write_report(args.report_dir, "psucc", result, csv, [])
    return 0


def cmd_sweep(args) -> int:
    from . import plotting

    spec = SweepSpec(tuple(args.n_values), tuple(args.metrics), args.episodes, tuple(args.tasks),
                     mode=Mode(args.mode), base_seed=args.seed, selector_seed=args.selector_seed, n_boot=args.n_boot)
    report = run_sweep(spec, _policy_cfg(args))
    print(json.dumps(report.to_json_dict(), indent=2, sort_keys=True) if args.json else report.to_text())
    if args.emit_csv:
        Path(args.emit_csv).write_text(report.to_csv(), encoding="utf-8")
    _write_report(args.report_dir, "sweep", report.to_json_dict(), report.to_csv(), [
        lambda d: plotting.plot_psucc_vs_n(report, d / "psucc_vs_n.png", Metric.parse(args.metrics[0]).value),
        lambda d: plotting.plot_metric_comparison(report, d / "metrics.png", sorted(args.n_values)[0]),
    ])
    return 0


def cmd_recovery(args) -> int:
    from . import plotting

    scen, bundled = _read_scenarios(args.scenarios, args.tasks, args.episodes, args.seed)
    report = run_recovery_comparison(scen, _policy_cfg(args, bundled), EpisodeConfig(samples=args.samples),
                                     args.modes, args.rho)
    shares = report_runtime_shares([o for m in report.outcomes for o in report.outcomes[m]])
    payload = {**report.to_json_dict(), "runtime_shares": shares.to_json_dict()}
    print(json.dumps(payload, indent=2, sort_keys=True) if args.json else report.to_text() + "\n\n" + shares.to_text())
    csv = "mode,success_rate,mean_backtracks,mean_steps\n" + "".join(
        f"{m},{report.success[m]},{report.backtracks[m]},{report.steps[m]}\n" for m in report.success)
    if args.emit_csv:
        Path(args.emit_csv).write_text(csv, encoding="utf-8")
    _write_report(args.report_dir, "recovery", payload, csv, [
        lambda d: plotting.plot_recovery(report, d / "recovery.png"),
        lambda d: plotting.plot_runtime_shares(shares, d / "runtime_shares.png"),
    ])
    return 0


# -- parser ----------------------------------------------------------------------------

def _add_policy_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--policy-config", default=None, metavar="PATH", help="mock policy settings as JSON")
    p.add_argument("--p-fail", type=float, default=None, help="mock policy failure rate (default 0.3)")
    p.add_argument("--noise-sigma", type=float, default=None, help="per-step motion noise in meters")
    p.add_argument("--chunk-size", type=int, default=None, help="steps per action chunk (default 8)")


def _add_oracle_backend_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--transcript", default=None, help="JSONL transcript (written by http, read by replay)")
    p.add_argument("--endpoint", default=None, help="OpenAI-compatible base URL for --oracle http")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="selfcorrect", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mbr-select", help="pick the consensus chunk from a JSONL hypothesis set")
    p.add_argument("input", nargs="?", default="-", help="JSONL, one chunk per line ('-' for stdin)")
    p.add_argument("--metric", default="l2", choices=METRICS)
    p.add_argument("--mode", default="density", choices=[m.value for m in Mode])
    p.add_argument("--chunk-size", type=int, default=None)
    p.add_argument("--normalize-features", action="store_true")
    p.set_defaults(func=cmd_mbr_select)

    p = sub.add_parser("decompose", help="segment demonstration logs into subtasks and training labels")
    p.add_argument("input", help="trajectory logs (JSONL)")
    p.add_argument("--thresholds", default="0.02,0.0075,0.03", help="trans,rot,grip")
    p.add_argument("--max-primitive-len", type=int, default=100)
    p.add_argument("--oracle", default="scripted", choices=["scripted", "http", "replay", "none"])
    p.add_argument("--out-dir", default="decomposed")
    p.add_argument("--no-optimize", action="store_true", help="skip the translation-threshold grid search")
    p.add_argument("--report", action="store_true", help="boundary errors against the logs' own subtasks")
    _add_oracle_backend_args(p)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("run-episode", help="run one controlled episode in the simulator")
    p.add_argument("--task", default="pick_place", choices=TASKS)
    p.add_argument("--scenario-seed", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tau-p", type=float, default=0.9)
    p.add_argument("--retries", type=int, default=3)
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--t-max", type=int, default=400)
    p.add_argument("--metric", default="l2", choices=METRICS)
    p.add_argument("--mbr-mode", default="density", choices=[m.value for m in Mode])
    p.add_argument("--oracle", default="scripted", choices=["scripted", "http", "replay", "none"])
    p.add_argument("--rho", type=float, default=0.0, help="scripted planner false-negative rate")
    p.add_argument("--no-correction", action="store_true")
    p.add_argument("--always-mbr", action="store_true")
    p.add_argument("--cutoff", action="store_true", help="stop the episode at the first predicted failure")
    p.add_argument("--trace", action="store_true", help="include the event trace")
    _add_policy_args(p)
    _add_oracle_backend_args(p)
    p.set_defaults(func=cmd_run_episode)

    p = sub.add_parser("gen-scenarios", help="write seeded scenario bundles as JSONL")
    p.add_argument("--tasks", type=_csv_list(str), default=["pick_place"])
    p.add_argument("--episodes", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="scenarios.jsonl")
    _add_policy_args(p)
    p.set_defaults(func=cmd_gen_scenarios)

    def common_eval(p):
        p.add_argument("--tasks", type=_csv_list(str), default=["pick_place"])
        p.add_argument("--episodes", type=int, default=200)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--selector-seed", type=int, default=0)
        p.add_argument("--n-boot", type=int, default=1000)
        p.add_argument("--mode", default="density", choices=[m.value for m in Mode])
        p.add_argument("--json", action="store_true", help="print JSON instead of the aligned table")
        p.add_argument("--emit-csv", default=None, metavar="PATH")
        p.add_argument("--report-dir", default=None, help="write JSON, CSV and figures here")
        _add_policy_args(p)

    p = sub.add_parser("eval-psucc", help="random vs consensus chunk-selection success")
    common_eval(p)
    p.add_argument("--scenarios", default=None, help="bundle from gen-scenarios")
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--metric", default="l2", choices=METRICS)
    p.add_argument("--outcomes", default=None, help="reuse recorded outcomes (.npz)")
    p.add_argument("--save-outcomes", default=None, help="store recorded outcomes (.npz)")
    p.set_defaults(func=cmd_eval_psucc)

    p = sub.add_parser("sweep", help="selection success over hypothesis counts and metrics")
    common_eval(p)
    p.add_argument("--n-values", type=_csv_list(int), default=list(N_VALUES))
    p.add_argument("--metrics", type=_csv_list(str), default=["l2"])
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("recovery", help="success rates with and without failure correction")
    common_eval(p)
    p.add_argument("--scenarios", default=None)
    p.add_argument("--modes", type=_csv_list(str), default=list(RECOVERY_MODES))
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--rho", type=float, default=0.0)
    p.set_defaults(func=cmd_recovery)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (InvalidInputError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
