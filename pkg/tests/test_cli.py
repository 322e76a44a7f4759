from __future__ import annotations

import io
import json

import numpy as np
import pytest

from selfcorrect.cli import build_parser, main
from selfcorrect.core import TrajectoryLog, write_logs
from selfcorrect.sim import make_scenario, scripted_demonstration


def _run(capsys, argv):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def _hyp_file(tmp_path, n=5, h=4):
    rng = np.random.default_rng(0)
    p = tmp_path / "hyps.jsonl"
    lines = [json.dumps({"start_state": [0.4, 0.0, 0.3, 0, 0, 0, 1.0]})]
    for i in range(n):
        steps = np.c_[rng.normal(0, 0.01, (h, 6)), np.zeros((h, 1))].tolist()
        lines.append(json.dumps({"steps": steps, "origin_seed": 100 + i}))
    p.write_text("\n".join(lines) + "\n")
    return p


def test_parser_lists_every_subcommand():
    sub = next(a for a in build_parser()._actions if a.dest == "command")
    assert set(sub.choices) >= {"mbr-select", "decompose", "run-episode", "gen-scenarios", "eval-psucc",
                                "sweep", "recovery"}


@pytest.mark.parametrize("mode", ["standard", "density"])
def test_mbr_select(tmp_path, capsys, mode):
    code, out, _ = _run(capsys, ["mbr-select", str(_hyp_file(tmp_path)), "--metric", "l1", "--mode", mode,
                                 "--chunk-size", "4"])
    d = json.loads(out)
    assert code == 0 and 0 <= d["selected_index"] < 5
    assert d["origin_seed"] == 100 + d["selected_index"]


def test_mbr_select_stdin(tmp_path, capsys, monkeypatch):
    monkeypatch.setattr("sys.stdin", io.StringIO(_hyp_file(tmp_path).read_text()))
    code, out, _ = _run(capsys, ["mbr-select"])
    assert code == 0 and "selected_index" in json.loads(out)


def test_mbr_select_rejects_bad_chunk_size(tmp_path, capsys):
    code, _, err = _run(capsys, ["mbr-select", str(_hyp_file(tmp_path)), "--chunk-size", "8"])
    assert code == 2 and "error" in err


def test_decompose_with_report(tmp_path, capsys):
    logs = []
    for seed in range(2):
        world, script = make_scenario("pick_place", seed)
        lg, gt = scripted_demonstration(world, script, np.random.default_rng(seed))
        logs.append(TrajectoryLog(lg.states, lg.executed, subtasks=gt, meta=lg.meta))
    src = tmp_path / "logs.jsonl"
    write_logs(src, logs)
    out_dir = tmp_path / "out"
    code, out, _ = _run(capsys, ["decompose", str(src), "--out-dir", str(out_dir), "--report"])
    summary = json.loads(out)
    assert code == 0 and summary["logs"] == 2
    assert summary["boundary_error"]["mean_abs_steps"] == 0.0
    plans = json.loads((out_dir / "plans.json").read_text())["plans"]
    assert len(plans) == 2
    records = [json.loads(x) for x in (out_dir / "dataset.jsonl").read_text().splitlines()]
    assert records and sum(r["action"][7] == 1 for r in records) == sum(len(p["subtasks"]) for p in plans)
    assert (out_dir / "boundary_report.json").exists()


def test_run_episode(capsys):
    code, out, _ = _run(capsys, ["run-episode", "--seed", "1", "--p-fail", "0", "--trace"])
    d = json.loads(out)
    assert code == 0 and d["result"] == "success"
    assert sum(d["component_shares_percent"].values()) == pytest.approx(100.0, abs=0.1)
    assert d["trace"] and d["config"]["seed"] == 1


def test_run_episode_policy_config_file(tmp_path, capsys):
    cfg = tmp_path / "policy.json"
    cfg.write_text(json.dumps({"p_fail": 0.0, "noise_sigma": 0.0}))
    code, out, _ = _run(capsys, ["run-episode", "--policy-config", str(cfg), "--no-correction"])
    assert code == 0 and json.loads(out)["backtracks"] == []
    cfg.write_text(json.dumps({"p_fail": 0.0, "bogus": 1}))
    assert _run(capsys, ["run-episode", "--policy-config", str(cfg)])[0] == 2


def test_gen_scenarios_and_eval(tmp_path, capsys):
    bundle = tmp_path / "scen.jsonl"
    code, _, _ = _run(capsys, ["gen-scenarios", "--episodes", "3", "--out", str(bundle), "--p-fail", "0.2"])
    lines = [json.loads(x) for x in bundle.read_text().splitlines()]
    assert code == 0 and len(lines) == 3 and lines[0]["policy"]["p_fail"] == 0.2
    npz = tmp_path / "z.npz"
    csv = tmp_path / "p.csv"
    code, out, _ = _run(capsys, ["eval-psucc", "--scenarios", str(bundle), "--samples", "4", "--json",
                                 "--save-outcomes", str(npz), "--emit-csv", str(csv), "--n-boot", "50"])
    first = json.loads(out)
    assert code == 0 and first["episodes"] == 3 and first["N"] == 4
    assert csv.read_text().startswith("N,metric")
    code, out, _ = _run(capsys, ["eval-psucc", "--outcomes", str(npz), "--samples", "4", "--json", "--n-boot", "50"])
    assert json.loads(out) == first


def test_sweep_report_dir(tmp_path, capsys):
    rep = tmp_path / "rep"
    code, out, _ = _run(capsys, ["sweep", "--episodes", "2", "--n-values", "4,8", "--metrics", "l2,cos",
                                 "--n-boot", "20", "--report-dir", str(rep)])
    assert code == 0 and "random" in out
    for name in ("sweep.json", "sweep.csv", "psucc_vs_n.png", "metrics.png"):
        assert (rep / name).stat().st_size > 0
    assert len(json.loads((rep / "sweep.json").read_text())["rows"]) == 4


def test_recovery_report_dir(tmp_path, capsys):
    rep = tmp_path / "rec"
    code, out, _ = _run(capsys, ["recovery", "--episodes", "2", "--json", "--report-dir", str(rep)])
    d = json.loads(out)
    assert code == 0 and set(d["success_rate"]) == {"no_correction", "full", "always_mbr", "cutoff"}
    assert sum(d["runtime_shares"]["percent"].values()) == pytest.approx(100.0, abs=0.1)
    for name in ("recovery.json", "recovery.csv", "recovery.png", "runtime_shares.png"):
        assert (rep / name).stat().st_size > 0


def test_missing_input_exits_2(tmp_path, capsys):
    code, _, err = _run(capsys, ["decompose", str(tmp_path / "nope.jsonl"), "--out-dir", str(tmp_path)])
    assert code == 2 and "error" in err
