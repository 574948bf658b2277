import csv
import json
import shutil
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from rize import objective
from rize.cli import EXIT_DIVERGED, EXIT_INPUT, EXIT_OK, EXIT_VERIFY, main
from rize.demos import load_demos
from rize.evaluate import RunRecord, load_run, save_run

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
PRESET = CONFIGS / "grid5x5-rize-3demos.toml"
SHORT = ["--override", "total_steps=300", "--override", "eval_every=100",
         "--override", "pretrain_steps=100"]


def _read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def _fake_record(method, seed, returns, mdp_id="grid5x5"):
    steps = [100 * (k + 1) for k in range(len(returns))]
    n = 6
    series = {"step": list(range(1, n + 1)), "mean_R_E": [1.0] * n, "mean_R_pi": [0.5] * n,
              "bound_lo": [0.0] * n, "bound_hi": [2.0] * n}
    return RunRecord(mdp_id, method, seed, steps, list(returns), 10.0, series=series)


class TestRun:
    def test_preset_writes_five_seeds(self, tmp_path):
        code = main(["run", str(PRESET), "--runs-dir", str(tmp_path)] + SHORT)
        assert code == EXIT_OK
        for label in ("rize", "bc"):
            files = sorted((tmp_path / "grid5x5-3demos" / label).glob("*.json"))
            assert [f.stem for f in files] == ["0", "1", "2", "3", "4"]
        rec = load_run(tmp_path / "grid5x5-3demos" / "rize" / "2.json")
        assert rec.seed == 2 and rec.method == "rize" and len(rec.eval_steps) == 3
        assert (tmp_path / "grid5x5-3demos" / "rize" / "2.csv").exists()

    def test_single_seed_is_quick(self, tmp_path):
        start = time.perf_counter()
        code = main(["run", str(PRESET), "--seed", "7", "--override", "total_steps=10",
                     "--runs-dir", str(tmp_path)])
        assert code == EXIT_OK
        assert time.perf_counter() - start < 10.0
        assert (tmp_path / "grid5x5-3demos" / "rize" / "7.json").exists()

    def test_missing_demo_file(self, tmp_path, capsys):
        cfg = tmp_path / "c.toml"
        cfg.write_text(PRESET.read_text().replace("demos/grid5x5-3demos", "demos/nowhere"))
        assert main(["run", str(cfg), "--runs-dir", str(tmp_path)]) == EXIT_INPUT
        assert "nowhere.demos.jsonl" in capsys.readouterr().err

    def test_mismatched_demo_file(self, tmp_path, capsys):
        shutil.copytree(CONFIGS / "demos", tmp_path / "demos")
        cfg = tmp_path / "c.toml"
        cfg.write_text(PRESET.read_text().replace("grid5x5-3demos.demos", "rand-k5-s0-3demos.demos"))
        assert main(["run", str(cfg), "--runs-dir", str(tmp_path)]) == EXIT_INPUT
        assert "rand-k5-s0" in capsys.readouterr().err

    @pytest.mark.parametrize("override", ["no_such_key=1", "total_steps", "lr_critic=-2"])
    def test_bad_override(self, override, tmp_path):
        assert main(["run", str(PRESET), "--override", override,
                     "--runs-dir", str(tmp_path)]) == EXIT_INPUT

    def test_bad_toml(self, tmp_path):
        cfg = tmp_path / "bad.toml"
        cfg.write_text("mdp = \n[trainer\n")
        assert main(["run", str(cfg), "--runs-dir", str(tmp_path)]) == EXIT_INPUT

    def test_env_runs_dir(self, tmp_path, monkeypatch):
        monkeypatch.setenv("RIZE_RUNS_DIR", str(tmp_path / "env"))
        assert main(["run", str(PRESET), "--seed", "1", "--override", "total_steps=10"]) == EXIT_OK
        assert (tmp_path / "env" / "grid5x5-3demos" / "bc" / "1.json").exists()

    def test_divergence_snapshot(self, tmp_path, capsys):
        code = main(["run", str(PRESET), "--seed", "0", "--override", "max_abs_q=1e-3",
                     "--override", "methods=[\"rize\"]", "--runs-dir", str(tmp_path)] + SHORT)
        assert code == EXIT_DIVERGED
        snap = tmp_path / "grid5x5-3demos" / "rize" / "0.divergence.json"
        assert str(snap) in capsys.readouterr().err
        doc = json.loads(snap.read_text())
        assert "logits" in doc["snapshot"]
        assert not (tmp_path / "grid5x5-3demos" / "rize" / "0.json").exists()

    def test_ablation_labels(self, tmp_path):
        code = main(["run", str(CONFIGS / "grid5x5-ablations-3demos.toml"), "--seed", "0",
                     "--override", "total_steps=10", "--runs-dir", str(tmp_path)])
        assert code == EXIT_OK
        labels = sorted(p.name for p in (tmp_path / "grid5x5-3demos").iterdir())
        assert labels == sorted(["rize", "iq_learn", "fixed_target", "coupled-0", "coupled-10",
                                 "plain_l2", "bc"])
        rec = load_run(tmp_path / "grid5x5-3demos" / "iq_learn" / "0.json")
        assert rec.method == "iq_learn" and rec.config["n_quantiles"] == 1


class TestVerify:
    def test_all_checks_pass(self, tmp_path, capsys):
        report = tmp_path / "verify.json"
        assert main(["verify", "--report", str(report)]) == EXIT_OK
        doc = json.loads(report.read_text())
        assert doc["passed"] and len(doc["checks"]) >= 6
        assert "all" in capsys.readouterr().out

    def test_planted_bug_is_caught(self, monkeypatch, capsys):
        real = objective.optimal_reward_closed_form
        monkeypatch.setattr(objective, "optimal_reward_closed_form",
                            lambda *a, **k: np.asarray(real(*a, **k)) * 1.01)
        assert main(["verify", "--only", "optimal_reward"]) == EXIT_VERIFY
        assert "FAILED: optimal_reward" in capsys.readouterr().out

    def test_unknown_check(self):
        assert main(["verify", "--only", "nope"]) == EXIT_INPUT


class TestAggregate:
    def _tree(self, root, items):
        for task, label, rec in items:
            save_run(rec, root / task / label / f"{rec.seed}.json")

    def test_single_run_zero_width(self, tmp_path):
        self._tree(tmp_path / "runs", [("t", "rize", _fake_record("rize", 0, [5.0, 8.0, 9.0]))])
        assert main(["aggregate", str(tmp_path / "runs"), str(tmp_path / "out"),
                     "--resamples", "200"]) == EXIT_OK
        rows = _read_csv(tmp_path / "out" / "report.csv")
        row = dict(zip(rows[0], rows[1]))
        for name in ("median", "iqm", "mean", "optimality_gap"):
            assert row[f"{name}_lo"] == row[name] == row[f"{name}_hi"]
        assert float(row["median"]) == 0.9

    def test_one_row_per_method(self, tmp_path):
        items = [("t", m, _fake_record(m, s, [5.0, 8.0, 9.0 + s])) for m in ("rize", "bc")
                 for s in range(3)]
        self._tree(tmp_path / "runs", items)
        assert main(["aggregate", str(tmp_path / "runs"), str(tmp_path / "out"),
                     "--resamples", "200"]) == EXIT_OK
        rows = _read_csv(tmp_path / "out" / "report.csv")
        assert [r[0] for r in rows[1:]] == ["bc", "rize"]
        assert rows[0][:5] == ["method", "n_runs", "median", "median_lo", "median_hi"]

    def test_plot_files(self, tmp_path):
        self._tree(tmp_path / "runs", [("t", "rize", _fake_record("rize", s, [4.0, 6.0, 8.0]))
                                       for s in range(2)])
        main(["aggregate", str(tmp_path / "runs"), str(tmp_path / "out"), "--resamples", "50"])
        bounds = _read_csv(tmp_path / "out" / "bounds_t_rize.csv")
        assert bounds[0] == ["step", "R_E_mean", "R_pi_mean", "bound_lo", "bound_hi"]
        assert len(bounds) == 7
        curve = _read_csv(tmp_path / "out" / "curve_t_rize.csv")
        assert curve[0] == ["step", "normalized_mean", "normalized_min", "normalized_max"]
        assert curve[3] == ["300", "0.8", "0.8", "0.8"]

    def test_idempotent(self, tmp_path):
        self._tree(tmp_path / "runs", [("t", "rize", _fake_record("rize", s, [4.0, 6.0, 8.0 + s]))
                                       for s in range(4)])
        outs = []
        for k in range(2):
            out = tmp_path / f"out{k}"
            main(["aggregate", str(tmp_path / "runs"), str(out), "--resamples", "300"])
            outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
        assert outs[0] == outs[1]

    def test_empty_dir(self, tmp_path, capsys):
        (tmp_path / "runs").mkdir()
        assert main(["aggregate", str(tmp_path / "runs"), str(tmp_path / "out")]) == EXIT_INPUT
        assert "no usable run records" in capsys.readouterr().err

    def test_short_runs_skipped(self, tmp_path):
        self._tree(tmp_path / "runs", [("t", "rize", _fake_record("rize", 0, [5.0, 8.0]))])
        assert main(["aggregate", str(tmp_path / "runs"), str(tmp_path / "out")]) == EXIT_INPUT


class TestDemos:
    def test_writes_loadable_file(self, tmp_path):
        out = tmp_path / "d.demos.jsonl"
        assert main(["demos", "--mdp", "rand-k5-s0", "--n-traj", "3", "--out", str(out)]) == EXIT_OK
        demos = load_demos(out)
        assert len(demos) == 3 and demos.source_mdp_id == "rand-k5-s0"

    def test_shipped_file_regenerates(self, tmp_path):
        out = tmp_path / "g.demos.jsonl"
        main(["demos", "--mdp", "grid5x5", "--n-traj", "3", "--seed", "0", "--out", str(out)])
        assert load_demos(out) == load_demos(CONFIGS / "demos" / "grid5x5-3demos.demos.jsonl")

    def test_unknown_mdp(self, tmp_path):
        assert main(["demos", "--mdp", "nope", "--n-traj", "3",
                     "--out", str(tmp_path / "x")]) == EXIT_INPUT


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "rize.cli", "demos", "--mdp", "grid5x5",
                           "--n-traj", "1", "--out", str(tmp_path / "d.jsonl")],
                          capture_output=True, text=True, timeout=60)
    assert proc.returncode == 0, proc.stderr
    assert "wrote 1 trajectories" in proc.stdout
