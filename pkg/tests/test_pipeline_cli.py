"""End-to-end pipeline runs, report artifacts, and the CLI surface."""

import json
import subprocess
import sys

import numpy as np
import pytest

import miaudit as mi
from miaudit.cli_runner import (
    ExperimentConfig,
    load_config,
    rerender_from_scores,
    run_pipeline,
)
from miaudit.cli_runner.cli import main
from miaudit.cli_runner.pipeline import resolve_workers
from miaudit.errors import ConfigError
from miaudit.scores import read_score_records

FAST_OVERRIDES = {
    "seed": "5",
    "dataset.n_per_class": "6",
    "dataset.classes": "3",
    "dataset.dim": "6",
    "dataset.separation": "1.0",
    "dataset.heldout_per_class": "6",
    "target.hidden_dims": "16",
    "target.epochs": "30",
    "target.batch_size": "8",
    "attack.n_iter": "8",
    "protocol.repeats": "3",
    "protocol.ratios": "2:1,1:1,1:2",
    "protocol.ratio_repeats": "3",
    "protocol.fpr_grid_points": "21",
    "histogram.bins": "10",
}


def fast_config(**extra):
    values = dict(FAST_OVERRIDES)
    values.update(extra)
    return ExperimentConfig(values)


@pytest.fixture(autouse=True)
def serial_workers(monkeypatch):
    monkeypatch.delenv("MIAUDIT_WORKERS", raising=False)


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    """One pipeline run with threshold and attacker strategies mixed."""
    out = tmp_path_factory.mktemp("audit")
    config = fast_config(
        **{"strategies": "loss,adv_dist,attacker_grad_w,attacker_ensemble"}
    )
    report, out_dir = run_pipeline(config, out_dir=out)
    return report, out_dir, config


class TestPipelineRun:
    def test_artifacts_exist(self, full_run):
        report, out, _ = full_run
        assert (out / "report.json").is_file()
        assert (out / "target.ckpt").is_file()
        assert (out / "attacker_grad_w.ckpt").is_file()
        assert (out / "attacker_ensemble.ckpt").is_file()
        for name in ("loss", "adv_dist", "attacker_grad_w", "attacker_ensemble"):
            assert (out / f"scores_{name}.csv").is_file()
            assert (out / f"roc_{name}.csv").is_file()
            assert (out / f"hist_{name}.csv").is_file()

    def test_report_shape(self, full_run):
        report, out, _ = full_run
        payload = json.loads((out / "report.json").read_text())
        assert payload["schema_version"] == 1
        assert payload["seed"] == 5
        for key in ("config", "dataset", "target", "splits", "strategies"):
            assert key in payload
        assert set(payload["strategies"]) == {
            "loss",
            "adv_dist",
            "attacker_grad_w",
            "attacker_ensemble",
        }
        for name, block in payload["strategies"].items():
            assert block["kind"] == ("attacker" if name.startswith("attacker") else "threshold")
            assert 0.0 <= block["analysis1"]["auroc_mean"] <= 1.0
            assert len(block["analysis1"]["aurocs"]) == 3
            assert 0.0 <= block["analysis2"]["balanced_accuracy"] <= 1.0
            rule = block["analysis2"]["threshold_rule"]
            assert rule == ("fixed_0.5" if name.startswith("attacker") else "swept")

    def test_attacker_split_hygiene(self, full_run):
        report, out, _ = full_run
        payload = json.loads((out / "report.json").read_text())
        splits = payload["splits"]
        # 0.4 of min(18, 18) per side, balanced, removed from the eval pools
        assert splits["members_total"] == 18
        assert splits["nonmembers_total"] == 18
        assert splits["attacker_train_members"] == 7
        assert splits["attacker_train_nonmembers"] == 7
        assert splits["eval_members"] == 11
        assert splits["eval_nonmembers"] == 11

    def test_score_csv_matches_split(self, full_run):
        _, out, _ = full_run
        records = read_score_records(out / "scores_loss.csv")
        members = [r for r in records if r.is_member]
        nonmembers = [r for r in records if not r.is_member]
        assert len(members) == 11 and len(nonmembers) == 11
        assert all(r.strategy == "loss" for r in records)
        # member ids precede nonmember ids in the global numbering
        assert max(r.sample_id for r in members) < min(r.sample_id for r in nonmembers)

    def test_adv_dist_scores_within_budget(self, full_run):
        _, out, _ = full_run
        records = read_score_records(out / "scores_adv_dist.csv")
        assert all(0.0 <= r.score <= 1.0 for r in records)

    def test_attacker_scores_are_probabilities(self, full_run):
        _, out, _ = full_run
        records = read_score_records(out / "scores_attacker_ensemble.csv")
        assert all(0.0 <= r.score <= 1.0 for r in records)

    def test_roc_csv_parses(self, full_run):
        _, out, _ = full_run
        rows = (out / "roc_loss.csv").read_text().strip().splitlines()
        assert rows[0] == "fpr,tpr_mean,tpr_std"
        assert len(rows) == 22
        first = rows[1].split(",")
        last = rows[-1].split(",")
        assert float(first[0]) == 0.0 and float(last[0]) == 1.0

    def test_hist_csv_parses(self, full_run):
        _, out, _ = full_run
        rows = (out / "hist_adv_dist.csv").read_text().strip().splitlines()
        assert rows[0] == "bin_lo,bin_hi,member_count,nonmember_count"
        assert len(rows) == 11
        assert float(rows[1].split(",")[0]) == 0.0
        total_members = sum(int(r.split(",")[2]) for r in rows[1:])
        assert total_members == 11

    def test_checkpoint_reloads(self, full_run):
        _, out, _ = full_run
        model = mi.load_checkpoint(out / "target.ckpt")
        assert model.layer_dims == [6, 16, 3]


class TestDeterminism:
    def test_same_config_same_bytes(self, tmp_path):
        config = fast_config(**{"strategies": "loss,attacker_grad_w"})
        _, out_a = run_pipeline(config, out_dir=tmp_path / "a")
        _, out_b = run_pipeline(config, out_dir=tmp_path / "b")
        for name in ("report.json", "scores_loss.csv", "roc_loss.csv", "target.ckpt"):
            assert (out_a / name).read_bytes() == (out_b / name).read_bytes(), name

    def test_seed_changes_scores(self, tmp_path):
        base = fast_config(**{"strategies": "loss"})
        other = fast_config(**{"strategies": "loss", "seed": "6"})
        _, out_a = run_pipeline(base, out_dir=tmp_path / "a")
        _, out_b = run_pipeline(other, out_dir=tmp_path / "b")
        assert (out_a / "scores_loss.csv").read_bytes() != (out_b / "scores_loss.csv").read_bytes()


class TestRerender:
    def test_reproduces_analysis_sections(self, full_run, tmp_path):
        _, out, config = full_run
        report2, out2 = rerender_from_scores(config, out, tmp_path / "rerender")
        original = json.loads((out / "report.json").read_text())
        again = json.loads((out2 / "report.json").read_text())
        assert again["strategies"] == original["strategies"]
        assert again["splits"]["eval_members"] == original["splits"]["eval_members"]

    def test_missing_scores_dir(self, tmp_path):
        config = fast_config(**{"strategies": "loss"})
        with pytest.raises(mi.DataError):
            rerender_from_scores(config, tmp_path / "nowhere", tmp_path / "out")


class TestWorkers:
    def test_default_serial(self):
        assert resolve_workers() == 1

    def test_env_parsed(self, monkeypatch):
        monkeypatch.setenv("MIAUDIT_WORKERS", "3")
        assert resolve_workers() == 3

    def test_env_validated(self, monkeypatch):
        monkeypatch.setenv("MIAUDIT_WORKERS", "zero")
        with pytest.raises(ConfigError):
            resolve_workers()
        monkeypatch.setenv("MIAUDIT_WORKERS", "0")
        with pytest.raises(ConfigError):
            resolve_workers()

    def test_parallel_matches_serial(self, tmp_path, monkeypatch):
        config = fast_config(**{"strategies": "loss,adv_dist"})
        monkeypatch.delenv("MIAUDIT_WORKERS", raising=False)
        _, out_serial = run_pipeline(config, out_dir=tmp_path / "serial")
        monkeypatch.setenv("MIAUDIT_WORKERS", "2")
        _, out_par = run_pipeline(config, out_dir=tmp_path / "par")
        assert (out_serial / "report.json").read_bytes() == (out_par / "report.json").read_bytes()
        assert (out_serial / "scores_adv_dist.csv").read_bytes() == (
            out_par / "scores_adv_dist.csv"
        ).read_bytes()


class TestDebugDumps:
    def test_traces_and_features(self, tmp_path):
        config = fast_config(
            **{
                "strategies": "adv_dist,attacker_grad_x",
                "debug.dump_traces": "true",
                "debug.dump_features": "true",
            }
        )
        _, out = run_pipeline(config, out_dir=tmp_path / "dbg")
        traces = sorted((out / "traces").glob("trace_*.csv"))
        assert traces
        header = traces[0].read_text().splitlines()[0]
        assert header == "iteration,loss,distance,predicted_class"
        assert (out / "features_grad_x_stats.csv").is_file()


class TestTargetCheckpointReuse:
    def test_pretrained_target_loaded(self, tmp_path):
        config = fast_config(**{"strategies": "loss"})
        _, first = run_pipeline(config, out_dir=tmp_path / "first")
        reuse = fast_config(
            **{
                "strategies": "loss",
                "target.load_checkpoint": str(first / "target.ckpt"),
            }
        )
        report, second = run_pipeline(reuse, out_dir=tmp_path / "second")
        payload = json.loads((second / "report.json").read_text())
        assert payload["target"]["epochs_run"] == 0
        assert (first / "target.ckpt").read_bytes() == (second / "target.ckpt").read_bytes()
        # identical model and data leave the member scores unchanged
        assert (first / "scores_loss.csv").read_bytes() == (second / "scores_loss.csv").read_bytes()


class TestCli:
    def write_cfg(self, tmp_path, extra=""):
        lines = [f"{k} = {v}" for k, v in FAST_OVERRIDES.items()]
        path = tmp_path / "run.cfg"
        path.write_text("\n".join(lines) + "\n" + extra)
        return path

    def test_audit_roundtrip(self, tmp_path, capsys):
        cfg = self.write_cfg(tmp_path, "strategies = loss\n")
        rc = main(["audit", "--config", str(cfg), "--out", str(tmp_path / "out")])
        assert rc == 0
        assert (tmp_path / "out" / "report.json").is_file()
        shown = capsys.readouterr().out
        assert "loss" in shown and "auroc" in shown

    def test_gen_data_then_file_audit(self, tmp_path, capsys):
        cfg = self.write_cfg(tmp_path)
        rc = main(
            ["gen-data", "--config", str(cfg), "--out", str(tmp_path / "ds"), "--format", "binary"]
        )
        assert rc == 0
        assert (tmp_path / "ds" / "train.bin").is_file()
        cfg2 = self.write_cfg(
            tmp_path,
            "strategies = loss\ndataset.source = binary\ndataset.path = "
            + str(tmp_path / "ds")
            + "\n",
        )
        cfg2 = cfg2.rename(tmp_path / "run2.cfg")
        rc = main(["audit", "--config", str(cfg2), "--out", str(tmp_path / "out2")])
        assert rc == 0

    def test_train_target_writes_checkpoint(self, tmp_path, capsys):
        cfg = self.write_cfg(tmp_path)
        rc = main(["train-target", "--config", str(cfg), "--out", str(tmp_path / "tt")])
        assert rc == 0
        assert (tmp_path / "tt" / "target.ckpt").is_file()
        summary = json.loads((tmp_path / "tt" / "target_summary.json").read_text())
        assert summary["train_accuracy"] >= 0.9

    def test_report_rerenders(self, tmp_path, capsys):
        cfg = self.write_cfg(tmp_path, "strategies = loss\n")
        assert main(["audit", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 0
        rc = main(
            [
                "report",
                "--config",
                str(cfg),
                "--scores-dir",
                str(tmp_path / "out"),
                "--out",
                str(tmp_path / "re"),
            ]
        )
        assert rc == 0
        assert (tmp_path / "re" / "report.json").is_file()

    def test_config_error_exit_code(self, tmp_path, capsys):
        missing = tmp_path / "absent.cfg"
        assert main(["audit", "--config", str(missing)]) == 2
        bad = tmp_path / "bad.cfg"
        bad.write_text("mystery.key = 1\n")
        assert main(["audit", "--config", str(bad)]) == 2
        assert "mystery.key" in capsys.readouterr().err

    def test_data_error_exit_code(self, tmp_path, capsys):
        cfg = self.write_cfg(
            tmp_path,
            "strategies = loss\ndataset.source = csv\ndataset.path = "
            + str(tmp_path / "missing_ds")
            + "\n",
        )
        assert main(["audit", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3

    def test_module_entrypoint_help(self):
        proc = subprocess.run(
            [sys.executable, "-m", "miaudit", "--help"],
            capture_output=True,
            text=True,
            timeout=60,
        )
        assert proc.returncode == 0
        for sub in ("gen-data", "train-target", "audit", "report"):
            assert sub in proc.stdout


class TestLoadConfigEntry:
    def test_load_config_reexported(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("seed = 3\n")
        assert load_config(path).seed == 3
