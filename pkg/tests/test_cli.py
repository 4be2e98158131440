import csv
import hashlib
import json
import os

import numpy as np
import pytest

from latentloop.cli import main


def run_cli(argv):
    try:
        return main(argv)
    except SystemExit as exc:
        return exc.code


def file_hash(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


TINY_CONFIG = {
    "model": {"hidden": 16, "n_blocks": 1, "h_cycles": 1, "l_cycles": 1,
              "outer_steps": 2, "mlp_expansion": 2, "token_expansion": 2,
              "damping": 0.05, "noise_scale": 0.01},
    "train": {"schedule": "sot", "n_sup": 2, "batch_size": 8,
              "total_steps": 10},
    "optimizer": {"lr": 1e-3, "warmup_steps": 0, "weight_decay": 0.0},
}


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "sudoku4"
    code = run_cli(["gen-data", "sudoku4", "count=48", "eval_count=16",
                    "seed=5", "--out", str(out)])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory, data_dir):
    work = tmp_path_factory.mktemp("run")
    cfg_path = work / "config.json"
    cfg_path.write_text(json.dumps(TINY_CONFIG))
    prefix = work / "model"
    code = run_cli(["train", "--config", str(cfg_path), "--data",
                    str(data_dir), "--out", str(prefix), "--seed", "3"])
    assert code == 0
    return prefix


class TestGenData:
    def test_files_and_manifest(self, data_dir):
        manifest = json.loads((data_dir / "manifest.json").read_text())
        assert manifest["splits"] == {"train": 48, "eval": 16}
        assert len((data_dir / "train.txt").read_text().splitlines()) == 48
        assert len((data_dir / "eval.txt").read_text().splitlines()) == 16

    def test_rerun_same_seed_identical(self, data_dir, tmp_path):
        out2 = tmp_path / "again"
        assert run_cli(["gen-data", "sudoku4", "count=48", "eval_count=16",
                        "seed=5", "--out", str(out2)]) == 0
        for name in ("train.txt", "eval.txt", "manifest.json"):
            assert file_hash(data_dir / name) == file_hash(out2 / name)

    def test_unknown_task_usage_error(self, tmp_path):
        assert run_cli(["gen-data", "chess", "--out", str(tmp_path / "x")]) == 1

    def test_unknown_param_usage_error(self, tmp_path):
        assert run_cli(["gen-data", "sudoku4", "bogus=1",
                        "--out", str(tmp_path / "x")]) == 1

    def test_maze_task(self, tmp_path):
        out = tmp_path / "maze"
        assert run_cli(["gen-data", "maze9", "count=6", "eval_count=3",
                        "min_path=2", "--out", str(out)]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["vocab"]["5"] == "path"
        assert "mean_path_length" in manifest["stats"]


class TestTrain:
    def test_smoke_run_log_rows(self, trained):
        rows = list(csv.reader(open(f"{trained}.log.csv")))
        assert rows[0][0] == "step"
        assert len(rows) == 1 + 10  # header + one row per optimizer step
        assert [r[0] for r in rows[1:]] == [str(i) for i in range(1, 11)]
        assert os.path.exists(f"{trained}.ckpt")

    def test_missing_data_path(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps(TINY_CONFIG))
        code = run_cli(["train", "--config", str(cfg), "--data",
                        str(tmp_path / "nope"), "--out",
                        str(tmp_path / "m")])
        assert code == 2

    def test_resume_continues_step_numbering(self, data_dir, tmp_path):
        cfg = dict(TINY_CONFIG)
        cfg["train"] = dict(TINY_CONFIG["train"], total_steps=6)
        cfg_path = tmp_path / "c6.json"
        cfg_path.write_text(json.dumps(cfg))

        # straight 12-step run
        cfg12 = dict(TINY_CONFIG)
        cfg12["train"] = dict(TINY_CONFIG["train"], total_steps=12)
        cfg12_path = tmp_path / "c12.json"
        cfg12_path.write_text(json.dumps(cfg12))
        assert run_cli(["train", "--config", str(cfg12_path), "--data",
                        str(data_dir), "--out", str(tmp_path / "full"),
                        "--seed", "9"]) == 0

        # 6 steps, then resume for 6 more
        assert run_cli(["train", "--config", str(cfg_path), "--data",
                        str(data_dir), "--out", str(tmp_path / "half"),
                        "--seed", "9"]) == 0
        cfg_resume = dict(TINY_CONFIG)
        cfg_resume["train"] = dict(TINY_CONFIG["train"], total_steps=12)
        cfg_resume_path = tmp_path / "cr.json"
        cfg_resume_path.write_text(json.dumps(cfg_resume))
        assert run_cli(["train", "--config", str(cfg_resume_path), "--data",
                        str(data_dir), "--out", str(tmp_path / "half"),
                        "--seed", "9", "--resume",
                        str(tmp_path / "half.ckpt")]) == 0

        full = list(csv.reader(open(tmp_path / "full.log.csv")))[1:]
        half = list(csv.reader(open(tmp_path / "half.log.csv")))[1:]
        assert [r[0] for r in half] == [r[0] for r in full]  # step numbering
        # resumed loss curve matches the straight run exactly
        assert [r[1] for r in half] == [r[1] for r in full]

    def test_set_override_beats_config(self, data_dir, tmp_path):
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text(json.dumps(TINY_CONFIG))
        prefix = tmp_path / "m"
        assert run_cli(["train", "--config", str(cfg_path), "--data",
                        str(data_dir), "--out", str(prefix),
                        "--set", "train.total_steps=3"]) == 0
        rows = list(csv.reader(open(f"{prefix}.log.csv")))
        assert len(rows) == 1 + 3


class TestScaleSweep:
    def test_grid_rows(self, trained, data_dir, tmp_path):
        out = tmp_path / "sweep.csv"
        code = run_cli(["scale-sweep", "--checkpoint", f"{trained}.ckpt",
                        "--data", str(data_dir), "--depths", "2,4",
                        "--breadths", "1,2", "--window", "2",
                        "--out", str(out), "--max-instances", "4"])
        assert code == 0
        rows = list(csv.DictReader(open(out)))
        assert len(rows) == 4
        assert rows[0]["params_set"] == "raw"
        cell = {(int(r["D"]), int(r["B"])): r for r in rows}
        assert int(cell[(4, 2)]["nfe"]) == 8
        eq = 1 * 1 * (1 + 1)  # tiny config: blocks * h * (l+1)
        assert int(cell[(4, 2)]["nle"]) == 8 * eq

    def test_both_param_sets(self, trained, data_dir, tmp_path):
        out = tmp_path / "sweep2.csv"
        assert run_cli(["scale-sweep", "--checkpoint", f"{trained}.ckpt",
                        "--data", str(data_dir), "--depths", "2",
                        "--breadths", "1", "--window", "1", "--params",
                        "both", "--out", str(out),
                        "--max-instances", "4"]) == 0
        rows = list(csv.DictReader(open(out)))
        assert [r["params_set"] for r in rows] == ["raw", "ema"]

    def test_act_measured_nfe(self, trained, data_dir, tmp_path):
        out = tmp_path / "act.csv"
        assert run_cli(["scale-sweep", "--checkpoint", f"{trained}.ckpt",
                        "--data", str(data_dir), "--depths", "4",
                        "--breadths", "1", "--window", "1", "--act",
                        "--out", str(out), "--max-instances", "4"]) == 0
        rows = list(csv.DictReader(open(out)))
        assert float(rows[0]["nfe"]) <= 4.0

    def test_act_with_breadth_rejected(self, trained, data_dir, tmp_path):
        assert run_cli(["scale-sweep", "--checkpoint", f"{trained}.ckpt",
                        "--data", str(data_dir), "--depths", "4",
                        "--breadths", "2", "--act",
                        "--out", str(tmp_path / "x.csv")]) == 1


class TestDiagnose:
    def test_residual_trace_rows(self, trained, data_dir, tmp_path):
        out = tmp_path / "diag"
        assert run_cli(["diagnose", "--checkpoint", f"{trained}.ckpt",
                        "--data", str(data_dir), "--out", str(out),
                        "--residual-trace", "--depth", "3", "--restarts",
                        "2", "--max-instances", "2"]) == 0
        rows = list(csv.DictReader(open(out / "residual_trace.csv")))
        assert len(rows) == 2 * 2 * 3  # instances * restarts * steps
        assert set(rows[0]) == {"instance", "restart", "step", "residual"}

    def test_projection_columns(self, trained, data_dir, tmp_path):
        out = tmp_path / "diag2"
        assert run_cli(["diagnose", "--checkpoint", f"{trained}.ckpt",
                        "--data", str(data_dir), "--out", str(out),
                        "--project", "--depth", "3",
                        "--max-instances", "2"]) == 0
        rows = list(csv.DictReader(open(out / "projection.csv")))
        assert {"pc1", "pc2", "residual", "correct"} <= set(rows[0])

    def test_margin_and_contraction(self, trained, data_dir, tmp_path):
        out = tmp_path / "diag3"
        assert run_cli(["diagnose", "--checkpoint", f"{trained}.ckpt",
                        "--data", str(data_dir), "--out", str(out),
                        "--margin", "--contraction", "--depth", "2",
                        "--max-instances", "2", "--probe-pairs", "4"]) == 0
        margins = list(csv.DictReader(open(out / "margins.csv")))
        assert len(margins) == 2
        contraction = list(csv.DictReader(open(out / "contraction.csv")))
        assert float(contraction[0]["lipschitz_estimate"]) > 0

    def test_no_diagnostic_is_usage_error(self, trained, data_dir, tmp_path):
        assert run_cli(["diagnose", "--checkpoint", f"{trained}.ckpt",
                        "--data", str(data_dir),
                        "--out", str(tmp_path / "d")]) == 1

    def test_rerun_byte_identical(self, trained, data_dir, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert run_cli(["diagnose", "--checkpoint", f"{trained}.ckpt",
                            "--data", str(data_dir), "--out", str(out),
                            "--residual-trace", "--project", "--depth", "3",
                            "--max-instances", "2", "--seed", "4"]) == 0
            outs.append(out)
        for name in ("residual_trace.csv", "projection.csv"):
            assert file_hash(outs[0] / name) == file_hash(outs[1] / name)


def test_usage_error_on_no_command():
    assert run_cli([]) == 1
