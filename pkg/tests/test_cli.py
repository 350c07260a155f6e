"""End-to-end command-line behavior: artifacts, determinism, exit codes."""

import json
import subprocess

import numpy as np
import pytest
import torch

from crossres.cli import EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, main
from crossres.config import AblateConfig, load_config, save_config
from crossres.data import load_image, save_image

from test_training import tiny_config

torch.set_num_threads(1)


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Shared workspace: tiny config, synthesized dataset, one trained run."""
    root = tmp_path_factory.mktemp("cli_ws")
    cfg = tiny_config()
    cfg.ablate = AblateConfig(seeds=(0,), kd_steps=2, verify_pairs=8)
    cfg_path = root / "tiny.yaml"
    save_config(cfg, cfg_path)

    data = root / "data"
    assert main(["synth-data", "--config", str(cfg_path), "--out", str(data)]) == EXIT_OK

    run = root / "run"
    assert main([
        "train", "--config", str(cfg_path),
        "--data", str(data / "train.jsonl"), "--out", str(run),
    ]) == EXIT_OK
    return {"root": root, "cfg": cfg_path, "data": data, "run": run}


class TestSynthData:
    def test_dataset_artifacts(self, ws):
        data = ws["data"]
        for name in ("manifest.jsonl", "train.jsonl", "test.jsonl",
                     "config.yaml", "run_meta.json"):
            assert (data / name).is_file(), name
        assert any((data / "images").iterdir())
        assert any((data / "parsing").iterdir())

    def test_split_sizes_follow_config(self, ws):
        train = (ws["data"] / "train.jsonl").read_text().strip().splitlines()
        test = (ws["data"] / "test.jsonl").read_text().strip().splitlines()
        # 4 identities x 3 records, 2 held out per identity
        assert len(train) == 4
        assert len(test) == 8


class TestTrain:
    def test_run_artifacts(self, ws):
        run = ws["run"]
        for name in ("checkpoint.ckpt", "losses.jsonl", "losses.png",
                     "config.yaml", "run_meta.json"):
            assert (run / name).is_file(), name

    def test_repeat_run_is_byte_identical(self, ws):
        again = ws["root"] / "run_again"
        rc = main([
            "train", "--config", str(ws["cfg"]),
            "--data", str(ws["data"] / "train.jsonl"), "--out", str(again),
        ])
        assert rc == EXIT_OK
        for name in ("checkpoint.ckpt", "losses.jsonl", "config.yaml"):
            assert (again / name).read_bytes() == (ws["run"] / name).read_bytes(), name

    def test_flag_overrides_land_in_snapshot(self, ws):
        out = ws["root"] / "run_flags"
        rc = main([
            "train", "--config", str(ws["cfg"]), "--steps", "1", "--seed", "9",
            "--e2e-coupling", "on", "--domain-source", "coarse",
            "--data", str(ws["data"] / "train.jsonl"), "--out", str(out),
        ])
        assert rc == EXIT_OK
        snap = load_config(out / "config.yaml")
        assert snap.train.steps == 1
        assert snap.seed == 9
        assert snap.train.e2e_coupling is True
        assert snap.fhn.domain_source == "coarse"


class TestEval:
    @pytest.mark.parametrize("protocol", ["sr-quality", "verify", "identify"])
    def test_protocols_produce_reports(self, ws, protocol):
        out = ws["root"] / f"eval_{protocol}"
        rc = main([
            "eval", "--ckpt", str(ws["run"] / "checkpoint.ckpt"),
            "--data", str(ws["data"] / "test.jsonl"),
            "--protocol", protocol, "--out", str(out),
        ])
        assert rc == EXIT_OK
        report = json.loads((out / "report.json").read_text())
        assert report["protocol"] == protocol

    def test_verify_writes_csd_plot(self, ws):
        out = ws["root"] / "eval_csd"
        main([
            "eval", "--ckpt", str(ws["run"] / "checkpoint.ckpt"),
            "--data", str(ws["data"] / "test.jsonl"),
            "--protocol", "verify", "--out", str(out),
        ])
        assert (out / "csd.png").stat().st_size > 0

    def test_ablate_subcommand(self, ws):
        out = ws["root"] / "eval_ablate"
        rc = main([
            "ablate", "--ckpt", str(ws["run"] / "checkpoint.ckpt"),
            "--data", str(ws["data"] / "test.jsonl"),
            "--train-data", str(ws["data"] / "train.jsonl"),
            "--out", str(out),
        ])
        assert rc == EXIT_OK
        report = json.loads((out / "report.json").read_text())
        assert report["protocol"] == "ablate"
        assert set(report["rows"]) == {
            "teacher_hr", "student_lr", "kd_lr",
            "fhn_teacher", "fhn_kd", "fhn_residual_kd",
        }


class TestSingleImage:
    def test_hallucinate_writes_png(self, ws):
        lr_path = ws["root"] / "probe_lr.png"
        rng = np.random.default_rng(0)
        save_image(rng.random((3, 8, 8)), lr_path)
        out_path = ws["root"] / "probe_sr.png"
        rc = main([
            "hallucinate", "--ckpt", str(ws["run"] / "checkpoint.ckpt"),
            "--image", str(lr_path), "--out", str(out_path),
        ])
        assert rc == EXIT_OK
        assert load_image(out_path).shape == (3, 64, 64)

    def test_hallucinate_rejects_wrong_size(self, ws, capsys):
        big = ws["root"] / "big.png"
        save_image(np.zeros((3, 32, 32)), big)
        rc = main([
            "hallucinate", "--ckpt", str(ws["run"] / "checkpoint.ckpt"),
            "--image", str(big), "--out", str(ws["root"] / "x.png"),
        ])
        assert rc == EXIT_VALIDATION
        assert "32x32" in capsys.readouterr().err

    def test_verify_same_image_matches(self, ws, capsys):
        record = json.loads((ws["data"] / "test.jsonl").read_text().splitlines()[0])
        img = str(ws["data"] / record["image_path"])
        rc = main([
            "verify", "--ckpt", str(ws["run"] / "checkpoint.ckpt"),
            "--image-a", img, "--image-b", img, "--threshold", "0.1",
        ])
        assert rc == EXIT_OK
        out = capsys.readouterr().out
        assert "distance 0.0000" in out
        assert "-> same" in out


class TestExitCodes:
    def test_no_command_prints_help(self, capsys):
        assert main([]) == EXIT_VALIDATION
        assert "synth-data" in capsys.readouterr().out

    def test_unknown_command(self, capsys):
        assert main(["frobnicate"]) == EXIT_VALIDATION
        assert "error" in capsys.readouterr().err

    def test_missing_required_argument(self, capsys):
        assert main(["train"]) == EXIT_VALIDATION

    def test_bad_protocol_choice(self, ws):
        rc = main([
            "eval", "--ckpt", str(ws["run"] / "checkpoint.ckpt"),
            "--data", str(ws["data"] / "test.jsonl"),
            "--protocol", "roc", "--out", str(ws["root"] / "nope"),
        ])
        assert rc == EXIT_VALIDATION

    def test_missing_config_file(self, ws):
        rc = main([
            "train", "--config", str(ws["root"] / "absent.yaml"),
            "--data", str(ws["data"] / "train.jsonl"),
            "--out", str(ws["root"] / "nope"),
        ])
        assert rc == EXIT_VALIDATION

    def test_missing_checkpoint(self, ws):
        rc = main([
            "eval", "--ckpt", str(ws["root"] / "absent.ckpt"),
            "--data", str(ws["data"] / "test.jsonl"),
            "--protocol", "sr-quality", "--out", str(ws["root"] / "nope"),
        ])
        assert rc == EXIT_VALIDATION

    def test_corrupt_checkpoint_is_a_runtime_error(self, ws):
        broken = ws["root"] / "broken.ckpt"
        blob = bytearray((ws["run"] / "checkpoint.ckpt").read_bytes())
        blob[-40] ^= 0xFF
        broken.write_bytes(bytes(blob))
        rc = main([
            "eval", "--ckpt", str(broken),
            "--data", str(ws["data"] / "test.jsonl"),
            "--protocol", "sr-quality", "--out", str(ws["root"] / "nope"),
        ])
        assert rc == EXIT_RUNTIME


def test_console_script_help():
    proc = subprocess.run(
        ["crossres", "--help"], capture_output=True, text=True, timeout=120
    )
    assert proc.returncode == 0
    assert "synth-data" in proc.stdout
