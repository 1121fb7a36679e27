import json
import subprocess
import sys

import pytest

from grounddial.cli import main


def run_cli(argv):
    return main(argv)


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    code = run_cli(["gen-synth", "--images", "4", "--objects", "8", "--rounds", "3",
                    "--candidates", "10", "--seed", "7", "--out", str(out)])
    assert code == 0
    return out


def small_train_args(synth_dir, out, extra=()):
    return ["train", "--data", str(synth_dir / "dataset.json"),
            "--out", str(out), "--epochs", "1", "--batch", "4",
            "--d-q", "8", "--d-e", "8", "--heads", "2", "--d-h", "8",
            "--seq-len", "10", "--max-history", "4", "--seed", "3", *extra]


def test_gen_synth_outputs(synth_dir):
    assert (synth_dir / "dataset.json").exists()
    assert (synth_dir / "features.bin").exists()
    manifest = json.loads((synth_dir / "manifest.json").read_text())
    assert manifest["command"] == "gen-synth"
    assert manifest["seed"] == 7


def test_gen_synth_idempotent_bytes(synth_dir, tmp_path):
    out2 = tmp_path / "again"
    assert run_cli(["gen-synth", "--images", "4", "--objects", "8", "--rounds", "3",
                    "--candidates", "10", "--seed", "7", "--out", str(out2)]) == 0
    assert (out2 / "dataset.json").read_bytes() == (synth_dir / "dataset.json").read_bytes()
    assert (out2 / "features.bin").read_bytes() == (synth_dir / "features.bin").read_bytes()


def test_gen_synth_unsatisfiable_exits_3(tmp_path, capsys):
    code = run_cli(["gen-synth", "--images", "1", "--objects", "20", "--colors", "4",
                    "--shapes", "4", "--out", str(tmp_path / "x")])
    assert code == 3
    assert "error" in capsys.readouterr().err


def test_unknown_flag_usage_error(synth_dir, tmp_path):
    with pytest.raises(SystemExit) as e:
        run_cli(small_train_args(synth_dir, tmp_path / "t", extra=["--bogus"]))
    assert e.value.code == 2
    assert not (tmp_path / "t").exists()  # no partial outputs on usage errors


def test_train_and_eval_roundtrip(synth_dir, tmp_path, capsys):
    out = tmp_path / "run"
    assert run_cli(small_train_args(synth_dir, out)) == 0
    assert (out / "metrics.jsonl").exists()
    assert (out / "best.bin").exists()
    capsys.readouterr()

    code = run_cli(["eval", "--ckpt", str(out / "best.bin"),
                    "--data", str(synth_dir / "dataset.json"), "--split", "train"])
    assert code == 0
    report = json.loads(capsys.readouterr().out)
    assert {"mrr", "r_at_1", "r_at_5", "r_at_10", "mean_rank", "ndcg",
            "grounding_top1"} <= set(report)


def test_train_determinism_byte_identical(synth_dir, tmp_path):
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    assert run_cli(small_train_args(synth_dir, out1)) == 0
    assert run_cli(small_train_args(synth_dir, out2)) == 0
    assert (out1 / "metrics.jsonl").read_bytes() == (out2 / "metrics.jsonl").read_bytes()
    assert (out1 / "best.bin").read_bytes() == (out2 / "best.bin").read_bytes()
    assert (out1 / "final.bin").read_bytes() == (out2 / "final.bin").read_bytes()


def test_train_config_file_with_flag_override(synth_dir, tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"epochs": 1, "batch": 4, "d_q": 8, "d_e": 8,
                                    "heads": 2, "d_h": 8, "seq_len": 10,
                                    "max_history": 4, "seed": 3, "kl_weight": 0.5}))
    out = tmp_path / "cfgrun"
    code = run_cli(["train", "--data", str(synth_dir / "dataset.json"),
                    "--out", str(out), "--config", str(cfg_path),
                    "--kl-weight", "0.0"])
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["kl_weight"] == 0.0   # flag beats file
    assert manifest["config"]["max_epochs"] == 1    # file beats default


def test_eval_ablate_and_export(synth_dir, tmp_path, capsys):
    out = tmp_path / "run"
    assert run_cli(small_train_args(synth_dir, out)) == 0
    capsys.readouterr()
    attn = tmp_path / "attn.jsonl"
    code = run_cli(["eval", "--ckpt", str(out / "best"),
                    "--data", str(synth_dir / "dataset.json"), "--split", "train",
                    "--ablate", "oracle", "--export-attention", str(attn),
                    "--with-answers"])
    assert code == 0
    report = json.loads(capsys.readouterr().out)
    assert report["grounding_top1"] == 1.0  # oracle mode grounds perfectly
    lines = attn.read_text().strip().split("\n")
    assert len(lines) == 12  # 4 images x 3 rounds
    rec = json.loads(lines[0])
    assert {"image_id", "round", "prior", "top3_prior", "posterior", "gt_grounding"} <= set(rec)


def test_eval_missing_checkpoint_exits_3(synth_dir, tmp_path, capsys):
    code = run_cli(["eval", "--ckpt", str(tmp_path / "nope.bin"),
                    "--data", str(synth_dir / "dataset.json"), "--split", "train"])
    assert code == 3


def test_eval_shape_mismatch_exits_3(synth_dir, tmp_path, capsys):
    out = tmp_path / "run"
    assert run_cli(small_train_args(synth_dir, out)) == 0
    other = tmp_path / "otherdata"
    assert run_cli(["gen-synth", "--images", "2", "--objects", "8", "--dv", "20",
                    "--seed", "1", "--out", str(other)]) == 0
    capsys.readouterr()
    code = run_cli(["eval", "--ckpt", str(out / "best"),
                    "--data", str(other / "dataset.json"), "--split", "train"])
    assert code == 3
    assert "mismatch" in capsys.readouterr().err


def test_console_entrypoint():
    proc = subprocess.run([sys.executable, "-m", "grounddial.cli", "--version"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
