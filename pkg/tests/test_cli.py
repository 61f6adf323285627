import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from helpers import track_frame

from maneuver_pooling.cli import load_checkpoint, main, save_checkpoint
from maneuver_pooling.config import ModelConfig
from maneuver_pooling.dataset import read_sample_fields, read_samples
from maneuver_pooling.model import ManeuverModel

FEET = 0.3048
TINY = ["--set", "enc_hidden=4", "--set", "dec_hidden=5", "--set", "embed_width=3", "--set", "mlp_width=6",
        "--set", "slstm_embed=3", "--set", "csp_embed=3", "--set", "csp_channels=2"]


def ngsim_csv(path, speed_scale=1.0, drop=None):
    """Three vehicles in NGSIM column layout, positions and speeds in feet."""
    df = pd.concat([
        track_frame(1, 18.0, 300.0, 80.0 * speed_scale, 2, n=120),
        track_frame(2, 6.0, 340.0, 85.0 * speed_scale, 1, n=120),
        track_frame(3, 18.0, 250.0, 78.0 * speed_scale, 2, a=-1.0, n=120),
    ])
    df = df.rename(columns={"vehicle_id": "Vehicle_ID", "frame_id": "Frame_ID", "local_x": "Local_X",
                            "local_y": "Local_Y", "lane_id": "Lane_ID", "velocity": "v_Vel",
                            "acceleration": "v_Acc"})
    if drop:
        df = df.drop(columns=[drop])
    df.to_csv(path, index=False)
    return path


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth") / "d"
    assert main(["synth", "--vehicles", "12", "--mix", "0.25:0.25:0.25:0.25", "--anchor-stride", "20",
                 "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained(synth_dir, tmp_path_factory):
    ck = tmp_path_factory.mktemp("ck")
    paths = {}
    for pooling in ("sgan", "polar_vr"):
        paths[pooling] = ck / f"{pooling}.ckpt"
        assert main(["train", "--data", str(synth_dir), "--pooling", pooling, "--max-steps", "2",
                     "--batch-size", "8", "--out", str(paths[pooling])] + TINY) == 0
    return paths


# preprocess

def test_preprocess_valid_file(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["preprocess", "--input", str(ngsim_csv(tmp_path / "a.csv")), "--out", str(out)]) == 0
    for name in ("train.mpss", "val.mpss", "test.mpss", "splits.json", "stats.json", "manifest.json"):
        assert (out / name).exists()
    stats = json.loads((out / "stats.json").read_text())
    assert stats["warnings"] == [] and stats["samples"] == sum(stats["splits"].values())
    assert stats["class_histogram"]["eval_class"]["keep"] == stats["samples"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["artifacts"]) >= {"train.mpss", "stats.json"}
    assert manifest["config"]["t_h"] == 3.0
    samples = read_samples(out / "train.mpss")
    assert samples and samples[0].history_len == 16 and samples[0].future_len == 25


def test_preprocess_missing_column(tmp_path, capsys):
    path = ngsim_csv(tmp_path / "a.csv", drop="Lane_ID")
    assert main(["preprocess", "--input", str(path), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "lane_id" in err and "a.csv" in err


def test_preprocess_duplicate_row_reports_line(tmp_path, capsys):
    path = ngsim_csv(tmp_path / "a.csv")
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines + [lines[5]]) + "\n")
    assert main(["preprocess", "--input", str(path), "--out", str(tmp_path / "o")]) == 2
    assert f"line {len(lines) + 1}" in capsys.readouterr().err


def test_preprocess_flags_implausible_speed(tmp_path, capsys):
    # feet-per-second values read as meters give speeds above 60 m/s
    path = ngsim_csv(tmp_path / "a.csv")
    out = tmp_path / "o"
    assert main(["preprocess", "--input", str(path), "--units", "meters", "--out", str(out)]) == 0
    stats = json.loads((out / "stats.json").read_text())
    assert stats["warnings"] and "60 m/s" in stats["warnings"][0]
    assert "warning" in capsys.readouterr().err
    out2 = tmp_path / "o2"
    assert main(["preprocess", "--input", str(path), "--units", "feet", "--out", str(out2)]) == 0
    assert json.loads((out2 / "stats.json").read_text())["warnings"] == []


def test_preprocess_config_file_and_unknown_key(tmp_path):
    path = ngsim_csv(tmp_path / "a.csv")
    cfg = tmp_path / "c.txt"
    cfg.write_text("# split\nsplit_ratios = 0.5, 0.25, 0.25\nanchor_stride = 5\n")
    out = tmp_path / "o"
    assert main(["preprocess", "--input", str(path), "--config", str(cfg), "--out", str(out)]) == 0
    assert json.loads((out / "manifest.json").read_text())["config"]["split_ratios"] == [0.5, 0.25, 0.25]
    assert main(["preprocess", "--input", str(path), "--set", "bogus=1", "--out", str(out)]) == 2


def test_preprocess_cartesian_only(tmp_path):
    out = tmp_path / "o"
    assert main(["preprocess", "--input", str(ngsim_csv(tmp_path / "a.csv")), "--no-polar",
                 "--out", str(out)]) == 0
    assert read_sample_fields(out / "train.mpss") == ["cartesian"]


# synth

def test_synth_keep_only(tmp_path):
    out = tmp_path / "s"
    assert main(["synth", "--vehicles", "6", "--mix", "1:0:0:0", "--anchor-stride", "20", "--out", str(out)]) == 0
    samples = [s for split in ("train", "val", "test") for s in read_samples(out / f"{split}.mpss")]
    assert samples and all(s.label.eval_class == "keep" for s in samples)


def test_synth_mix_counts(tmp_path):
    out = tmp_path / "s"
    assert main(["synth", "--vehicles", "100", "--mix", "0.25:0.25:0.25:0.25", "--anchor-stride", "200",
                 "--out", str(out)]) == 0
    truth = json.loads((out / "maneuvers.json").read_text())
    kinds = [m["kind"] for m in truth.values()]
    assert {k: kinds.count(k) for k in ("keep", "left", "right", "merge")} == {
        "keep": 25, "left": 25, "right": 25, "merge": 25}


def test_synth_byte_deterministic(tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    dirs = []
    for name in ("a", "b"):
        dirs.append(tmp_path / name)
        assert main(["synth", "--vehicles", "8", "--mix", "2:2:2:2", "--seed", "5", "--anchor-stride", "10",
                     "--out", str(dirs[-1])]) == 0
    files = sorted(p.name for p in dirs[0].iterdir())
    assert files == sorted(p.name for p in dirs[1].iterdir())
    for name in files:
        assert (dirs[0] / name).read_bytes() == (dirs[1] / name).read_bytes(), name


@pytest.mark.parametrize("mix", ["1:1:1", "a:b:c:d", "0:0:0:0", "-1:1:1:1", "20:0:0:0"])
def test_synth_infeasible_mix(tmp_path, mix):
    assert main(["synth", "--vehicles", "10", f"--mix={mix}", "--out", str(tmp_path / "s")]) == 2


# train

def test_train_outputs(trained):
    ck = trained["polar_vr"]
    for suffix in ("", ".json", ".log.jsonl", ".manifest.json"):
        assert Path(str(ck) + suffix).exists()
    records = [json.loads(line) for line in Path(str(ck) + ".log.jsonl").read_text().splitlines()]
    assert records[0]["provenance"] == "implementation choice"
    assert any(r.get("split") == "train" for r in records)
    sidecar = json.loads(Path(str(ck) + ".json").read_text())
    assert sidecar["model"]["pooling"] == "polar_vr" and sidecar["model"]["enc_hidden"] == 4
    model = load_checkpoint(ck)
    assert model.cfg.parameterization == "trivariate" and model.dtype == np.float32


def test_train_bitwise_reproducible(synth_dir, tmp_path):
    outs = []
    for name in ("a", "b"):
        outs.append(tmp_path / f"{name}.ckpt")
        assert main(["train", "--data", str(synth_dir), "--pooling", "csp", "--max-steps", "2",
                     "--batch-size", "8", "--seed", "4", "--out", str(outs[-1])] + TINY) == 0
    assert outs[0].read_bytes() == outs[1].read_bytes()


def test_train_maneuvers_off(synth_dir, tmp_path):
    ck = tmp_path / "off.ckpt"
    assert main(["train", "--data", str(synth_dir), "--pooling", "sgan", "--maneuvers", "off",
                 "--max-steps", "1", "--batch-size", "8", "--out", str(ck)] + TINY) == 0
    assert not load_checkpoint(ck).cfg.maneuvers


def test_train_unknown_pooling(synth_dir, tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--data", str(synth_dir), "--pooling", "gcn", "--out", str(tmp_path / "x")])
    assert exc.value.code == 2
    err = capsys.readouterr().err
    assert all(k in err for k in ("slstm", "csp", "sgan", "polar", "polar_vr"))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exit_code(synth_dir, tmp_path, capsys):
    ck = tmp_path / "x.ckpt"
    code = main(["train", "--data", str(synth_dir), "--pooling", "sgan", "--max-steps", "3",
                 "--batch-size", "8", "--lr", "1e30", "--set", "clip_norm=1e30", "--out", str(ck)] + TINY)
    assert code == 3
    assert "diverged" in capsys.readouterr().err


def test_train_missing_data(tmp_path):
    assert main(["train", "--data", str(tmp_path), "--pooling", "sgan", "--out", str(tmp_path / "x")]) == 2


def test_checkpoint_round_trip(tmp_path):
    model = ManeuverModel(ModelConfig(pooling="slstm", enc_hidden=4, slstm_embed=3), seed=3)
    save_checkpoint(tmp_path / "m.ckpt", model)
    again = load_checkpoint(tmp_path / "m.ckpt")
    assert again.cfg == model.cfg
    for name, t in model.params.items():
        assert again.params[name].data.tobytes() == t.data.tobytes()
    (tmp_path / "bad").write_bytes(b"nope")
    with pytest.raises(Exception):
        load_checkpoint(tmp_path / "bad")


# eval / compare

def test_eval_report(trained, synth_dir, tmp_path, capsys):
    report = tmp_path / "r.txt"
    assert main(["eval", "--ckpt", str(trained["sgan"]), "--data", str(synth_dir), "--report", str(report)]) == 0
    text = report.read_text(encoding="utf-8")
    assert "S-GAN" in text and "overall" in text and "NGSIM reference" in text
    data = json.loads(Path(str(report) + ".json").read_text())
    assert "sgan" in data["results"] and data["results"]["sgan"]["overall"]["count"] > 0
    assert text in capsys.readouterr().out


def test_eval_keep_only_rows(tmp_path):
    data = tmp_path / "k"
    assert main(["synth", "--vehicles", "6", "--mix", "1:0:0:0", "--anchor-stride", "20", "--out", str(data)]) == 0
    ck = tmp_path / "m.ckpt"
    assert main(["train", "--data", str(data), "--pooling", "sgan", "--max-steps", "1", "--out", str(ck)] + TINY) == 0
    report = tmp_path / "r.txt"
    assert main(["eval", "--ckpt", str(ck), "--data", str(data), "--report", str(report), "--no-reference"]) == 0
    rows = [line.split()[0] for line in report.read_text().splitlines()[2:]]
    assert rows == ["overall", "keep"]


def test_compare_side_by_side(trained, synth_dir, tmp_path):
    report = tmp_path / "cmp.json"
    assert main(["compare", "--ckpt", str(trained["sgan"]), str(trained["polar_vr"]), "--data", str(synth_dir),
                 "--report", str(report)]) == 0
    table = (tmp_path / "cmp.txt").read_text()
    header = [line for line in table.splitlines() if line.startswith("horizon")][0]
    assert "S-GAN" in header and "Polar-Vr" in header
    assert set(json.loads(report.read_text())["results"]) == {"sgan", "polar_vr"}


def test_eval_unwritable_report(trained, synth_dir, tmp_path):
    target = tmp_path / "missing" / "dir" / "r.txt"
    assert main(["eval", "--ckpt", str(trained["sgan"]), "--data", str(synth_dir), "--report", str(target)]) == 2


def test_eval_trivariate_on_cartesian_only(trained, tmp_path, capsys):
    data = tmp_path / "cart"
    assert main(["preprocess", "--input", str(ngsim_csv(tmp_path / "a.csv")), "--no-polar",
                 "--out", str(data)]) == 0
    assert main(["eval", "--ckpt", str(trained["polar_vr"]), "--data", str(data)]) == 2
    assert "polar" in capsys.readouterr().err
    assert main(["eval", "--ckpt", str(trained["sgan"]), "--data", str(data)]) == 0


# threads

def test_threads_flag_and_env(synth_dir, tmp_path, monkeypatch):
    assert main(["--threads", "1", "synth", "--vehicles", "4", "--anchor-stride", "40",
                 "--out", str(tmp_path / "a")]) == 0
    monkeypatch.setenv("MP_THREADS", "2")
    assert main(["synth", "--vehicles", "4", "--anchor-stride", "40", "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "train.mpss").read_bytes() == (tmp_path / "b" / "train.mpss").read_bytes()
    monkeypatch.setenv("MP_THREADS", "zero")
    assert main(["synth", "--vehicles", "4", "--out", str(tmp_path / "c")]) == 2


def test_console_script(tmp_path):
    env = dict(os.environ, PYTHONPATH=os.pathsep.join(sys.path))
    proc = subprocess.run([sys.executable, "-m", "maneuver_pooling.cli", "--version"],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 0 and "maneuver-pooling" in proc.stdout
