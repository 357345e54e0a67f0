import json
import subprocess
import sys
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from swavenet.checkpoint import save_checkpoint, snapshot
from swavenet.cli import main, parse_run_config
from swavenet.data import read_swn, write_sidecar
from swavenet.errors import ConfigError
from swavenet.model import ModelConfig, init_params


def run_cli(*argv):
    return main(list(argv))


def write_run_config(path, data_path, out_csv=None, out_ckpt=None, **model_kw):
    model = dict(layers=2, stochastic_layers=1, hidden_dim=6, latent_total=2,
                 frame_dim=1, seed=3)
    model.update(model_kw)
    doc = {
        "model": model,
        "train": {"batch_size": 8, "epochs": 1, "val_fraction": 0.25},
        "data": str(data_path),
    }
    if out_csv:
        doc["out_csv"] = str(out_csv)
    if out_ckpt:
        doc["out_checkpoint"] = str(out_ckpt)
    path.write_text(json.dumps(doc))
    return doc


def make_stub_checkpoint(tmp_path, **model_kw):
    model = dict(layers=2, stochastic_layers=1, hidden_dim=6, latent_total=2,
                 frame_dim=1, seed=3)
    model.update(model_kw)
    cfg = ModelConfig(**model)
    gen, inf = init_params(cfg)
    path = tmp_path / "stub.ckpt"
    save_checkpoint(path, snapshot(gen, inf))
    write_sidecar(path, {"model": model})
    return cfg, gen, inf, str(path)


def test_make_data_writes_file_and_sidecar(tmp_path):
    out = tmp_path / "walk.swn"
    assert run_cli("make-data", "--task", "bimodal", "-n", "20", "-t", "16",
                   "--seed", "4", "--out", str(out)) == 0
    batch = read_swn(out)
    assert batch.batch_size == 20 and batch.max_len == 16 and batch.frame_dim == 1
    sidecar = json.loads((tmp_path / "walk.swn.json").read_text())
    assert sidecar["seed"] == 4 and sidecar["task"] == "bimodal"


def test_make_data_same_seed_identical_bytes(tmp_path):
    a, b = tmp_path / "a.swn", tmp_path / "b.swn"
    run_cli("make-data", "--task", "stroke", "-n", "5", "-t", "30", "--seed", "9",
            "--out", str(a))
    run_cli("make-data", "--task", "stroke", "-n", "5", "-t", "30", "--seed", "9",
            "--out", str(b))
    assert a.read_bytes() == b.read_bytes()


def test_make_data_empty_dataset_valid(tmp_path):
    out = tmp_path / "empty.swn"
    assert run_cli("make-data", "--task", "bimodal", "-n", "0", "-t", "4",
                   "--out", str(out)) == 0
    assert read_swn(out).batch_size == 0


def test_train_produces_artifacts(tmp_path, capsys):
    data = tmp_path / "train.swn"
    run_cli("make-data", "--task", "bimodal", "-n", "24", "-t", "12", "--out", str(data))
    cfg_path = tmp_path / "run.json"
    csv_path = tmp_path / "metrics.csv"
    ckpt_path = tmp_path / "model.ckpt"
    write_run_config(cfg_path, data, out_csv=csv_path, out_ckpt=ckpt_path)
    assert run_cli("train", "--config", str(cfg_path)) == 0
    assert csv_path.exists() and ckpt_path.exists()
    sidecar = json.loads((str(ckpt_path) + ".json").replace("\\", "/") and
                         (tmp_path / "model.ckpt.json").read_text())
    assert sidecar["model"]["layers"] == 2
    assert "best_val_elbo" in sidecar


def test_train_missing_dataset_exits_2(tmp_path):
    cfg_path = tmp_path / "run.json"
    write_run_config(cfg_path, tmp_path / "nope.swn")
    assert run_cli("train", "--config", str(cfg_path)) == 2


def test_train_unknown_key_exits_2_naming_field(tmp_path, capsys):
    cfg_path = tmp_path / "run.json"
    doc = write_run_config(cfg_path, tmp_path / "x.swn")
    doc["model"]["hidden_dims"] = 4
    cfg_path.write_text(json.dumps(doc))
    assert run_cli("train", "--config", str(cfg_path)) == 2
    assert "model.hidden_dims" in capsys.readouterr().err


def test_parse_run_config_type_errors():
    with pytest.raises(ConfigError):
        parse_run_config({"model": {"layers": "three"}})
    with pytest.raises(ConfigError):
        parse_run_config({"bogus": 1})
    with pytest.raises(ConfigError):
        parse_run_config({"train": {"batch_size": True}})


def test_flag_overrides_config(tmp_path):
    data = tmp_path / "d.swn"
    run_cli("make-data", "--task", "bimodal", "-n", "16", "-t", "8", "--out", str(data))
    cfg_path = tmp_path / "run.json"
    csv_a = tmp_path / "a.csv"
    write_run_config(cfg_path, data)
    assert run_cli("train", "--config", str(cfg_path), "--epochs", "0",
                   "--out-csv", str(csv_a)) == 0
    assert csv_a.read_text().strip().splitlines()[1:] == []  # no steps ran


def test_train_rerun_byte_identical(tmp_path):
    data = tmp_path / "d.swn"
    run_cli("make-data", "--task", "bimodal", "-n", "20", "-t", "10", "--out", str(data))
    outs = []
    for tag in ("one", "two"):
        cfg_path = tmp_path / f"{tag}.json"
        csv_path = tmp_path / f"{tag}.csv"
        ckpt_path = tmp_path / f"{tag}.ckpt"
        write_run_config(cfg_path, data, out_csv=csv_path, out_ckpt=ckpt_path)
        assert run_cli("train", "--config", str(cfg_path)) == 0
        outs.append((csv_path.read_bytes(), ckpt_path.read_bytes()))
    assert outs[0] == outs[1]


def test_eval_exact_agrees_with_elbo_for_s0(tmp_path, capsys):
    data = tmp_path / "d.swn"
    run_cli("make-data", "--task", "bimodal", "-n", "10", "-t", "8", "--out", str(data))
    _, _, _, ckpt = make_stub_checkpoint(tmp_path, stochastic_layers=0)
    capsys.readouterr()

    assert run_cli("eval", "--checkpoint", ckpt, "--data", str(data)) == 0
    elbo_val = float(capsys.readouterr().out.split()[0])
    assert run_cli("eval", "--checkpoint", ckpt, "--data", str(data),
                   "--estimator", "exact") == 0
    exact_val = float(capsys.readouterr().out.split()[0])
    assert abs(elbo_val - exact_val) < 1e-12


def test_eval_exact_rejected_for_latent_model(tmp_path):
    data = tmp_path / "d.swn"
    run_cli("make-data", "--task", "bimodal", "-n", "6", "-t", "8", "--out", str(data))
    _, _, _, ckpt = make_stub_checkpoint(tmp_path, stochastic_layers=1)
    assert run_cli("eval", "--checkpoint", ckpt, "--data", str(data),
                   "--estimator", "exact") == 2


def test_eval_segment_full_length_matches_per_sequence(tmp_path, capsys):
    data = tmp_path / "d.swn"
    run_cli("make-data", "--task", "bimodal", "-n", "8", "-t", "12", "--out", str(data))
    _, _, _, ckpt = make_stub_checkpoint(tmp_path)
    capsys.readouterr()
    run_cli("eval", "--checkpoint", ckpt, "--data", str(data))
    per_seq = float(capsys.readouterr().out.split()[0])
    run_cli("eval", "--checkpoint", ckpt, "--data", str(data),
            "--mode", "per_segment", "--segment-len", "12")
    per_seg = float(capsys.readouterr().out.split()[0])
    assert per_seq == pytest.approx(per_seg, abs=1e-12)


def test_eval_width_mismatch_exits_2(tmp_path):
    data = tmp_path / "d.swn"
    run_cli("make-data", "--task", "stroke", "-n", "4", "-t", "8", "--out", str(data))
    _, _, _, ckpt = make_stub_checkpoint(tmp_path, frame_dim=1)
    assert run_cli("eval", "--checkpoint", ckpt, "--data", str(data)) == 2


def test_sample_deterministic_svg(tmp_path):
    cfg, gen, inf, ckpt = make_stub_checkpoint(tmp_path, frame_dim=3)
    svg_a, svg_b = tmp_path / "a.svg", tmp_path / "b.svg"
    for svg in (svg_a, svg_b):
        assert run_cli("sample", "--checkpoint", ckpt, "-n", "2", "-t", "10",
                       "--temperature", "0.8", "--seed", "5",
                       "--out", str(tmp_path / "s.swn"), "--svg", str(svg)) == 0
    assert svg_a.read_bytes() == svg_b.read_bytes()
    ET.parse(svg_a)  # strict XML well-formedness


def test_sample_straight_line_checkpoint(tmp_path):
    model = dict(layers=1, stochastic_layers=0, hidden_dim=4, latent_total=1,
                 frame_dim=3, seed=0)
    cfg = ModelConfig(**model)
    gen, inf = init_params(cfg)
    for name, p in gen.items():
        p.values[...] = 0.0
    gen["emit.mean.b"].values[...] = np.array([1.0, 0.5, -5.0])
    path = tmp_path / "line.ckpt"
    save_checkpoint(path, snapshot(gen, inf))
    write_sidecar(path, {"model": model})
    svg = tmp_path / "line.svg"
    assert run_cli("sample", "--checkpoint", str(path), "-n", "1", "-t", "6",
                   "--temperature", "0.0", "--out", str(tmp_path / "line.swn"),
                   "--svg", str(svg)) == 0
    root = ET.parse(svg).getroot()
    polys = root.findall("{http://www.w3.org/2000/svg}polyline")
    assert len(polys) == 1
    pts = np.array([[float(v) for v in p.split(",")]
                    for p in polys[0].get("points").split()])
    d = np.diff(pts, axis=0)
    assert np.allclose(d[:, 0] * d[0, 1] - d[:, 1] * d[0, 0], 0.0)


def test_sample_pen_up_everywhere_has_no_polylines(tmp_path):
    model = dict(layers=1, stochastic_layers=0, hidden_dim=4, latent_total=1,
                 frame_dim=3, seed=0)
    cfg = ModelConfig(**model)
    gen, inf = init_params(cfg)
    for name, p in gen.items():
        p.values[...] = 0.0
    gen["emit.mean.b"].values[...] = np.array([1.0, 1.0, 1.0])
    path = tmp_path / "up.ckpt"
    save_checkpoint(path, snapshot(gen, inf))
    write_sidecar(path, {"model": model})
    svg = tmp_path / "up.svg"
    assert run_cli("sample", "--checkpoint", str(path), "-n", "1", "-t", "5",
                   "--temperature", "0.0", "--out", str(tmp_path / "up.swn"),
                   "--svg", str(svg)) == 0
    root = ET.parse(svg).getroot()
    assert root.findall("{http://www.w3.org/2000/svg}polyline") == []


def test_sample_svg_needs_stroke_frames(tmp_path):
    _, _, _, ckpt = make_stub_checkpoint(tmp_path, frame_dim=1)
    assert run_cli("sample", "--checkpoint", ckpt, "-n", "1", "-t", "4",
                   "--out", str(tmp_path / "s.swn"), "--svg",
                   str(tmp_path / "s.svg")) == 2


def test_gradcheck_passes_on_tiny_config(capsys):
    rc = run_cli("gradcheck", "--layers", "2", "--stochastic-layers", "1",
                 "--hidden-dim", "4", "--latent-total", "2", "--frame-dim", "1",
                 "--t", "6", "--batch", "2")
    out = capsys.readouterr().out
    assert rc == 0
    lines = [l for l in out.splitlines() if "max_rel_error" in l]
    names = [l.split(":")[0] for l in lines]
    assert len(names) == len(set(names))  # every group exactly once
    assert all("ok" in l for l in lines)


def test_gradcheck_negative_control(capsys):
    rc = run_cli("gradcheck", "--layers", "2", "--stochastic-layers", "1",
                 "--hidden-dim", "4", "--latent-total", "2", "--frame-dim", "1",
                 "--t", "6", "--batch", "1", "--inject-grad-error")
    assert rc == 1
    assert "FAIL" in capsys.readouterr().out


def test_gradcheck_size_cap():
    rc = run_cli("gradcheck", "--layers", "4", "--hidden-dim", "96",
                 "--latent-total", "8", "--frame-dim", "1")
    assert rc == 2


def test_ablate_dims_and_csv(tmp_path):
    data = tmp_path / "d.swn"
    run_cli("make-data", "--task", "bimodal", "-n", "12", "-t", "8", "--out", str(data))
    cfg_path = tmp_path / "run.json"
    doc = {
        "model": {"layers": 5, "stochastic_layers": 5, "hidden_dim": 4,
                  "latent_total": 500, "frame_dim": 1, "seed": 1},
        "train": {"batch_size": 6, "epochs": 1, "val_fraction": 0.25},
        "data": str(data),
    }
    cfg_path.write_text(json.dumps(doc))
    out = tmp_path / "ablate.csv"
    assert run_cli("ablate", "--config", str(cfg_path), "--s-list", "1,2,3,4,5",
                   "--out", str(out)) == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "setting,latent_per_layer,final_val_elbo,wall_clock"
    rows = [line.split(",") for line in lines[1:]]
    assert [int(r[0]) for r in rows] == [1, 2, 3, 4, 5]
    assert [int(r[1]) for r in rows] == [500, 250, 166, 125, 100]


def test_ablate_single_setting_and_invalid(tmp_path):
    data = tmp_path / "d.swn"
    run_cli("make-data", "--task", "bimodal", "-n", "10", "-t", "6", "--out", str(data))
    cfg_path = tmp_path / "run.json"
    write_run_config(cfg_path, data)
    out = tmp_path / "one.csv"
    assert run_cli("ablate", "--config", str(cfg_path), "--s-list", "1",
                   "--out", str(out)) == 0
    assert len(out.read_text().strip().splitlines()) == 2
    assert run_cli("ablate", "--config", str(cfg_path), "--s-list", "7",
                   "--out", str(out)) == 2
    assert run_cli("ablate", "--config", str(cfg_path), "--out", str(out)) == 2


def test_cli_entry_point_subprocess(tmp_path):
    out = tmp_path / "w.swn"
    proc = subprocess.run(
        [sys.executable, "-m", "swavenet.cli", "make-data", "--task", "bimodal",
         "-n", "3", "-t", "5", "--out", str(out)],
        capture_output=True, text=True)
    assert proc.returncode == 0
    assert read_swn(out).batch_size == 3
