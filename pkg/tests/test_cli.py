"""CLI tests: each subcommand end to end on the tiny configuration, exit
codes, and thread-count independence."""

import json
import os

import numpy as np
import pytest

from lavseg.cli import main
from lavseg.data import manifest_digest

from conftest import TINY_DOC


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    """A config file, generated dataset, and trained checkpoint."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "config.json"
    doc = {k: dict(v) for k, v in TINY_DOC.items()}
    doc["train"].update({"total_steps": 2, "warmup": 1, "batch": 2, "accum": 1})
    cfg_path.write_text(json.dumps(doc))
    data = root / "data"
    assert main(["gen-data", "--seed", "3", "--out", str(data),
                 "--train", "2", "--seen", "1", "--unseen", "1", "--null", "1",
                 "--config", str(cfg_path)]) == 0
    ckpt = root / "model.slv"
    assert main(["train", "--config", str(cfg_path), "--data", str(data),
                 "--out", str(ckpt)]) == 0
    return {"root": root, "config": cfg_path, "data": data, "ckpt": ckpt}


def test_train_outputs(cli_workspace):
    ckpt = cli_workspace["ckpt"]
    assert ckpt.exists()
    assert (ckpt.parent / "model.slv.loss.csv").exists()
    echoed = json.loads((ckpt.parent / "model.slv.config.json").read_text())
    assert echoed["train"]["total_steps"] == 2
    # the dataset geometry was adopted into the echoed config
    assert echoed["data"]["height"] == 16


def test_eval_and_reports(cli_workspace, tmp_path):
    report = tmp_path / "report.csv"
    jsn = tmp_path / "report.json"
    masks = tmp_path / "masks"
    assert main(["eval", "--ckpt", str(cli_workspace["ckpt"]),
                 "--data", str(cli_workspace["data"]),
                 "--splits", "seen,unseen,null",
                 "--report", str(report), "--json", str(jsn),
                 "--dump-masks", str(masks)]) == 0
    assert report.exists()
    doc = json.loads(jsn.read_text())
    assert set(doc["summary"]) == {"seen-test", "unseen-test", "mix", "null-test"}
    pred_doc = json.loads((masks / "predictions.json").read_text())
    assert len(pred_doc["samples"]) == 3
    first = pred_doc["samples"][0]
    assert (masks / first["dir"] / "pred_000.pgm").exists()


def test_render_overlays(cli_workspace, tmp_path):
    masks = tmp_path / "masks"
    assert main(["eval", "--ckpt", str(cli_workspace["ckpt"]),
                 "--data", str(cli_workspace["data"]), "--splits", "seen",
                 "--report", str(tmp_path / "r.csv"),
                 "--dump-masks", str(masks)]) == 0
    out = tmp_path / "overlays"
    assert main(["render-overlays", "--data", str(cli_workspace["data"]),
                 "--predictions", str(masks), "--out", str(out)]) == 0
    assert (out / "seen-test" / "seen-test-0000" / "overlay_000.ppm").exists()


def test_ablate_axis(cli_workspace, tmp_path):
    out = tmp_path / "ablate.csv"
    assert main(["ablate", "--axis", "strategy",
                 "--values", "learnable-token,mean",
                 "--config", str(cli_workspace["config"]),
                 "--data", str(cli_workspace["data"]), "--out", str(out)]) == 0
    lines = out.read_text().strip().splitlines()
    assert len(lines) == 3
    assert lines[0].startswith("axis,value,seen_J")


def test_gradcheck_ops_scope():
    assert main(["gradcheck", "--scope", "ops"]) == 0


def test_exit_code_config_error(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"bogus_key": 1}}))
    assert main(["gen-data", "--seed", "1", "--out", str(tmp_path / "d"),
                 "--train", "1", "--seen", "0", "--unseen", "0", "--null", "0",
                 "--config", str(bad)]) == 1


def test_exit_code_io_error(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nonexistent"),
                 "--out", str(tmp_path / "m.slv")]) == 2
    assert main(["eval", "--ckpt", str(tmp_path / "missing.slv"),
                 "--data", str(tmp_path / "nonexistent"),
                 "--report", str(tmp_path / "r.csv")]) == 2


def test_bad_ablate_axis(cli_workspace, tmp_path):
    assert main(["ablate", "--axis", "bogus", "--values", "1",
                 "--data", str(cli_workspace["data"]),
                 "--out", str(tmp_path / "a.csv")]) == 1


def test_slv_threads_validation(cli_workspace, tmp_path, monkeypatch):
    monkeypatch.setenv("SLV_THREADS", "zero")
    assert main(["train", "--config", str(cli_workspace["config"]),
                 "--data", str(cli_workspace["data"]),
                 "--out", str(tmp_path / "m.slv")]) == 1
    monkeypatch.setenv("SLV_THREADS", "0")
    assert main(["train", "--config", str(cli_workspace["config"]),
                 "--data", str(cli_workspace["data"]),
                 "--out", str(tmp_path / "m.slv")]) == 1


def test_gen_data_deterministic(cli_workspace, tmp_path):
    again = tmp_path / "again"
    assert main(["gen-data", "--seed", "3", "--out", str(again),
                 "--train", "2", "--seen", "1", "--unseen", "1", "--null", "1",
                 "--config", str(cli_workspace["config"])]) == 0
    assert manifest_digest(again) == manifest_digest(cli_workspace["data"])
    a = (again / "train" / "0000" / "frames.f32").read_bytes()
    b = (cli_workspace["data"] / "train" / "0000" / "frames.f32").read_bytes()
    assert a == b
