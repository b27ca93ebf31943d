import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from fromnet.cli import load_image, main
from fromnet.evaluate import build_pairs, save_pairs
from fromnet.synth import Manifest

SYNTH_CFG = """\
identities = 4
samples_per_identity = 8
height = 32
width = 32
K = 3
clean_fraction = {clean}
global_seed = {seed}
"""

TRAIN_CFG = """\
clean_manifest = {clean}
occluded_manifest = {occ}
batch_size = {batch}
epochs = 1
decay_epochs =
lr = 0.01
stage_channels = 8, 8, 16
pyramid_channels = 8
embedding_dim = 16
baseline_mode = {mode}
loss.lambda = 1.0
out_dir = {out}
"""


def test_patterns(capsys, tmp_path):
    assert main(["patterns", "--k", "5"]) == 0
    assert "226 patterns" in capsys.readouterr().out
    dump = tmp_path / "book.json"
    assert main(["patterns", "--k", "4", "--dump", str(dump)]) == 0
    data = json.loads(dump.read_text())
    assert data["count"] == 101 and data["patterns"][0]["kind"] == "clean"
    assert main(["patterns", "--k", "0"]) == 2


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "fromnet", "patterns", "--k", "2"], capture_output=True, text=True)
    assert out.returncode == 0 and "10 patterns" in out.stdout


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    for name, clean, seed in (("clean", 1.0, 1), ("occ", 0.0, 2)):
        (root / f"{name}.cfg").write_text(SYNTH_CFG.format(clean=clean, seed=seed))
        assert main(["synth", "--config", str(root / f"{name}.cfg"), "--out", str(root / f"{name}.jsonl")]) == 0
    (root / "pre.cfg").write_text(TRAIN_CFG.format(clean=root / "clean.jsonl", occ="", batch=8, mode="none", out=root / "runs"))
    (root / "ft.cfg").write_text(
        TRAIN_CFG.format(clean=root / "clean.jsonl", occ=root / "occ.jsonl", batch=9, mode="from", out=root / "runs")
    )
    assert main(["pretrain", "--config", str(root / "pre.cfg")]) == 0
    assert main(["finetune", "--config", str(root / "ft.cfg"), "--init", str(root / "runs" / "pretrain_last.pt")]) == 0
    return root


def test_synth_outputs(workspace, tmp_path):
    m = Manifest.load(workspace / "occ.jsonl")
    assert len(m) == 32 and not any(r["clean"] for r in m.records)
    assert main(["synth", "--config", str(workspace / "occ.cfg"), "--out", str(tmp_path / "again.jsonl"),
                 "--export-images", str(tmp_path / "png")]) == 0
    assert (tmp_path / "again.jsonl").read_bytes() == (workspace / "occ.jsonl").read_bytes()
    assert len(list((tmp_path / "png").glob("*.png"))) == 32


def test_synth_bad_config(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("identities = 0\n")
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "m.jsonl")]) == 2
    assert "identities" in capsys.readouterr().err


def test_finetune_requires_init(workspace):
    assert main(["finetune", "--config", str(workspace / "ft.cfg")]) == 2


def test_predict_pattern(workspace, capsys):
    m = Manifest.load(workspace / "occ.jsonl")
    img = m.images([0])[0].transpose(1, 2, 0)
    path = workspace / "probe.png"
    Image.fromarray(np.round((img + 1) * 127.5).astype(np.uint8)).save(path)
    arr = load_image(path, 32, 32)
    assert arr.shape == (3, 32, 32) and np.abs(arr - img.transpose(2, 0, 1)).max() < 0.01
    assert main(["predict-pattern", "--ckpt", str(workspace / "runs" / "finetune_from_last.pt"), "--image", str(path)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("pattern ")
    assert len(out[1:]) == 3 and all(len(line) == 3 and set(line) <= {"#", "."} for line in out[1:])


def test_eval(workspace, tmp_path, capsys):
    m = Manifest.load(workspace / "occ.jsonl")
    pairs_path = workspace / "pairs.jsonl"
    save_pairs(pairs_path, build_pairs([r["identity"] for r in m.records], 200), "occ.jsonl", recipe="occluded")
    ckpt = str(workspace / "runs" / "finetune_from_last.pt")
    out_json = tmp_path / "report.json"
    assert main(["eval", "--ckpt", ckpt, "--pairs", str(pairs_path), "--far", "1e-1,1e-3",
                 "--plot", str(tmp_path / "plots"), "--out", str(out_json)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report == json.loads(out_json.read_text())
    assert 0 <= report["accuracy"] <= 1 and report["tar_at_far"]["0.1"]["far"] <= 0.1
    assert report["tar_at_far"]["0.001"] is None and report["notes"]
    assert report["config"]["recipe"] == "occluded"
    assert len(list((tmp_path / "plots").glob("*.png"))) == 2
    assert main(["eval", "--ckpt", ckpt, "--pairs", str(pairs_path), "--binarize", "0.5"]) == 0
