import json
import subprocess
import sys

import pytest

from zsad.cli import main

from test_data import MVTEC_CATEGORIES, mvtec_tree


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth-dataset", "--out", str(root / "train"), "--n-normal", "6", "--n-anomalous", "6",
                 "--image-size", "64", "--seed", "1", "--name", "synth-a"]) == 0
    assert main(["synth-dataset", "--out", str(root / "test"), "--n-normal", "4", "--n-anomalous", "4",
                 "--image-size", "64", "--seed", "2", "--name", "synth-b"]) == 0
    assert main(["train", "--backbone", "mock", "--manifest", str(root / "train" / "manifest.json"),
                 "--out", str(root / "run"), "--epochs", "1"]) == 0
    return root


def test_train_outputs(run_dir):
    run = run_dir / "run"
    assert (run / "prompts.ckpt").exists()
    snap = json.loads((run / "resolved_config.json").read_text())
    assert snap["backbone"]["name"] == "mock" and snap["train"]["epochs"] == 1
    log = [json.loads(x) for x in (run / "train_log.jsonl").read_text().splitlines()]
    assert len(log) == 2 and {"focal", "dice", "total", "wall_time"} <= set(log[0])


def test_evaluate(run_dir, capsys):
    out = run_dir / "eval"
    code = main(["evaluate", "--backbone", "mock", "--manifest", str(run_dir / "test" / "manifest.json"),
                 "--checkpoint", str(run_dir / "run" / "prompts.ckpt"), "--out", str(out),
                 "--strategy", "S2", "--sigma", "2", "--fpr-limit", "0.2"])
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert report["metadata"]["strategy"] == "S2"
    assert report["metadata"]["fpr_limit"] == 0.2
    assert report["metadata"]["train_manifest"] == "synth-a"
    assert "tile" in capsys.readouterr().out


def test_same_domain_guard(run_dir, capsys):
    args = ["evaluate", "--backbone", "mock", "--manifest", str(run_dir / "train" / "manifest.json"),
            "--checkpoint", str(run_dir / "run" / "prompts.ckpt"), "--out", str(run_dir / "same")]
    assert main(args) == 2
    assert "override-same-domain" in capsys.readouterr().err
    assert main(args + ["--override-same-domain"]) == 0


def test_missing_assets_exit_3(run_dir):
    assert main(["evaluate", "--backbone", "mock", "--manifest", str(run_dir / "test" / "manifest.json"),
                 "--checkpoint", str(run_dir / "nope.ckpt"), "--out", str(run_dir / "x")]) == 3
    assert main(["evaluate", "--backbone", "mock", "--manifest", str(run_dir / "nope.json"),
                 "--checkpoint", str(run_dir / "run" / "prompts.ckpt"), "--out", str(run_dir / "x")]) == 3
    # the real backbone needs user-supplied weights
    assert main(["train", "--manifest", str(run_dir / "train" / "manifest.json"), "--out", str(run_dir / "y")]) == 3


def test_invalid_manifest_exit_2(run_dir, tmp_path):
    bad = tmp_path / "m.json"
    bad.write_text(json.dumps({"manifest_version": 1, "name": "x", "domain_tag": "space", "categories": ["c"],
                               "annotation_level": "both", "samples": []}))
    assert main(["train", "--backbone", "mock", "--manifest", str(bad), "--out", str(tmp_path / "r")]) == 2


def test_numeric_failure_exit_4(run_dir, tmp_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("backbone:\n  name: mock\ntrain:\n  focal_weight: .inf\n")
    assert main(["train", "--config", str(cfg), "--manifest", str(run_dir / "train" / "manifest.json"),
                 "--out", str(tmp_path / "r")]) == 4


def test_infer_and_export(run_dir, capsys):
    images = sorted((run_dir / "test" / "images").glob("*.png"))[:2]
    assert main(["infer", "--backbone", "mock", "--checkpoint", str(run_dir / "run" / "prompts.ckpt"),
                 "--out", str(run_dir / "infer"), *map(str, images)]) == 0
    recs = [json.loads(x) for x in capsys.readouterr().out.splitlines()]
    assert len(recs) == 2 and recs[0]["strategy"] == "S5"
    assert recs[0]["score"] == recs[0]["global_term"] + recs[0]["local_term"]
    assert (run_dir / "infer" / f"{images[0].stem}.npy").exists()
    assert main(["export-heatmaps", "--backbone", "mock", "--manifest", str(run_dir / "test" / "manifest.json"),
                 "--checkpoint", str(run_dir / "run" / "prompts.ckpt"), "--out", str(run_dir / "hm")]) == 0
    assert len(list((run_dir / "hm").glob("*.png"))) == 8


def test_convert_dataset(tmp_path, capsys):
    mvtec_tree(tmp_path / "mvtec", MVTEC_CATEGORIES)
    out = tmp_path / "mvtec.json"
    assert main(["convert-dataset", "mvtec", str(tmp_path / "mvtec"), "--out", str(out), "--name", "mvtec"]) == 0
    assert "15 categories" in capsys.readouterr().out
    assert len(json.loads(out.read_text())["categories"]) == 15


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "zsad", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip()
