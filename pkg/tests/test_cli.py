import json

import numpy as np
import pytest

from coprop import io
from coprop.cli import main


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "spec.json"
    spec.write_text(json.dumps({"n_images": 4, "width": 32, "height": 32, "dropout": 0.3}))
    assert main(["synth", "--spec", str(spec), "--out", str(root / "data"), "--seed", "2"]) == 0
    return root


def test_run_writes_masks_reports_and_trace(dataset, capsys):
    out = dataset / "out"
    code = main(["run", "--manifest", str(dataset / "data" / "manifest.json"), "--out", str(out),
                 "--runs", "2", "--trace", "--checkpoint"])
    assert code == 0
    masks = sorted(p.name for p in out.glob("*.mask"))
    assert masks == [f"img0{k}.mask" for k in range(4)]
    assert (out / "likelihoods.txt").read_text().split("\n")[0].split()[0] == "img00"
    report = json.loads((out / "report.json").read_text())
    assert report["reports"][0]["stage"] == "full_pipeline"
    assert (out / "trace.txt").read_text().startswith("# seed")
    assert list((out / "checkpoints").glob("*.txt"))
    assert "full_pipeline" in capsys.readouterr().out

    assert main(["eval", "--pred", str(out), "--truth", str(dataset / "data")]) == 0


def test_run_is_byte_identical(dataset):
    outs = []
    for k in range(2):
        out = dataset / f"again{k}"
        main(["run", "--manifest", str(dataset / "data" / "manifest.json"), "--out", str(out),
              "--runs", "2", "--seed", "9"])
        outs.append({p.name: p.read_bytes() for p in out.iterdir()})
    assert outs[0] == outs[1]


def test_stage_and_template_options(dataset):
    manifest = str(dataset / "data" / "manifest.json")
    out = dataset / "stage"
    assert main(["run", "--manifest", manifest, "--out", str(out), "--stage", "corr_only",
                 "--template", "img02"]) == 0
    assert not (out / "img02.mask").exists()
    out = dataset / "avg"
    assert main(["run", "--manifest", manifest, "--out", str(out), "--stage", "corr_only",
                 "--templates", "3"]) == 0
    assert len(json.loads((out / "report.json").read_text())["templates"]) == 3


def test_validation_errors_exit_2(dataset, tmp_path, capsys):
    assert main(["run", "--manifest", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 2
    bad = tmp_path / "spec.json"
    bad.write_text(json.dumps({"n_images": 2, "width": 8, "height": 8, "object_scale": 0.9}))
    assert main(["synth", "--spec", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert main(["eval", "--pred", str(tmp_path), "--truth", str(tmp_path)]) == 2
    manifest = str(dataset / "data" / "manifest.json")
    assert main(["run", "--manifest", manifest, "--out", str(tmp_path / "y"),
                 "--template", "nope"]) == 2
    assert "error" in capsys.readouterr().err


def test_strict_non_convergence_exit_3(dataset, tmp_path):
    manifest = str(dataset / "data" / "manifest.json")
    args = ["run", "--manifest", manifest, "--out", str(tmp_path), "--runs", "1",
            "--max-iters", "1"]
    assert main(args) == 0
    assert main(args + ["--strict"]) == 3


def test_eval_reports_mismatch(dataset, tmp_path):
    io.write_mask(tmp_path / "img00.mask", np.zeros((3, 3), bool))
    assert main(["eval", "--pred", str(tmp_path), "--truth", str(dataset / "data")]) == 2
