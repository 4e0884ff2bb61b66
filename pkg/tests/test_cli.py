import csv
import json
from pathlib import Path

import numpy as np
import pytest

from eiss.cli import main
from eiss.imaging import SyntheticSpec, generate_synthetic, write_image


def run_cli(*argv):
    return main([str(a) for a in argv])


def make_dataset(root: Path, n: int, frame: int, corrupt=()):
    images, anns = root / "JPEGImages", root / "Annotations"
    images.mkdir(parents=True)
    anns.mkdir(parents=True)
    spec = SyntheticSpec(frame=(frame, frame))
    for i in range(n):
        img, box, cls = generate_synthetic(spec, i)
        name = f"{i:06d}"
        write_image(images / f"{name}.png", img)
        xml = (
            f"<annotation><filename>{name}.png</filename>"
            f"<size><width>{frame}</width><height>{frame}</height><depth>3</depth></size>"
            f"<object><name>class_{cls}</name><bndbox><xmin>{box.x + 1}</xmin>"
            f"<ymin>{box.y + 1}</ymin><xmax>{box.x2}</xmax><ymax>{box.y2}</ymax>"
            f"</bndbox></object></annotation>"
        )
        if i in corrupt:
            xml = xml[: len(xml) // 2]
        (anns / f"{name}.xml").write_text(xml)
    return images, anns


def test_run_synthetic_defaults(tmp_path, capsys):
    assert run_cli("run", "--synthetic", "--seed", 3, "--out", tmp_path) == 0
    with open(tmp_path / "trace.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert 1 <= len(rows) <= 30
    assert list(rows[0]) == ["iteration", "x", "y", "w", "h", "blackened", "cropped", "proposals", "iou"]
    pred = json.loads((tmp_path / "prediction.json").read_text())
    assert len(pred["final_region"]) == 4
    assert pred["stop_reason"] in {"eta_threshold", "max_iterations", "degenerate_region"}
    boxes = json.loads((tmp_path / "boxes.json").read_text())
    assert boxes["final"] == pred["final_region"] == boxes["progression"][-1]
    assert (tmp_path / "manifest.json").exists()
    assert "final_region=" in capsys.readouterr().out


def test_run_huge_eta_single_row(tmp_path):
    assert run_cli("run", "--synthetic", "--eta", 1e6, "--out", tmp_path) == 0
    assert len((tmp_path / "trace.csv").read_text().splitlines()) == 2


def test_run_missing_image(tmp_path, capsys):
    assert run_cli("run", "--image", tmp_path / "nope.png", "--out", tmp_path / "o") == 2
    assert "image not found" in capsys.readouterr().err


def test_run_without_input(tmp_path):
    assert run_cli("run", "--out", tmp_path) == 2


def test_bad_config_is_usage_error(tmp_path):
    assert run_cli("run", "--synthetic", "--alpha", 1.5, "--out", tmp_path) == 2


def test_unknown_flag_exits_2(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run_cli("run", "--bogus")
    assert exc.value.code == 2


def test_bad_manifest(tmp_path):
    m = tmp_path / "m.json"
    m.write_text("{not json")
    assert run_cli("synth-bench", "--manifest", m, "--out", tmp_path / "o") == 2


def test_runtime_failure_exit_1(tmp_path):
    # a grayscale image against the 3-channel oracle palette fails inside the run
    write_image(tmp_path / "g.png", np.full((32, 32, 1), 0.5))
    assert run_cli("run", "--image", tmp_path / "g.png", "--out", tmp_path / "o") == 1


def test_run_image_with_annotation(tmp_path, capsys):
    images, anns = make_dataset(tmp_path / "ds", 1, 48)
    code = run_cli("run", "--image", images / "000000.png", "--annotation", anns / "000000.xml",
                   "--max-iters", 3, "--out", tmp_path / "o")
    assert code == 0
    pred = json.loads((tmp_path / "o" / "prediction.json").read_text())
    _, box, _ = generate_synthetic(SyntheticSpec(frame=(48, 48)), 0)
    assert pred["ground_truth"] == list(box.as_tuple())
    assert 0 <= pred["final_iou"] <= 1


def test_manifest_with_flag_override(tmp_path):
    m = tmp_path / "m.json"
    m.write_text(json.dumps({
        "config": {"alpha": 0.7, "max_iterations": 2},
        "input": {"mode": "synthetic", "count": 2, "spec": {"frame": [32, 32]}},
    }))
    out = tmp_path / "o"
    assert run_cli("synth-bench", "--manifest", m, "--max-iters", 3, "--out", out) == 0
    resolved = json.loads((out / "manifest.json").read_text())
    assert resolved["config"]["alpha"] == 0.7
    assert resolved["config"]["max_iterations"] == 3
    assert resolved["input"]["count"] == 2


def test_evaluate_empty_dataset(tmp_path, capsys):
    (tmp_path / "img").mkdir()
    (tmp_path / "ann").mkdir()
    code = run_cli("evaluate", "--images", tmp_path / "img", "--annotations", tmp_path / "ann",
                   "--out", tmp_path / "o")
    assert code == 0
    assert "mean_iou=nan" in capsys.readouterr().out
    assert (tmp_path / "o" / "report.csv").read_text().count("\n") == 1


def test_evaluate_skips_unreadable_annotation(tmp_path, capsys):
    images, anns = make_dataset(tmp_path / "ds", 50, 24, corrupt={17})
    code = run_cli("evaluate", "--images", images, "--annotations", anns, "--max-iters", 2,
                   "--out", tmp_path / "o")
    assert code == 0
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    assert len(report["images"]) == 49
    assert [s[0] for s in report["skipped"]] == ["000017"]
    out = capsys.readouterr().out
    assert "skipped=1" in out and "skipped 000017" in out


def test_evaluate_fifty_synthetic_images(tmp_path, capsys):
    images, anns = make_dataset(tmp_path / "ds", 50, 64)
    code = run_cli("evaluate", "--images", images, "--annotations", anns, "--out", tmp_path / "o")
    assert code == 0
    line = [l for l in capsys.readouterr().out.splitlines() if l.startswith("mean_iou=")][0]
    assert float(line.split("=")[1]) >= 0.5


def test_synth_bench_single_image(tmp_path):
    out = tmp_path / "o"
    assert run_cli("synth-bench", "--count", 1, "--frame", 40, "--max-iters", 3, "--out", out) == 0
    report = json.loads((out / "report.json").read_text())
    assert len(report["images"]) == 1
    assert report["overall"]["sample_count"] == 1


def test_synth_bench_repeatable(tmp_path):
    args = ("synth-bench", "--count", 3, "--frame", 40, "--max-iters", 4, "--seed", 9)
    assert run_cli(*args, "--out", tmp_path / "a") == 0
    assert run_cli(*args, "--out", tmp_path / "b") == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_synth_bench_infeasible(tmp_path):
    code = run_cli("synth-bench", "--count", 1, "--frame", 4, "--fraction", 0.8, 0.9, "--out", tmp_path)
    assert code == 2


def test_export_command(tmp_path):
    out = tmp_path / "o"
    assert run_cli("synth-bench", "--count", 2, "--frame", 32, "--max-iters", 3, "--out", out) == 0
    assert run_cli("export", "--report", out / "report.json", "--format", "csv",
                   "--out", tmp_path / "again.csv") == 0
    assert (tmp_path / "again.csv").read_bytes() == (out / "report.csv").read_bytes()
    assert run_cli("export", "--report", out / "report.json", "--format", "plot",
                   "--out", tmp_path / "plots") == 0
    assert any((tmp_path / "plots").iterdir())
    assert run_cli("export", "--report", tmp_path / "missing.json", "--format", "csv",
                   "--out", tmp_path / "x.csv") == 2


def test_pretrained_backend_requires_paths(tmp_path):
    assert run_cli("run", "--synthetic", "--backend", "pretrained", "--out", tmp_path) == 2


def test_pretrained_backend_run(tmp_path):
    torch = pytest.importorskip("torch")
    from test_classifier import Fixed, save_model

    model, meta = save_model(tmp_path, Fixed([0.7, 0.3]), ["a", "b"], width=16, height=16)
    img, _, _ = generate_synthetic(SyntheticSpec(frame=(32, 32)), 0)
    write_image(tmp_path / "x.png", img)
    code = run_cli("run", "--image", tmp_path / "x.png", "--backend", "pretrained", "--model", model,
                   "--meta", meta, "--max-iters", 2, "--eta", 0, "--out", tmp_path / "o")
    assert code == 0
    assert len((tmp_path / "o" / "trace.csv").read_text().splitlines()) == 3
