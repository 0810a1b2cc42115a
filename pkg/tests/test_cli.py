from __future__ import annotations

import json

import pytest
import yaml

from conftest import make_raster
from tempslum.cli import main
from tempslum.geodata import read_manifest, save_raster


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    assert main(["synth", str(root), "--preset", "small"]) == 0
    d = yaml.safe_load((root / "run.yaml").read_text())
    d["train"].update(max_epochs=2, finetune_epochs=1, patience=2)
    d.update(K=4, max_iterations=2)
    (root / "fast.yaml").write_text(yaml.safe_dump(d))
    return root


def test_tile_command(tmp_path):
    save_raster(make_raster(256, 456, "scene"), tmp_path / "scene.png")
    assert main(["tile", str(tmp_path / "scene.png"), "--manifest", str(tmp_path / "m.jsonl")]) == 0
    entries = read_manifest(tmp_path / "m.jsonl")
    assert [e.origin_px for e in entries] == [(0, 0), (0, 200)]


def test_synth_outputs(dataset):
    splits = {e.split for e in read_manifest(dataset / "manifest.jsonl")}
    assert splits == {"seed", "val", "test", "unlabeled"}
    assert (dataset / "rasters" / "synth_t2.png").exists() and (dataset / "rasters" / "synth_t2.json").exists()
    assert len(read_manifest(dataset / "tiles_t1.jsonl")) == len(read_manifest(dataset / "tiles_t2.jsonl"))


def test_discover_seeds(dataset, tmp_path):
    rc = main([
        "discover-seeds", "--t1", str(dataset / "tiles_t1.jsonl"), "--t2", str(dataset / "tiles_t2.jsonl"),
        "--builtup-masks", str(dataset / "builtup"), "--iou-max", "0.2", "--min-area", "0.05",
        "--min-nucleation", "0.5", "--out-dir", str(tmp_path),
    ])
    assert rc == 0
    assert (tmp_path / "seed_candidates_review.csv").exists()
    rows = [json.loads(line) for line in (tmp_path / "seed_candidates.jsonl").read_text().splitlines()]
    assert rows and all(r["temporal_iou"] <= 0.2 for r in rows)


def test_iterate_zero(dataset, tmp_path):
    out = tmp_path / "run0"
    assert main(["iterate", "--config", str(dataset / "fast.yaml"), "--max-iters", "0", "--out", str(out)]) == 0
    assert (out / "iterations.jsonl").read_text() == ""
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["iterations"] == [] and manifest["stop_reason"] == "max_iterations"
    assert (out / "checkpoints" / "seed.pt").exists()


@pytest.fixture(scope="module")
def two_runs(dataset, tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    for name, k in (("k2", 2), ("k4", 4)):
        assert main(["iterate", "--config", str(dataset / "fast.yaml"), "--k", str(k), "--out", str(root / name)]) == 0
    return root


def test_iterate_artifacts(two_runs):
    run = two_runs / "k4"
    for name in ("run_manifest.json", "iterations.csv", "curve.csv", "labeled_manifest.jsonl", "admissions.jsonl",
                 "run_config.yaml", "checkpoints/final.pt", "checkpoints/final.json"):
        assert (run / name).exists(), name
    records = [json.loads(line) for line in (run / "iterations.jsonl").read_text().splitlines()]
    assert records and all(r["K"] == 4 for r in records)
    assert all(r["admitted_slum"] <= 4 for r in records)


def test_evaluate_two_runs(dataset, two_runs, tmp_path):
    rc = main([
        "evaluate", "--config", str(dataset / "fast.yaml"),
        "--model", f"a={two_runs / 'k2' / 'checkpoints' / 'final.pt'}",
        "--model", f"b={two_runs / 'k4' / 'checkpoints' / 'seed.pt'}",
        "--report-dir", str(tmp_path),
    ])
    assert rc == 0
    rows = json.loads((tmp_path / "comparison.json").read_text())
    md = (tmp_path / "comparison.md").read_text().splitlines()
    order = [line.split("|")[1].strip() for line in md[2:]]
    assert order == list(rows)
    mious = [rows[n]["mIoU"] for n in order]
    assert mious == sorted(mious, reverse=True)


def test_export_and_report(dataset, two_runs, tmp_path):
    assert main(["export", "--config", str(dataset / "fast.yaml"), "--run", str(two_runs / "k4"),
                 "--geojson", str(tmp_path / "loc.geojson")]) == 0
    fc = json.loads((tmp_path / "loc.geojson").read_text())
    assert fc["type"] == "FeatureCollection"
    assert all(f["properties"]["status"] in ("candidate", "uncertain") for f in fc["features"])
    assert main(["report", "--run", f"K=2={two_runs / 'k2'}", "--run", f"K=4={two_runs / 'k4'}",
                 "--report-dir", str(tmp_path / "rep")]) == 0
    lines = (tmp_path / "rep" / "curves.csv").read_text().splitlines()
    assert lines[0] == "run,iteration,cumulative_slum_added"
    assert {line.split(",")[0] for line in lines[1:]} == {"K=2", "K=4"}
    assert (tmp_path / "rep" / "curves.png").stat().st_size > 0


class TestExitCodes:
    def test_unknown_subcommand(self, capsys):
        with pytest.raises(SystemExit) as e:
            main(["frobnicate"])
        assert e.value.code == 2

    def test_malformed_config(self, tmp_path):
        (tmp_path / "bad.yaml").write_text("train: {max_epochs: [\n")
        assert main(["train", "--config", str(tmp_path / "bad.yaml")]) == 2

    def test_unknown_key(self, tmp_path):
        (tmp_path / "bad.yaml").write_text("bogus: 1\n")
        assert main(["iterate", "--config", str(tmp_path / "bad.yaml")]) == 2

    def test_module_error(self, tmp_path):
        (tmp_path / "c.yaml").write_text(yaml.safe_dump({"paths": {"manifest": "missing.jsonl"}}))
        assert main(["train", "--config", str(tmp_path / "c.yaml")]) == 1

    def test_bad_named_path(self, tmp_path):
        assert main(["report", "--run", "no-equals-sign", "--report-dir", str(tmp_path)]) == 2
