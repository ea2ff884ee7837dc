import csv
import io
import json

import numpy as np
import pytest

from ssmtrack.cli import main
from ssmtrack.kitti import parse_kitti_labels, write_kitti_results
from ssmtrack.synth import SyntheticSceneSpec, spec_to_json, synth_scene_generate


@pytest.fixture
def spec_file(tmp_path):
    p = tmp_path / "scene.json"
    p.write_text(spec_to_json(SyntheticSceneSpec(seed=3, n_objects=3, frames=12)))
    return p


def run(argv, capsys):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr()


def test_track_then_eval_synthetic(tmp_path, spec_file, capsys):
    out = tmp_path / "out"
    code, _ = run(["track", "--synthetic", spec_file, "--assoc", "hungarian", "--out", out], capsys)
    assert code == 0
    assert (out / "scene.txt").exists() and (out / "gt" / "scene.txt").exists()
    code, res = run(["eval", "--gt", out / "gt", "--hyp", out], capsys)
    assert code == 0
    report = json.loads(res.out[:res.out.rindex("}") + 1])
    assert report["aggregate"]["mota"] == 1.0
    assert "ALL" in res.out


def test_eval_identical_files(tmp_path, capsys):
    scene = synth_scene_generate(SyntheticSceneSpec(seed=1, n_objects=2, frames=4))
    p = tmp_path / "g.txt"
    write_kitti_results(scene.gt_rows(), p)
    code, res = run(["eval", "--gt", p, "--hyp", p, "--json", tmp_path / "r.json"], capsys)
    assert code == 0
    assert json.loads((tmp_path / "r.json").read_text())["aggregate"]["mota"] == 1.0


def test_track_from_detection_files(tmp_path, capsys):
    scene = synth_scene_generate(SyntheticSceneSpec(seed=5, n_objects=2, frames=10))
    src = tmp_path / "dets"
    src.mkdir()
    rows = scene.det_rows()
    write_kitti_results(rows, src / "0001.txt")
    # embeddings side file follows the written (frame, id) order, which for id -1 is file order
    order = sorted(range(len(rows)), key=lambda k: (rows[k].frame, rows[k].track_id))
    emb = np.stack([d.embedding for f in scene.dets for d in f])[order]
    np.save(src / "0001.emb.npy", emb)
    code, _ = run(["track", "--input", src, "--out", tmp_path / "o", "--assoc", "greedy"], capsys)
    assert code == 0
    frames = parse_kitti_labels(tmp_path / "o" / "0001.txt")
    assert sum(len(r) for r in frames.values()) >= 2 * 9


def test_config_file(tmp_path, spec_file, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"min_hits": 1}))
    code, _ = run(["track", "--synthetic", spec_file, "--out", tmp_path / "o", "--config", cfg,
                   "--assoc", "hungarian"], capsys)
    assert code == 0
    assert len(parse_kitti_labels(tmp_path / "o" / "scene.txt")) == 12
    cfg.write_text(json.dumps({"nonsense": 1}))
    code, res = run(["track", "--synthetic", spec_file, "--out", tmp_path / "o", "--config", cfg], capsys)
    assert code == 1 and "nonsense" in res.err


@pytest.mark.parametrize("argv", [[], ["bogus"], ["track", "--out", "x"], ["bench", "--op", "fft", "--sizes", "1"],
                                  ["train-toy", "--target", "nope"]])
def test_usage_errors_exit_2(argv, capsys):
    assert run(argv, capsys)[0] == 2


def test_data_errors_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.txt"
    bad.write_text("0 1 Car\n")
    assert run(["eval", "--gt", bad, "--hyp", bad], capsys)[0] == 1
    assert run(["track", "--input", tmp_path / "missing", "--out", tmp_path / "o"], capsys)[0] == 1
    spec = tmp_path / "s.json"
    spec.write_text(json.dumps({"dropout": 2.0}))
    assert run(["track", "--synthetic", spec, "--out", tmp_path / "o"], capsys)[0] == 1


def test_bench_csv(capsys):
    code, res = run(["bench", "--op", "scan", "--sizes", "64,128,256", "--repeats", "1"], capsys)
    assert code == 0
    rows = list(csv.reader(io.StringIO(res.out)))
    assert rows[0] == ["size", "runtime"] and [r[0] for r in rows[1:]] == ["64", "128", "256"]
    assert all(float(r[1]) > 0 for r in rows[1:])


def test_gradcheck_subset(capsys):
    code, res = run(["gradcheck", "--seeds", "2", "--only", "add", "matmul", "focal_loss"], capsys)
    assert code == 0 and "3/3" in res.out


def test_train_toy_fcoe_and_plot_data(tmp_path, capsys):
    code, res = run(["train-toy", "--target", "fcoe", "--steps", "30", "--loss-csv", tmp_path / "l.csv"], capsys)
    assert code == 0 and "final_loss" in res.out
    assert len((tmp_path / "l.csv").read_text().splitlines()) == 31
    code, res = run(["plot-data", "--series", "hssm-agreement", "--steps", "4", "--points", "2",
                     "--problems", "40"], capsys)
    assert code == 0
    rows = list(csv.reader(io.StringIO(res.out)))
    assert rows[0] == ["step", "loss", "recall", "precision"] and len(rows) == 3


def test_train_toy_velossm_writes_bundle(tmp_path, capsys):
    out = tmp_path / "w.s3mw"
    code, res = run(["train-toy", "--target", "velossm", "--steps", "5", "--out", out], capsys)
    assert code == 0 and out.exists()
    code, _ = run(["track", "--synthetic", _spec(tmp_path), "--weights", out, "--out", tmp_path / "o"], capsys)
    assert code == 0


def _spec(tmp_path):
    p = tmp_path / "t.json"
    p.write_text(spec_to_json(SyntheticSceneSpec(seed=0, n_objects=2, frames=5)))
    return p
