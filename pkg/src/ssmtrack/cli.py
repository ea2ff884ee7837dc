"""Command-line entry point.

Exit codes: 0 success, 1 data error (bad file, bad spec, failed check), 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .errors import (EmptyProblem, InvalidSpec, MalformedRow, ShapeMismatch, WeightFormatError)
from .kitti import class_id, parse_kitti_labels, pose_to_row, row_to_pose, write_kitti_results
from .metrics import evaluate
from .models import load_models, save_models
from .synth import SyntheticSceneSpec, synth_scene_generate
from .tracker import BACKENDS, DetectionState, TrackerConfig, run_scene

DATA_ERRORS = (OSError, MalformedRow, InvalidSpec, WeightFormatError, ShapeMismatch, EmptyProblem,
               ValueError, KeyError, json.JSONDecodeError)


class DataError(Exception):
    pass


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("S3MOT_THREADS", "1")))
    except ValueError:
        return 1


def _tracker_config(path, backend) -> TrackerConfig:
    cfg = {}
    if path:
        cfg = json.loads(Path(path).read_text())
        known = {f.name for f in fields(TrackerConfig)}
        unknown = set(cfg) - known
        if unknown:
            raise DataError(f"unknown tracker config keys: {sorted(unknown)}")
    if backend:
        cfg["backend"] = backend
    return TrackerConfig(**cfg)


# ---------------------------------------------------------------- track


def _detections_from_file(path: Path) -> list[list[DetectionState]]:
    frames = parse_kitti_labels(path)
    emb_path = path.with_suffix(".emb.npy")
    emb = np.load(emb_path) if emb_path.exists() else None
    n_frames = max(frames) + 1 if frames else 0
    out: list[list[DetectionState]] = [[] for _ in range(n_frames)]
    k = 0
    rows = [r for f in sorted(frames) for r in frames[f]]
    if emb is not None and len(emb) != len(rows):
        raise DataError(f"{emb_path}: {len(emb)} embeddings for {len(rows)} rows")
    for r in rows:
        e = emb[k] if emb is not None else None
        k += 1
        if r.dontcare:
            continue
        conf = 1.0 if r.score is None else float(np.clip(r.score, 0.0, 1.0))
        out[r.frame].append(DetectionState(row_to_pose(r), conf, class_id(r.type), e, np.array(r.bbox)))
    return out


def _track_job(job):
    name, frames, cfg, weights, out_dir = job
    models = load_models(weights)
    outputs = run_scene(frames, cfg, models)
    rows = [pose_to_row(f, o.id, o.pose, o.cls, o.confidence, o.box2d)
            for f, outs in enumerate(outputs) for o in outs]
    write_kitti_results(rows, Path(out_dir) / f"{name}.txt")
    return name, sum(len(o) for o in outputs)


def cmd_track(args) -> int:
    cfg = _tracker_config(args.config, args.assoc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    if args.synthetic:
        spec = SyntheticSceneSpec.from_json(args.synthetic)
        scene = synth_scene_generate(spec)
        name = Path(args.synthetic).stem
        (out / "gt").mkdir(exist_ok=True)
        write_kitti_results(scene.gt_rows(), out / "gt" / f"{name}.txt")
        jobs.append((name, scene.dets, cfg, args.weights, str(out)))
    else:
        src = Path(args.input)
        files = sorted(src.glob("*.txt")) if src.is_dir() else [src]
        if not files:
            raise DataError(f"no detection files in {src}")
        for f in files:
            jobs.append((f.stem, _detections_from_file(f), cfg, args.weights, str(out)))
    n = _threads()
    if n > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(_track_job, jobs))
    else:
        results = [_track_job(j) for j in jobs]
    for name, count in results:
        print(f"{name}: {count} track rows -> {out / (name + '.txt')}")
    return 0


# ---------------------------------------------------------------- train-toy


def cmd_train(args) -> int:
    from . import train, weights

    t0 = time.perf_counter()
    if args.target == "fcoe":
        key, ref, log = train.train_fcoe(args.steps or 500, args.seed)
        if args.out:
            weights.save(args.out, {"fcoe.key": key.embeddings, "fcoe.ref": ref.embeddings})
        print(json.dumps({"target": "fcoe", "final_loss": log.losses[-1], **log.extra,
                          "seconds": round(log.seconds, 2)}))
    else:
        models = load_models(args.init)
        if args.target == "velossm":
            pred, upd, log = train.train_velossm(args.steps or 1500, args.seed, cfg=models.predictor.config)
            models.predictor, models.updater = pred, upd
            ev = train.motion_eval(pred, train.motion_batch(np.random.default_rng(args.seed + 7), 1000, min_len=2))
            summary = {"target": "velossm", "final_loss": float(np.mean(log.losses[-50:])), **ev}
        else:
            if args.mode == "mimic":
                data = train.mimic_dataset(2000, args.seed)
                held = train.mimic_dataset(500, args.seed + 1)
            else:
                data = train.scene_dataset(40, seed=1000 + args.seed, models=models)
                held = train.scene_dataset(8, seed=5000 + args.seed, models=models)
            params, log = train.train_hssm(data, args.steps or 4000, args.seed, time_limit=args.time_limit)
            models.hssm = params
            summary = {"target": f"hssm-{args.mode}", "final_loss": float(np.mean(log.losses[-50:])),
                       **train.hssm_agreement(params, held)}
        if args.out:
            save_models(models, args.out)
        summary["seconds"] = round(time.perf_counter() - t0, 2)
        print(json.dumps(summary))
    if args.loss_csv:
        with open(args.loss_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss"])
            w.writerows(enumerate(log.losses))
    return 0


# ---------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    gt, hyp = Path(args.gt), Path(args.hyp)
    if gt.is_dir():
        names = sorted(p.stem for p in gt.glob("*.txt"))
        pairs = {n: (gt / f"{n}.txt", hyp / f"{n}.txt") for n in names}
    else:
        pairs = {gt.stem: (gt, hyp)}
    seqs = {}
    for name, (g, h) in pairs.items():
        hyp_frames = parse_kitti_labels(h) if h.exists() else {}
        seqs[name] = (parse_kitti_labels(g), hyp_frames)
    report = evaluate(seqs, args.iou)
    if args.json:
        Path(args.json).write_text(report.to_json())
    print(report.to_json())
    print(report.to_table())
    return 0


# ---------------------------------------------------------------- gradcheck


def cmd_gradcheck(args) -> int:
    from .gradsuite import TOL, run_suite

    def log(r):
        print(f"{'ok  ' if r.ok else 'FAIL'} {r.name:36s} max_rel_err={r.max_error:.3e} ({r.seconds:.2f}s)")

    t0 = time.perf_counter()
    results = run_suite(args.seeds, args.only, log=log)
    bad = [r for r in results if not r.ok]
    print(f"{len(results) - len(bad)}/{len(results)} checks within {TOL:g} "
          f"in {time.perf_counter() - t0:.1f}s")
    return 1 if bad else 0


# ---------------------------------------------------------------- bench


def bench_scan(L: int, repeats: int = 3, B: int = 1, D: int = 16, N: int = 16) -> float:
    from .ssm import selective_scan
    from .tensor import Tensor

    rng = np.random.default_rng(L)
    a = Tensor(rng.uniform(0.5, 0.99, (B, L, D, N)))
    b = Tensor(rng.normal(size=(B, L, D, N)))
    c = Tensor(rng.normal(size=(B, L, N)))
    u = Tensor(rng.normal(size=(B, L, D)))
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        selective_scan(a, b, c, u)
        best = min(best, time.perf_counter() - t0)
    return best


def bench_hssm(n: int, repeats: int = 3) -> float:
    from .hssm import HssmConfig, hssm_forward, init_hssm

    params = init_hssm(HssmConfig(), 0)
    D = np.random.default_rng(n).uniform(0, 1, (4, n, n))
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        hssm_forward(D, params)
        best = min(best, time.perf_counter() - t0)
    return best


def cmd_bench(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    fn = bench_scan if args.op == "scan" else bench_hssm
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["size", "runtime"])
    for n in sizes:
        w.writerow([n, f"{fn(n, args.repeats):.6f}"])
    if args.out:
        out.close()
    return 0


# ---------------------------------------------------------------- plot-data


def cmd_plot_data(args) -> int:
    from . import train

    out = open(args.out, "w", newline="") if args.out else sys.stdout
    w = csv.writer(out, lineterminator="\n")
    if args.series == "velossm-loss":
        _, _, log = train.train_velossm(args.steps, args.seed)
        w.writerow(["step", "loss"])
        w.writerows((i, f"{v:.6f}") for i, v in enumerate(log.losses))
    else:
        data = train.mimic_dataset(args.problems, args.seed)
        held = train.mimic_dataset(max(50, args.problems // 4), args.seed + 1)
        every = max(1, args.steps // args.points)
        w.writerow(["step", "loss", "recall", "precision"])

        def probe(step, params, log):
            if step % every == 0 or step == args.steps:
                ag = train.hssm_agreement(params, held)
                w.writerow([step, f"{np.mean(log.losses[-every:]):.6f}", f"{ag['recall']:.4f}",
                            f"{ag['precision']:.4f}"])

        train.train_hssm(data, steps=args.steps, seed=args.seed, callback=probe)
    if args.out:
        out.close()
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssmtrack", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True)

    t = sub.add_parser("track", help="run the tracker on detections")
    src = t.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="KITTI detection file or directory of them")
    src.add_argument("--synthetic", help="JSON synthetic scene spec")
    t.add_argument("--weights", help="model bundle (default: shipped weights)")
    t.add_argument("--assoc", choices=BACKENDS, default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="JSON tracker config")
    t.set_defaults(fn=cmd_track)

    tr = sub.add_parser("train-toy", help="train one component on synthetic data")
    tr.add_argument("--target", choices=("velossm", "hssm", "fcoe"), required=True)
    tr.add_argument("--mode", choices=("mimic", "scenes"), default="scenes", help="hssm data source")
    tr.add_argument("--steps", type=int, default=None)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--out", help="output weight bundle")
    tr.add_argument("--init", help="bundle providing the components not being trained")
    tr.add_argument("--time-limit", type=float, default=None, help="seconds")
    tr.add_argument("--loss-csv")
    tr.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="CLEAR metrics of hypotheses against ground truth")
    e.add_argument("--gt", required=True)
    e.add_argument("--hyp", required=True)
    e.add_argument("--iou", type=float, default=0.25)
    e.add_argument("--json", help="also write the JSON report here")
    e.set_defaults(fn=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--seeds", type=int, default=20)
    g.add_argument("--only", nargs="*")
    g.set_defaults(fn=cmd_gradcheck)

    b = sub.add_parser("bench", help="runtime vs size as CSV")
    b.add_argument("--op", choices=("scan", "hssm"), required=True)
    b.add_argument("--sizes", required=True, help="comma-separated")
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--out")
    b.set_defaults(fn=cmd_bench)

    pd = sub.add_parser("plot-data", help="CSV series for loss and agreement curves")
    pd.add_argument("--series", choices=("velossm-loss", "hssm-agreement"), required=True)
    pd.add_argument("--steps", type=int, default=200)
    pd.add_argument("--points", type=int, default=10)
    pd.add_argument("--problems", type=int, default=400)
    pd.add_argument("--seed", type=int, default=0)
    pd.add_argument("--out")
    pd.set_defaults(fn=cmd_plot_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    try:
        return args.fn(args)
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except DATA_ERRORS as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
