"""Association-backend ablation on occlusion-heavy crossing scenes.

    python3 scripts/ablation_table.py [--scenes 20] [--dropout 0.2] [--weights PATH]

Prints a markdown table of MOTA / IDSW / FRAG per backend.
"""

import argparse

from ssmtrack.metrics import Counts, clear_metrics, gt_to_frames, outputs_to_frames
from ssmtrack.models import load_models
from ssmtrack.synth import occlusion_benchmark
from ssmtrack.tracker import BACKENDS, TrackerConfig, run_scene


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--scenes", type=int, default=20)
    ap.add_argument("--dropout", type=float, default=0.2)
    ap.add_argument("--pos-sigma", type=float, default=0.3)
    ap.add_argument("--seed", type=int, default=7000)
    ap.add_argument("--weights")
    args = ap.parse_args()

    models = load_models(args.weights)
    scenes = occlusion_benchmark(args.scenes, args.seed, args.dropout, args.pos_sigma)

    print("| backend | MOTA | IDSW | FRAG | FP | FN |")
    print("|---|---|---|---|---|---|")
    for backend in BACKENDS:
        c = Counts()
        for s in scenes:
            out = run_scene(s.dets, TrackerConfig(backend=backend), models)
            c = c + clear_metrics(gt_to_frames(s.gt), outputs_to_frames(out))
        print(f"| {backend} | {c.mota:.4f} | {c.idsw} | {c.frag} | {c.fp} | {c.fn} |")


if __name__ == "__main__":
    main()
