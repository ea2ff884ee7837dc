"""Train the shipped default weights (VeloSSM predictor/updater + scene-trained HSSM).

    python3 scripts/train_default_weights.py [--velossm-steps 1500] [--hssm-steps 3000]

Writes src/ssmtrack/data/default_weights.s3mw. Takes a few minutes on one core.
"""

import argparse
import time

import numpy as np

from ssmtrack import train
from ssmtrack.models import default_weights_path, init_models, save_models


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--velossm-steps", type=int, default=1500)
    ap.add_argument("--hssm-steps", type=int, default=3000)
    ap.add_argument("--scenes", type=int, default=60)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=str(default_weights_path()))
    args = ap.parse_args()

    models = init_models(seed=args.seed)
    t0 = time.perf_counter()
    pred, upd, log = train.train_velossm(args.velossm_steps, args.seed, cfg=models.predictor.config)
    models.predictor, models.updater = pred, upd
    ev = train.motion_eval(pred, train.motion_batch(np.random.default_rng(99), 1000, min_len=2))
    print(f"velossm: {time.perf_counter() - t0:.0f}s  {ev}")

    # cue tensors come from oracle-associated runs that use the trained motion model
    data = train.scene_dataset(args.scenes, seed=1000 + args.seed, models=models)
    held = train.scene_dataset(10, seed=9000 + args.seed, models=models)
    print(f"scene data: {len(data)} problems, uniform-weight agreement "
          f"{train.channel_agreement(held, np.ones(4) / 4):.3f}")
    t1 = time.perf_counter()
    models.hssm, hlog = train.train_hssm(data, args.hssm_steps, args.seed, log_every=500)
    print(f"hssm: {time.perf_counter() - t1:.0f}s  {train.hssm_agreement(models.hssm, held)}")

    save_models(models, args.out)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
