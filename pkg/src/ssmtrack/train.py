"""Toy training loops and the synthetic datasets they consume."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .assoc import extract_assignment, hungarian_solve
from .fcoe import DenseEmbeddingMap, fcoe_loss, synthetic_maps
from .hssm import HssmConfig, HssmParams, focal_assoc_loss, hssm_forward, init_hssm
from .optim import Adam
from .pose import corner_l1, disentangled_l1_loss, make_pose, state_boxplus, state_difference
from .synth import SyntheticSceneSpec, synth_scene_generate
from .tensor import Tensor
from .tracker import Tracker, TrackerConfig
from .velossm import (PredictorParams, UpdaterParams, VeloSSMConfig, init_predictor, init_updater,
                      pad_history, velossm_predict, velossm_update)
from .weights import named_tensors


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)


# ---------------------------------------------------------------- motion data


@dataclass
class MotionBatch:
    history: np.ndarray  # noisy observed poses, padded [B, n+1, 10]
    target: np.ndarray  # clean next pose [B, 10]
    observation: np.ndarray  # noisy detection of the next pose [B, 10]
    confidence: np.ndarray  # [B]


def motion_batch(rng: np.random.Generator, size: int, n: int = 10, noise: float = 0.05,
                 turning_frac: float = 0.5, min_len: int = 1) -> MotionBatch:
    """Constant-velocity and constant-turn tracks observed with Gaussian position noise."""
    hist = np.empty((size, n + 1, 10))
    target = np.empty((size, 10))
    obs = np.empty((size, 10))
    conf = np.empty(size)
    for b in range(size):
        m = int(rng.integers(min_len, n + 2))
        yaw = rng.uniform(-np.pi, np.pi)
        speed = rng.uniform(0.1, 1.5)
        rate = rng.choice([-1, 1]) * rng.uniform(0.02, 0.08) if rng.random() < turning_frac else 0.0
        size3 = np.array([4.0, 1.7, 1.5]) * rng.uniform(0.4, 1.1, 3)
        p = np.array([rng.uniform(5, 40), rng.uniform(-10, 10), size3[2] / 2])
        clean = []
        for _ in range(m + 1):
            clean.append(make_pose(yaw, p.copy(), size3))
            p += speed * np.array([np.cos(yaw), np.sin(yaw), 0.0])
            yaw += rate
        clean = np.array(clean)
        noisy = clean[:m].copy()
        noisy[:, 4:7] += rng.normal(0, noise, (m, 3))
        hist[b] = pad_history(noisy, n)[0]
        target[b] = clean[m]
        sigma = rng.uniform(0.0, 0.3)
        obs[b] = clean[m]
        obs[b, 4:7] += rng.normal(0, sigma, 3)
        conf[b] = 1.0 - sigma / 0.6
    return MotionBatch(hist, target, obs, conf)


def repeat_last_velocity(history: np.ndarray) -> np.ndarray:
    """Baseline: apply the last observed per-frame velocity once more."""
    v = state_difference(history[:, -2], history[:, -1])
    return state_boxplus(history[:, -1], v).data


def velossm_params(pred: PredictorParams, upd: UpdaterParams) -> list[Tensor]:
    return list(named_tensors(pred, "p").values()) + list(named_tensors(upd, "u").values())


def train_velossm(steps: int = 300, seed: int = 0, cfg: VeloSSMConfig | None = None, batch: int = 32,
                  lr: float = 3e-3, noise: float = 0.05, log_every: int = 0, min_len: int = 1
                  ) -> tuple[PredictorParams, UpdaterParams, TrainLog]:
    """Jointly fit the predictor (next-pose loss) and the updater (refined-pose loss).

    ``min_len=1`` includes single-pose histories, i.e. tracks one frame after spawning.
    """
    cfg = cfg or VeloSSMConfig(d=16, state=8, layers=4)
    rng = np.random.default_rng(seed)
    pred, upd = init_predictor(cfg, seed), init_updater(cfg, seed + 1)
    opt = Adam(velossm_params(pred, upd), lr=lr, clip=5.0)
    log = TrainLog()
    t0 = time.perf_counter()
    for step in range(steps):
        mb = motion_batch(rng, batch, cfg.history, noise, min_len=min_len)
        opt.zero_grad()
        with T.Tape() as tape:
            p, flow = velossm_predict(Tensor(mb.history), pred)
            prev = Tensor(mb.history[:, -1])
            pv = state_difference(prev, p)
            ov = state_difference(prev, Tensor(mb.observation))
            refined = velossm_update(pv, ov, prev, mb.confidence, flow, upd)
            loss = disentangled_l1_loss(Tensor(mb.target), p) + disentangled_l1_loss(Tensor(mb.target), refined)
        tape.backward(loss)
        opt.step()
        log.losses.append(float(loss.data))
        if log_every and step % log_every == 0:
            print(f"velossm step {step:5d} loss {log.losses[-1]:.4f}")
    log.seconds = time.perf_counter() - t0
    return pred, upd, log


def motion_eval(pred: PredictorParams, mb: MotionBatch) -> dict[str, float]:
    """Mean corner L1 of the learned predictor and of the repeat-last-velocity baseline."""
    p, _ = velossm_predict(mb.history, pred)
    ours = float(corner_l1(Tensor(mb.target), p).data)
    base = float(corner_l1(Tensor(mb.target), Tensor(repeat_last_velocity(mb.history))).data)
    return {"velossm": ours, "baseline": base, "improvement": 1.0 - ours / base}


# ---------------------------------------------------------------- association data

HIDDEN_WEIGHTS = np.array([0.5, 0.1, 0.3, 0.1])


def mimic_problem(rng: np.random.Generator, max_size: int = 8, weights=HIDDEN_WEIGHTS):
    """A random cue tensor and the Hungarian matching of its hidden weighted combination."""
    H, W = (int(x) for x in rng.integers(1, max_size + 1, 2))
    D = rng.uniform(0.0, 0.7, (4, H, W))
    k = min(H, W)
    rows, cols = rng.permutation(H)[:k], rng.permutation(W)[:k]
    D[:, rows, cols] = rng.uniform(0.25, 1.0, (4, k))
    cls_r, cls_c = rng.integers(0, 3, H), rng.integers(0, 3, W)
    cls_c[cols] = cls_r[rows]
    D[3] = (cls_r[:, None] == cls_c[None, :]).astype(float)
    combo = np.tensordot(weights, D, axes=1)
    gt = hungarian_solve(-combo).as_matrix(H, W)
    return D, gt


def mimic_dataset(n: int, seed: int = 0, max_size: int = 8):
    rng = np.random.default_rng(seed)
    return [mimic_problem(rng, max_size) for _ in range(n)]


def scene_dataset(n_scenes: int, seed: int = 0, frames: int = 30, n_objects: int = 6,
                  pos_sigma: float = 0.3, yaw_sigma: float = 0.05, dropout: float = 0.2,
                  separation: float = 1.0, models=None):
    """(cue tensor, identity matrix) pairs from tracker runs with identity-oracle association."""
    out = []
    cfg = TrackerConfig(backend="oracle")
    for s in range(n_scenes):
        layout = "crossing" if s % 2 == 0 else "lanes"
        motion = "turning" if s % 3 == 2 else "constant-velocity"
        spec = SyntheticSceneSpec(seed=seed + s, n_objects=n_objects, motion=motion, pos_sigma=pos_sigma,
                                  yaw_sigma=yaw_sigma, dropout=dropout, frames=frames,
                                  separation=separation, layout=layout)
        scene = synth_scene_generate(spec)
        tracker = Tracker(cfg, models)
        for dets in scene.dets:
            tracker.step(dets)
            D = tracker.last_cues
            if D is None:
                continue
            gt = np.array([[1.0 if t.gt_id == d.gt_id else 0.0 for d in tracker.last_dets]
                           for t in tracker.last_tracks])
            out.append((D, gt))
    return out


def _buckets(data) -> dict[tuple[int, int], list[int]]:
    b: dict[tuple[int, int], list[int]] = {}
    for i, (D, _) in enumerate(data):
        b.setdefault(D.shape[1:], []).append(i)
    return b


def train_hssm(data, steps: int = 600, seed: int = 0, cfg: HssmConfig | None = None, batch: int = 16,
               lr: float = 3e-3, gamma: float = 2.0, time_limit: float | None = None,
               augment: bool = True, log_every: int = 0, params: HssmParams | None = None,
               callback=None) -> tuple[HssmParams, TrainLog]:
    """Focal-loss training on shape buckets (problems in a batch share H, W).

    With ``augment`` each problem gets a random row and column permutation
    (the labels permute with it). The learning rate follows a cosine decay over
    ``steps`` or, if it runs out first, over ``time_limit`` seconds.
    ``callback(step, params, log)`` runs after every update, ``params`` warm-starts.
    """
    cfg = cfg or HssmConfig()
    rng = np.random.default_rng(seed)
    params = params if params is not None else init_hssm(cfg, seed)
    opt = Adam(list(named_tensors(params, "hssm").values()), lr=lr, clip=5.0)
    buckets = _buckets(data)
    keys = sorted(buckets)
    probs = np.array([len(buckets[k]) for k in keys], float)
    probs /= probs.sum()
    log = TrainLog()
    t0 = time.perf_counter()
    for step in range(steps):
        key = keys[rng.choice(len(keys), p=probs)]
        idx = buckets[key]
        pick = rng.choice(idx, size=min(batch, len(idx)), replace=False)
        D = np.stack([data[i][0] for i in pick])
        gt = np.stack([data[i][1] for i in pick])
        if augment:
            for b in range(len(pick)):
                r, c = rng.permutation(key[0]), rng.permutation(key[1])
                D[b] = D[b][:, r][:, :, c]
                gt[b] = gt[b][r][:, c]
        progress = step / steps
        if time_limit is not None:
            progress = max(progress, (time.perf_counter() - t0) / time_limit)
        opt.lr = lr * 0.5 * (1 + np.cos(np.pi * min(progress, 1.0)))
        opt.zero_grad()
        with T.Tape() as tape:
            loss = focal_assoc_loss(hssm_forward(D, params), gt, gamma)
        tape.backward(loss)
        opt.step()
        log.losses.append(float(loss.data))
        if log_every and step % log_every == 0:
            print(f"hssm step {step:5d} loss {log.losses[-1]:.4f}")
        if callback is not None:
            callback(step + 1, params, log)
        if time_limit is not None and time.perf_counter() - t0 > time_limit:
            break
    log.seconds = time.perf_counter() - t0
    return params, log


def hssm_agreement(params: HssmParams, data, tau: float = 0.5) -> dict[str, float]:
    """Share of oracle pairs that the hardened soft matrix reproduces, plus precision."""
    hit = total = predicted = 0
    for D, gt in data:
        soft = hssm_forward(D, params).data
        got = set(extract_assignment(soft, tau).matches)
        want = {(int(i), int(j)) for i, j in zip(*np.nonzero(gt))}
        hit += len(got & want)
        total += len(want)
        predicted += len(got)
    return {"recall": hit / max(total, 1), "precision": hit / max(predicted, 1), "pairs": total}


def channel_agreement(data, weights) -> float:
    """Recall of oracle pairs by Hungarian on a fixed cue weighting (reference points)."""
    hit = total = 0
    for D, gt in data:
        got = set(hungarian_solve(-np.tensordot(weights, D, axes=1)).matches)
        want = {(int(i), int(j)) for i, j in zip(*np.nonzero(gt))}
        hit += len(got & want)
        total += len(want)
    return hit / max(total, 1)


# ---------------------------------------------------------------- embeddings


def train_fcoe(steps: int = 500, seed: int = 0, lr: float = 0.05, grid=(8, 8), e: int = 16
               ) -> tuple[DenseEmbeddingMap, DenseEmbeddingMap, TrainLog]:
    """Fit free per-cell embeddings of two synthetic objects from a random start."""
    key, ref = synthetic_maps(seed, grid=grid, e=e)
    rng = np.random.default_rng(seed + 1)
    ek = Tensor(rng.normal(size=key.embeddings.shape), True)
    er = Tensor(rng.normal(size=ref.embeddings.shape), True)
    opt = Adam([ek, er], lr=lr)
    log = TrainLog()
    t0 = time.perf_counter()
    for step in range(steps):
        opt.zero_grad()
        with T.Tape() as tape:
            loss = fcoe_loss(DenseEmbeddingMap(ek, key.centerness, key.labels),
                             DenseEmbeddingMap(er, ref.centerness, ref.labels), seed=seed * 100003 + step)
        tape.backward(loss)
        opt.step()
        log.losses.append(float(loss.data))
    log.seconds = time.perf_counter() - t0
    k = DenseEmbeddingMap(ek.data.copy(), key.centerness, key.labels)
    r = DenseEmbeddingMap(er.data.copy(), ref.centerness, ref.labels)
    log.extra = object_cosines(k, r)
    return k, r, log


def object_cosines(key: DenseEmbeddingMap, ref: DenseEmbeddingMap) -> dict[str, float]:
    """Min intra-object and max inter-object cosine over all labeled key/ref cell pairs."""
    fk = np.asarray(key.embeddings).reshape(-1, np.shape(key.embeddings)[-1])
    fr = np.asarray(ref.embeddings).reshape(-1, np.shape(ref.embeddings)[-1])
    fk = fk / np.linalg.norm(fk, axis=1, keepdims=True)
    fr = fr / np.linalg.norm(fr, axis=1, keepdims=True)
    lk, lr = key.labels.ravel(), ref.labels.ravel()
    C = fk @ fr.T
    obj = (lk[:, None] >= 0) & (lr[None, :] >= 0)
    same = obj & (lk[:, None] == lr[None, :])
    diff = obj & (lk[:, None] != lr[None, :])
    return {"intra_min": float(C[same].min()), "inter_max": float(C[diff].max())}
