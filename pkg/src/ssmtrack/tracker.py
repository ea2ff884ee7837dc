"""Online tracking loop: filter detections, predict, associate, update, manage lifecycles."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .assoc import (Assignment, DetectionCues, TrackCues, bev_iou, build_distance_tensor,
                    extract_assignment, greedy_solve, hungarian_solve)
from .hssm import hssm_forward
from .models import Models, load_models
from .pose import hemisphere_np, state_difference
from .velossm import pad_history, velossm_predict, velossm_update

BACKENDS = ("hssm", "hungarian", "greedy")
TENTATIVE, CONFIRMED, DEAD = "tentative", "confirmed", "dead"


@dataclass
class DetectionState:
    pose: np.ndarray  # [q(4), p(3), s(3)]
    confidence: float = 1.0
    cls: int = 0
    embedding: np.ndarray | None = None
    box2d: np.ndarray | None = None  # left, top, right, bottom
    gt_id: int | None = None  # only set by the synthetic generator

    def __post_init__(self):
        pose = np.array(self.pose, dtype=float)
        n = np.linalg.norm(pose[:4])
        if n <= 1e-6:
            raise ValueError("detection quaternion is degenerate")
        pose[:4] = hemisphere_np(pose[:4] / n)
        if np.any(pose[7:] <= 0):
            raise ValueError("detection sizes must be positive")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        self.pose = pose
        if self.embedding is not None:
            e = np.asarray(self.embedding, dtype=float)
            self.embedding = e / max(np.linalg.norm(e), 1e-12)


@dataclass
class Track:
    id: int
    history: deque
    embedding: np.ndarray
    cls: int
    confidence: float
    flow: np.ndarray | None = None
    age: int = 0
    hits: int = 1
    status: str = TENTATIVE
    pending: list = field(default_factory=list)  # (frame, pose) while tentative
    gt_id: int | None = None

    @property
    def pose(self) -> np.ndarray:
        return self.history[-1]


@dataclass
class TrackerConfig:
    max_age: int = 3
    min_hits: int = 2
    tau_assoc: float = 0.5
    history: int = 10
    backend: str = "hungarian"
    nms_iou_2d: float = 0.75
    min_confidence: float = 0.5
    nms_bev: float = 0.01
    ema: float = 0.9
    emit_coasting: bool = False

    def __post_init__(self):
        if self.backend not in BACKENDS + ("oracle",):
            raise ValueError(f"unknown backend {self.backend!r}")
        for name in ("tau_assoc", "nms_iou_2d", "min_confidence", "nms_bev", "ema"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.max_age < 0 or self.min_hits < 1 or self.history < 1:
            raise ValueError("max_age >= 0, min_hits >= 1 and history >= 1 required")


@dataclass
class TrackOutput:
    id: int
    pose: np.ndarray
    cls: int
    confidence: float
    box2d: np.ndarray | None = None


def iou_2d(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def nms_filter(dets: list[DetectionState], cfg: TrackerConfig) -> list[DetectionState]:
    """Confidence gate, then greedy 2-D NMS, then BEV duplicate suppression."""
    kept = [d for d in dets if d.confidence >= cfg.min_confidence]
    order = sorted(range(len(kept)), key=lambda i: (-kept[i].confidence, i))
    kept = [kept[i] for i in order]
    stage1 = []
    for d in kept:
        if d.box2d is not None and any(
                o.box2d is not None and iou_2d(d.box2d, o.box2d) > cfg.nms_iou_2d for o in stage1):
            continue
        stage1.append(d)
    out = []
    for d in stage1:
        if any(bev_iou(d.pose, o.pose) > cfg.nms_bev for o in out):
            continue
        out.append(d)
    return out


class Tracker:
    """One scene. Call :meth:`step` once per frame, in order."""

    def __init__(self, cfg: TrackerConfig | None = None, models: Models | None = None):
        self.cfg = cfg or TrackerConfig()
        self.models = models if models is not None else load_models()
        self.tracks: list[Track] = []
        self.next_id = 0
        self.frame = -1
        self.backfill: list[tuple[int, TrackOutput]] = []
        self.last_cues: np.ndarray | None = None
        self.last_tracks: list[Track] = []
        self.last_dets: list[DetectionState] = []

    @property
    def live(self) -> list[Track]:
        return [t for t in self.tracks if t.status != DEAD]

    # -- association --------------------------------------------------

    def _associate(self, tracks: list[Track], dets: list[DetectionState], pred: np.ndarray) -> Assignment:
        H, W = len(tracks), len(dets)
        if H == 0 or W == 0:
            return Assignment.from_matches([], H, W)
        e = len(dets[0].embedding) if dets[0].embedding is not None else 1
        t_emb = np.stack([t.embedding for t in tracks])
        d_emb = np.stack([d.embedding if d.embedding is not None else np.ones(e) for d in dets])
        tc = TrackCues(
            poses=pred,
            embeddings=t_emb,
            classes=np.array([t.cls for t in tracks]),
            velocities=pred[:, 4:7] - np.stack([t.pose[4:7] for t in tracks]),
            last_positions=np.stack([t.pose[4:7] for t in tracks]),
        )
        dc = DetectionCues(np.stack([d.pose for d in dets]), d_emb, np.array([d.cls for d in dets]))
        D = build_distance_tensor(tc, dc)
        self.last_cues = D
        backend = self.cfg.backend
        if backend == "oracle":
            return Assignment.from_matches(
                [(i, j) for i, t in enumerate(tracks) for j, d in enumerate(dets)
                 if t.gt_id is not None and t.gt_id == d.gt_id], H, W)
        if backend == "hssm":
            soft = hssm_forward(D, self.models.hssm).data
            return extract_assignment(soft, self.cfg.tau_assoc)
        sim = D.mean(axis=0)
        hard = hungarian_solve(1.0 - sim) if backend == "hungarian" else greedy_solve(1.0 - sim)
        keep = [(i, j) for i, j in hard.matches if sim[i, j] >= self.cfg.tau_assoc]
        return Assignment.from_matches(keep, H, W)

    # -- main loop ----------------------------------------------------

    def step(self, dets: list[DetectionState]) -> list[TrackOutput]:
        cfg = self.cfg
        self.frame += 1
        self.last_cues = None
        dets = nms_filter(dets, cfg)
        tracks = self.live
        self.last_tracks, self.last_dets = tracks, dets
        pred = flows = None
        if tracks:
            hist = np.stack([pad_history(np.stack(t.history), cfg.history)[0] for t in tracks])
            pred_t, flow_t = velossm_predict(hist, self.models.predictor)
            pred, flows = pred_t.data, flow_t.data
        assignment = self._associate(tracks, dets, pred)
        self.last_assignment = assignment

        if assignment.matches:
            ti = [i for i, _ in assignment.matches]
            dj = [j for _, j in assignment.matches]
            prev = np.stack([tracks[i].pose for i in ti])
            obs = np.stack([dets[j].pose for j in dj])
            pv = state_difference(prev, pred[ti]).data
            ov = state_difference(prev, obs).data
            conf = np.array([dets[j].confidence for j in dj])
            refined = velossm_update(pv, ov, prev, conf, flows[ti], self.models.updater).data
            for k, (i, j) in enumerate(assignment.matches):
                t, d = tracks[i], dets[j]
                t.history.append(refined[k])
                t.flow = flows[i]
                t.age = 0
                t.hits += 1
                t.confidence = d.confidence
                t.gt_id = d.gt_id
                if d.embedding is not None:
                    emb = cfg.ema * t.embedding + (1 - cfg.ema) * d.embedding
                    t.embedding = emb / max(np.linalg.norm(emb), 1e-12)
                self._promote(t, d)

        for i in assignment.unmatched_tracks:
            t = tracks[i]
            t.age += 1
            t.history.append(pred[i])  # coast on the prediction
            t.flow = flows[i]
            if t.age > cfg.max_age:
                t.status = DEAD

        spawned = []
        for j in assignment.unmatched_detections:
            d = dets[j]
            e = d.embedding if d.embedding is not None else np.ones(1)
            t = Track(self.next_id, deque([d.pose.copy()], maxlen=cfg.history + 1), e.copy(), d.cls,
                      d.confidence, gt_id=d.gt_id)
            self.next_id += 1
            self.tracks.append(t)
            spawned.append((t, d))
            self._promote(t, d)

        out = []
        for i, j in assignment.matches:
            t = tracks[i]
            if t.status == CONFIRMED:
                out.append(TrackOutput(t.id, t.pose.copy(), t.cls, t.confidence, dets[j].box2d))
        if cfg.emit_coasting:
            for i in assignment.unmatched_tracks:
                t = tracks[i]
                if t.status == CONFIRMED:
                    out.append(TrackOutput(t.id, t.pose.copy(), t.cls, t.confidence, None))
        for t, d in spawned:
            if t.status == CONFIRMED:
                out.append(TrackOutput(t.id, t.pose.copy(), t.cls, t.confidence, d.box2d))
        return sorted(out, key=lambda o: o.id)

    def _promote(self, t: Track, d: DetectionState) -> None:
        if t.status != TENTATIVE:
            return
        if t.hits >= self.cfg.min_hits:
            t.status = CONFIRMED
            for frame, out in t.pending:
                self.backfill.append((frame, out))
            t.pending.clear()
        else:
            t.pending.append((self.frame, TrackOutput(t.id, t.pose.copy(), t.cls, t.confidence, d.box2d)))


def run_scene(frames: list[list[DetectionState]], cfg: TrackerConfig | None = None,
              models: Models | None = None, backfill: bool = True) -> list[list[TrackOutput]]:
    """Track a whole sequence; optionally add outputs of tentative frames once a track confirms."""
    tracker = Tracker(cfg, models)
    outputs = [tracker.step(dets) for dets in frames]
    if backfill:
        for frame, out in tracker.backfill:
            outputs[frame].append(out)
        outputs = [sorted(o, key=lambda x: x.id) for o in outputs]
    return outputs
