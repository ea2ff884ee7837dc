"""Deterministic synthetic driving scenes with noisy, drop-prone detections."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .assoc import bev_iou
from .errors import InvalidSpec
from .kitti import pose_to_row, project_box
from .pose import make_pose
from .tracker import DetectionState, iou_2d

MOTIONS = ("constant-velocity", "turning")
LAYOUTS = ("lanes", "crossing")
# l, w, h per class
SIZES = {0: (4.0, 1.7, 1.5), 1: (0.8, 0.6, 1.75), 2: (1.8, 0.6, 1.7)}


@dataclass
class SyntheticSceneSpec:
    seed: int = 0
    n_objects: int = 4
    motion: str | list[str] = "constant-velocity"
    pos_sigma: float = 0.0
    yaw_sigma: float = 0.0
    dropout: float = 0.0
    frames: int = 20
    separation: float = 2.0
    layout: str = "lanes"
    embed_dim: int = 16
    embed_jitter: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.dropout <= 1.0:
            raise InvalidSpec(f"dropout {self.dropout} outside [0, 1]")
        if self.pos_sigma < 0 or self.yaw_sigma < 0 or self.embed_jitter < 0 or self.separation < 0:
            raise InvalidSpec("noise levels and separation must be non-negative")
        if self.n_objects < 0 or self.frames < 1 or self.embed_dim < 1:
            raise InvalidSpec("need n_objects >= 0, frames >= 1, embed_dim >= 1")
        if self.layout not in LAYOUTS:
            raise InvalidSpec(f"layout must be one of {LAYOUTS}")
        for m in self.motions():
            if m not in MOTIONS:
                raise InvalidSpec(f"unknown motion model {m!r}")

    def motions(self) -> list[str]:
        if isinstance(self.motion, str):
            return [self.motion] * self.n_objects
        if len(self.motion) != self.n_objects:
            raise InvalidSpec("one motion model per object required")
        return list(self.motion)

    @classmethod
    def from_json(cls, path) -> "SyntheticSceneSpec":
        try:
            return cls(**json.loads(Path(path).read_text()))
        except TypeError as e:
            raise InvalidSpec(str(e)) from None


@dataclass
class GtObject:
    id: int
    pose: np.ndarray
    cls: int = 0


@dataclass
class SyntheticScene:
    spec: SyntheticSceneSpec
    gt: list[list[GtObject]] = field(default_factory=list)
    dets: list[list[DetectionState]] = field(default_factory=list)

    def gt_rows(self):
        return [pose_to_row(f, o.id, o.pose, o.cls) for f, objs in enumerate(self.gt) for o in objs]

    def det_rows(self):
        return [pose_to_row(f, -1, d.pose, d.cls, d.confidence, d.box2d)
                for f, ds in enumerate(self.dets) for d in ds]


def _trajectory(start, heading, speed, yaw_rate, size, frames) -> np.ndarray:
    out = np.empty((frames, 10))
    p = np.array([start[0], start[1], size[2] / 2])
    yaw = heading
    for t in range(frames):
        out[t] = make_pose(yaw, p, size)
        p = p + speed * np.array([np.cos(yaw), np.sin(yaw), 0.0])
        yaw += yaw_rate
    return out


def _clear(a: np.ndarray, b: np.ndarray) -> bool:
    """True if two trajectories never overlap in BEV nor heavily in the image."""
    for pa, pb in zip(a, b):
        if np.linalg.norm(pa[4:6] - pb[4:6]) < 0.5 * (pa[7] + pb[7]) and bev_iou(pa, pb) > 0.0:
            return False
        if np.linalg.norm(pa[4:6] - pb[4:6]) < 1.2:
            return False
        if iou_2d(project_box(pa), project_box(pb)) > 0.5:
            return False
    return True


def _in_view(traj: np.ndarray) -> bool:
    x, y = traj[:, 4], traj[:, 5]
    return bool(np.all(x > 6.0) and np.all(np.abs(y) < 0.8 * x + 4.0))


def _sample_object(rng, spec: SyntheticSceneSpec, motion: str, k: int, partner=None):
    cls = int(rng.choice(3, p=[0.7, 0.15, 0.15]))
    size = np.array(SIZES[cls]) * rng.uniform(0.9, 1.1, 3)
    speed = rng.uniform(0.4, 1.4) if cls != 1 else rng.uniform(0.1, 0.25)
    yaw_rate = rng.choice([-1, 1]) * rng.uniform(0.02, 0.06) if motion == "turning" else 0.0
    T = spec.frames
    if spec.layout == "crossing" and partner is not None:
        # meet the partner near mid-sequence in an adjacent lane, moving the other way
        p_traj, p_heading = partner
        mid = p_traj[T // 2, 4:6]
        heading = p_heading + np.pi + rng.normal(0, 0.05)
        normal = np.array([-np.sin(p_heading), np.cos(p_heading)])
        gap = rng.choice([-1, 1]) * rng.uniform(2.6, 3.4)
        meet = mid + gap * normal
        start = meet - speed * (T // 2) * np.array([np.cos(heading), np.sin(heading)])
    else:
        heading = rng.choice([0.0, np.pi]) + rng.normal(0, 0.1)
        start = np.array([rng.uniform(10, 45), rng.uniform(-10, 10)])
    return cls, size, _trajectory(start, heading, speed, yaw_rate, size, T), heading


def synth_scene_generate(spec: SyntheticSceneSpec) -> SyntheticScene:
    """Ground truth plus detections; a pure function of ``spec``."""
    rng = np.random.default_rng(spec.seed)
    motions = spec.motions()
    trajs, classes, headings = [], [], []
    for k in range(spec.n_objects):
        for _attempt in range(500):
            partner = None
            if spec.layout == "crossing" and k % 2 == 1:
                partner = (trajs[k - 1], headings[k - 1])
            cls, size, traj, heading = _sample_object(rng, spec, motions[k], k, partner)
            if _in_view(traj) and all(_clear(traj, o) for o in trajs):
                break
        else:
            raise InvalidSpec(f"could not place object {k} without overlaps")
        trajs.append(traj)
        classes.append(cls)
        headings.append(heading)

    e = spec.embed_dim
    shared = rng.normal(size=e) / np.sqrt(e)
    anchors = []
    for _ in range(spec.n_objects):
        a = shared + spec.separation * rng.normal(size=e) / np.sqrt(e)
        anchors.append(a / np.linalg.norm(a))

    scene = SyntheticScene(spec)
    for t in range(spec.frames):
        scene.gt.append([GtObject(k, trajs[k][t].copy(), classes[k]) for k in range(spec.n_objects)])
        frame = []
        for k in range(spec.n_objects):
            drop = rng.random() < spec.dropout
            noise_p = rng.normal(0, 1, 2) * spec.pos_sigma
            noise_yaw = rng.normal() * spec.yaw_sigma
            jitter = rng.normal(size=e) * spec.embed_jitter
            conf = rng.uniform(0.6, 1.0)
            if drop:
                continue
            g = trajs[k][t]
            yaw = np.arctan2(2 * (g[0] * g[3] + g[1] * g[2]), 1 - 2 * (g[2] ** 2 + g[3] ** 2))
            pose = g.copy() if spec.pos_sigma == 0 and spec.yaw_sigma == 0 else make_pose(
                yaw + noise_yaw, g[4:7] + np.array([*noise_p, 0.0]), g[7:10])
            emb = anchors[k] + jitter
            frame.append(DetectionState(pose, conf, classes[k], emb / np.linalg.norm(emb),
                                        np.array(project_box(pose)), gt_id=k))
        order = rng.permutation(len(frame))
        scene.dets.append([frame[i] for i in order])
    return scene


def spec_to_json(spec: SyntheticSceneSpec) -> str:
    return json.dumps(asdict(spec), indent=2, sort_keys=True)


def occlusion_benchmark(n: int = 20, seed: int = 7000, dropout: float = 0.2, pos_sigma: float = 0.3,
                        yaw_sigma: float = 0.05, n_objects: int = 6, frames: int = 30) -> list[SyntheticScene]:
    """Crossing scenes with detection dropout; every third uses turning motion.

    Seeds are consumed in order from ``seed``; ones whose objects cannot be placed are skipped.
    """
    scenes, s = [], seed
    while len(scenes) < n:
        motion = "turning" if len(scenes) % 3 == 2 else "constant-velocity"
        try:
            scenes.append(synth_scene_generate(SyntheticSceneSpec(
                seed=s, n_objects=n_objects, layout="crossing", motion=motion, dropout=dropout,
                pos_sigma=pos_sigma, yaw_sigma=yaw_sigma, frames=frames)))
        except InvalidSpec:
            pass
        s += 1
    return scenes
