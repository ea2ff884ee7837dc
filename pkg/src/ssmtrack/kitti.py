"""KITTI tracking label rows and conversion to/from world-frame poses.

World frame: x forward, y left, z up, ground at z = 0. The camera sits at
the origin, ``CAMERA_HEIGHT`` above the ground, looking along +x; KITTI
camera coordinates are x right, y down, z forward with the location at the
bottom-face center of the box.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FieldCountMismatch, MalformedRow
from .pose import make_pose, yaw_of

CAMERA_HEIGHT = 1.65
FOCAL, CX, CY = 720.0, 620.0, 187.0
CLASSES = ("Car", "Pedestrian", "Cyclist")


def class_id(name: str) -> int:
    return CLASSES.index(name) if name in CLASSES else len(CLASSES)


def class_name(cid: int) -> str:
    return CLASSES[cid] if 0 <= cid < len(CLASSES) else "Misc"


@dataclass
class KittiLabelRow:
    frame: int
    track_id: int
    type: str
    truncated: float
    occluded: int
    alpha: float
    bbox: tuple[float, float, float, float]
    dimensions: tuple[float, float, float]  # h, w, l
    location: tuple[float, float, float]  # camera frame, bottom center
    rotation_y: float
    score: float | None = None

    @property
    def dontcare(self) -> bool:
        return self.type == "DontCare"

    def format(self) -> str:
        vals = [f"{self.frame:d}", f"{self.track_id:d}", self.type, f"{self.truncated:.6f}",
                f"{self.occluded:d}", f"{self.alpha:.6f}"]
        vals += [f"{v:.6f}" for v in (*self.bbox, *self.dimensions, *self.location, self.rotation_y)]
        if self.score is not None:
            vals.append(f"{self.score:.6f}")
        return " ".join(vals)


def parse_row(line: str, line_no: int = 1) -> KittiLabelRow:
    parts = line.split()
    if len(parts) not in (17, 18):
        raise FieldCountMismatch(line_no, f"expected 17 or 18 fields, got {len(parts)}")
    try:
        f = [float(x) for x in parts[3:]]
        row = KittiLabelRow(
            frame=int(parts[0]), track_id=int(parts[1]), type=parts[2],
            truncated=f[0], occluded=int(parts[4]), alpha=f[2],
            bbox=tuple(f[3:7]), dimensions=tuple(f[7:10]), location=tuple(f[10:13]),
            rotation_y=f[13], score=f[14] if len(parts) == 18 else None,
        )
    except ValueError as e:
        raise MalformedRow(line_no, str(e)) from None
    if row.frame < 0:
        raise MalformedRow(line_no, "negative frame index")
    if row.bbox[2] < row.bbox[0] or row.bbox[3] < row.bbox[1]:
        raise MalformedRow(line_no, "bbox right/bottom before left/top")
    return row


def parse_kitti_text(text: str) -> dict[int, list[KittiLabelRow]]:
    frames: dict[int, list[KittiLabelRow]] = {}
    for no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        row = parse_row(line, no)
        frames.setdefault(row.frame, []).append(row)
    return frames


def parse_kitti_labels(path) -> dict[int, list[KittiLabelRow]]:
    """Rows grouped by frame, in file order within a frame."""
    return parse_kitti_text(Path(path).read_text())


def format_kitti(rows) -> str:
    if isinstance(rows, dict):
        rows = [r for rs in rows.values() for r in rs]
    rows = sorted(rows, key=lambda r: (r.frame, r.track_id))
    return "".join(r.format() + "\n" for r in rows)


def write_kitti_results(rows, path) -> None:
    """Write rows frame-major, then by track id. Accepts a list or a frame -> rows mapping."""
    Path(path).write_text(format_kitti(rows))


# ------------------------------------------------------------ geometry


def _wrap(a: float) -> float:
    return float((a + np.pi) % (2 * np.pi) - np.pi)


def row_to_pose(row: KittiLabelRow) -> np.ndarray:
    h, w, l = row.dimensions
    xc, yc, zc = row.location
    p = (zc, -xc, CAMERA_HEIGHT - yc + h / 2)
    return make_pose(_wrap(-row.rotation_y - np.pi / 2), p, (l, w, h))


def project_box(pose) -> tuple[float, float, float, float]:
    """Image-plane bounding box of the 8 projected corners (points behind the camera clamped)."""
    from .pose import box_corners

    corners = box_corners(np.asarray(pose, float)).data
    depth = np.maximum(corners[:, 0], 0.1)
    u = FOCAL * (-corners[:, 1]) / depth + CX
    v = FOCAL * (CAMERA_HEIGHT - corners[:, 2]) / depth + CY
    return float(u.min()), float(v.min()), float(u.max()), float(v.max())


def pose_to_row(frame: int, track_id: int, pose, cls: int = 0, score: float | None = None,
                bbox=None) -> KittiLabelRow:
    pose = np.asarray(pose, float)
    l, w, h = pose[7:10]
    x, y, z = pose[4:7]
    loc = (-y, CAMERA_HEIGHT - z + h / 2, x)
    ry = _wrap(-yaw_of(pose[:4]) - np.pi / 2)
    alpha = _wrap(ry - np.arctan2(loc[0], loc[2]))
    bbox = tuple(float(b) for b in (bbox if bbox is not None else project_box(pose)))
    return KittiLabelRow(frame, track_id, class_name(cls), 0.0, 0, alpha, bbox, (h, w, l), loc, ry, score)
