"""CLEAR-MOT subset (MOTA, IDSW, FRAG) with BEV-IoU matching."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .assoc import bev_iou, hungarian_solve
from .kitti import KittiLabelRow, row_to_pose

INVALID = 1e3  # cost of a pair below the IoU threshold; dominates any valid total


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    idsw: int = 0
    frag: int = 0
    gt: int = 0

    @property
    def mota(self) -> float | None:
        if self.gt == 0:
            return None
        return 1.0 - (self.fp + self.fn + self.idsw) / self.gt

    def __add__(self, o: "Counts") -> "Counts":
        return Counts(*(getattr(self, k) + getattr(o, k) for k in ("tp", "fp", "fn", "idsw", "frag", "gt")))

    def as_dict(self) -> dict:
        d = asdict(self)
        d["mota"] = self.mota
        return d


@dataclass
class MetricsReport:
    total: Counts
    per_sequence: dict[str, Counts] = field(default_factory=dict)

    @property
    def mota(self) -> float | None:
        return self.total.mota

    @property
    def idsw(self) -> int:
        return self.total.idsw

    @property
    def frag(self) -> int:
        return self.total.frag

    def to_dict(self) -> dict:
        return {"aggregate": self.total.as_dict(),
                "sequences": {k: v.as_dict() for k, v in self.per_sequence.items()}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        cols = ("MOTA", "IDSW", "FRAG", "TP", "FP", "FN", "GT")
        rows = [(name, c) for name, c in self.per_sequence.items()] + [("ALL", self.total)]
        w = max(8, *(len(n) for n, _ in rows))
        lines = [f"{'seq':<{w}}" + "".join(f"{h:>9}" for h in cols)]
        for name, c in rows:
            mota = "null" if c.mota is None else f"{c.mota:.4f}"
            vals = (mota, c.idsw, c.frag, c.tp, c.fp, c.fn, c.gt)
            lines.append(f"{name:<{w}}" + "".join(f"{v:>9}" for v in vals))
        return "\n".join(lines)


def _as_objects(frame_rows) -> list[tuple[int, np.ndarray]]:
    out = []
    for r in frame_rows:
        if isinstance(r, KittiLabelRow):
            if r.dontcare:
                continue
            out.append((r.track_id, row_to_pose(r)))
        else:
            out.append((int(r[0]), np.asarray(r[1], float)))
    return out


def frame_matches(gts, hyps, prev_map: dict[int, int], thr: float) -> list[tuple[int, int]]:
    """Index pairs (gt, hyp) for one frame, keeping still-valid previous correspondences first."""
    iou = np.array([[bev_iou(g, h) for _, h in hyps] for _, g in gts]).reshape(len(gts), len(hyps))
    hyp_index = {hid: j for j, (hid, _) in enumerate(hyps)}
    pairs = []
    used_g, used_h = set(), set()
    for i, (gid, _) in enumerate(gts):
        j = hyp_index.get(prev_map.get(gid, None), None)
        if j is not None and j not in used_h and iou[i, j] >= thr:
            pairs.append((i, j))
            used_g.add(i)
            used_h.add(j)
    rg = [i for i in range(len(gts)) if i not in used_g]
    rh = [j for j in range(len(hyps)) if j not in used_h]
    if rg and rh:
        sub = iou[np.ix_(rg, rh)]
        cost = np.where(sub >= thr, 1.0 - sub, INVALID)
        for a, b in hungarian_solve(cost).matches:
            if sub[a, b] >= thr:
                pairs.append((rg[a], rh[b]))
    return pairs


def clear_metrics(gt, hyp, iou_threshold: float = 0.25, matcher=frame_matches) -> Counts:
    """Accumulate CLEAR counts over one sequence.

    ``gt`` and ``hyp`` map frame -> rows, where a row is a :class:`KittiLabelRow`
    or an ``(id, pose)`` pair. IDSW counts a ground-truth object matched to a
    different hypothesis id than at its last match; FRAG counts resumptions of
    tracking after a gap.
    """
    c = Counts()
    prev_map: dict[int, int] = {}  # gt id -> hyp id at last match
    was_tracked: dict[int, bool] = {}  # gt id -> tracked at its previous appearance
    for f in sorted(set(gt) | set(hyp)):
        gts, hyps = _as_objects(gt.get(f, [])), _as_objects(hyp.get(f, []))
        pairs = matcher(gts, hyps, prev_map, iou_threshold)
        c.gt += len(gts)
        c.tp += len(pairs)
        c.fn += len(gts) - len(pairs)
        c.fp += len(hyps) - len(pairs)
        matched = {}
        for i, j in pairs:
            gid, hid = gts[i][0], hyps[j][0]
            matched[gid] = hid
            if gid in prev_map and prev_map[gid] != hid:
                c.idsw += 1
            if gid in prev_map and not was_tracked.get(gid, False):
                c.frag += 1
            prev_map[gid] = hid
        for gid, _ in gts:
            was_tracked[gid] = gid in matched
    return c


def evaluate(sequences: dict[str, tuple[dict, dict]], iou_threshold: float = 0.25) -> MetricsReport:
    per = {name: clear_metrics(g, h, iou_threshold) for name, (g, h) in sorted(sequences.items())}
    total = Counts()
    for c in per.values():
        total = total + c
    return MetricsReport(total, per)


def outputs_to_frames(outputs) -> dict[int, list[tuple[int, np.ndarray]]]:
    """Tracker outputs (list per frame) -> frame -> [(id, pose)]."""
    return {f: [(o.id, o.pose) for o in outs] for f, outs in enumerate(outputs)}


def gt_to_frames(gt) -> dict[int, list[tuple[int, np.ndarray]]]:
    return {f: [(o.id, o.pose) for o in objs] for f, objs in enumerate(gt)}
