import json

import numpy as np
import pytest

from ssmtrack.assoc import bev_iou
from ssmtrack.metrics import Counts, clear_metrics, evaluate
from ssmtrack.pose import make_pose


def obj(i, x, y=0.0):
    return (i, make_pose(0.0, [x, y, 0.75], [2.0, 2.0, 1.5]))


def two_lane_scene(frames=10):
    return {f: [obj(0, f, 0), obj(1, f, 10)] for f in range(frames)}


def test_identity():
    gt = two_lane_scene()
    c = clear_metrics(gt, gt)
    assert (c.mota, c.idsw, c.frag, c.fp, c.fn) == (1.0, 0, 0, 0, 0)


def test_id_swap():
    gt = two_lane_scene()
    hyp = {f: [(1 - i if f >= 5 else i, p) for i, p in rows] for f, rows in gt.items()}
    c = clear_metrics(gt, hyp)
    assert c.idsw == 2 and c.mota == pytest.approx(1 - 2 / 20)


def test_gap():
    gt = two_lane_scene()
    hyp = {f: [r for r in rows if not (r[0] == 0 and 3 <= f <= 5)] for f, rows in gt.items()}
    c = clear_metrics(gt, hyp)
    assert (c.fn, c.frag, c.idsw) == (3, 1, 0)


def test_empty_gt_mota_null():
    c = clear_metrics({}, {0: [obj(0, 1)]})
    assert c.gt == 0 and c.fp == 1 and c.mota is None
    report = evaluate({"s": ({}, {0: [obj(0, 1)]})})
    assert json.loads(report.to_json())["aggregate"]["mota"] is None
    assert "null" in report.to_table()


def test_persistent_correspondence_beats_better_iou():
    # gt 0 keeps hypothesis 7 while still above threshold, even though 8 overlaps more
    gt = {0: [obj(0, 0)], 1: [obj(0, 1)]}
    hyp = {0: [obj(7, 0)], 1: [obj(7, 1.6), obj(8, 1.0)]}
    c = clear_metrics(gt, hyp)
    assert c.idsw == 0 and c.fp == 1


# -------------------------------------------------- brute-force oracle


def exhaustive_matches(gts, hyps, prev_map, thr):
    iou = [[bev_iou(g, h) for _, h in hyps] for _, g in gts]
    pairs, used_h = [], set()
    hidx = {hid: j for j, (hid, _) in enumerate(hyps)}
    for i, (gid, _) in enumerate(gts):
        j = hidx.get(prev_map.get(gid))
        if j is not None and iou[i][j] >= thr:
            pairs.append((i, j))
            used_h.add(j)
    rg = [i for i in range(len(gts)) if i not in {p[0] for p in pairs}]
    rh = [j for j in range(len(hyps)) if j not in used_h]
    best = (0, 0.0, [])

    def rec(k, taken, acc, cost):
        nonlocal best
        if k == len(rg):
            if len(acc) > best[0] or (len(acc) == best[0] and cost < best[1] - 1e-12):
                best = (len(acc), cost, list(acc))
            return
        rec(k + 1, taken, acc, cost)
        for j in rh:
            if j not in taken and iou[rg[k]][j] >= thr:
                rec(k + 1, taken | {j}, acc + [(rg[k], j)], cost + 1 - iou[rg[k]][j])

    rec(0, frozenset(), [], 0.0)
    return pairs + best[2]


def random_mini_scene(rng):
    n_gt, frames = int(rng.integers(1, 6)), int(rng.integers(2, 7))
    gt, hyp = {}, {}
    for f in range(frames):
        gt[f] = [obj(i, 3 * i + 0.2 * f, rng.normal(0, 0.3)) for i in range(n_gt) if rng.random() > 0.15]
        hyp[f] = []
        for i, p in gt[f]:
            if rng.random() < 0.8:
                hid = i if rng.random() > 0.2 else int(rng.integers(0, 6))
                q = p.copy()
                q[4:6] += rng.normal(0, 0.8, 2)
                hyp[f].append((hid, q))
        if rng.random() < 0.3:
            hyp[f].append(obj(int(rng.integers(0, 6)), rng.uniform(0, 15), rng.normal()))
        ids = [h for h, _ in hyp[f]]
        hyp[f] = [h for k, h in enumerate(hyp[f]) if h[0] not in ids[:k]]  # unique ids per frame
        if len(hyp[f]) > 5:
            hyp[f] = hyp[f][:5]
    return gt, hyp


def test_agrees_with_brute_force_on_200_mini_scenes():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        gt, hyp = random_mini_scene(rng)
        fast = clear_metrics(gt, hyp)
        slow = clear_metrics(gt, hyp, matcher=exhaustive_matches)
        assert fast == slow


def test_counts_add_and_report():
    a, b = Counts(1, 2, 3, 1, 0, 5), Counts(4, 0, 0, 0, 1, 4)
    assert (a + b) == Counts(5, 2, 3, 1, 1, 9)
    r = evaluate({"b": (two_lane_scene(), two_lane_scene()), "a": ({}, {})})
    assert list(r.per_sequence) == ["a", "b"]
    assert r.total.gt == 20 and r.mota == 1.0
    assert r.to_table().splitlines()[-1].startswith("ALL")
