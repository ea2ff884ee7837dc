"""Association cues and assignment solvers.

All cues are similarities in [0, 1]. Solvers take costs (lower is better).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyProblem, NonFiniteCost, ShapeMismatch
from .pose import yaw_of

# ---------------------------------------------------------------- cues


def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def appearance_similarity(f_t, f_d) -> np.ndarray:
    """Bi-directional softmax of the embedding dot products, ``[H, W]``."""
    f_t, f_d = np.atleast_2d(f_t), np.atleast_2d(f_d)
    if f_t.shape[1] != f_d.shape[1]:
        raise ShapeMismatch(f"embedding widths differ: {f_t.shape} vs {f_d.shape}")
    S = f_t @ f_d.T
    return 0.5 * (_softmax_np(S, axis=1) + _softmax_np(S, axis=0))


def centroid_similarity(p_t, p_d) -> float:
    return float(np.exp(-np.linalg.norm(np.asarray(p_t) - np.asarray(p_d)) / 10.0))


def pseudo_motion_similarity(v_t, v_d) -> float:
    return float(np.exp(-np.linalg.norm(np.asarray(v_t) - np.asarray(v_d)) / 5.0))


def cosine_weight(v_t, v_d) -> float:
    v_t, v_d = np.asarray(v_t, float), np.asarray(v_d, float)
    nt, nd = np.linalg.norm(v_t), np.linalg.norm(v_d)
    if nt < 1e-9 or nd < 1e-9:
        return 0.5
    cos = float(np.clip(v_t @ v_d / (nt * nd), -1.0, 1.0))
    return 0.5 * (1.0 + cos)


def motion_similarity(v_t, v_d, p_t, p_d) -> float:
    w = cosine_weight(v_t, v_d)
    return w * centroid_similarity(p_t, p_d) + (1.0 - w) * pseudo_motion_similarity(v_t, v_d)


def category_consistency(c_t, c_d) -> float:
    return 1.0 if c_t == c_d else 0.0


# ---------------------------------------------------------------- BEV IoU


def footprint(pose) -> np.ndarray:
    """Ground-plane rectangle (4 x 2, counter-clockwise) of a pose 10-vector."""
    pose = np.asarray(pose, dtype=float)
    yaw = yaw_of(pose[:4])
    c, s = np.cos(yaw), np.sin(yaw)
    hx, hy = pose[7] / 2.0, pose[8] / 2.0
    local = np.array([[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy]])
    R = np.array([[c, -s], [s, c]])
    return local @ R.T + pose[4:6]


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: ``subject`` clipped by convex counter-clockwise ``clipper``."""
    out = list(subject)
    n = len(clipper)
    for k in range(n):
        if not out:
            break
        a, b = clipper[k], clipper[(k + 1) % n]
        edge = b - a

        def inside(p):
            return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0]) >= 0.0

        def cross_point(p, q):
            d = q - p
            denom = edge[0] * d[1] - edge[1] * d[0]
            if denom == 0.0:  # segment on the clip line
                return q
            t = (edge[1] * (p[0] - a[0]) - edge[0] * (p[1] - a[1])) / denom
            return p + t * d

        src, out = out, []
        for i in range(len(src)):
            cur, prev = src[i], src[i - 1]
            if inside(cur):
                if not inside(prev):
                    out.append(cross_point(prev, cur))
                out.append(cur)
            elif inside(prev):
                out.append(cross_point(prev, cur))
    return np.array(out).reshape(-1, 2)


def bev_iou(box_a, box_b) -> float:
    """IoU of the yaw-rotated ground-plane footprints of two poses."""
    pa, pb = footprint(box_a), footprint(box_b)
    area_a, area_b = abs(polygon_area(pa)), abs(polygon_area(pb))
    if area_a < 1e-12 or area_b < 1e-12:
        return 0.0
    # cheap reject on bounding circles
    ra = np.hypot(box_a[7], box_a[8]) / 2
    rb = np.hypot(box_b[7], box_b[8]) / 2
    if np.linalg.norm(np.asarray(box_a[4:6]) - np.asarray(box_b[4:6])) > ra + rb:
        return 0.0
    inter = abs(polygon_area(clip_polygon(pa, pb)))
    union = area_a + area_b - inter
    return float(np.clip(inter / union, 0.0, 1.0)) if union > 0 else 0.0


def pairwise_bev_iou(a, b) -> np.ndarray:
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    return np.array([[bev_iou(x, y) for y in b] for x in a]).reshape(len(a), len(b))


# ---------------------------------------------------------------- cue tensor


@dataclass
class TrackCues:
    poses: np.ndarray  # predicted poses [H, 10]
    embeddings: np.ndarray  # [H, e]
    classes: np.ndarray  # [H]
    velocities: np.ndarray  # linear velocity per frame [H, 3]
    last_positions: np.ndarray  # position before prediction [H, 3]


@dataclass
class DetectionCues:
    poses: np.ndarray  # [W, 10]
    embeddings: np.ndarray  # [W, e]
    classes: np.ndarray  # [W]


CUE_NAMES = ("appearance", "iou", "motion", "class")


def build_distance_tensor(tracks: TrackCues, dets: DetectionCues) -> np.ndarray:
    """Stack the four pairwise cues into ``[4, H, W]``."""
    H, W = len(tracks.poses), len(dets.poses)
    if H == 0 or W == 0:
        raise EmptyProblem("cue tensor needs at least one track and one detection")
    out = np.empty((4, H, W))
    out[0] = appearance_similarity(tracks.embeddings, dets.embeddings)
    out[1] = pairwise_bev_iou(tracks.poses, dets.poses)
    for i in range(H):
        for j in range(W):
            v_d = dets.poses[j, 4:7] - tracks.last_positions[i]
            out[2, i, j] = motion_similarity(tracks.velocities[i], v_d,
                                             tracks.poses[i, 4:7], dets.poses[j, 4:7])
            out[3, i, j] = category_consistency(tracks.classes[i], dets.classes[j])
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------- solvers


@dataclass
class Assignment:
    matches: list[tuple[int, int]] = field(default_factory=list)
    unmatched_tracks: list[int] = field(default_factory=list)
    unmatched_detections: list[int] = field(default_factory=list)

    @classmethod
    def from_matches(cls, matches, H: int, W: int) -> "Assignment":
        matches = sorted((int(i), int(j)) for i, j in matches)
        rows = {i for i, _ in matches}
        cols = {j for _, j in matches}
        return cls(matches, [i for i in range(H) if i not in rows],
                   [j for j in range(W) if j not in cols])

    def total(self, cost) -> float:
        cost = np.asarray(cost)
        return float(sum(cost[i, j] for i, j in self.matches))

    def as_matrix(self, H: int, W: int) -> np.ndarray:
        m = np.zeros((H, W))
        for i, j in self.matches:
            m[i, j] = 1.0
        return m


def _check_cost(cost) -> np.ndarray:
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise ShapeMismatch(f"cost must be 2-D, got {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise NonFiniteCost("cost matrix contains NaN or Inf")
    return cost


def _shortest_augmenting_path(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Kuhn-Munkres via potentials on a square matrix.

    Returns ``(col_of_row, u, v)`` with ``a - u[:, None] - v[None, :] >= 0``
    and equality on the matching.
    """
    n = a.shape[0]
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=int)  # p[j]: row (1-based) matched to column j; column 0 is virtual
    way = np.zeros(n + 1, dtype=int)
    cost = np.zeros((n + 1, n + 1))
    cost[1:, 1:] = a
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, INF)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cur = cost[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            cand = np.where(free, minv, INF)
            j1 = int(np.argmin(cand))  # lowest column on ties
            delta = cand[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=int)
    for j in range(1, n + 1):
        col_of_row[p[j] - 1] = j - 1
    return col_of_row, u[1:], v[1:]


def _lexicographic_tight(tight: np.ndarray, col_of_row: np.ndarray) -> np.ndarray:
    """Lexicographically smallest perfect matching inside the tight-edge graph.

    Every perfect matching on tight edges is optimal, so this fixes the
    tie-break to lowest row first, then lowest column.
    """
    n = len(col_of_row)
    match = col_of_row.copy()
    row_of_col = np.empty(n, dtype=int)
    row_of_col[match] = np.arange(n)
    for i in range(n):
        for j in np.flatnonzero(tight[i]):
            if match[i] == j:
                break
            # rows < i are fixed; try to re-route the row currently on column j
            # so that it ends on column match[i], using only free rows > i.
            r0 = row_of_col[j]
            if r0 < i:
                continue
            target = match[i]
            parent = {r0: None}
            stack = [r0]
            found = None
            while stack and found is None:
                r = stack.pop()
                for c in np.flatnonzero(tight[r]):
                    if c == match[r]:
                        continue
                    if c == target:
                        found = (r, c)
                        break
                    r2 = row_of_col[c]
                    if r2 > i and r2 not in parent:
                        parent[r2] = (r, c)
                        stack.append(r2)
            if found is None:
                continue
            # shift columns along the path back to r0, then give j to row i
            r, c = found
            while True:
                match[r] = c
                row_of_col[c] = r
                if parent[r] is None:
                    break
                r, c = parent[r][0], parent[r][1]
                # parent[r] records how r was reached: r was the owner of column c
                # before; the previous row takes c
            match[i] = j
            row_of_col[j] = i
            break
    return match


def hungarian_solve(cost, tight_tol: float = 1e-9) -> Assignment:
    """Minimum-cost matching of ``min(H, W)`` pairs.

    Rectangular inputs are padded to square; the pad value does not change the
    optimum (every pad row/column is used exactly once) so zero is used.
    Ties break toward the lowest row index, then the lowest column index.
    """
    cost = _check_cost(cost)
    H, W = cost.shape
    if H == 0 or W == 0:
        return Assignment([], list(range(H)), list(range(W)))
    n = max(H, W)
    sq = np.zeros((n, n))
    sq[:H, :W] = cost
    col_of_row, u, v = _shortest_augmenting_path(sq)
    scale = max(1.0, float(np.abs(cost).max()))
    tight = (sq - u[:, None] - v[None, :]) <= tight_tol * scale
    tight[np.arange(n), col_of_row] = True
    col_of_row = _lexicographic_tight(tight, col_of_row)
    matches = [(i, int(col_of_row[i])) for i in range(H) if col_of_row[i] < W]
    return Assignment.from_matches(matches, H, W)


def greedy_solve(cost) -> Assignment:
    """Repeatedly take the global minimum among unassigned rows and columns."""
    cost = _check_cost(cost)
    H, W = cost.shape
    work = cost.copy()
    matches = []
    for _ in range(min(H, W)):
        k = int(np.argmin(work))  # row-major: lowest row, then lowest column on ties
        i, j = divmod(k, W)
        matches.append((i, j))
        work[i, :] = np.inf
        work[:, j] = np.inf
    return Assignment.from_matches(matches, H, W)


def extract_assignment(soft, tau: float = 0.5) -> Assignment:
    """Harden a soft association matrix: Hungarian on ``1 - soft``, then drop pairs below ``tau``."""
    soft = np.asarray(soft.data if hasattr(soft, "data") else soft, dtype=float)
    H, W = soft.shape
    hard = hungarian_solve(1.0 - soft)
    keep = [(i, j) for i, j in hard.matches if soft[i, j] >= tau]
    return Assignment.from_matches(keep, H, W)
