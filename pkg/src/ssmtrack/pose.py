"""Box poses on the manifold: quaternions, velocities, corners and the
disentangled corner loss.

A pose is a 10-vector ``[q(4) w,x,y,z | p(3) | s(3)]``; a velocity uses the
same layout with ``q`` holding the per-frame relative rotation. Box extents
``s`` are along the box's local x, y, z axes. Yaw is a rotation about z.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DegenerateQuaternionWarning
from .tensor import Tensor, as_tensor

IDENTITY_Q = np.array([1.0, 0.0, 0.0, 0.0])
SIZE_FLOOR = 0.01
CORNER_SIGNS = np.array(
    [[sx, sy, sz] for sx in (-1.0, 1.0) for sy in (-1.0, 1.0) for sz in (-1.0, 1.0)]
)


@dataclass
class Pose:
    q: np.ndarray
    p: np.ndarray
    s: np.ndarray

    def vec(self) -> np.ndarray:
        return np.concatenate([self.q, self.p, self.s])

    @classmethod
    def from_vec(cls, v) -> "Pose":
        v = np.asarray(v, dtype=float)
        return cls(v[:4].copy(), v[4:7].copy(), v[7:10].copy())

    @property
    def yaw(self) -> float:
        return yaw_of(self.q)


# ------------------------------------------------------------- numpy helpers


def hemisphere_np(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    sgn = np.where(q[..., :1] < 0, -1.0, 1.0)
    return q * sgn


def quat_from_yaw(yaw) -> np.ndarray:
    yaw = np.asarray(yaw, dtype=float)
    z = np.zeros_like(yaw)
    return hemisphere_np(np.stack([np.cos(yaw / 2), z, z, np.sin(yaw / 2)], axis=-1))


def yaw_of(q) -> float | np.ndarray:
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.arctan2(2 * (w * z + x * y), 1 - 2 * (y * y + z * z))


def quat_mul_np(a, b) -> np.ndarray:
    a, b = np.asarray(a, float), np.asarray(b, float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def make_pose(yaw: float, p, s) -> np.ndarray:
    return np.concatenate([quat_from_yaw(yaw), np.asarray(p, float), np.asarray(s, float)])


def random_unit_quat(rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    q = rng.normal(size=(4,) if n is None else (n, 4))
    return hemisphere_np(q / np.linalg.norm(q, axis=-1, keepdims=True))


# ------------------------------------------------------------- tensor ops


def _comp(q: Tensor):
    return q[..., 0], q[..., 1], q[..., 2], q[..., 3]


def quat_mul(a: Tensor, b: Tensor) -> Tensor:
    aw, ax, ay, az = _comp(a)
    bw, bx, by, bz = _comp(b)
    return T.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conj(q: Tensor) -> Tensor:
    return q * Tensor([1.0, -1.0, -1.0, -1.0])


def hemisphere(q: Tensor) -> Tensor:
    # the sign is treated as a constant (piecewise-constant, zero derivative)
    sgn = np.where(q.data[..., :1] < 0, -1.0, 1.0)
    return q * Tensor(np.broadcast_to(sgn, q.shape))


def quat_normalize(q: Tensor, warn: bool = True) -> Tensor:
    norm = np.linalg.norm(q.data, axis=-1, keepdims=True)
    bad = norm <= 1e-6
    if np.any(bad):
        if warn:
            warnings.warn("degenerate quaternion treated as identity", DegenerateQuaternionWarning,
                          stacklevel=2)
        mask = np.broadcast_to(bad, q.shape)
        q = T.where(mask, Tensor(np.broadcast_to(IDENTITY_Q, q.shape)), q)
    n = T.sqrt((q * q).sum(axis=-1, keepdims=True))
    return q / T.expand(n, q.shape)


def rotation_matrix(q: Tensor) -> Tensor:
    """``[..., 3, 3]`` rotation for unit quaternions ``[..., 4]``."""
    w, x, y, z = _comp(q)
    rows = [
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ]
    return T.stack([T.stack(r, axis=-1) for r in rows], axis=-2)


def split(v: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    return v[..., 0:4], v[..., 4:7], v[..., 7:10]


def state_difference(prev, nxt) -> Tensor:
    """Velocity taking ``prev`` to ``nxt``: body-frame rotation increment plus deltas."""
    prev, nxt = as_tensor(prev), as_tensor(nxt)
    qa, pa, sa = split(prev)
    qb, pb, sb = split(nxt)
    dq = hemisphere(quat_mul(quat_conj(qa), qb))
    return T.concat([dq, pb - pa, sb - sa], axis=-1)


def state_boxplus(state, v) -> Tensor:
    """Apply velocity ``v`` to ``state`` (rotation composed on the right)."""
    state, v = as_tensor(state), as_tensor(v)
    q, p, s = split(state)
    dq, dp, ds = split(v)
    q_new = hemisphere(quat_mul(q, quat_normalize(dq)))
    return T.concat([q_new, p + dp, T.clamp_min(s + ds, SIZE_FLOOR)], axis=-1)


def box_corners(pose) -> Tensor:
    """Eight corners ``[..., 8, 3]`` in sign order ---, --+, -+-, ..., +++."""
    pose = as_tensor(pose)
    q, p, s = split(pose)
    lead = pose.shape[:-1]
    half = T.expand(T.reshape(s, lead + (1, 3)), lead + (8, 3)) * (0.5 * CORNER_SIGNS)
    R = rotation_matrix(q)
    rotated = T.matmul(half, T.transpose(R, tuple(range(len(lead))) + (len(lead) + 1, len(lead))))
    return rotated + T.expand(T.reshape(p, lead + (1, 3)), lead + (8, 3))


def corner_l1(a, b) -> Tensor:
    """Mean over the batch of (1/8) * sum of per-corner L1 distances."""
    diff = T.tabs(box_corners(a) - box_corners(b))
    per_box = diff.sum(axis=(-1, -2)) * 0.125
    return per_box.mean()


def disentangled_l1_loss(gt, pred) -> Tensor:
    """Corner L1 summed over three passes, each replacing only one of q, p, s by the prediction."""
    gt, pred = as_tensor(gt), as_tensor(pred)
    qg, pg, sg = split(gt)
    qp, pp, sp = split(pred)
    passes = (
        T.concat([qp, pg, sg], axis=-1),
        T.concat([qg, pp, sg], axis=-1),
        T.concat([qg, pg, sp], axis=-1),
    )
    total = None
    for mixed in passes:
        term = corner_l1(gt, mixed)
        total = term if total is None else total + term
    return total
