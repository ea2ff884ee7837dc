"""Finite-difference checks for every differentiable op and the three
end-to-end training compositions. Used by the ``gradcheck`` command."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .fcoe import DenseEmbeddingMap, fcoe_loss, synthetic_maps
from .hssm import HssmConfig, bi_merge, bi_scan, focal_assoc_loss, hssm_forward, init_hssm
from .pose import (box_corners, disentangled_l1_loss, make_pose, quat_mul, quat_mul_np, quat_normalize,
                   random_unit_quat, rotation_matrix, state_boxplus, state_difference)
from .ssm import discretize, discretized_scan, init_block, mamba_block_cross, mamba_block_self, selective_scan
from .tensor import Tensor, grad_check
from .velossm import (VeloSSMConfig, init_predictor, init_updater, pad_history, velossm_predict,
                      velossm_update)

TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_error: float
    seconds: float

    @property
    def ok(self) -> bool:
        return self.max_error <= TOL


def _w(rng, shape) -> Tensor:
    """Random probe weights so a tensor-valued op reduces to a generic scalar."""
    return Tensor(rng.normal(size=shape))


def _probe(y: Tensor, rng_seed: int) -> Tensor:
    rng = np.random.default_rng(rng_seed)
    return (y * _w(rng, y.shape)).sum()


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _poses(rng, n):
    q = random_unit_quat(rng, n)
    q[:, 0] = np.maximum(q[:, 0], 0.2)
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return np.concatenate([q, rng.normal(0, 2, (n, 3)), rng.uniform(0.5, 3, (n, 3))], axis=1)


def _unary(op, positive=False, margin=False):
    def case(seed):
        rng = np.random.default_rng(seed)
        shape = (int(rng.integers(1, 4)), int(rng.integers(1, 5)))
        if positive:
            x = rng.uniform(0.2, 2.0, shape)
        elif margin:
            x = _away_from_zero(rng, shape)
        else:
            x = rng.normal(size=shape)
        return grad_check(lambda t: _probe(op(t), seed), Tensor(x))
    return case


def _binary(op, positive_b=False):
    def case(seed):
        rng = np.random.default_rng(seed)
        shape = (int(rng.integers(1, 4)), int(rng.integers(1, 5)))
        a = Tensor(rng.normal(size=shape))
        b_data = rng.uniform(0.5, 2.0, shape[1:]) if positive_b else rng.normal(size=shape[1:])
        b = Tensor(b_data)  # suffix shape exercises leading-dim broadcasting
        e1 = grad_check(lambda t: _probe(op(t, b), seed), a)
        e2 = grad_check(lambda t: _probe(op(a, t), seed), b)
        return max(e1, e2)
    return case


def _case_where(seed):
    rng = np.random.default_rng(seed)
    cond = rng.random((3, 4)) < 0.5
    a, b = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 4)))
    return max(grad_check(lambda t: _probe(T.where(cond, t, b), seed), a),
               grad_check(lambda t: _probe(T.where(cond, a, t), seed), b))


def _case_shape_ops(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(2, 3, 4)))
    fns = [
        lambda t: _probe(t.sum(axis=1), seed),
        lambda t: _probe(T.mean(t, axis=(0, 2)), seed),
        lambda t: _probe(T.reshape(t, (6, 4)), seed),
        lambda t: _probe(T.transpose(t, (2, 0, 1)), seed),
        lambda t: _probe(T.expand(T.reshape(t, (2, 3, 4, 1)), (2, 3, 4, 3)), seed),
        lambda t: _probe(t[:, 1:, ::2], seed),
        lambda t: _probe(t[:, [0, 2, 0]], seed),
        lambda t: _probe(T.take(t, np.array([3, 0, 0, 1]), axis=-1), seed),
        lambda t: _probe(T.concat([t, t * 2.0], axis=1), seed),
        lambda t: _probe(T.stack([t, t * t], axis=0), seed),
        lambda t: _probe(T.softmax(t, axis=1), seed),
    ]
    return max(grad_check(f, x) for f in fns)


def _case_matmul(seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(2, 3, 4)))
    b = Tensor(rng.normal(size=(4, 5)))
    bias = Tensor(rng.normal(size=5))
    return max(grad_check(lambda t: _probe(t @ b, seed), a),
               grad_check(lambda t: _probe(a @ t, seed), b),
               grad_check(lambda t: _probe(T.linear(a, b, t), seed), bias))


def _case_norms(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(2, 3, 6)))
    g, bb = Tensor(rng.normal(size=6)), Tensor(rng.normal(size=6))
    return max(grad_check(lambda t: _probe(T.rmsnorm(t, g), seed), x),
               grad_check(lambda t: _probe(T.rmsnorm(x, t), seed), g),
               grad_check(lambda t: _probe(T.layernorm(t, g, bb), seed), x),
               grad_check(lambda t: _probe(T.layernorm(x, t, bb), seed), g),
               grad_check(lambda t: _probe(T.layernorm(x, g, t), seed), bb))


def _case_conv1d(seed):
    rng = np.random.default_rng(seed)
    x, k = Tensor(rng.normal(size=(2, 5, 3))), Tensor(rng.normal(size=(3, 3)))
    return max(grad_check(lambda t: _probe(T.conv1d_depthwise(t, k, causal=seed % 2 == 0), seed), x),
               grad_check(lambda t: _probe(T.conv1d_depthwise(x, t, causal=seed % 2 == 0), seed), k))


def _case_conv2d(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(1, 2, 3, 4)))
    kd, kw = Tensor(rng.normal(size=(3, 2, 3, 3))), Tensor(rng.normal(size=(2, 1, 3, 3)))
    return max(grad_check(lambda t: _probe(T.conv2d(t, kd), seed), x),
               grad_check(lambda t: _probe(T.conv2d(x, t), seed), kd),
               grad_check(lambda t: _probe(T.conv2d(t, kw, depthwise=True), seed), x),
               grad_check(lambda t: _probe(T.conv2d(x, t, depthwise=True), seed), kw))


def _case_scan(seed):
    rng = np.random.default_rng(seed)
    B, L, D, N = 2, 5, 3, 2
    A = Tensor(-rng.uniform(0.5, 2.0, (D, N)))
    Bm, delta = Tensor(rng.normal(size=(B, L, N))), Tensor(rng.uniform(0.1, 1.0, (B, L, D)))
    C, u = Tensor(rng.normal(size=(B, L, N))), Tensor(rng.normal(size=(B, L, D)))
    mode = "zoh" if seed % 2 else "euler"

    def run(A_, B_, d_, C_, u_):
        ab, bb = discretize(A_, B_, d_, mode)
        return _probe(selective_scan(ab, bb, C_, u_), seed)

    return max(grad_check(lambda t: run(t, Bm, delta, C, u), A),
               grad_check(lambda t: run(A, t, delta, C, u), Bm),
               grad_check(lambda t: run(A, Bm, t, C, u), delta),
               grad_check(lambda t: run(A, Bm, delta, t, u), C),
               grad_check(lambda t: run(A, Bm, delta, C, t), u))


def _case_fused_scan(seed):
    rng = np.random.default_rng(seed)
    K, L, D, N = 3, 5, 3, 2
    a_shape = (K, 1, D, N) if seed % 2 else (D, N)
    A = Tensor(-rng.uniform(0.5, 2.0, a_shape))
    Bm, C = Tensor(rng.normal(size=(K, L, N))), Tensor(rng.normal(size=(K, L, N)))
    delta, u = Tensor(rng.uniform(0.1, 1.0, (K, L, D))), Tensor(rng.normal(size=(K, L, D)))
    args = [A, Bm, C, delta, u]

    def with_arg(k):
        return lambda t: _probe(discretized_scan(*args[:k], t, *args[k + 1:]), seed)

    return max(grad_check(with_arg(k), args[k]) for k in range(5))


def _case_mamba(seed):
    rng = np.random.default_rng(seed)
    d = 4
    ps, pc = init_block(rng, d, N=4), init_block(rng, d, N=4, cross=True)
    seq, cond = Tensor(rng.normal(size=(2, 4, d))), Tensor(rng.normal(size=(2, d)))
    mode = "zoh" if seed % 2 else "euler"
    errs = [grad_check(lambda t: _probe(mamba_block_self(t, ps, mode), seed), seq),
            grad_check(lambda t: _probe(mamba_block_cross(t, cond, pc, mode), seed), seq),
            grad_check(lambda t: _probe(mamba_block_cross(seq, t, pc, mode), seed), cond)]
    for p, fn in ((ps, lambda: mamba_block_self(seq, ps, mode)),
                  (pc, lambda: mamba_block_cross(seq, cond, pc, mode))):
        for leaf in (p.core.a_log, p.core.b_delta, p.core.w_delta, p.conv):
            errs.append(grad_check(lambda _t: _probe(fn(), seed), leaf))
    return max(errs)


def _case_quat(seed):
    rng = np.random.default_rng(seed)
    a, b = _poses(rng, 3), _poses(rng, 3)
    qa, qb = Tensor(a[:, :4]), Tensor(b[:, :4])
    return max(
        grad_check(lambda t: _probe(quat_mul(t, qb), seed), qa),
        grad_check(lambda t: _probe(quat_normalize(t), seed), qa),
        grad_check(lambda t: _probe(rotation_matrix(t), seed), qa),
        grad_check(lambda t: _probe(state_difference(t, Tensor(b)), seed), Tensor(a)),
        grad_check(lambda t: _probe(state_boxplus(Tensor(a), t), seed), Tensor(b)),
        grad_check(lambda t: _probe(box_corners(t), seed), Tensor(a)),
    )


def _case_bi_scan(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(2, 3, 4)))
    y = Tensor(rng.normal(size=(4, 2, 12)))
    return max(grad_check(lambda t: _probe(bi_scan(t), seed), x),
               grad_check(lambda t: _probe(bi_merge(t, 3, 4), seed), y))


def _case_focal(seed):
    rng = np.random.default_rng(seed)
    p = Tensor(rng.uniform(0.05, 0.95, (3, 4)))
    gt = (rng.random((3, 4)) < 0.3).astype(float)
    gt[0, 0] = 1.0
    return grad_check(lambda t: focal_assoc_loss(t, gt, gamma=float(seed % 3)), p)


def _case_velossm_update(seed):
    rng = np.random.default_rng(seed)
    cfg = VeloSSMConfig(d=8, state=4, layers=2, history=4)
    upd = init_updater(cfg, seed)
    prev = _poses(rng, 2)
    nxt = np.stack([_tilt(rng, p) for p in prev])
    nxt[:, 4:7] += rng.normal(0, 0.5, (2, 3))
    pv = state_difference(prev, np.stack([_tilt(rng, p) for p in nxt])).data
    ov = state_difference(prev, np.stack([_tilt(rng, p) for p in nxt])).data
    flow = Tensor(rng.normal(size=(2, 8)))
    gt = Tensor(nxt)
    return max(
        grad_check(lambda t: disentangled_l1_loss(gt, velossm_update(t, ov, prev, [0.7, 0.9], flow, upd)),
                   Tensor(pv)),
        grad_check(lambda t: disentangled_l1_loss(gt, velossm_update(pv, ov, prev, [0.7, 0.9], t, upd)), flow),
    )


# ------------------------------------------------------------ end to end


def _tilt(rng, pose, sigma=0.05):
    """Small random roll/pitch and size jitter so no corner coordinate ties exactly
    (|x| has a kink at 0 that central differences cannot see)."""
    out = pose.copy()
    dq = np.concatenate([[1.0], rng.normal(0, sigma, 3)])
    out[:4] = quat_mul_np(pose[:4], dq / np.linalg.norm(dq))
    out[:4] *= np.sign(out[0])
    out[4:] += rng.normal(0, sigma, 6)
    return out


def _track_history(rng, B, n):
    out = []
    for _ in range(B):
        yaw, speed, rate = rng.uniform(-3, 3), rng.uniform(0.3, 1.2), rng.uniform(-0.05, 0.05)
        p = rng.normal(0, 5, 3)
        size = rng.uniform(1, 4, 3)
        poses = []
        for _ in range(n + 2):
            poses.append(_tilt(rng, make_pose(yaw, p.copy(), size)))
            p += speed * np.array([np.cos(yaw), np.sin(yaw), 0.0]) + rng.normal(0, 0.05, 3)
            yaw += rate
        out.append(np.array(poses))
    out = np.array(out)
    return pad_history(out[:, :-1], n), out[:, -1]


def e2e_velossm(seed):
    rng = np.random.default_rng(seed)
    cfg = VeloSSMConfig(d=8, state=4, layers=4, history=4)
    pred = init_predictor(cfg, seed)
    hist, gt = _track_history(rng, 1, cfg.history)
    gt = Tensor(gt)
    loss = lambda: disentangled_l1_loss(gt, velossm_predict(Tensor(hist), pred)[0])
    return max(grad_check(lambda t: disentangled_l1_loss(gt, velossm_predict(t, pred)[0]), Tensor(hist)),
               grad_check(lambda _t: loss(), pred.layers[seed % 4].core.b_delta),
               grad_check(lambda _t: loss(), pred.head.b2))


def e2e_hssm(seed):
    rng = np.random.default_rng(seed)
    params = init_hssm(HssmConfig(d_base=8, stages=2, levels=1, state=4), seed)
    H, W = int(rng.integers(2, 4)), int(rng.integers(2, 4))
    D = Tensor(rng.uniform(0, 1, (4, H, W)))
    gt = np.zeros((H, W))
    gt[np.arange(min(H, W)), rng.permutation(W)[:min(H, W)]] = 1.0
    loss = lambda: focal_assoc_loss(hssm_forward(D, params), gt)
    return max(grad_check(lambda t: focal_assoc_loss(hssm_forward(t, params), gt), D),
               grad_check(lambda _t: loss(), params.stages[0].levels[0].paths[seed % 4].w_b),
               grad_check(lambda _t: loss(), params.stages[-1].levels[0].paths[0].a_log))


def e2e_fcoe(seed):
    key, ref = synthetic_maps(seed, grid=(4, 4), n_objects=2, e=6)
    emb = Tensor(key.embeddings.copy())
    return grad_check(lambda t: fcoe_loss(DenseEmbeddingMap(t, key.centerness, key.labels), ref,
                                          negatives=4, seed=seed), emb)


CASES: dict[str, Callable[[int], float]] = {
    "add": _binary(T.add), "sub": _binary(T.sub), "mul": _binary(T.mul),
    "div": _binary(T.div, positive_b=True),
    "neg": _unary(T.neg), "power": _unary(lambda t: T.power(t, 2.5), positive=True),
    "exp": _unary(T.exp), "log": _unary(T.log, positive=True), "sqrt": _unary(T.sqrt, positive=True),
    "abs": _unary(T.tabs, margin=True), "sigmoid": _unary(T.sigmoid), "silu": _unary(T.silu),
    "softplus": _unary(T.softplus), "tanh": _unary(T.tanh),
    "clamp_min": _unary(lambda t: T.clamp_min(t, 0.0), margin=True),
    "clamp": _unary(lambda t: T.clamp(t, -0.05, 0.05), margin=True),
    "where": _case_where, "shape_ops": _case_shape_ops, "matmul": _case_matmul,
    "norms": _case_norms, "conv1d": _case_conv1d, "conv2d": _case_conv2d,
    "discretize_scan": _case_scan, "discretized_scan": _case_fused_scan,
    "mamba_blocks": _case_mamba, "pose_ops": _case_quat,
    "bi_scan_merge": _case_bi_scan, "focal_loss": _case_focal, "velossm_update": _case_velossm_update,
    "e2e_velossm_predict_corner_loss": e2e_velossm,
    "e2e_hssm_focal_loss": e2e_hssm,
    "e2e_fcoe_loss": e2e_fcoe,
}


def run_suite(seeds: int = 20, names=None, log=None) -> list[CheckResult]:
    out = []
    for name, case in CASES.items():
        if names and name not in names:
            continue
        t0 = time.perf_counter()
        err = max(case(s) for s in range(seeds))
        out.append(CheckResult(name, err, time.perf_counter() - t0))
        if log:
            log(out[-1])
    return out
