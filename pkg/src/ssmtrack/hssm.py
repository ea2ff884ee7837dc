"""Learned soft assignment over a track x detection cue tensor.

The cue tensor is ``[4, H, W]`` (rows are tracks, columns detections). Each
level flattens the grid along four directed paths, runs an independent
selective scan per path, realigns and sums, so every cell can see the whole
matrix. Internally activations are kept channel-last ``[B, H, W, c]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import tensor as T
from .errors import EmptyMatrix, EmptyProblem, LengthMismatch, ShapeMismatch
from .ssm import SsmCoreParams, discretized_scan, init_core
from .tensor import Tensor, as_tensor
from .velossm import FFN, init_ffn

N_CUES = 4


@dataclass
class HssmConfig:
    d_base: int = 16
    stages: int = 2
    levels: int = 2
    state: int = 8
    pos_encoding: bool = True
    mode: str = "euler"


@dataclass
class Norm:
    gain: Tensor
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.gain, self.bias)


def _norm(c: int) -> Norm:
    return Norm(Tensor(np.ones(c), True), Tensor(np.zeros(c), True))


@dataclass
class LevelParams:
    ln_in: Norm
    w_in: Tensor  # [c, c]
    dwconv: Tensor  # [c, 1, 3, 3]
    paths: list[SsmCoreParams]  # one per scan direction
    ln_out: Norm
    w_out: Tensor  # [c, c]
    ffn: FFN
    ln_ffn: Norm


@dataclass
class StageParams:
    levels: list[LevelParams]
    w_next: Tensor  # [c, 2c] (1x1 conv)
    b_next: Tensor
    ln_next: Norm


@dataclass
class HssmParams:
    w_embed: Tensor  # [4, d_base]
    b_embed: Tensor
    ln_embed: Norm
    stages: list[StageParams]
    ln_head: Norm
    w_head: Tensor  # [c_final, 1]
    b_head: Tensor
    config: HssmConfig = field(default_factory=HssmConfig, compare=False)


def init_level(rng: np.random.Generator, c: int, N: int) -> LevelParams:
    return LevelParams(
        ln_in=_norm(c),
        w_in=Tensor(rng.normal(0, 1 / np.sqrt(c), (c, c)), True),
        dwconv=Tensor(rng.normal(0, 1 / 3, (c, 1, 3, 3)), True),
        paths=[init_core(rng, c, c, N) for _ in range(4)],
        ln_out=_norm(c),
        w_out=Tensor(rng.normal(0, 1 / np.sqrt(c), (c, c)), True),
        ffn=init_ffn(rng, c, c, scale_out=0.5),
        ln_ffn=_norm(c),
    )


def init_hssm(cfg: HssmConfig, seed: int = 0) -> HssmParams:
    rng = np.random.default_rng(seed)
    c = cfg.d_base
    stages = []
    for _ in range(cfg.stages):
        levels = [init_level(rng, c, cfg.state) for _ in range(cfg.levels)]
        stages.append(StageParams(
            levels=levels,
            w_next=Tensor(rng.normal(0, 1 / np.sqrt(c), (c, 2 * c)), True),
            b_next=Tensor(np.zeros(2 * c), True),
            ln_next=_norm(2 * c),
        ))
        c *= 2
    return HssmParams(
        w_embed=Tensor(rng.normal(0, 1.0, (N_CUES, cfg.d_base)), True),
        b_embed=Tensor(np.zeros(cfg.d_base), True),
        ln_embed=_norm(cfg.d_base),
        stages=stages,
        ln_head=_norm(c),
        w_head=Tensor(rng.normal(0, 1 / np.sqrt(c), (c, 1)), True),
        b_head=Tensor(np.zeros(1), True),
        config=cfg,
    )


# ------------------------------------------------------------ scan orders


@lru_cache(maxsize=256)
def scan_orders(H: int, W: int) -> tuple[np.ndarray, ...]:
    """Row-major indices visited by each of the four paths."""
    n = H * W
    row = np.arange(n)
    col = (np.arange(n) % H) * W + np.arange(n) // H
    return row, row[::-1].copy(), col, col[::-1].copy()


@lru_cache(maxsize=256)
def _gather_index(H: int, W: int) -> tuple[np.ndarray, np.ndarray]:
    orders = scan_orders(H, W)
    n = H * W
    fwd = np.concatenate(orders)
    inv = np.concatenate([k * n + np.argsort(o) for k, o in enumerate(orders)])
    return fwd, inv


def bi_scan(x) -> Tensor:
    """``[..., C, H, W]`` -> ``[..., 4, C, H*W]`` along the four scan paths."""
    x = as_tensor(x)
    *lead, C, H, W = x.shape
    flat = T.reshape(x, (*lead, C, H * W))
    fwd, _ = _gather_index(H, W)
    seqs = T.reshape(T.take(flat, fwd, axis=-1), (*lead, C, 4, H * W))
    nl = len(lead)
    return T.transpose(seqs, tuple(range(nl)) + (nl + 1, nl, nl + 2))


def bi_merge(ys, H: int, W: int) -> Tensor:
    """Inverse alignment of :func:`bi_scan` followed by a sum over paths."""
    ys = as_tensor(ys)
    *lead, P, C, n = ys.shape
    if P != 4 or n != H * W:
        raise LengthMismatch(f"expected [..., 4, C, {H * W}], got {ys.shape}")
    nl = len(lead)
    flat = T.reshape(T.transpose(ys, tuple(range(nl)) + (nl + 1, nl, nl + 2)), (*lead, C, 4 * n))
    _, inv = _gather_index(H, W)
    aligned = T.reshape(T.take(flat, inv, axis=-1), (*lead, C, 4, n))
    return T.reshape(aligned.sum(axis=-2), (*lead, C, H, W))


def positional_encoding(H: int, W: int, c: int) -> np.ndarray:
    """Fixed sinusoids ``[H, W, c]``: first half encodes the row, second half the column."""
    half = c // 2
    pe = np.zeros((H, W, c))
    for offset, coords in ((0, np.arange(H)[:, None]), (half, np.arange(W)[None, :])):
        for i in range(half // 2):
            freq = 1.0 / (100.0 ** (2 * i / max(half, 1)))
            pe[:, :, offset + 2 * i] = np.sin(coords * freq)
            pe[:, :, offset + 2 * i + 1] = np.cos(coords * freq)
    return pe


# ------------------------------------------------------------ network


def _paths_ssm(level: LevelParams, u: Tensor, mode: str) -> Tensor:
    """Selective scan per path. ``u`` is ``[B, 4, L, c]``; returns the same shape."""
    Bn, P, L, c = u.shape
    a_log = T.stack([p.a_log for p in level.paths])  # [4, c, N]
    N = a_log.shape[-1]
    w_b = T.stack([p.w_b for p in level.paths])
    w_c = T.stack([p.w_c for p in level.paths])
    w_d = T.stack([p.w_delta for p in level.paths])  # [4, c, 1]
    b_d = T.reshape(T.stack([p.b_delta for p in level.paths]), (P, 1, c))
    Bm = u @ w_b  # [B, 4, L, N]
    Cm = u @ w_c
    dl = u @ w_d
    delta = T.softplus(T.expand(dl, (Bn, P, L, c)) + T.expand(b_d, (Bn, P, L, c)))
    A = T.reshape(T.expand(T.reshape(-T.exp(a_log), (1, P, 1, c, N)), (Bn, P, 1, c, N)), (Bn * P, 1, c, N))
    y = discretized_scan(
        A,
        T.reshape(Bm, (Bn * P, L, N)),
        T.reshape(Cm, (Bn * P, L, N)),
        T.reshape(delta, (Bn * P, L, c)),
        T.reshape(u, (Bn * P, L, c)),
        mode,
    )
    return T.reshape(y, (Bn, P, L, c))


def ss2d_level(x: Tensor, level: LevelParams, mode: str = "euler") -> Tensor:
    """One four-path level on channel-last ``x[B, H, W, c]``."""
    Bn, H, W, c = x.shape
    n = H * W
    h = level.ln_in(x) @ level.w_in
    h = T.transpose(h, (0, 3, 1, 2))
    h = T.silu(T.conv2d(h, level.dwconv, depthwise=True))
    h = T.reshape(T.transpose(h, (0, 2, 3, 1)), (Bn, n, c))
    fwd, inv = _gather_index(H, W)
    u = T.reshape(T.take(h, fwd, axis=1), (Bn, 4, n, c))
    y = _paths_ssm(level, u, mode)
    merged = T.take(T.reshape(y, (Bn, 4 * n, c)), inv, axis=1)
    merged = T.reshape(merged, (Bn, 4, n, c)).sum(axis=1)
    merged = T.reshape(merged, (Bn, H, W, c))
    x = level.ln_out(merged) @ level.w_out + x
    return level.ln_ffn(x + level.ffn(x))


def hssm_logits(d, params: HssmParams) -> Tensor:
    """Pre-sigmoid association scores ``[B, H, W]`` for cue tensors ``[B, 4, H, W]``."""
    d = as_tensor(d)
    if d.ndim == 3:
        d = T.reshape(d, (1,) + d.shape)
    if d.ndim != 4 or d.shape[1] != N_CUES:
        raise ShapeMismatch(f"expected [B, 4, H, W] cue tensor, got {d.shape}")
    cfg = params.config
    Bn, _, H, W = d.shape
    x = T.transpose(d, (0, 2, 3, 1))
    x = params.ln_embed(x @ params.w_embed + params.b_embed)
    if cfg.pos_encoding:
        x = x + Tensor(positional_encoding(H, W, cfg.d_base))
    for stage in params.stages:
        for level in stage.levels:
            x = ss2d_level(x, level, cfg.mode)
        x = stage.ln_next(x @ stage.w_next + stage.b_next)
    logits = params.ln_head(x) @ params.w_head + params.b_head
    return T.reshape(logits, (Bn, H, W))


def hssm_forward(d, params: HssmParams) -> Tensor:
    """Soft association matrix in (0, 1); ``[H, W]`` for a single problem."""
    shape = np.shape(d.data if isinstance(d, Tensor) else d)
    if len(shape) >= 2 and (shape[-1] == 0 or shape[-2] == 0):
        raise EmptyProblem("no tracks or no detections")
    out = T.sigmoid(hssm_logits(d, params))
    if len(shape) == 3:
        return T.reshape(out, out.shape[1:])
    return out


# ------------------------------------------------------------ loss


def class_weights(gt) -> tuple[float, float]:
    gt = np.asarray(gt)
    if gt.size == 0:
        raise EmptyMatrix("ground-truth matrix is empty")
    n1 = float(np.count_nonzero(gt == 1))
    n0 = float(gt.size - n1)
    return n0 / (n1 + n0), n1 / (n1 + n0)


def focal_assoc_loss(soft: Tensor, gt, gamma: float = 2.0, eps: float = 1e-7,
                     weights: tuple[float, float] | None = None) -> Tensor:
    """Class-weighted focal loss summed over entries.

    Batched input ``[B, H, W]`` gives the mean over problems, each with its own weights.
    """
    gt = np.asarray(gt, dtype=float)
    if soft.shape != gt.shape:
        raise ShapeMismatch(f"soft {soft.shape} vs gt {gt.shape}")
    if gt.ndim == 3:
        terms = [focal_assoc_loss(soft[b], gt[b], gamma, eps, weights) for b in range(gt.shape[0])]
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        return total * (1.0 / len(terms))
    w1, w0 = weights if weights is not None else class_weights(gt)
    wmat = np.where(gt == 1, w1, w0)
    p = T.clamp(soft, eps, 1.0 - eps)
    pos = gt * (1.0 - p) ** gamma * T.log(p)
    negt = (1.0 - gt) * p ** gamma * T.log(1.0 - p)
    return -(Tensor(wmat) * (pos + negt)).sum()
