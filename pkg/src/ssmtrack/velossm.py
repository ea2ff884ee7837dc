"""Selective-SSM motion model: history encoder (prediction) and a
flow-conditioned decoder that blends predicted and observed velocities."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import EmptyHistory, ShapeMismatch
from .pose import hemisphere, quat_normalize, split, state_boxplus, state_difference
from .ssm import MambaBlockParams, init_block, mamba_block_cross, mamba_block_self
from .tensor import Tensor, as_tensor


@dataclass
class VeloSSMConfig:
    d: int = 320
    expand: int = 2
    state: int = 16
    layers: int = 4
    history: int = 10
    conv_width: int = 3
    mode: str = "euler"


@dataclass
class FFN:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return T.silu(x @ self.w1 + self.b1) @ self.w2 + self.b2


def init_ffn(rng, d_in: int, d_out: int, scale_out: float = 1.0) -> FFN:
    hid = 2 * d_in
    return FFN(
        Tensor(rng.normal(0, 1 / np.sqrt(d_in), (d_in, hid)), True),
        Tensor(np.zeros(hid), True),
        Tensor(rng.normal(0, scale_out / np.sqrt(hid), (hid, d_out)), True),
        Tensor(np.zeros(d_out), True),
    )


@dataclass
class PredictorParams:
    w_embed: Tensor  # [10, d]
    b_embed: Tensor
    layers: list[MambaBlockParams]
    head: FFN
    config: VeloSSMConfig = field(default_factory=VeloSSMConfig, compare=False)


@dataclass
class UpdaterParams:
    w_gate: Tensor  # [1, d]
    b_gate: Tensor
    w_embed: Tensor  # [20, d]
    b_embed: Tensor
    layers: list[MambaBlockParams]
    head: FFN
    config: VeloSSMConfig = field(default_factory=VeloSSMConfig, compare=False)


def init_predictor(cfg: VeloSSMConfig, seed: int = 0) -> PredictorParams:
    rng = np.random.default_rng(seed)
    d = cfg.d
    return PredictorParams(
        w_embed=Tensor(rng.normal(0, 1 / np.sqrt(10), (10, d)), True),
        b_embed=Tensor(np.zeros(d), True),
        layers=[init_block(rng, d, cfg.expand, cfg.state, cfg.conv_width) for _ in range(cfg.layers)],
        head=init_ffn(rng, d, 10, scale_out=0.1),
        config=cfg,
    )


def init_updater(cfg: VeloSSMConfig, seed: int = 1) -> UpdaterParams:
    rng = np.random.default_rng(seed)
    d = cfg.d
    return UpdaterParams(
        w_gate=Tensor(rng.normal(0, 1.0, (1, d)), True),
        b_gate=Tensor(np.zeros(d), True),
        w_embed=Tensor(rng.normal(0, 1 / np.sqrt(20), (20, d)), True),
        b_embed=Tensor(np.zeros(d), True),
        layers=[init_block(rng, d, cfg.expand, cfg.state, cfg.conv_width, cross=True)
                for _ in range(cfg.layers)],
        head=init_ffn(rng, d, 10, scale_out=0.1),
        config=cfg,
    )


def pad_history(history, n: int) -> np.ndarray:
    """Return exactly ``n + 1`` poses per track, left-padding with the oldest pose."""
    h = np.asarray(history, dtype=float)
    if h.ndim == 2:
        h = h[None]
    if h.shape[1] == 0:
        raise EmptyHistory("history must contain at least one pose")
    if h.shape[-1] != 10:
        raise ShapeMismatch(f"poses must be 10-vectors, got {h.shape}")
    m = h.shape[1]
    if m > n + 1:
        return h[:, m - n - 1:]
    if m < n + 1:
        pad = np.repeat(h[:, :1], n + 1 - m, axis=1)
        h = np.concatenate([pad, h], axis=1)
    return h


def velossm_predict(history, params: PredictorParams, return_weights: bool = False):
    """Predict the next pose of each track from its pose history.

    ``history`` is ``[B, m, 10]`` (or ``[m, 10]``), oldest first. Returns
    ``(predicted [B, 10], flow [B, d])`` and optionally the per-step weights.
    """
    cfg = params.config
    if isinstance(history, Tensor):
        hist = history
        if hist.shape[1] != cfg.history + 1:
            raise ShapeMismatch("tensor histories must already be padded to n + 1 poses")
    else:
        hist = Tensor(pad_history(history, cfg.history))
    vel = state_difference(hist[:, :-1], hist[:, 1:])  # [B, n, 10]
    h = vel @ params.w_embed + params.b_embed
    for layer in params.layers:
        h = mamba_block_self(h, layer, cfg.mode)
    w = T.softmax(params.head(h), axis=1)
    agg = (w * vel).sum(axis=1)
    pred = state_boxplus(hist[:, -1], agg)
    flow = h[:, -1, :]
    if return_weights:
        return pred, flow, w
    return pred, flow


def velossm_update(pred_vel, obs_vel, prev, confidence, flow, params: UpdaterParams,
                   return_weights: bool = False):
    """Blend predicted and observed velocities and apply the result to ``prev``."""
    cfg = params.config
    pred_vel, obs_vel, prev, flow = (as_tensor(a) for a in (pred_vel, obs_vel, prev, flow))
    if pred_vel.ndim == 1:
        pred_vel, obs_vel, prev = (T.reshape(a, (1, 10)) for a in (pred_vel, obs_vel, prev))
        flow = T.reshape(flow, (1, flow.shape[-1]))
    Bn = pred_vel.shape[0]
    conf = np.clip(np.asarray(confidence, dtype=float).reshape(Bn, 1), 0.0, 1.0)
    gate = T.sigmoid(Tensor(conf) @ params.w_gate + params.b_gate)
    emb = gate * (T.concat([pred_vel, obs_vel], axis=-1) @ params.w_embed + params.b_embed)
    h = T.reshape(emb, (Bn, 1, cfg.d))
    for layer in params.layers:
        h = mamba_block_cross(h, flow, layer, cfg.mode)
    w = T.sigmoid(params.head(T.reshape(h, (Bn, cfg.d))))
    blended = w * obs_vel + (1.0 - w) * pred_vel
    q_b, p_b, s_b = split(blended)
    q_b = quat_normalize(hemisphere(q_b))
    out = state_boxplus(prev, T.concat([q_b, p_b, s_b], axis=-1))
    if return_weights:
        return out, w
    return out
