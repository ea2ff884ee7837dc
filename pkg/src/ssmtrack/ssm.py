"""Selective state-space primitives: discretization, the sequential scan,
and self-/cross-conditioned Mamba blocks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import NonPositiveStep, ShapeMismatch
from .tensor import Tensor


@dataclass
class SsmCoreParams:
    a_log: Tensor  # [D, N]; A = -exp(a_log)
    w_b: Tensor  # [src, N]
    w_c: Tensor  # [src, N]
    w_delta: Tensor  # [src, 1], broadcast over D
    b_delta: Tensor  # [D]

    @property
    def A(self) -> Tensor:
        return -T.exp(self.a_log)


@dataclass
class MambaBlockParams:
    norm_gain: Tensor  # [d]
    w_x: Tensor  # [d, D]
    conv: Tensor  # [D, k]
    w_z: Tensor  # [d, D]
    w_out: Tensor  # [D, d]
    core: SsmCoreParams


def init_core(rng: np.random.Generator, src: int, D: int, N: int) -> SsmCoreParams:
    a_log = np.log(rng.uniform(0.5, 8.0, size=(D, N)))
    # softplus(b) spans [1e-3, 1e-1] log-uniformly
    dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=D))
    b_delta = dt + np.log(-np.expm1(-dt))
    s = 1.0 / np.sqrt(src)
    return SsmCoreParams(
        a_log=Tensor(a_log, True),
        w_b=Tensor(rng.normal(0, s, (src, N)), True),
        w_c=Tensor(rng.normal(0, s, (src, N)), True),
        w_delta=Tensor(rng.normal(0, s, (src, 1)), True),
        b_delta=Tensor(b_delta, True),
    )


def init_block(rng: np.random.Generator, d: int, expand: int = 2, N: int = 16, k: int = 3,
               cross: bool = False) -> MambaBlockParams:
    D = expand * d
    return MambaBlockParams(
        norm_gain=Tensor(np.ones(d), True),
        w_x=Tensor(rng.normal(0, 1 / np.sqrt(d), (d, D)), True),
        conv=Tensor(rng.normal(0, 1 / np.sqrt(k), (D, k)), True),
        w_z=Tensor(rng.normal(0, 1 / np.sqrt(d), (d, D)), True),
        w_out=Tensor(rng.normal(0, 1 / np.sqrt(D), (D, d)), True),
        core=init_core(rng, d if cross else D, D, N),
    )


def discretize(A: Tensor, B: Tensor, delta: Tensor, mode: str = "euler") -> tuple[Tensor, Tensor]:
    """Turn (A, B, delta) into per-step (A_bar, B_bar) of shape ``[..., D, N]``.

    ``A`` is ``[D, N]`` (diagonal per channel) or anything broadcastable to
    ``[..., D, N]``; ``B`` is ``[..., N]`` and ``delta`` is ``[..., D]``.
    """
    if np.any(delta.data <= 0):
        raise NonPositiveStep("delta must be strictly positive")
    Dm, N = A.shape[-2:]
    lead = delta.shape[:-1]
    if delta.shape[-1] != Dm or B.shape != lead + (N,):
        raise ShapeMismatch(f"discretize: A {A.shape}, B {B.shape}, delta {delta.shape}")
    full = lead + (Dm, N)
    dlt = T.expand(T.reshape(delta, lead + (Dm, 1)), full)
    if A.shape != full:
        A = T.expand(A, full)
    A_bar = T.exp(dlt * A)
    Bx = T.expand(T.reshape(B, lead + (1, N)), full)
    if mode == "euler":
        B_bar = dlt * Bx
    elif mode == "zoh":
        # (dA)^-1 (exp(dA) - 1) dB, elementwise because A is diagonal
        B_bar = (A_bar - 1.0) / A * Bx
    else:
        raise ValueError(f"unknown discretization mode {mode!r}")
    return A_bar, B_bar


def selective_scan(A_bar: Tensor, B_bar: Tensor, C: Tensor, u: Tensor) -> Tensor:
    """Run ``X_t = A_bar_t * X_{t-1} + B_bar_t * u_t``, ``y_t = sum_N C_t * X_t``.

    Shapes: A_bar, B_bar ``[B, L, D, N]``; C ``[B, L, N]``; u ``[B, L, D]``.
    X_0 = 0. Linear in L; the backward pass is a reverse-time sweep.
    """
    if A_bar.ndim != 4 or A_bar.shape != B_bar.shape:
        raise ShapeMismatch(f"A_bar {A_bar.shape} vs B_bar {B_bar.shape}")
    Bn, L, Dm, N = A_bar.shape
    if C.shape != (Bn, L, N) or u.shape != (Bn, L, Dm):
        raise ShapeMismatch(f"C {C.shape} / u {u.shape} inconsistent with {A_bar.shape}")
    a, b, c, x = A_bar.data, B_bar.data, C.data, u.data
    states = _recurrence(a, b * x[..., None])
    y = np.einsum("bldn,bln->bld", states, c)

    def bw(g):
        gbu = _reverse_recurrence(a, g[..., None] * c[:, :, None, :])
        ga = _shifted_product(gbu, states)
        gc = np.einsum("bld,bldn->bln", g, states)
        gb = gbu * x[..., None]
        gu = np.einsum("bldn,bldn->bld", gbu, b)
        return ga, gb, gc, gu

    return T.record((A_bar, B_bar, C, u), y, bw)


def _recurrence(a: np.ndarray, bu: np.ndarray) -> np.ndarray:
    """All states of ``X_t = a_t * X_{t-1} + bu_t`` along axis 1, X_0 = 0."""
    states = np.empty_like(bu)
    states[:, 0] = bu[:, 0]
    for t in range(1, bu.shape[1]):
        np.multiply(a[:, t], states[:, t - 1], out=states[:, t])
        states[:, t] += bu[:, t]
    return states


def _reverse_recurrence(a: np.ndarray, gx: np.ndarray) -> np.ndarray:
    """Adjoint sweep: ``G_t = gx_t + a_{t+1} * G_{t+1}``, the gradient w.r.t. each step's input."""
    out = np.empty_like(gx)
    L = gx.shape[1]
    out[:, L - 1] = gx[:, L - 1]
    for t in range(L - 2, -1, -1):
        np.multiply(a[:, t + 1], out[:, t + 1], out=out[:, t])
        out[:, t] += gx[:, t]
    return out


def _shifted_product(gbu: np.ndarray, states: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the decay: ``G_t * X_{t-1}``, zero at t = 0."""
    ga = np.empty_like(gbu)
    ga[:, 0] = 0.0
    np.multiply(gbu[:, 1:], states[:, :-1], out=ga[:, 1:])
    return ga


def discretized_scan(A: Tensor, B: Tensor, C: Tensor, delta: Tensor, u: Tensor,
                     mode: str = "euler") -> Tensor:
    """``selective_scan(*discretize(A, B, delta, mode), C, u)`` as one op.

    ``A`` is ``[D, N]`` or ``[K, 1, D, N]`` (constant over time); ``B``, ``C`` are
    ``[K, L, N]`` and ``delta``, ``u`` are ``[K, L, D]``. The Euler path is fused
    so the ``[K, L, D, N]`` intermediates never enter the tape; ZOH composes.
    """
    if u.ndim != 3 or delta.shape != u.shape:
        raise ShapeMismatch(f"delta {delta.shape} vs u {u.shape}")
    K, L, Dm = u.shape
    if A.ndim == 2:
        Ak = A.data[None]
    elif A.ndim == 4 and A.shape[1] == 1 and A.shape[0] in (1, K):
        Ak = A.data[:, 0]
    else:
        raise ShapeMismatch(f"A {A.shape} must be [D, N] or [K, 1, D, N]")
    N = Ak.shape[-1]
    if Ak.shape[-2] != Dm or B.shape != (K, L, N) or C.shape != (K, L, N):
        raise ShapeMismatch(f"discretized_scan: A {A.shape}, B {B.shape}, C {C.shape}, u {u.shape}")
    if mode != "euler":
        full_A = A if A.ndim == 4 else T.reshape(A, (1, 1, Dm, N))
        A_bar, B_bar = discretize(T.expand(full_A, (K, L, Dm, N)), B, delta, mode)
        return selective_scan(A_bar, B_bar, C, u)
    dl, x, b, c = delta.data, u.data, B.data, C.data
    if np.any(dl <= 0):
        raise NonPositiveStep("delta must be strictly positive")
    a = np.exp(dl[..., None] * Ak[:, None])
    dx = dl * x
    states = _recurrence(a, dx[..., None] * b[:, :, None, :])
    y = np.einsum("kldn,kln->kld", states, c)

    def bw(g):
        gbu = _reverse_recurrence(a, g[..., None] * c[:, :, None, :])
        g_dA = _shifted_product(gbu, states)
        g_dA *= a  # through exp
        g_dx = np.einsum("kldn,kln->kld", gbu, b)
        g_delta = np.einsum("kldn,kdn->kld", g_dA, np.broadcast_to(Ak, (K, Dm, N))) + g_dx * x
        gA = np.einsum("kldn,kld->kdn", g_dA, dl)
        gA = gA.sum(axis=0) if A.ndim == 2 else T._unbroadcast(gA[:, None], A.shape)
        return gA, np.einsum("kldn,kld->kln", gbu, dx), np.einsum("kld,kldn->kln", g, states), g_delta, g_dx * dl

    return T.record((A, B, C, delta, u), y, bw)


def _ssm_from(core: SsmCoreParams, src: Tensor, x: Tensor, mode: str) -> Tensor:
    """B, C, delta projected from ``src`` [B, L, src_dim]; scanned input is ``x`` [B, L, D]."""
    Dm = x.shape[-1]
    B = src @ core.w_b
    C = src @ core.w_c
    dl = src @ core.w_delta
    delta = T.softplus(T.expand(dl, dl.shape[:-1] + (Dm,)) + core.b_delta)
    return discretized_scan(core.A, B, C, delta, x, mode)


def mamba_block_self(seq: Tensor, p: MambaBlockParams, mode: str = "euler") -> Tensor:
    """One self-selective layer on ``seq[B, L, d]`` with residual."""
    if seq.ndim != 3 or seq.shape[-1] != p.norm_gain.shape[0]:
        raise ShapeMismatch(f"mamba_block_self: seq {seq.shape}")
    h = T.rmsnorm(seq, p.norm_gain)
    x = T.silu(T.conv1d_depthwise(h @ p.w_x, p.conv))
    z = h @ p.w_z
    y = _ssm_from(p.core, x, x, mode)
    return (y * T.silu(z)) @ p.w_out + seq


def mamba_block_cross(seq: Tensor, cond: Tensor, p: MambaBlockParams, mode: str = "euler") -> Tensor:
    """As :func:`mamba_block_self` but B, C and delta come from ``cond[B, d]``."""
    if seq.ndim != 3 or cond.ndim != 2 or cond.shape[0] != seq.shape[0]:
        raise ShapeMismatch(f"mamba_block_cross: seq {seq.shape}, cond {cond.shape}")
    Bn, L, d = seq.shape
    h = T.rmsnorm(seq, p.norm_gain)
    x = T.silu(T.conv1d_depthwise(h @ p.w_x, p.conv))
    z = h @ p.w_z
    src = T.expand(T.reshape(cond, (Bn, 1, cond.shape[1])), (Bn, L, cond.shape[1]))
    y = _ssm_from(p.core, src, x, mode)
    return (y * T.silu(z)) @ p.w_out + seq
