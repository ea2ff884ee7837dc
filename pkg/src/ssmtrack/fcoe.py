"""Dense embedding similarity losses on synthetic embedding maps.

A map is a grid of embedding vectors with a per-cell center-ness and a
per-cell instance label (``-1`` = background). The contrastive term pulls
each labeled anchor in the key map toward same-id cells of the reference
map and away from sampled other-id / background cells; the cosine term
regresses pairwise cosine toward 1 (same id) or 0 (different).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import MissingPairs, ShapeMismatch, ZeroVector
from .tensor import Tensor, as_tensor

BACKGROUND = -1


@dataclass
class DenseEmbeddingMap:
    embeddings: np.ndarray | Tensor  # [Hg, Wg, e]
    centerness: np.ndarray  # [Hg, Wg] in [0, 1]
    labels: np.ndarray  # [Hg, Wg] int, -1 = background

    def __post_init__(self):
        emb = self.embeddings.data if isinstance(self.embeddings, Tensor) else np.asarray(self.embeddings)
        self.centerness = np.asarray(self.centerness, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if emb.shape[:2] != self.centerness.shape or self.labels.shape != self.centerness.shape:
            raise ShapeMismatch("embedding grid, center-ness and labels must share the grid shape")
        if not np.all(np.isfinite(emb)):
            raise ValueError("embeddings must be finite")
        if np.any(self.centerness < 0) or np.any(self.centerness > 1):
            raise ValueError("center-ness must lie in [0, 1]")

    @property
    def flat(self) -> Tensor:
        e = as_tensor(self.embeddings)
        return T.reshape(e, (-1, e.shape[-1]))


@dataclass
class AnchorSample:
    anchor: int  # flat index into key
    positives: np.ndarray  # flat indices into ref
    negatives: np.ndarray
    centerness: float


def sample_pairs(key: DenseEmbeddingMap, ref: DenseEmbeddingMap, negatives: int = 16,
                 rng: np.random.Generator | None = None) -> tuple[list[AnchorSample], int]:
    """Anchors with their positives and sampled negatives, plus the count of skipped anchors."""
    rng = rng if rng is not None else np.random.default_rng(0)
    kl, rl = key.labels.ravel(), ref.labels.ravel()
    kc = key.centerness.ravel()
    out, skipped = [], 0
    for a in np.flatnonzero(kl != BACKGROUND):
        pos = np.flatnonzero(rl == kl[a])
        if len(pos) == 0:
            skipped += 1  # no positives for this id in ref
            continue
        pool = np.flatnonzero(rl != kl[a])
        if len(pool) > negatives:
            pool = np.sort(rng.choice(pool, size=negatives, replace=False))
        out.append(AnchorSample(int(a), pos, pool, float(kc[a])))
    return out, skipped


def _masked_lse(x: Tensor, mask: np.ndarray) -> Tensor:
    """Row-wise log-sum-exp over the entries where ``mask`` is set."""
    m = np.where(mask, x.data, -np.inf).max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = T.exp(x - Tensor(np.broadcast_to(m, x.shape))) * Tensor(mask.astype(float))
    return T.log(shifted.sum(axis=-1)) + Tensor(m[..., 0])


def embed_loss(anchor, positives, negatives, centerness: float) -> Tensor:
    """``log(1 + c * sum_{p,n} exp(f.n - f.p))`` for one anchor ``f``.

    The double sum factorises into ``(sum_n e^{f.n}) (sum_p e^{-f.p})``.
    """
    for name, m in (("positive", positives), ("negative", negatives)):
        if np.size(m.data if isinstance(m, Tensor) else m) == 0:
            raise MissingPairs(f"need at least one {name}")
    f = as_tensor(anchor)
    P, N = as_tensor(positives), as_tensor(negatives)
    if P.ndim == 1:
        P = T.reshape(P, (1, -1))
    if N.ndim == 1:
        N = T.reshape(N, (1, -1))
    fc = T.reshape(f, (-1, 1))
    gp = T.reshape(P @ fc, (1, -1))
    gn = T.reshape(N @ fc, (1, -1))
    if centerness <= 0:
        return (gp.sum() + gn.sum()) * 0.0
    lse = _masked_lse(gn, np.ones(gn.shape, bool)) + _masked_lse(-gp, np.ones(gp.shape, bool))
    return T.softplus(lse + np.log(centerness)).sum()


def cosine_loss(f_i, f_j, same: bool) -> Tensor:
    f_i, f_j = as_tensor(f_i), as_tensor(f_j)
    ni, nj = np.linalg.norm(f_i.data), np.linalg.norm(f_j.data)
    if ni == 0 or nj == 0:
        raise ZeroVector("cosine of a zero vector is undefined")
    cos = (f_i * f_j).sum() / (T.sqrt((f_i * f_i).sum()) * T.sqrt((f_j * f_j).sum()))
    return (cos - (1.0 if same else 0.0)) ** 2


def _l2_normalize(x: Tensor) -> Tensor:
    n = T.sqrt((x * x).sum(axis=-1, keepdims=True) + 1e-12)
    return x / T.expand(n, x.shape)


def fcoe_loss(key: DenseEmbeddingMap, ref: DenseEmbeddingMap, negatives: int = 16,
              seed: int = 0, samples: list[AnchorSample] | None = None) -> Tensor:
    """Mean contrastive loss over anchors plus mean cosine loss over sampled pairs."""
    if samples is None:
        samples, _ = sample_pairs(key, ref, negatives, np.random.default_rng(seed))
    fk, fr = _l2_normalize(key.flat), _l2_normalize(ref.flat)
    if not samples:
        return (fk.sum() + fr.sum()) * 0.0
    nr = fr.shape[0]
    A = len(samples)
    anchors = np.array([s.anchor for s in samples])
    pos = np.zeros((A, nr), bool)
    neg = np.zeros((A, nr), bool)
    for r, s in enumerate(samples):
        pos[r, s.positives] = True
        neg[r, s.negatives] = True
    if not neg.any(axis=1).all():
        raise MissingPairs("an anchor has no negatives")
    c = np.array([s.centerness for s in samples])

    G = T.take(fk, anchors, axis=0) @ T.transpose(fr, (1, 0))  # cosines [A, nr]
    lse = _masked_lse(G, neg) + _masked_lse(-G, pos)
    live = c > 0
    logc = np.log(np.where(live, c, 1.0))
    per_anchor = T.softplus(lse + Tensor(logc)) * Tensor(live.astype(float))
    contrast = per_anchor.mean()

    target = pos.astype(float)
    used = (pos | neg).astype(float)
    cos_term = (((G - Tensor(target)) ** 2) * Tensor(used)).sum() * (1.0 / used.sum())
    return contrast + cos_term


# ------------------------------------------------------------ synthetic maps


def synthetic_maps(seed: int = 0, grid: tuple[int, int] = (8, 8), n_objects: int = 2, e: int = 16,
                   separation: float = 1.0, jitter: float = 0.1, shift: int = 1
                   ) -> tuple[DenseEmbeddingMap, DenseEmbeddingMap]:
    """Two frames of a grid with ``n_objects`` rectangles; the second is shifted by ``shift`` cells.

    Object cells carry a per-object anchor direction plus jitter; larger
    ``separation`` pushes anchors toward orthogonality. Background cells are random.
    """
    rng = np.random.default_rng(seed)
    Hg, Wg = grid
    base = rng.normal(size=e)
    anchors = []
    for _ in range(n_objects):
        d = rng.normal(size=e)
        v = separation * d / np.linalg.norm(d) + (1 - min(separation, 1.0)) * base / np.linalg.norm(base)
        anchors.append(v / np.linalg.norm(v))
    boxes = []
    for k in range(n_objects):
        h, w = rng.integers(2, max(3, Hg // 2) + 1), rng.integers(2, max(3, Wg // 2) + 1)
        y0, x0 = rng.integers(0, Hg - h + 1), rng.integers(0, Wg - w + 1 - shift)
        boxes.append((y0, x0, h, w))

    def frame(dx: int) -> DenseEmbeddingMap:
        emb = rng.normal(size=(Hg, Wg, e))
        emb /= np.linalg.norm(emb, axis=-1, keepdims=True)
        lab = np.full((Hg, Wg), BACKGROUND)
        ctr = np.zeros((Hg, Wg))
        for k, (y0, x0, h, w) in enumerate(boxes):
            ys, xs = np.mgrid[y0:y0 + h, x0 + dx:x0 + dx + w]
            lab[ys, xs] = k
            cy, cx = y0 + (h - 1) / 2, x0 + dx + (w - 1) / 2
            # FCOS-style: 1 at the center, falling toward the box edge
            ctr[ys, xs] = np.clip(1 - np.maximum(np.abs(ys - cy) / (h / 2), np.abs(xs - cx) / (w / 2)), 0, 1)
            noise = rng.normal(0, jitter, size=(h, w, e))
            v = anchors[k] + noise
            emb[ys, xs] = v / np.linalg.norm(v, axis=-1, keepdims=True)
        return DenseEmbeddingMap(emb, ctr, lab)

    return frame(0), frame(shift)
