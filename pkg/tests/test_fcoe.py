import numpy as np
import pytest
from hypothesis import given, strategies as st

from ssmtrack.errors import MissingPairs, ShapeMismatch, ZeroVector
from ssmtrack.fcoe import (BACKGROUND, DenseEmbeddingMap, cosine_loss, embed_loss, fcoe_loss, sample_pairs,
                           synthetic_maps)
from ssmtrack.tensor import Tensor, grad_check


def unit(v):
    v = np.asarray(v, float)
    return v / np.linalg.norm(v)


def brute_embed_loss(f, P, N, c):
    return np.log1p(c * sum(np.exp(f @ n - f @ p) for p in P for n in N))


class TestEmbedLoss:
    def test_equal_scores_give_log2(self):
        f, p, n = unit([1, 0]), unit([1, 1]), unit([1, -1])
        assert embed_loss(f, p, n, 1.0).data == pytest.approx(np.log(2))

    def test_dominated(self):
        f = np.array([10.0, 0])
        assert embed_loss(f, [[10.0, 0]], [[-10.0, 0]], 1.0).data < 1e-80

    def test_zero_centerness(self, rng):
        assert embed_loss(rng.normal(size=4), rng.normal(size=(3, 4)), rng.normal(size=(2, 4)), 0.0).data == 0

    def test_missing_pairs(self):
        with pytest.raises(MissingPairs):
            embed_loss([1.0, 0], np.zeros((0, 2)), [[0.0, 1]], 1.0)
        with pytest.raises(MissingPairs):
            embed_loss([1.0, 0], [[0.0, 1]], np.zeros((0, 2)), 1.0)

    @given(st.integers(0, 10_000), st.floats(0.01, 1.0))
    def test_matches_double_sum(self, seed, c):
        r = np.random.default_rng(seed)
        f, P, N = r.normal(size=5), r.normal(size=(3, 5)), r.normal(size=(4, 5))
        assert embed_loss(f, P, N, c).data == pytest.approx(brute_embed_loss(f, P, N, c), rel=1e-10)

    def test_monotone_in_scores(self, rng):
        f, P, N = unit(rng.normal(size=4)), rng.normal(size=(2, 4)), rng.normal(size=(3, 4))
        base = embed_loss(f, P, N, 0.7).data
        P2, N2 = P.copy(), N.copy()
        P2[0] += 0.1 * f  # raises f.p
        N2[1] += 0.1 * f  # raises f.n
        assert embed_loss(f, P2, N, 0.7).data < base < embed_loss(f, P, N2, 0.7).data

    def test_gradient(self, rng):
        P, N = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
        assert grad_check(lambda t: embed_loss(t, P, N, 0.6), Tensor(rng.normal(size=4))) <= 1e-8


class TestCosine:
    def test_examples(self):
        v = np.array([1.0, 2.0])
        assert cosine_loss(v, v, True).data == pytest.approx(0.0)
        assert cosine_loss([1.0, 0], [0, 1.0], False).data == pytest.approx(0.0)
        assert cosine_loss(v, v, False).data == pytest.approx(1.0)

    def test_zero_vector(self):
        with pytest.raises(ZeroVector):
            cosine_loss([0.0, 0.0], [1.0, 0.0], True)


class TestSampling:
    def test_single_object_has_positives(self):
        k, r = synthetic_maps(0, n_objects=1)
        samples, skipped = sample_pairs(k, r)
        assert skipped == 0 and samples
        assert all(len(s.positives) >= 1 for s in samples)

    def test_background_ref_skips_all(self):
        k, r = synthetic_maps(1)
        bg = DenseEmbeddingMap(r.embeddings, np.zeros_like(r.centerness), np.full(r.labels.shape, BACKGROUND))
        samples, skipped = sample_pairs(k, bg)
        assert samples == [] and skipped == int(np.sum(k.labels != BACKGROUND))

    def test_positive_labels_never_cross(self):
        k, r = synthetic_maps(2, n_objects=2)
        kl, rl = k.labels.ravel(), r.labels.ravel()
        for s in sample_pairs(k, r, negatives=8)[0]:
            assert np.all(rl[s.positives] == kl[s.anchor])
            assert np.all(rl[s.negatives] != kl[s.anchor])
            assert len(s.negatives) <= 8

    def test_map_validation(self):
        with pytest.raises(ShapeMismatch):
            DenseEmbeddingMap(np.zeros((2, 2, 3)), np.zeros((2, 3)), np.zeros((2, 3)))
        with pytest.raises(ValueError):
            DenseEmbeddingMap(np.zeros((2, 2, 3)), np.full((2, 2), 1.5), np.zeros((2, 2)))


class TestFcoeLoss:
    def _separated(self):
        k, r = synthetic_maps(3, jitter=0.0)
        # object cells become exact orthogonal one-hots; background gets a third axis
        for m in (k, r):
            e = np.zeros_like(m.embeddings)
            e[..., 2] = 1.0
            for obj in (0, 1):
                e[m.labels == obj] = np.eye(e.shape[-1])[obj]
            m.embeddings = e
        return k, r

    def test_nonnegative(self, rng):
        k, r = synthetic_maps(4)
        assert fcoe_loss(k, r).data >= 0

    def test_well_separated_reaches_analytic_floor(self):
        # orthogonal unit embeddings: cosine term is exactly 0 and every (p, n)
        # pair contributes exp(0 - 1), so the contrastive term is log1p(c |P| |N| / e)
        k, r = self._separated()
        samples, _ = sample_pairs(k, r, 16, np.random.default_rng(0))
        floor = np.mean([np.log1p(s.centerness * len(s.positives) * len(s.negatives) / np.e)
                         for s in samples])
        assert fcoe_loss(k, r, seed=0).data == pytest.approx(floor, rel=1e-12)
        assert fcoe_loss(k, r).data < fcoe_loss(*synthetic_maps(3, separation=0.0)).data

    def test_swapped_ids_raise_loss(self):
        k, r = synthetic_maps(5, n_objects=2, jitter=0.05)
        swapped = k.labels.copy()
        swapped[k.labels == 0], swapped[k.labels == 1] = 1, 0
        bad = DenseEmbeddingMap(k.embeddings, k.centerness, swapped)
        assert fcoe_loss(bad, r).data > fcoe_loss(k, r).data

    def test_gradient(self):
        k, r = synthetic_maps(6, grid=(5, 5), e=6)
        ek = Tensor(k.embeddings)
        assert grad_check(lambda t: fcoe_loss(DenseEmbeddingMap(t, k.centerness, k.labels), r, seed=1), ek) <= 1e-6

    def test_deterministic_sampling(self):
        k, r = synthetic_maps(7)
        assert fcoe_loss(k, r, seed=3).data == fcoe_loss(k, r, seed=3).data
