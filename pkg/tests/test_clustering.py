import numpy as np
import pytest
import scipy.sparse as sp

from fedrec_core.cco import interaction_matrix_from_pairs
from fedrec_core.clustering import kmeans, truncated_svd


class TestTruncatedSVD:
    def test_singular_values_match_dense(self):
        rng = np.random.default_rng(0)
        # 12 columns: the sketch spans the whole column space, so the result is exact.
        a = (rng.random((40, 12)) < 0.3).astype(float)
        svd = truncated_svd(sp.csr_matrix(a), rank=5, iters=7, seed=1)
        want = np.linalg.svd(a, compute_uv=False)[:5]
        np.testing.assert_allclose(svd.s, want, rtol=1e-6)

    def test_exact_low_rank_reconstruction(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(30, 3)) @ rng.normal(size=(3, 20))
        svd = truncated_svd(a, rank=3, seed=0)
        np.testing.assert_allclose(svd.reconstruct(), a, atol=1e-8)

    def test_embeddings_shape(self):
        m = interaction_matrix_from_pairs([(str(u), str(i)) for u in range(12) for i in range(u % 5, 8)])
        svd = truncated_svd(m, rank=4, seed=0)
        assert svd.embeddings.shape == (12, 4)

    def test_deterministic(self):
        a = np.random.default_rng(3).random((15, 10))
        x = truncated_svd(a, rank=3, seed=5)
        y = truncated_svd(a, rank=3, seed=5)
        np.testing.assert_array_equal(x.u, y.u)

    def test_rank_too_large(self):
        with pytest.raises(ValueError):
            truncated_svd(np.ones((4, 3)), rank=4)

    def test_too_few_iterations(self):
        with pytest.raises(ValueError):
            truncated_svd(np.ones((4, 3)), rank=1, iters=2)


class TestKMeans:
    def test_separated_blobs(self):
        rng = np.random.default_rng(0)
        centres = np.array([[0.0, 0.0], [10.0, 10.0], [-10.0, 10.0]])
        pts = np.vstack([c + rng.normal(scale=0.3, size=(20, 2)) for c in centres])
        res = kmeans(pts, k=3, seed=1)
        for b in range(3):
            assert len(set(res.assignments[b * 20 : (b + 1) * 20].tolist())) == 1
        assert len(set(res.assignments.tolist())) == 3

    def test_identical_points_single_effective_cluster(self):
        res = kmeans(np.ones((8, 3)), k=3, seed=0)
        assert res.inertia == pytest.approx(0.0)

    def test_k_larger_than_points(self):
        with pytest.raises(ValueError):
            kmeans(np.zeros((2, 2)), k=3)

    def test_deterministic(self):
        pts = np.random.default_rng(4).normal(size=(50, 3))
        a = kmeans(pts, k=4, seed=7)
        b = kmeans(pts, k=4, seed=7)
        np.testing.assert_array_equal(a.assignments, b.assignments)
