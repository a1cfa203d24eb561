"""User-behaviour clustering: randomized truncated SVD and k-means++."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Union

import numpy as np
import scipy.sparse as sp

from .cco import SparseInteractionMatrix

logger = logging.getLogger(__name__)

MIN_POWER_ITERS = 5


@dataclass
class TruncatedSVD:
    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray

    @property
    def embeddings(self) -> np.ndarray:
        """Left singular vectors scaled by the singular values (one row per matrix row)."""
        return self.u * self.s

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.vt


def _operator(matrix: Union[SparseInteractionMatrix, Any]):
    if isinstance(matrix, SparseInteractionMatrix):
        return matrix.matrix.tocsr().astype(np.float64)
    if sp.issparse(matrix):
        return matrix.tocsr().astype(np.float64)
    return np.asarray(matrix, dtype=np.float64)


def truncated_svd(
    matrix: Union[SparseInteractionMatrix, Any],
    rank: int = 50,
    iters: int = 7,
    oversample: int = 10,
    seed: int = 0,
) -> TruncatedSVD:
    """Top-``rank`` SVD by a randomized range finder with QR-stabilised power iterations."""
    a = _operator(matrix)
    m, n = a.shape
    if rank < 1 or rank > min(m, n):
        raise ValueError(f"rank {rank} exceeds matrix dimensions {m}x{n}")
    if iters < MIN_POWER_ITERS:
        raise ValueError(f"truncated_svd needs at least {MIN_POWER_ITERS} power iterations, got {iters}")
    width = min(rank + oversample, min(m, n))
    rng = np.random.default_rng(seed)

    q, _ = np.linalg.qr(np.asarray(a @ rng.standard_normal((n, width))))
    for _ in range(iters):
        z, _ = np.linalg.qr(np.asarray(a.T @ q))
        q, _ = np.linalg.qr(np.asarray(a @ z))

    b = np.asarray(a.T @ q).T  # width x n, equals Q^T A
    evals, ub = np.linalg.eigh(b @ b.T)
    order = np.argsort(evals)[::-1][:rank]
    s = np.sqrt(np.clip(evals[order], 0.0, None))
    ub = ub[:, order]
    u = q @ ub
    vt = np.zeros((rank, n))
    nz = s > s.max(initial=0.0) * 1e-12
    vt[nz] = (ub[:, nz].T @ b) / s[nz, None]

    # Deterministic signs: largest-magnitude entry of each left vector is positive.
    flip = np.sign(u[np.argmax(np.abs(u), axis=0), np.arange(rank)])
    flip[flip == 0] = 1.0
    return TruncatedSVD(u=u * flip, s=s, vt=vt * flip[:, None])


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    iterations: int


def _sq_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)


def kmeans_plus_plus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            # All remaining points coincide with a centre.
            rest = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(rest))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((points - points[nxt]) ** 2).sum(axis=1))
    return points[chosen].copy()


def kmeans(points: Any, k: int = 10, max_iters: int = 100, seed: int = 0) -> KMeansResult:
    """Lloyd iterations from a k-means++ start until assignments stop changing."""
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"kmeans expects a 2-D point array, got shape {x.shape}")
    if k < 1 or x.shape[0] < k:
        raise ValueError(f"kmeans needs at least k={k} points, got {x.shape[0]}")
    rng = np.random.default_rng(seed)
    centroids = kmeans_plus_plus(x, k, rng)
    assign = None
    iterations = 0
    for iterations in range(1, max_iters + 1):
        d2 = _sq_distances(x, centroids)
        new = np.argmin(d2, axis=1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        own = d2[np.arange(x.shape[0]), assign].copy()
        for c in range(k):
            members = assign == c
            if members.any():
                centroids[c] = x[members].mean(axis=0)
            else:
                far = int(np.argmax(own))
                logger.debug("Cluster %d empty; reseeding at point %d", c, far)
                centroids[c] = x[far]
                own[far] = -1.0
    d2 = _sq_distances(x, centroids)
    assign = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(x.shape[0]), assign].sum())
    return KMeansResult(assignments=assign, centroids=centroids, inertia=inertia, iterations=iterations)
