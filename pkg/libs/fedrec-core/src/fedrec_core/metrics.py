"""Classification and ranking metrics plus the leave-one-out ranking harness."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Literal, Mapping, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .ingest import id_sort_key
from .tensor import bce_loss

logger = logging.getLogger(__name__)

AUC_THRESHOLDS = np.linspace(0.0, 1.0, 10)

Scorer = Callable[[str, Sequence[str]], Sequence[float]]


def _check_binary(labels: np.ndarray) -> None:
    pos = int((labels == 1).sum())
    neg = int((labels == 0).sum())
    if pos + neg != labels.size:
        raise ValueError("Labels must be 0 or 1")
    if pos == 0 or neg == 0:
        raise ValueError("AUC is undefined unless labels contain both classes")


def auc(scores: Sequence[float], labels: Sequence[int], mode: Literal["exact", "thresholded10"] = "exact") -> float:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"scores/labels length mismatch: {s.size} vs {y.size}")
    _check_binary(y)
    if mode == "exact":
        return exact_auc(s, y)
    if mode == "thresholded10":
        return thresholded_auc(s, y)
    raise ValueError(f"Unknown AUC mode '{mode}'")


def exact_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney U / (n_pos * n_neg), ties get half credit."""
    ranks = rankdata(scores, method="average")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def thresholded_auc(scores: np.ndarray, labels: np.ndarray, thresholds: np.ndarray = AUC_THRESHOLDS) -> float:
    """Trapezoidal ROC area over ten evenly spaced thresholds in [0, 1] plus the corners."""
    pos = labels == 1
    n_pos = pos.sum()
    n_neg = labels.size - n_pos
    points = [(0.0, 0.0), (1.0, 1.0)]
    for t in thresholds:
        predicted = scores >= t
        points.append((float((predicted & ~pos).sum() / n_neg), float((predicted & pos).sum() / n_pos)))
    points.sort()
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


def logloss(probs: Sequence[float], labels: Sequence[int]) -> float:
    loss, _ = bce_loss(np.asarray(probs, dtype=np.float64), np.asarray(labels, dtype=np.float64))
    return loss


def federated_metric(values: Sequence[float], sizes: Sequence[int]) -> float:
    """Test-size weighted mean of per-client metric values."""
    v = np.asarray(values, dtype=np.float64)
    n = np.asarray(sizes, dtype=np.float64)
    if v.shape != n.shape:
        raise ValueError(f"{v.size} metric values but {n.size} client sizes")
    if v.size == 0 or (n <= 0).any():
        raise ValueError("Client sizes must be positive")
    return float((n / n.sum()) @ v)


def _rank_of(ranked: Sequence[str], item: str) -> float:
    try:
        return float(list(ranked).index(item) + 1)
    except ValueError:
        return math.inf


def hit_from_rank(rank: float, k: int) -> float:
    return 1.0 if rank <= k else 0.0


def ndcg_from_rank(rank: float, k: int) -> float:
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def hit_rate_at_k(ranked_lists: Mapping[str, Sequence[str]], held_out: Mapping[str, str], k: int = 10) -> float:
    if not held_out:
        raise ValueError("hit_rate_at_k over an empty user set")
    return float(np.mean([hit_from_rank(_rank_of(ranked_lists.get(u, ()), i), k) for u, i in held_out.items()]))


def ndcg_at_k(ranked_lists: Mapping[str, Sequence[str]], held_out: Mapping[str, str], k: int = 10) -> float:
    if not held_out:
        raise ValueError("ndcg_at_k over an empty user set")
    return float(np.mean([ndcg_from_rank(_rank_of(ranked_lists.get(u, ()), i), k) for u, i in held_out.items()]))


@dataclass
class RankingResult:
    hr: float
    ndcg: float
    k: int
    users: int
    skipped: int = 0
    ranks: Dict[str, int] = field(default_factory=dict)

    def as_dict(self) -> Dict[str, float]:
        return {f"hr@{self.k}": self.hr, f"ndcg@{self.k}": self.ndcg, "users": self.users, "skipped": self.skipped}


def loo_ranking_eval(
    scorer: Scorer,
    held_out: Mapping[str, str],
    seen: Mapping[str, Sequence[str]],
    catalog: Sequence[str],
    negatives_per_user: Optional[int] = 100,
    k: int = 10,
    seed: int = 0,
) -> RankingResult:
    """Rank each user's held-out item among sampled unseen items.

    ``negatives_per_user=None`` ranks against every unseen catalog item.
    Ties put the held-out item after all equally scored negatives.
    """
    items = sorted(set(catalog), key=id_sort_key)
    index = {it: i for i, it in enumerate(items)}
    rng = np.random.default_rng(seed)
    ranks: Dict[str, int] = {}
    skipped = 0
    for user in sorted(held_out, key=id_sort_key):
        positive = held_out[user]
        excluded = np.zeros(len(items), dtype=bool)
        known = [index[i] for i in seen.get(user, ()) if i in index]
        excluded[known] = True
        if positive in index:
            excluded[index[positive]] = True
        candidates = np.flatnonzero(~excluded)
        if candidates.size == 0:
            logger.warning("User %s has no unseen items; skipped", user)
            skipped += 1
            continue
        if negatives_per_user is not None and candidates.size > negatives_per_user:
            candidates = rng.choice(candidates, size=negatives_per_user, replace=False)
        ranked_items = [positive] + [items[i] for i in candidates]
        scores = np.asarray(scorer(user, ranked_items), dtype=np.float64)
        ranks[user] = 1 + int((scores[1:] >= scores[0]).sum())
    if not ranks:
        raise ValueError("No user could be evaluated")
    hr = float(np.mean([hit_from_rank(r, k) for r in ranks.values()]))
    ndcg = float(np.mean([ndcg_from_rank(r, k) for r in ranks.values()]))
    return RankingResult(hr=hr, ndcg=ndcg, k=k, users=len(ranks), skipped=skipped, ranks=ranks)
