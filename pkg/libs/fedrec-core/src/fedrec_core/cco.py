"""Correlated Cross-Occurrence candidate generation.

Every indicator matrix (actors x targets) is correlated against the primary
matrix with Dunning's log-likelihood ratio; a user's score for item b is the
plain sum of LLR weights over everything in their histories that correlates
with b (``r = h_p[P'P] + h_v[V'P] + h_c[C'P] + h_t[T'P]``).
"""

from __future__ import annotations

import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np
import scipy.sparse as sp

from .ingest import EventLog, id_sort_key

logger = logging.getLogger(__name__)

DEFAULT_LLR_THRESHOLD = 0.0
DEFAULT_MAX_CORRELATORS = 50
DEFAULT_BLOCK_SIZE = 512
# Scores equal to this many decimals are ties (broken by ascending id).
TIE_DECIMALS = 9
# G^2 below this is rounding noise on an independent table.
LLR_ZERO_TOL = 1e-10


@dataclass
class SparseInteractionMatrix:
    """Binary actor x target matrix with bijective id dictionaries."""

    matrix: sp.csr_matrix
    row_ids: List[str]
    col_ids: List[str]
    row_index: Dict[str, int] = field(default_factory=dict)
    col_index: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.row_index:
            self.row_index = {r: i for i, r in enumerate(self.row_ids)}
        if not self.col_index:
            self.col_index = {c: i for i, c in enumerate(self.col_ids)}

    @property
    def shape(self) -> Tuple[int, int]:
        return (len(self.row_ids), len(self.col_ids))

    @property
    def nnz(self) -> int:
        return int(self.matrix.nnz)

    def row_targets(self, actor: str) -> Set[str]:
        i = self.row_index.get(actor)
        if i is None:
            return set()
        lo, hi = self.matrix.indptr[i], self.matrix.indptr[i + 1]
        return {self.col_ids[j] for j in self.matrix.indices[lo:hi]}

    def reindex_rows(self, row_ids: Sequence[str]) -> "SparseInteractionMatrix":
        """Same entries expressed over a (super)set of actor ids."""
        coo = self.matrix.tocoo()
        new_index = {r: i for i, r in enumerate(row_ids)}
        remap = np.asarray([new_index[r] for r in self.row_ids], dtype=np.int64)
        rows = remap[coo.row] if coo.nnz else coo.row
        m = sp.csr_matrix((coo.data, (rows, coo.col)), shape=(len(row_ids), len(self.col_ids)))
        return SparseInteractionMatrix(m, list(row_ids), list(self.col_ids), new_index, dict(self.col_index))


def interaction_matrix_from_pairs(pairs: Iterable[Tuple[str, str]]) -> SparseInteractionMatrix:
    uniq = sorted(set((str(a), str(t)) for a, t in pairs), key=lambda p: (id_sort_key(p[0]), id_sort_key(p[1])))
    row_ids = sorted({a for a, _ in uniq}, key=id_sort_key)
    col_ids = sorted({t for _, t in uniq}, key=id_sort_key)
    row_index = {r: i for i, r in enumerate(row_ids)}
    col_index = {c: i for i, c in enumerate(col_ids)}
    rows = np.fromiter((row_index[a] for a, _ in uniq), dtype=np.int64, count=len(uniq))
    cols = np.fromiter((col_index[t] for _, t in uniq), dtype=np.int64, count=len(uniq))
    data = np.ones(len(uniq), dtype=np.float64)
    m = sp.csr_matrix((data, (rows, cols)), shape=(len(row_ids), len(col_ids)))
    return SparseInteractionMatrix(m, row_ids, col_ids, row_index, col_index)


def build_interaction_matrix(log: EventLog, indicator: str) -> SparseInteractionMatrix:
    """One entry per distinct (actor, target) pair of ``indicator``."""
    return interaction_matrix_from_pairs(log.pairs(indicator))


# --- Log-likelihood ratio ---

def _xlogx(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    safe = np.where(x > 0, x, 1.0)
    return np.where(x > 0, x * np.log(safe), 0.0)


def llr_array(k11: Any, k12: Any, k21: Any, k22: Any) -> np.ndarray:
    """Vectorised G^2 = 2 * sum k_ij ln(k_ij N / (row_i col_j)), with 0 ln 0 = 0."""
    k11, k12, k21, k22 = (np.asarray(k, dtype=np.float64) for k in (k11, k12, k21, k22))
    if (k11 < 0).any() or (k12 < 0).any() or (k21 < 0).any() or (k22 < 0).any():
        raise ValueError("Contingency counts must be non-negative")
    n = k11 + k12 + k21 + k22
    cells = _xlogx(k11) + _xlogx(k12) + _xlogx(k21) + _xlogx(k22)
    rows = _xlogx(k11 + k12) + _xlogx(k21 + k22)
    cols = _xlogx(k11 + k21) + _xlogx(k12 + k22)
    g2 = 2.0 * (cells - rows - cols + _xlogx(n))
    return np.where(g2 > LLR_ZERO_TOL, g2, 0.0)


def llr(k11: float, k12: float, k21: float, k22: float) -> float:
    if min(k11, k12, k21, k22) < 0:
        raise ValueError(f"Contingency counts must be non-negative, got {(k11, k12, k21, k22)}")
    if k11 + k12 + k21 + k22 <= 0:
        raise ValueError("Contingency table is empty")
    return float(llr_array(k11, k12, k21, k22))


# --- Similarity ---

@dataclass
class SimilarityMatrix:
    """Per primary target b: the correlated secondary targets a with their LLR, best first."""

    indicator: str
    correlators: Dict[str, List[Tuple[str, float]]] = field(default_factory=dict)
    _by_source: Optional[Dict[str, List[Tuple[str, float]]]] = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.correlators)

    @property
    def pair_count(self) -> int:
        return sum(len(v) for v in self.correlators.values())

    def get(self, item: str) -> List[Tuple[str, float]]:
        return self.correlators.get(item, [])

    def by_source(self) -> Dict[str, List[Tuple[str, float]]]:
        """Reverse index a -> [(b, llr)], used when scoring a user's history."""
        if self._by_source is None:
            rev: Dict[str, List[Tuple[str, float]]] = defaultdict(list)
            for b, corr in self.correlators.items():
                for a, s in corr:
                    rev[a].append((b, s))
            self._by_source = dict(rev)
        return self._by_source


def cross_occurrence(
    primary: SparseInteractionMatrix,
    secondary: SparseInteractionMatrix,
    llr_threshold: float = DEFAULT_LLR_THRESHOLD,
    max_correlators: int = DEFAULT_MAX_CORRELATORS,
    indicator: str = "",
    block_size: int = DEFAULT_BLOCK_SIZE,
) -> SimilarityMatrix:
    """Correlate every (secondary a, primary b) pair with a != b.

    The actor universe for k22 is the union of actors in both matrices. Pairs
    that never co-occur still have a contingency table (k11 = 0) and score
    when the two events avoid each other. Primary columns are processed in
    dense blocks of ``block_size``.
    """
    if max_correlators < 1:
        raise ValueError("max_correlators must be >= 1")
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    sim = SimilarityMatrix(indicator=indicator)
    if primary.nnz == 0 or secondary.nnz == 0:
        return sim
    shared = set(primary.row_ids) & set(secondary.row_ids)
    if not shared:
        raise ValueError(f"Indicator '{indicator}' shares no actors with the primary indicator")

    actors = sorted(set(primary.row_ids) | set(secondary.row_ids), key=id_sort_key)
    p = primary.reindex_rows(actors).matrix.tocsc()
    st = secondary.reindex_rows(actors).matrix.T.tocsr()
    n_actors = float(len(actors))
    count_a = np.asarray(st.sum(axis=1)).ravel()[:, None]
    count_b = np.asarray(p.sum(axis=0)).ravel()
    sec_to_prim = np.asarray([primary.col_index.get(c, -1) for c in secondary.col_ids], dtype=np.int64)

    a_order = sorted(range(len(secondary.col_ids)), key=lambda i: id_sort_key(secondary.col_ids[i]))
    a_rank = np.empty(len(a_order), dtype=np.int64)
    a_rank[np.asarray(a_order, dtype=np.int64)] = np.arange(len(a_order))

    n_b = len(primary.col_ids)
    for lo in range(0, n_b, block_size):
        hi = min(lo + block_size, n_b)
        k11 = np.asarray((st @ p[:, lo:hi]).todense(), dtype=np.float64)
        k12 = count_a - k11
        k21 = count_b[lo:hi][None, :] - k11
        k22 = n_actors - k11 - k12 - k21
        scores = llr_array(k11, k12, k21, k22)
        keep = scores > llr_threshold
        keep &= sec_to_prim[:, None] != np.arange(lo, hi)[None, :]
        for j in range(hi - lo):
            rows = np.flatnonzero(keep[:, j])
            if rows.size == 0:
                continue
            col = scores[rows, j]
            top = rows[np.lexsort((a_rank[rows], -np.round(col, TIE_DECIMALS)))[:max_correlators]]
            sim.correlators[primary.col_ids[lo + j]] = [
                (secondary.col_ids[a], float(scores[a, j])) for a in top
            ]
    return sim


# --- Scoring and recommendation ---

@dataclass
class RecommendationList:
    items: List[Tuple[str, float]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator[Tuple[str, float]]:
        return iter(self.items)

    def item_ids(self) -> List[str]:
        return [i for i, _ in self.items]

    def to_json(self) -> List[Dict[str, Any]]:
        return [{"item": i, "score": s} for i, s in self.items]

    @classmethod
    def from_scores(
        cls,
        scores: Mapping[str, float],
        k: int,
        exclude: Optional[Set[str]] = None,
    ) -> "RecommendationList":
        """Top-k by descending score, ties by ascending item id, excluded items removed."""
        if k <= 0:
            return cls()
        excl = exclude or set()
        ranked = sorted(
            ((item, float(s)) for item, s in scores.items() if item not in excl),
            key=lambda t: (-t[1], id_sort_key(t[0])),
        )
        return cls(items=ranked[:k])


def score_user(
    histories: Mapping[str, Iterable[str]],
    similarity: Mapping[str, SimilarityMatrix],
) -> Dict[str, float]:
    """Unweighted additive score over every indicator history."""
    scores: Dict[str, float] = defaultdict(float)
    for indicator, history in histories.items():
        sim = similarity.get(indicator)
        if sim is None:
            logger.debug("No similarity matrix for indicator '%s'; history ignored", indicator)
            continue
        rev = sim.by_source()
        for a in history:
            for b, s in rev.get(a, ()):
                scores[b] += s
    return dict(scores)


class CCORecommender:
    """Fits one similarity matrix per indicator against the primary indicator."""

    def __init__(
        self,
        llr_threshold: float = DEFAULT_LLR_THRESHOLD,
        max_correlators: int = DEFAULT_MAX_CORRELATORS,
    ):
        self.llr_threshold = llr_threshold
        self.max_correlators = max_correlators
        self.primary = ""
        self.matrices: Dict[str, SparseInteractionMatrix] = {}
        self.similarity: Dict[str, SimilarityMatrix] = {}

    def fit(self, log: EventLog, indicators: Optional[Sequence[str]] = None) -> "CCORecommender":
        names = list(indicators) if indicators is not None else log.names()
        if log.primary not in names:
            names.insert(0, log.primary)
        self.primary = log.primary
        self.matrices = {name: build_interaction_matrix(log, name) for name in names}
        prim = self.matrices[self.primary]
        if prim.nnz == 0:
            logger.warning("Primary indicator '%s' is empty; every user is cold-start", self.primary)
        self.similarity = {}
        for name in names:
            try:
                self.similarity[name] = cross_occurrence(
                    prim,
                    self.matrices[name],
                    llr_threshold=self.llr_threshold,
                    max_correlators=self.max_correlators,
                    indicator=name,
                )
            except ValueError as e:
                logger.warning("Skipping indicator '%s': %s", name, e)
                self.similarity[name] = SimilarityMatrix(indicator=name)
            logger.debug(
                "Indicator %s: %d items with correlators, %d pairs",
                name,
                len(self.similarity[name]),
                self.similarity[name].pair_count,
            )
        return self

    def user_histories(self, user: str) -> Dict[str, Set[str]]:
        return {name: m.row_targets(user) for name, m in self.matrices.items() if user in m.row_index}

    def known_user(self, user: str) -> bool:
        return any(user in m.row_index for m in self.matrices.values())

    def user_scores(self, user: str) -> Dict[str, float]:
        return score_user(self.user_histories(user), self.similarity)

    def recommend_top_k(self, user: str, k: int, exclude_seen: bool = True) -> RecommendationList:
        if k < 1:
            raise ValueError("k must be >= 1")
        if not self.known_user(user):
            return RecommendationList()
        exclude = self.matrices[self.primary].row_targets(user) if exclude_seen else set()
        return RecommendationList.from_scores(self.user_scores(user), k, exclude)

    def similar_items(self, item: str, k: int, indicator: Optional[str] = None) -> RecommendationList:
        """Item-to-item: items whose primary events correlate with ``item``."""
        sim = self.similarity.get(indicator or self.primary)
        if sim is None:
            return RecommendationList()
        related = {b: s for b, s in sim.by_source().get(item, ())}
        return RecommendationList.from_scores(related, k, {item})

    def score_items(self, user: str, items: Sequence[str]) -> np.ndarray:
        scores = self.user_scores(user)
        return np.asarray([scores.get(i, 0.0) for i in items], dtype=np.float64)

    def answer_query(self, query: Mapping[str, Any]) -> Dict[str, Any]:
        """Serve a ``{"user", "k", "exclude_seen"}`` query."""
        user = str(query["user"])
        k = int(query.get("k", 10))
        exclude_seen = bool(query.get("exclude_seen", True))
        recs = self.recommend_top_k(user, k, exclude_seen=exclude_seen)
        return {"user": user, "recommendations": recs.to_json()}


def save_similarity(similarity: Mapping[str, SimilarityMatrix], path: Path) -> Path:
    """JSON lines: one record per (indicator, item) with its correlated items."""
    from . import atomic_write_text

    lines = []
    for name, sim in similarity.items():
        for b in sorted(sim.correlators, key=id_sort_key):
            lines.append(
                json.dumps(
                    {
                        "item": b,
                        "indicator": name,
                        "correlated": [{"item": a, "llr": s} for a, s in sim.correlators[b]],
                    }
                )
            )
    atomic_write_text(Path(path), "\n".join(lines) + ("\n" if lines else ""))
    return Path(path)


def load_similarity(path: Path) -> Dict[str, SimilarityMatrix]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Similarity file not found: {path}")
    out: Dict[str, SimilarityMatrix] = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        sim = out.setdefault(rec["indicator"], SimilarityMatrix(indicator=rec["indicator"]))
        sim.correlators[str(rec["item"])] = [(str(c["item"]), float(c["llr"])) for c in rec["correlated"]]
    return out


# --- Popularity baseline ---

def _like_counts(log: EventLog) -> Counter:
    return Counter(t for _, t in log.pairs(log.primary))


def pop_rec(log: EventLog, k: int) -> RecommendationList:
    """Items by number of primary events, ties by item id."""
    counts = _like_counts(log)
    if not counts:
        raise ValueError(f"Primary indicator '{log.primary}' is empty")
    return RecommendationList.from_scores({i: float(c) for i, c in counts.items()}, k)


class PopularityRecommender:
    """Non-personalised baseline; seen items are still excluded per user."""

    def __init__(self) -> None:
        self.counts: Counter = Counter()
        self.seen: Dict[str, Set[str]] = {}

    def fit(self, log: EventLog) -> "PopularityRecommender":
        self.counts = _like_counts(log)
        if not self.counts:
            raise ValueError(f"Primary indicator '{log.primary}' is empty")
        seen: Dict[str, Set[str]] = defaultdict(set)
        for actor, target in log.pairs(log.primary):
            seen[actor].add(target)
        self.seen = dict(seen)
        return self

    def recommend_top_k(self, user: str, k: int, exclude_seen: bool = True) -> RecommendationList:
        exclude = self.seen.get(user, set()) if exclude_seen else set()
        return RecommendationList.from_scores({i: float(c) for i, c in self.counts.items()}, k, exclude)

    def score_items(self, user: str, items: Sequence[str]) -> np.ndarray:
        return np.asarray([float(self.counts.get(i, 0)) for i in items], dtype=np.float64)
