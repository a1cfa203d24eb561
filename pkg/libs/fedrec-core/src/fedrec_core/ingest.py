"""MovieLens 1M ingestion: parsing, CTR samples, indicator event logs and evaluation splits.

The canonical files (``ratings.dat``, ``users.dat``, ``movies.dat``) are
``::``-delimited ISO-8859-1 text. Parsed records feed three consumers:

- ``binarize_ratings`` -> labelled CTR ``Sample`` rows (rating 3 dropped),
- ``build_event_log`` -> primary/secondary indicator pairs for CCO,
- ``split_leave_one_out`` / ``split_train_val_test`` -> evaluation splits.

``FeatureEncoder`` turns raw samples into a columnar ``SampleTable`` using a
``FeatureSchema`` fitted on the training split (reserved OOV index 0).
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Literal, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

ENCODING = "ISO-8859-1"
OOV_TOKEN = "<oov>"

FieldKind = Literal["numeric", "categorical", "multi"]

# Field order of the CTR samples; timestamp is optional (see FeatureEncoder).
CTR_FIELDS: Tuple[Tuple[str, FieldKind], ...] = (
    ("user_id", "categorical"),
    ("movie_id", "categorical"),
    ("genres", "multi"),
    ("gender", "categorical"),
    ("age", "categorical"),
    ("occupation", "categorical"),
    ("zip_code", "categorical"),
    ("timestamp", "numeric"),
)

PRIMARY_INDICATOR = "like"
EVENT_INDICATORS = ("like", "dislike", "neutral")
ITEM_PROPERTY_INDICATORS = ("genre", "year", "title")
USER_PROPERTY_INDICATORS = ("gender", "age", "occupation", "zip")

ZIP_PREFIX_LEN = 3

_YEAR_SUFFIX_RE = re.compile(r"\s*\((\d{4})\)\s*$")

@dataclass(frozen=True)
class RatingRecord:
    user_id: str
    movie_id: str
    rating: int
    timestamp: int


@dataclass(frozen=True)
class UserProfile:
    gender: str
    age: str
    occupation: str
    zip_code: str


@dataclass(frozen=True)
class MovieInfo:
    title: str
    release_year: Optional[int]
    genres: frozenset[str]


@dataclass
class Dataset:
    ratings: List[RatingRecord] = field(default_factory=list)
    users: Dict[str, UserProfile] = field(default_factory=dict)
    movies: Dict[str, MovieInfo] = field(default_factory=dict)
    malformed: int = 0
    dropped: int = 0

    def summary(self) -> Dict[str, int]:
        return {
            "ratings": len(self.ratings),
            "users": len({r.user_id for r in self.ratings}),
            "movies": len({r.movie_id for r in self.ratings}),
            "user_profiles": len(self.users),
            "movie_records": len(self.movies),
            "malformed_lines": self.malformed,
            "dropped_records": self.dropped,
        }


@dataclass(frozen=True)
class Sample:
    """One CTR example: raw field values keyed by field name plus a binary label."""

    values: Mapping[str, Any]
    label: int


@dataclass
class EventLog:
    indicators: Dict[str, List[Tuple[str, str]]]
    primary: str = PRIMARY_INDICATOR

    def __post_init__(self) -> None:
        if self.primary not in self.indicators:
            raise ValueError(f"Primary indicator '{self.primary}' missing from event log")
        for name, pairs in self.indicators.items():
            self.indicators[name] = _dedupe(pairs)

    def pairs(self, indicator: str) -> List[Tuple[str, str]]:
        if indicator not in self.indicators:
            raise ValueError(f"Unknown indicator '{indicator}'")
        return self.indicators[indicator]

    def names(self) -> List[str]:
        return list(self.indicators.keys())

    def secondary_names(self) -> List[str]:
        return [n for n in self.indicators if n != self.primary]


def id_sort_key(value: str) -> Tuple[int, Any]:
    """Order ids numerically when they are integers, lexically otherwise."""
    s = str(value)
    if s.isdigit():
        return (0, int(s))
    return (1, s)


def _dedupe(pairs: Iterable[Tuple[str, str]]) -> List[Tuple[str, str]]:
    seen: set[Tuple[str, str]] = set()
    out: List[Tuple[str, str]] = []
    for p in pairs:
        key = (str(p[0]), str(p[1]))
        if key in seen:
            continue
        seen.add(key)
        out.append(key)
    return out


# --- Parsing ---

def _read_dat(path: Path, names: List[str]) -> tuple[pd.DataFrame, int]:
    """Read a ``::`` file as strings; returns (frame, malformed line count)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"MovieLens file not found: {path}")

    bad: List[List[str]] = []

    def _on_bad(line: List[str]) -> None:
        bad.append(line)
        return None

    try:
        df = pd.read_csv(
            path,
            sep="::",
            engine="python",
            header=None,
            names=names,
            dtype=str,
            encoding=ENCODING,
            keep_default_na=False,
            na_values=[],
            on_bad_lines=_on_bad,
            skip_blank_lines=True,
        )
    except pd.errors.EmptyDataError:
        return pd.DataFrame({n: pd.Series(dtype=str) for n in names}), 0

    # Short rows come back padded with NaN.
    incomplete = df[names].isna().any(axis=1)
    n_bad = len(bad) + int(incomplete.sum())
    return df[~incomplete].reset_index(drop=True), n_bad


def parse_movielens(ratings_path: Path, users_path: Path, movies_path: Path) -> Dataset:
    """Parse the three MovieLens 1M files into a ``Dataset``.

    Malformed lines are counted (``Dataset.malformed``); ratings whose user or
    movie does not resolve are dropped with a warning (``Dataset.dropped``).
    """
    ratings_df, bad_r = _read_dat(ratings_path, ["user_id", "movie_id", "rating", "timestamp"])
    users_df, bad_u = _read_dat(users_path, ["user_id", "gender", "age", "occupation", "zip_code"])
    movies_df, bad_m = _read_dat(movies_path, ["movie_id", "title", "genres"])

    users: Dict[str, UserProfile] = {}
    for row in users_df.itertuples(index=False):
        uid = str(row.user_id).strip()
        users[uid] = UserProfile(
            gender=str(row.gender).strip(),
            age=str(row.age).strip(),
            occupation=str(row.occupation).strip(),
            zip_code=str(row.zip_code).strip()[:ZIP_PREFIX_LEN],
        )

    movies: Dict[str, MovieInfo] = {}
    for row in movies_df.itertuples(index=False):
        mid = str(row.movie_id).strip()
        title = str(row.title).strip()
        m = _YEAR_SUFFIX_RE.search(title)
        genres = frozenset(g for g in str(row.genres).strip().split("|") if g)
        movies[mid] = MovieInfo(title=title, release_year=int(m.group(1)) if m else None, genres=genres)

    rating_num = pd.to_numeric(ratings_df["rating"], errors="coerce")
    ts_num = pd.to_numeric(ratings_df["timestamp"], errors="coerce")
    valid = rating_num.isin([1, 2, 3, 4, 5]) & ts_num.notna() & (ts_num >= 0)
    bad_values = int((~valid).sum())

    ratings: List[RatingRecord] = []
    dropped = 0
    for uid, mid, rating, ts in zip(
        ratings_df.loc[valid, "user_id"],
        ratings_df.loc[valid, "movie_id"],
        rating_num[valid],
        ts_num[valid],
    ):
        uid = str(uid).strip()
        mid = str(mid).strip()
        if uid not in users or mid not in movies:
            dropped += 1
            continue
        ratings.append(RatingRecord(user_id=uid, movie_id=mid, rating=int(rating), timestamp=int(ts)))

    malformed = bad_r + bad_u + bad_m + bad_values
    if malformed:
        logger.warning("Skipped %d malformed MovieLens lines", malformed)
    if dropped:
        logger.warning("Dropped %d ratings with unresolved user or movie id", dropped)

    return Dataset(ratings=ratings, users=users, movies=movies, malformed=malformed, dropped=dropped)


def parse_movielens_dir(root: Path) -> Dataset:
    root = Path(root)
    return parse_movielens(root / "ratings.dat", root / "users.dat", root / "movies.dat")


# --- CTR samples ---

def binarize_ratings(dataset: Dataset, ratings: Optional[Sequence[RatingRecord]] = None) -> List[Sample]:
    """Rating > 3 -> label 1, rating < 3 -> label 0, rating == 3 dropped."""
    out: List[Sample] = []
    for r in dataset.ratings if ratings is None else ratings:
        if r.rating == 3:
            continue
        user = dataset.users[r.user_id]
        movie = dataset.movies[r.movie_id]
        values = {
            "user_id": r.user_id,
            "movie_id": r.movie_id,
            "genres": tuple(sorted(movie.genres)),
            "gender": user.gender,
            "age": user.age,
            "occupation": user.occupation,
            "zip_code": user.zip_code,
            "timestamp": float(r.timestamp),
        }
        out.append(Sample(values=values, label=1 if r.rating > 3 else 0))
    return out


def split_sizes(n: int, ratios: Sequence[float]) -> List[int]:
    sizes = [int(round(n * r)) for r in ratios[:-1]]
    sizes.append(n - sum(sizes))
    if sizes[-1] < 0:
        sizes[-2] += sizes[-1]
        sizes[-1] = 0
    return sizes


def take_rows(items: Any, idx: np.ndarray) -> Any:
    if hasattr(items, "take") and not isinstance(items, np.ndarray):
        return items.take(idx)
    if isinstance(items, np.ndarray):
        return items[idx]
    return [items[int(i)] for i in idx]


def split_train_val_test(
    samples: Any,
    ratios: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> tuple[Any, Any, Any]:
    """Shuffled disjoint train/val/test split; deterministic for a given seed."""
    if len(ratios) != 3:
        raise ValueError("ratios must have three entries (train, val, test)")
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"Split ratios must be non-negative and sum to 1, got {tuple(ratios)}")
    n = len(samples)
    perm = np.random.default_rng(seed).permutation(n)
    n_train, n_val, _ = split_sizes(n, ratios)
    return (
        take_rows(samples, perm[:n_train]),
        take_rows(samples, perm[n_train:n_train + n_val]),
        take_rows(samples, perm[n_train + n_val:]),
    )


def split_leave_one_out(
    dataset: Dataset,
    ratings: Optional[Sequence[RatingRecord]] = None,
) -> tuple[List[RatingRecord], Dict[str, str]]:
    """Hold out each user's latest interaction (ties -> larger movie id).

    Users with a single interaction keep it in train and get no held-out item.
    """
    by_user: Dict[str, List[RatingRecord]] = {}
    for r in dataset.ratings if ratings is None else ratings:
        by_user.setdefault(r.user_id, []).append(r)

    held_records: set[int] = set()
    held_out: Dict[str, str] = {}
    excluded = 0
    for uid, recs in by_user.items():
        if len(recs) < 2:
            excluded += 1
            continue
        latest = max(recs, key=lambda r: (r.timestamp, id_sort_key(r.movie_id)))
        held_records.add(id(latest))
        held_out[uid] = latest.movie_id
    if excluded:
        logger.warning("Excluded %d users with a single interaction from leave-one-out", excluded)

    source = dataset.ratings if ratings is None else ratings
    train = [r for r in source if id(r) not in held_records]
    return train, held_out


# --- Event log ---

def title_tokens(title: str) -> List[str]:
    """Lowercase whitespace tokens of a title with its "(YYYY)" suffix removed."""
    base = _YEAR_SUFFIX_RE.sub("", title)
    return [t for t in base.lower().split() if t]


def build_event_log(
    dataset: Dataset,
    ratings: Optional[Sequence[RatingRecord]] = None,
    *,
    item_properties: bool = False,
    user_properties: bool = False,
) -> EventLog:
    """Convert ratings (and optionally properties) into indicator pairs.

    like: rating >= 4 (primary); dislike: rating < 3; neutral: rating == 3.
    Item properties become user->tag pairs through the movies the user liked;
    user properties become user->own-attribute pairs.
    """
    source = dataset.ratings if ratings is None else ratings
    indicators: Dict[str, List[Tuple[str, str]]] = {name: [] for name in EVENT_INDICATORS}
    for r in source:
        if r.rating >= 4:
            indicators["like"].append((r.user_id, r.movie_id))
        elif r.rating < 3:
            indicators["dislike"].append((r.user_id, r.movie_id))
        else:
            indicators["neutral"].append((r.user_id, r.movie_id))

    if item_properties:
        for name in ITEM_PROPERTY_INDICATORS:
            indicators[name] = []
        for uid, mid in indicators["like"]:
            movie = dataset.movies.get(mid)
            if movie is None:
                continue
            for g in sorted(movie.genres):
                indicators["genre"].append((uid, f"genre:{g}"))
            if movie.release_year is not None:
                indicators["year"].append((uid, f"year:{movie.release_year}"))
            for tok in title_tokens(movie.title):
                indicators["title"].append((uid, f"title:{tok}"))

    if user_properties:
        for name in USER_PROPERTY_INDICATORS:
            indicators[name] = []
        for uid in sorted({r.user_id for r in source}, key=id_sort_key):
            user = dataset.users.get(uid)
            if user is None:
                continue
            indicators["gender"].append((uid, f"gender:{user.gender}"))
            indicators["age"].append((uid, f"age:{user.age}"))
            indicators["occupation"].append((uid, f"occupation:{user.occupation}"))
            indicators["zip"].append((uid, f"zip:{user.zip_code}"))

    return EventLog(indicators=indicators, primary=PRIMARY_INDICATOR)


def export_event_log(log: EventLog, path: Path) -> Path:
    """Write the log as NDJSON: a ``{"primary": ...}`` header then one record per pair."""
    from . import atomic_write_text

    lines = [json.dumps({"primary": log.primary})]
    for name, pairs in log.indicators.items():
        for actor, target in pairs:
            lines.append(json.dumps({"indicator": name, "actor": actor, "target": target}))
    atomic_write_text(Path(path), "\n".join(lines) + "\n")
    return Path(path)


def load_event_log(path: Path) -> EventLog:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Event log not found: {path}")
    primary = PRIMARY_INDICATOR
    indicators: Dict[str, List[Tuple[str, str]]] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        rec = json.loads(line)
        if "primary" in rec:
            primary = str(rec["primary"])
            continue
        try:
            indicators.setdefault(str(rec["indicator"]), []).append((str(rec["actor"]), str(rec["target"])))
        except KeyError as e:
            raise ValueError(f"{path}:{lineno}: event record missing {e}") from e
    indicators.setdefault(primary, [])
    return EventLog(indicators=indicators, primary=primary)


# --- Feature schema and encoding ---

@dataclass(frozen=True)
class FieldSpec:
    name: str
    kind: FieldKind
    vocabulary: Tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.kind != "numeric" and (not self.vocabulary or self.vocabulary[0] != OOV_TOKEN):
            raise ValueError(f"Field '{self.name}': vocabulary must start with the OOV entry")

    @property
    def size(self) -> int:
        return len(self.vocabulary) if self.kind != "numeric" else 1

    def vocabulary_hash(self) -> str:
        h = hashlib.sha256("\n".join(self.vocabulary).encode("utf-8"))
        return h.hexdigest()


@dataclass(frozen=True)
class FeatureSchema:
    fields: Tuple[FieldSpec, ...]

    def __post_init__(self) -> None:
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise ValueError(f"Duplicate field names in schema: {names}")

    @property
    def names(self) -> List[str]:
        return [f.name for f in self.fields]

    def field(self, name: str) -> FieldSpec:
        for f in self.fields:
            if f.name == name:
                return f
        raise KeyError(name)

    def __len__(self) -> int:
        return len(self.fields)

    def descriptor(self) -> Dict[str, Any]:
        return {
            "fields": [
                {"name": f.name, "kind": f.kind, "size": f.size, "vocabulary_sha256": f.vocabulary_hash()}
                for f in self.fields
            ]
        }


@dataclass
class SampleTable:
    """Columnar encoded samples.

    categorical: field -> int64 (n,); multi: field -> (indices (n, q), mask (n, q));
    numeric: field -> float64 (n,). Multi-valued index rows are deduplicated and
    padded with index 0 under a zero mask.
    """

    schema: FeatureSchema
    labels: np.ndarray
    categorical: Dict[str, np.ndarray] = field(default_factory=dict)
    multi: Dict[str, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    numeric: Dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def take(self, idx: np.ndarray) -> "SampleTable":
        idx = np.asarray(idx, dtype=np.int64)
        return SampleTable(
            schema=self.schema,
            labels=self.labels[idx],
            categorical={k: v[idx] for k, v in self.categorical.items()},
            multi={k: (v[0][idx], v[1][idx]) for k, v in self.multi.items()},
            numeric={k: v[idx] for k, v in self.numeric.items()},
        )

    def sample(self, i: int) -> Dict[str, Any]:
        """Encoded field values of row ``i`` (category index, index set or scalar)."""
        out: Dict[str, Any] = {}
        for f in self.schema.fields:
            if f.kind == "categorical":
                out[f.name] = int(self.categorical[f.name][i])
            elif f.kind == "multi":
                ids, mask = self.multi[f.name]
                out[f.name] = tuple(int(v) for v, m in zip(ids[i], mask[i]) if m > 0)
            else:
                out[f.name] = float(self.numeric[f.name][i])
        return out

    @classmethod
    def from_encoded(
        cls,
        schema: FeatureSchema,
        rows: Sequence[Mapping[str, Any]],
        labels: Sequence[int],
    ) -> "SampleTable":
        """Build a table from already-encoded rows (index / index set / scalar per field)."""
        n = len(rows)
        table = cls(schema=schema, labels=np.asarray(labels, dtype=np.float64).reshape(n))
        for f in schema.fields:
            if f.kind == "categorical":
                table.categorical[f.name] = np.asarray([int(r[f.name]) for r in rows], dtype=np.int64).reshape(n)
            elif f.kind == "numeric":
                table.numeric[f.name] = np.asarray([float(r[f.name]) for r in rows], dtype=np.float64).reshape(n)
            else:
                sets = [sorted(set(int(v) for v in r[f.name])) for r in rows]
                if any(len(s) == 0 for s in sets):
                    raise ValueError(f"Field '{f.name}': multi-valued index sets must be non-empty")
                q = max((len(s) for s in sets), default=1)
                ids = np.zeros((n, q), dtype=np.int64)
                mask = np.zeros((n, q), dtype=np.float64)
                for i, s in enumerate(sets):
                    ids[i, : len(s)] = s
                    mask[i, : len(s)] = 1.0
                table.multi[f.name] = (ids, mask)
        return table


class FeatureEncoder:
    """Fits vocabularies and numeric ranges on training samples, then encodes any split.

    Test-time values outside the training vocabulary map to index 0; numeric
    fields are min-max normalised with the training range.
    """

    def __init__(self, include_timestamp: bool = True):
        self.include_timestamp = include_timestamp
        self.schema: Optional[FeatureSchema] = None
        self.numeric_range: Dict[str, Tuple[float, float]] = {}
        self._index: Dict[str, Dict[str, int]] = {}

    @property
    def field_kinds(self) -> List[Tuple[str, FieldKind]]:
        return [(n, k) for n, k in CTR_FIELDS if self.include_timestamp or n != "timestamp"]

    def fit(self, samples: Sequence[Sample]) -> "FeatureEncoder":
        if not samples:
            raise ValueError("Cannot fit a feature encoder on an empty sample list")
        specs: List[FieldSpec] = []
        for name, kind in self.field_kinds:
            if kind == "numeric":
                vals = np.asarray([float(s.values[name]) for s in samples], dtype=np.float64)
                self.numeric_range[name] = (float(vals.min()), float(vals.max()))
                specs.append(FieldSpec(name=name, kind=kind))
                continue
            seen: set[str] = set()
            for s in samples:
                v = s.values[name]
                if kind == "multi":
                    seen.update(str(x) for x in v)
                else:
                    seen.add(str(v))
            vocab = (OOV_TOKEN,) + tuple(sorted(seen, key=id_sort_key))
            self._index[name] = {tok: i for i, tok in enumerate(vocab)}
            specs.append(FieldSpec(name=name, kind=kind, vocabulary=vocab))
        self.schema = FeatureSchema(fields=tuple(specs))
        return self

    def normalize(self, name: str, value: float) -> float:
        lo, hi = self.numeric_range[name]
        if hi <= lo:
            return 0.0
        return (float(value) - lo) / (hi - lo)

    def encode_value(self, name: str, value: Any) -> Any:
        if self.schema is None:
            raise ValueError("FeatureEncoder.fit must be called before encoding")
        kind = self.schema.field(name).kind
        if kind == "numeric":
            return self.normalize(name, value)
        index = self._index[name]
        if kind == "multi":
            ids = {index.get(str(v), 0) for v in value}
            return tuple(sorted(ids)) or (0,)
        return index.get(str(value), 0)

    def transform(self, samples: Sequence[Sample]) -> SampleTable:
        if self.schema is None:
            raise ValueError("FeatureEncoder.fit must be called before transform")
        rows = [{f.name: self.encode_value(f.name, s.values[f.name]) for f in self.schema.fields} for s in samples]
        return SampleTable.from_encoded(self.schema, rows, [s.label for s in samples])
