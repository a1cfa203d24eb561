"""Shared fixtures: a synthetic MovieLens-format dataset written to tmp_path."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, List

import numpy as np
import pytest

from fedrec_core.ingest import FeatureEncoder, Sample, binarize_ratings, parse_movielens_dir

GENRES = ["Action", "Comedy", "Drama", "Romance", "Thriller", "Animation"]
OCCUPATIONS = ["0", "4", "7", "12", "17"]
AGES = ["1", "18", "25", "35", "45"]


def write_movielens(root: Path, n_users: int = 24, n_movies: int = 18, per_user: int = 9, seed: int = 0) -> Path:
    """Write ratings.dat / users.dat / movies.dat in the ``::`` format."""
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    users = []
    for u in range(1, n_users + 1):
        gender = "F" if u % 2 else "M"
        users.append(f"{u}::{gender}::{AGES[u % len(AGES)]}::{OCCUPATIONS[u % len(OCCUPATIONS)]}::{10000 + 37 * u}")
    movies = []
    for m in range(1, n_movies + 1):
        g = "|".join(sorted({GENRES[m % len(GENRES)], GENRES[(m * 7) % len(GENRES)]}))
        movies.append(f"{m}::Movie Number {m} ({1980 + m % 15})::{g}")
    ratings = []
    for u in range(1, n_users + 1):
        # Two taste groups so co-occurrence has structure to find.
        pool = np.arange(1, n_movies + 1)
        liked = pool[pool % 2 == u % 2]
        picks = rng.choice(pool, size=per_user, replace=False)
        for j, m in enumerate(sorted(picks)):
            base = 4 if m in liked else 2
            rating = int(np.clip(base + rng.integers(-1, 2), 1, 5))
            ratings.append(f"{u}::{m}::{rating}::{978300000 + 100 * u + j}")
    (root / "users.dat").write_text("\n".join(users) + "\n", encoding="ISO-8859-1")
    (root / "movies.dat").write_text("\n".join(movies) + "\n", encoding="ISO-8859-1")
    (root / "ratings.dat").write_text("\n".join(ratings) + "\n", encoding="ISO-8859-1")
    return root


@pytest.fixture
def movielens_dir(tmp_path: Path) -> Path:
    return write_movielens(tmp_path / "ml-1m")


@pytest.fixture
def dataset(movielens_dir: Path):
    return parse_movielens_dir(movielens_dir)


@pytest.fixture
def samples(dataset) -> List[Sample]:
    return binarize_ratings(dataset)


@pytest.fixture
def encoder(samples) -> FeatureEncoder:
    return FeatureEncoder(include_timestamp=True).fit(samples)


@pytest.fixture
def table(encoder, samples):
    return encoder.transform(samples)


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    monkeypatch.delenv("FEDREC_DEBUG", raising=False)
    monkeypatch.delenv("FEDREC_DATA_ROOT", raising=False)
    logging.getLogger("fedrec_core").setLevel(logging.INFO)


@pytest.fixture
def config_doc(movielens_dir: Path, tmp_path: Path):
    """Factory for experiment documents over the synthetic dataset."""

    def _make(**overrides) -> Dict:
        doc = {
            "name": "toy",
            "stage": "cco",
            "model": "cco",
            "seed": 7,
            "dataset": {"root": str(movielens_dir)},
            "output_dir": str(tmp_path / "runs"),
        }
        doc.update(overrides)
        return doc

    return _make
