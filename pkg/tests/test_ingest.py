from pathlib import Path

import numpy as np
import pytest

from fedrec_core.ingest import (
    OOV_TOKEN,
    Dataset,
    FeatureEncoder,
    MovieInfo,
    RatingRecord,
    Sample,
    UserProfile,
    binarize_ratings,
    build_event_log,
    export_event_log,
    load_event_log,
    parse_movielens,
    parse_movielens_dir,
    split_leave_one_out,
    split_train_val_test,
    title_tokens,
)


def _write(root: Path, ratings: str, users: str, movies: str) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    (root / "ratings.dat").write_text(ratings, encoding="ISO-8859-1")
    (root / "users.dat").write_text(users, encoding="ISO-8859-1")
    (root / "movies.dat").write_text(movies, encoding="ISO-8859-1")
    return root


def _toy_dataset(ratings):
    users = {u: UserProfile("F", "25", "4", "100") for u in {r.user_id for r in ratings}}
    movies = {m: MovieInfo(f"Film {m} (1999)", 1999, frozenset({"Drama"})) for m in {r.movie_id for r in ratings}}
    return Dataset(ratings=list(ratings), users=users, movies=movies)


class TestParse:
    def test_three_line_fixture(self, tmp_path):
        root = _write(
            tmp_path / "ml",
            "1::10::5::978300760\n1::20::3::978302109\n2::10::1::978301968\n",
            "1::F::1::10::48067\n2::M::56::16::70072\n",
            "10::Toy Story (1995)::Animation|Children's|Comedy\n20::Heat (1995)::Action|Crime|Thriller\n",
        )
        ds = parse_movielens_dir(root)
        assert ds.ratings == [
            RatingRecord("1", "10", 5, 978300760),
            RatingRecord("1", "20", 3, 978302109),
            RatingRecord("2", "10", 1, 978301968),
        ]
        assert ds.users["1"] == UserProfile(gender="F", age="1", occupation="10", zip_code="480")
        toy = ds.movies["10"]
        assert toy.release_year == 1995
        assert toy.genres == frozenset({"Animation", "Children's", "Comedy"})
        assert ds.malformed == 0 and ds.dropped == 0

    def test_empty_files(self, tmp_path):
        ds = parse_movielens_dir(_write(tmp_path / "empty", "", "", ""))
        assert ds.ratings == []
        assert ds.summary()["ratings"] == 0

    def test_missing_file_raises(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            parse_movielens(tmp_path / "r.dat", tmp_path / "u.dat", tmp_path / "m.dat")

    def test_malformed_and_unresolved_lines_are_counted(self, tmp_path):
        root = _write(
            tmp_path / "ml",
            "1::10::5::978300760\n1::10\n1::10::9::978300760\n3::10::4::978300760\n",
            "1::F::1::10::48067\n",
            "10::Toy Story (1995)::Comedy\n",
        )
        ds = parse_movielens_dir(root)
        assert len(ds.ratings) == 1
        assert ds.malformed == 2
        assert ds.dropped == 1

    def test_synthetic_fixture_parses(self, dataset):
        summary = dataset.summary()
        assert summary["users"] == 24
        assert summary["ratings"] == 24 * 9


class TestBinarize:
    def test_thresholds(self):
        ds = _toy_dataset([RatingRecord("1", "1", 4, 1), RatingRecord("1", "2", 3, 2), RatingRecord("1", "3", 2, 3)])
        out = binarize_ratings(ds)
        assert [s.label for s in out] == [1, 0]
        assert [s.values["movie_id"] for s in out] == ["1", "3"]
        assert out[0].values["genres"] == ("Drama",)
        assert out[0].values["timestamp"] == 1.0


class TestSplits:
    def test_train_val_test_sizes(self):
        train, val, test = split_train_val_test(list(range(10)), (0.8, 0.1, 0.1), seed=3)
        assert (len(train), len(val), len(test)) == (8, 1, 1)
        assert sorted(train + val + test) == list(range(10))

    def test_deterministic(self):
        a = split_train_val_test(list(range(50)), seed=11)
        b = split_train_val_test(list(range(50)), seed=11)
        assert a == b

    def test_bad_ratios(self):
        with pytest.raises(ValueError):
            split_train_val_test(list(range(10)), (0.5, 0.4, 0.4))

    def test_leave_one_out_latest(self):
        recs = [RatingRecord("1", "a", 4, 5), RatingRecord("1", "b", 4, 9), RatingRecord("1", "c", 4, 2)]
        train, held = split_leave_one_out(_toy_dataset(recs))
        assert held == {"1": "b"}
        assert {r.movie_id for r in train} == {"a", "c"}

    def test_leave_one_out_tie_takes_larger_id(self):
        recs = [RatingRecord("1", "7", 4, 9), RatingRecord("1", "12", 4, 9), RatingRecord("1", "3", 4, 1)]
        _, held = split_leave_one_out(_toy_dataset(recs))
        assert held == {"1": "12"}

    def test_single_interaction_user_not_held_out(self):
        recs = [RatingRecord("1", "a", 4, 5), RatingRecord("2", "a", 4, 5), RatingRecord("2", "b", 4, 6)]
        train, held = split_leave_one_out(_toy_dataset(recs))
        assert held == {"2": "b"}
        assert len(train) == 2

    def test_one_item_per_user(self, dataset):
        _, held = split_leave_one_out(dataset)
        assert len(held) == 24


class TestEventLog:
    def test_event_mapping(self):
        ds = _toy_dataset([RatingRecord("1", "a", 5, 1), RatingRecord("1", "b", 3, 2), RatingRecord("2", "a", 1, 3)])
        log = build_event_log(ds)
        assert log.pairs("like") == [("1", "a")]
        assert log.pairs("neutral") == [("1", "b")]
        assert log.pairs("dislike") == [("2", "a")]

    def test_only_dislikes_gives_empty_primary(self):
        ds = _toy_dataset([RatingRecord("1", "a", 2, 1), RatingRecord("2", "b", 2, 1)])
        log = build_event_log(ds)
        assert log.pairs("like") == []
        assert len(log.pairs("dislike")) == 2

    def test_properties(self):
        ds = _toy_dataset([RatingRecord("1", "a", 5, 1)])
        log = build_event_log(ds, item_properties=True, user_properties=True)
        assert log.pairs("genre") == [("1", "genre:Drama")]
        assert log.pairs("year") == [("1", "year:1999")]
        assert ("1", "title:film") in log.pairs("title")
        assert log.pairs("gender") == [("1", "gender:F")]
        assert log.pairs("zip") == [("1", "zip:100")]

    def test_title_tokens(self):
        assert title_tokens("The Matrix (1999)") == ["the", "matrix"]

    def test_export_roundtrip_keeps_primary(self, dataset, tmp_path):
        log = build_event_log(dataset, item_properties=True)
        path = export_event_log(log, tmp_path / "events.ndjson")
        back = load_event_log(path)
        assert back.primary == "like"
        assert back.indicators == {k: v for k, v in log.indicators.items() if v}

    def test_load_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_event_log(tmp_path / "nope.ndjson")


class TestFeatureEncoder:
    def test_vocabulary_starts_with_oov(self, encoder):
        for f in encoder.schema.fields:
            if f.kind != "numeric":
                assert f.vocabulary[0] == OOV_TOKEN

    def test_timestamp_normalised_on_train(self, encoder, table):
        ts = table.numeric["timestamp"]
        assert ts.min() == pytest.approx(0.0)
        assert ts.max() == pytest.approx(1.0)

    def test_unseen_values_map_to_oov(self, encoder, samples):
        s = samples[0]
        novel = Sample(values={**s.values, "user_id": "99999", "genres": ("Western",)}, label=1)
        row = encoder.transform([novel]).sample(0)
        assert row["user_id"] == 0
        assert row["genres"] == (0,)

    def test_multi_valued_rows_are_masked(self, table):
        ids, mask = table.multi["genres"]
        assert ids.shape == mask.shape
        assert np.all(mask.sum(axis=1) >= 1)
        assert np.all(ids[mask == 0] == 0)

    def test_without_timestamp(self, samples):
        enc = FeatureEncoder(include_timestamp=False).fit(samples)
        assert "timestamp" not in enc.schema.names
        assert len(enc.schema) == 7

    def test_fit_on_empty(self):
        with pytest.raises(ValueError):
            FeatureEncoder().fit([])
