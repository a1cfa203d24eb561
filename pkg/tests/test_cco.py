import math

import numpy as np
import pytest

from fedrec_core.cco import (
    LLR_ZERO_TOL,
    CCORecommender,
    PopularityRecommender,
    RecommendationList,
    SimilarityMatrix,
    build_interaction_matrix,
    cross_occurrence,
    interaction_matrix_from_pairs,
    llr,
    llr_array,
    load_similarity,
    pop_rec,
    save_similarity,
    score_user,
)
from fedrec_core.ingest import EventLog, build_event_log, id_sort_key


def llr_oracle(k11, k12, k21, k22):
    """G^2 from the full and independence multinomial log-likelihoods."""
    n = k11 + k12 + k21 + k22
    cells = [
        (k11, k11 + k12, k11 + k21),
        (k12, k11 + k12, k12 + k22),
        (k21, k21 + k22, k11 + k21),
        (k22, k21 + k22, k12 + k22),
    ]
    ll_full = sum(k * math.log(k / n) for k, _, _ in cells if k > 0)
    ll_null = sum(k * math.log((r / n) * (c / n)) for k, r, c in cells if k > 0)
    return max(2.0 * (ll_full - ll_null), 0.0)


def all_pairs_oracle(primary_pairs, secondary_pairs, threshold):
    """Every (a, b) table counted from actor sets; full lists, best first."""
    prim, sec = {}, {}
    for u, t in primary_pairs:
        prim.setdefault(t, set()).add(u)
    for u, t in secondary_pairs:
        sec.setdefault(t, set()).add(u)
    universe = set().union(*prim.values(), *sec.values())
    out = {}
    for b in prim:
        corr = []
        for a in sec:
            if a == b:
                continue
            k11 = len(sec[a] & prim[b])
            k12 = len(sec[a] - prim[b])
            k21 = len(prim[b] - sec[a])
            score = llr_oracle(k11, k12, k21, len(universe) - k11 - k12 - k21)
            if score > max(threshold, LLR_ZERO_TOL):
                corr.append((a, score))
        if corr:
            out[b] = sorted(corr, key=lambda t: (-round(t[1], 9), id_sort_key(t[0])))
    return out


def assert_matches_oracle(sim, want, max_correlators):
    assert set(sim.correlators) == set(want)
    for b, full in want.items():
        got = sim.get(b)
        assert len(got) == min(max_correlators, len(full))
        np.testing.assert_allclose([s for _, s in got], [s for _, s in full[: len(got)]], atol=1e-9, rtol=0)
        for a, s in got:
            tied = {x for x, t in full if abs(t - s) <= 1e-9}
            assert a in tied
        assert len({a for a, _ in got}) == len(got)


def _log(like, **secondary):
    return EventLog(indicators={"like": list(like), **{k: list(v) for k, v in secondary.items()}})


class TestInteractionMatrix:
    def test_three_pairs(self):
        m = interaction_matrix_from_pairs([("u1", "a"), ("u1", "b"), ("u2", "a")])
        assert m.nnz == 3
        assert m.shape == (2, 2)
        assert m.row_targets("u1") == {"a", "b"}

    def test_duplicates_collapse(self):
        m = interaction_matrix_from_pairs([("u1", "a"), ("u1", "a")])
        assert m.nnz == 1

    def test_reindex_keeps_entries(self):
        m = interaction_matrix_from_pairs([("2", "a"), ("1", "b")])
        r = m.reindex_rows(["1", "2", "3"])
        assert r.shape == (3, 2)
        assert r.row_targets("2") == {"a"}
        assert r.row_targets("3") == set()


class TestLLR:
    def test_independence_is_zero(self):
        assert llr(25, 25, 25, 25) == pytest.approx(0.0, abs=1e-12)

    def test_perfect_association(self):
        assert llr(10, 0, 0, 10) == pytest.approx(40 * math.log(2), abs=1e-9)

    def test_matches_oracle_on_random_tables(self):
        rng = np.random.default_rng(0)
        tables = rng.integers(0, 51, size=(1000, 4)).astype(float)
        tables[tables.sum(axis=1) == 0, 0] = 1.0
        got = llr_array(*tables.T)
        want = np.array([llr_oracle(*t) for t in tables])
        np.testing.assert_allclose(got, want, atol=1e-9, rtol=0)

    def test_scaled_independence(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            a, b, c = rng.integers(1, 20, size=3)
            assert llr(a * c, a * b * c, c, b * c) == pytest.approx(0.0, abs=1e-9)

    def test_negative_counts_rejected(self):
        with pytest.raises(ValueError):
            llr(-1, 2, 3, 4)

    def test_empty_table_rejected(self):
        with pytest.raises(ValueError):
            llr(0, 0, 0, 0)


class TestCrossOccurrence:
    def test_co_liked_pair_retained(self):
        like = [("u1", "1"), ("u1", "2"), ("u2", "1"), ("u2", "2"), ("u3", "3")]
        p = interaction_matrix_from_pairs(like)
        sim = cross_occurrence(p, p, indicator="like")
        assert sim.get("2")[0] == ("1", pytest.approx(llr_oracle(2, 0, 0, 1)))
        assert sim.get("1")[0] == ("2", pytest.approx(llr_oracle(2, 0, 0, 1)))
        # Never liked alongside 1 or 2, which is itself a correlation.
        assert dict(sim.get("2"))["3"] == pytest.approx(llr_oracle(0, 1, 2, 0))
        assert dict(sim.get("2"))["3"] <= dict(sim.get("2"))["1"] + 1e-12
        assert [a for a, _ in sim.get("3")] == ["1", "2"]

    @pytest.mark.parametrize("seed", range(25))
    def test_matches_all_pairs_oracle(self, seed):
        rng = np.random.default_rng(seed)
        actors = [f"u{i}" for i in range(int(rng.integers(1, 6)))]
        items = [str(i) for i in range(1, int(rng.integers(2, 6)))]
        tags = items + ["genre:a"]
        like = [(u, i) for u in actors for i in items if rng.random() < 0.5] or [(actors[0], items[0])]
        other = [(u, t) for u in actors for t in tags if rng.random() < 0.4] or [(actors[0], tags[-1])]
        max_correlators = int(rng.integers(1, 4))
        p = interaction_matrix_from_pairs(like)
        s = interaction_matrix_from_pairs(other)
        if not set(p.row_ids) & set(s.row_ids):
            with pytest.raises(ValueError):
                cross_occurrence(p, s)
            return
        sim = cross_occurrence(p, s, max_correlators=max_correlators, block_size=2)
        assert_matches_oracle(sim, all_pairs_oracle(like, other, 0.0), max_correlators)

    def test_self_cross_occurrence_matches_oracle(self, dataset):
        like = build_event_log(dataset).pairs("like")
        p = interaction_matrix_from_pairs(like)
        sim = cross_occurrence(p, p, max_correlators=4, block_size=5)
        assert_matches_oracle(sim, all_pairs_oracle(like, like, 0.0), 4)

    def test_self_pairs_excluded(self):
        like = [("u1", "1"), ("u1", "2"), ("u2", "1")]
        p = interaction_matrix_from_pairs(like)
        sim = cross_occurrence(p, p)
        for b, corr in sim.correlators.items():
            assert b not in [a for a, _ in corr]

    def test_infinite_threshold_is_empty(self):
        p = interaction_matrix_from_pairs([("u1", "1"), ("u1", "2"), ("u2", "1")])
        assert len(cross_occurrence(p, p, llr_threshold=math.inf)) == 0

    def test_single_actor_with_threshold(self):
        p = interaction_matrix_from_pairs([("u1", "1"), ("u1", "2")])
        sim = cross_occurrence(p, p, llr_threshold=1.0)
        assert sim.pair_count == 0

    def test_top_k_truncation_and_ordering(self, dataset):
        log = build_event_log(dataset)
        p = build_interaction_matrix(log, "like")
        sim = cross_occurrence(p, p, max_correlators=2)
        for corr in sim.correlators.values():
            assert len(corr) <= 2
            scores = np.array([s for _, s in corr])
            assert (np.diff(scores) <= 1e-9).all()

    def test_disjoint_actors_rejected(self):
        p = interaction_matrix_from_pairs([("u1", "1")])
        s = interaction_matrix_from_pairs([("u9", "genre:x")])
        with pytest.raises(ValueError):
            cross_occurrence(p, s)

    def test_scores_match_hand_counts(self):
        like = [("u1", "1"), ("u1", "2"), ("u2", "1"), ("u2", "2"), ("u3", "1"), ("u4", "3")]
        p = interaction_matrix_from_pairs(like)
        sim = cross_occurrence(p, p)
        # item 2 <- item 1: k11=2, k12=1, k21=0, k22=1 over 4 actors
        assert dict(sim.get("2"))["1"] == pytest.approx(llr_oracle(2, 1, 0, 1), abs=1e-9)


class TestScoring:
    def test_empty_history(self):
        assert score_user({}, {"like": SimilarityMatrix("like", {"b": [("a", 5.0)]})}) == {}

    def test_single_term(self):
        sim = {"like": SimilarityMatrix("like", {"b": [("a", 5.0)]})}
        assert score_user({"like": {"a"}}, sim) == {"b": 5.0}

    def test_indicators_add(self):
        sim = {
            "like": SimilarityMatrix("like", {"b": [("a", 3.0)]}),
            "genre": SimilarityMatrix("genre", {"b": [("genre:x", 4.0)]}),
        }
        assert score_user({"like": {"a"}, "genre": {"genre:x"}}, sim) == {"b": 7.0}

    def test_additive_over_disjoint_histories(self, dataset):
        rec = CCORecommender().fit(build_event_log(dataset))
        rng = np.random.default_rng(0)
        for user in ["1", "2", "5", "8"]:
            history = rec.user_histories(user)
            left, right = {}, {}
            for name, targets in history.items():
                ordered = sorted(targets)
                mask = rng.random(len(ordered)) < 0.5
                left[name] = {t for t, m in zip(ordered, mask) if m}
                right[name] = {t for t, m in zip(ordered, mask) if not m}
            whole = score_user(history, rec.similarity)
            a = score_user(left, rec.similarity)
            b = score_user(right, rec.similarity)
            assert set(whole) == set(a) | set(b)
            for item, s in whole.items():
                assert s == pytest.approx(a.get(item, 0.0) + b.get(item, 0.0), abs=1e-9)

    def test_top_k(self):
        assert RecommendationList.from_scores({"b": 7.0, "c": 2.0}, 1).item_ids() == ["b"]
        assert RecommendationList.from_scores({"b": 7.0, "c": 2.0}, 5).item_ids() == ["b", "c"]

    def test_ties_by_ascending_id(self):
        assert RecommendationList.from_scores({"10": 1.0, "9": 1.0, "2": 1.0}, 3).item_ids() == ["2", "9", "10"]


class TestRecommender:
    def test_recommends_unseen_items(self, dataset):
        rec = CCORecommender().fit(build_event_log(dataset))
        user = "1"
        seen = rec.matrices["like"].row_targets(user)
        out = rec.recommend_top_k(user, 5)
        assert len(out) <= 5
        assert not set(out.item_ids()) & seen

    def test_unknown_user_is_cold_start(self, dataset):
        rec = CCORecommender().fit(build_event_log(dataset))
        assert len(rec.recommend_top_k("nobody", 5)) == 0

    def test_k_must_be_positive(self, dataset):
        rec = CCORecommender().fit(build_event_log(dataset))
        with pytest.raises(ValueError):
            rec.recommend_top_k("1", 0)

    def test_property_indicators_fit(self, dataset):
        log = build_event_log(dataset, item_properties=True, user_properties=True)
        rec = CCORecommender().fit(log)
        assert set(rec.similarity) == set(log.names())

    def test_similar_items_excludes_query(self, dataset):
        rec = CCORecommender().fit(build_event_log(dataset))
        out = rec.similar_items("2", 5)
        assert "2" not in out.item_ids()
        assert len(rec.similar_items("no-such-item", 5)) == 0

    def test_answer_query(self, dataset):
        rec = CCORecommender().fit(build_event_log(dataset))
        answer = rec.answer_query({"user": "3", "k": 2})
        assert answer["user"] == "3"
        assert len(answer["recommendations"]) <= 2
        assert all(set(r) == {"item", "score"} for r in answer["recommendations"])

    def test_similarity_file_roundtrip(self, dataset, tmp_path):
        rec = CCORecommender().fit(build_event_log(dataset, item_properties=True))
        path = save_similarity(rec.similarity, tmp_path / "sim.jsonl")
        back = load_similarity(path)
        for name, sim in rec.similarity.items():
            if len(sim):
                assert back[name].correlators == sim.correlators


class TestPopularity:
    def test_count_sort(self):
        log = _log([("u1", "a"), ("u2", "a"), ("u3", "a"), ("u1", "b")])
        assert pop_rec(log, 2).item_ids() == ["a", "b"]

    def test_k_zero(self):
        assert len(pop_rec(_log([("u1", "a")]), 0)) == 0

    def test_empty_primary(self):
        with pytest.raises(ValueError):
            pop_rec(_log([]), 3)

    def test_excludes_seen(self):
        rec = PopularityRecommender().fit(_log([("u1", "a"), ("u2", "a"), ("u2", "b")]))
        assert rec.recommend_top_k("u1", 3).item_ids() == ["b"]
        np.testing.assert_array_equal(rec.score_items("u1", ["a", "b", "z"]), [2.0, 1.0, 0.0])
