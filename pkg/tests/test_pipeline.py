import json

import numpy as np
import pandas as pd
import pytest

from fedrec_core.cco import RecommendationList
from fedrec_core.config import ExperimentConfig
from fedrec_core.ingest import split_leave_one_out
from fedrec_core.pipeline import (
    REFERENCE_BASELINES,
    load_report,
    merge_reports,
    prepare_ctr_data,
    rerank_candidates,
    run_cco,
    run_ctr_central,
    run_experiment,
    selected_indicators,
    stratified_subsample,
)


def _config(config_doc, **overrides) -> ExperimentConfig:
    return ExperimentConfig.model_validate(config_doc(**overrides))


def _write_stream(path, seconds=100.0):
    t = np.arange(0.0, seconds, 2.0)
    x = np.random.default_rng(0).normal(size=(t.size, 6))
    frame = pd.DataFrame(x, columns=["acc_x", "acc_y", "acc_z", "gyro_x", "gyro_y", "gyro_z"])
    frame.insert(0, "timestamp", t)
    frame.to_csv(path, index=False)
    return path


class TestStageOne:
    @pytest.mark.parametrize("model", ["poprec", "cco"])
    def test_leave_one_out_metrics(self, config_doc, dataset, model):
        metrics, artifacts = run_cco(_config(config_doc, model=model), dataset)
        assert 0.0 <= metrics["ndcg@10"] <= metrics["hr@10"] <= 1.0
        assert metrics["users"] == 24
        assert "recommender" in artifacts

    def test_indicator_selection(self, config_doc):
        cfg = _config(config_doc, indicators={"events": False})
        assert selected_indicators(cfg) == ["like"]
        cfg = _config(config_doc, indicators={"item_properties": True, "user_properties": True})
        names = selected_indicators(cfg)
        assert names[0] == "like" and "genre" in names and "gender" in names

    def test_cco_recommends_unseen(self, config_doc, dataset):
        _, artifacts = run_cco(_config(config_doc), dataset)
        rec = artifacts["recommender"]
        top = rec.recommend_top_k("1", 5)
        assert len(top) <= 5
        train, _ = split_leave_one_out(dataset)
        seen = {r.movie_id for r in train if r.user_id == "1" and r.rating > 3}
        assert not set(top.item_ids()) & seen


class TestStageTwo:
    def test_subsample_keeps_label_ratio(self, samples):
        kept = stratified_subsample(samples, 0.5, seed=0)
        pos = sum(s.label for s in samples)
        assert sum(s.label for s in kept) == round(0.5 * pos)
        assert len(kept) == round(0.5 * pos) + round(0.5 * (len(samples) - pos))

    def test_prepare_splits_are_disjoint(self, config_doc, dataset, samples):
        data = prepare_ctr_data(_config(config_doc, stage="ctr-central", model="lr-raw"), dataset)
        assert len(data.train) + len(data.val) + len(data.test) == len(samples)
        assert len(data.train_samples) == len(data.train)

    @pytest.mark.parametrize("model", ["lr-raw", "lr-emb", "autoint"])
    def test_central_training(self, config_doc, dataset, model):
        cfg = _config(
            config_doc,
            stage="ctr-central",
            model=model,
            training={"epochs": 2, "batch_size": 32},
            autoint={"embedding_dim": 4, "attention_size": 4, "hidden_units": 8, "attention_layers": 1},
        )
        metrics, artifacts = run_ctr_central(cfg, dataset)
        assert metrics["logloss"] > 0
        assert metrics["train_loss"] == artifacts["trace"][-1]
        assert any(k.startswith("params_") for k in metrics)

    def test_rerank_orders_by_probability(self, config_doc, dataset):
        cfg = _config(config_doc, stage="ctr-central", model="lr-emb", training={"epochs": 3, "batch_size": 16})
        _, artifacts = run_ctr_central(cfg, dataset)
        model, encoder = artifacts["model"], artifacts["encoder"]
        candidates = RecommendationList(items=[("3", 9.0), ("999", 8.0), ("7", 7.0), ("12", 1.0)])
        out = rerank_candidates(candidates, "2", dataset, model, encoder)
        assert sorted(out.item_ids()) == ["12", "3", "7"]
        scores = [s for _, s in out]
        assert scores == sorted(scores, reverse=True)
        assert all(0.0 < s < 1.0 for s in scores)

    def test_rerank_unknown_user(self, config_doc, dataset):
        cfg = _config(config_doc, stage="ctr-central", model="lr-raw")
        _, artifacts = run_ctr_central(cfg, dataset)
        with pytest.raises(ValueError):
            rerank_candidates(RecommendationList(items=[("3", 1.0)]), "nobody", dataset, artifacts["model"], artifacts["encoder"])


class TestRunExperiment:
    def test_cco_run_directory(self, config_doc):
        outcome = run_experiment(_config(config_doc))
        for name in ("config.json", "report.json", "metrics.csv"):
            assert (outcome.run_dir / name).is_file()
        report = load_report(outcome.run_dir)
        assert report["config_hash"] == outcome.run_dir.name
        assert report["stage"] == "cco" and report["seed"] == 7
        assert set(report["metrics"]) >= {"hr@10", "ndcg@10", "indicators"}

    def test_same_config_same_report(self, config_doc):
        a = run_experiment(_config(config_doc))
        b = run_experiment(_config(config_doc))
        assert a.report["metrics"] == b.report["metrics"]

    @pytest.mark.parametrize("partition", ["iid", "cluster", "dirichlet"])
    def test_federated_run(self, config_doc, partition):
        cfg = _config(
            config_doc,
            stage="ctr-federated",
            model="lr-emb",
            training={"batch_size": 32},
            rounds={"num_clients": 2, "rounds": 2, "local_batch": 32, "partition": partition, "svd_rank": 4},
        )
        outcome = run_experiment(cfg)
        metrics = outcome.report["metrics"]
        assert metrics["rounds"] == 2
        assert metrics["plan"] == "embedding,interaction,output"
        assert (outcome.run_dir / "history.csv").is_file()
        assert (outcome.run_dir / "model" / "params.json").is_file()
        history = pd.read_csv(outcome.run_dir / "history.csv")
        assert history["round"].tolist() == [1, 2]

    def test_federated_zero_rounds(self, config_doc):
        cfg = _config(config_doc, stage="ctr-federated", model="lr-raw", rounds={"num_clients": 2, "rounds": 0})
        metrics = run_experiment(cfg).report["metrics"]
        assert metrics["rounds"] == 0
        assert metrics["bytes_per_round"] == 0
        assert metrics["logloss"] == pytest.approx(np.log(2))

    def test_local_only_plan_keeps_client_state(self, config_doc):
        cfg = _config(
            config_doc,
            stage="ctr-federated",
            model="lr-emb",
            rounds={"num_clients": 2, "rounds": 1, "federation_plan": ["output"]},
        )
        outcome = run_experiment(cfg)
        assert sorted(p.name for p in (outcome.run_dir / "clients").glob("*.json")) == [
            "client-00.json",
            "client-01.json",
        ]

    def test_features_run(self, config_doc, tmp_path):
        sensor = _write_stream(tmp_path / "stream.csv")
        doc = config_doc(stage="features", model=None)
        doc["dataset"]["sensor"] = str(sensor)
        outcome = run_experiment(ExperimentConfig.model_validate(doc))
        assert outcome.report["metrics"]["features"] == 112
        frame = pd.read_csv(outcome.run_dir / "features.csv")
        assert len(frame) == outcome.report["metrics"]["sessions"] > 0


class TestReports:
    def test_merge_with_baselines(self, config_doc):
        a = run_experiment(_config(config_doc, model="poprec"))
        b = run_experiment(_config(config_doc, model="cco"))
        frame = merge_reports([a.run_dir, b.run_dir / "report.json"], with_baselines=True)
        assert len(frame) == 2 + len(REFERENCE_BASELINES)
        assert frame["reference"].tolist() == [False, False, True, True, True]
        ncf = frame[frame["experiment"] == "NCF"].iloc[0]
        assert ncf["hr@10"] == pytest.approx(0.730)

    def test_merge_refuses_mixed_datasets(self, config_doc):
        a = run_experiment(_config(config_doc, model="poprec"))
        b = run_experiment(_config(config_doc, model="cco"))
        path = b.run_dir / "report.json"
        doc = json.loads(path.read_text())
        doc["dataset_hash"] = "0" * 64
        path.write_text(json.dumps(doc))
        with pytest.raises(ValueError):
            merge_reports([a.run_dir, b.run_dir])

    def test_missing_report(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_report(tmp_path)

    def test_nothing_to_merge(self):
        with pytest.raises(ValueError):
            merge_reports([])
