"""Experiment runners behind the ``fedrec`` CLI, report files and the two-stage rerank."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from . import atomic_write_text, write_run_json
from .cco import CCORecommender, PopularityRecommender, RecommendationList, interaction_matrix_from_pairs
from .config import ExperimentConfig, config_hash, dataset_hash, run_directory
from .federation import (
    RoundRecord,
    evaluate_clients,
    partition_cluster,
    partition_dirichlet,
    partition_iid,
    run_rounds,
)
from .ingest import (
    EVENT_INDICATORS,
    ITEM_PROPERTY_INDICATORS,
    PRIMARY_INDICATOR,
    USER_PROPERTY_INDICATORS,
    Dataset,
    FeatureEncoder,
    Sample,
    binarize_ratings,
    build_event_log,
    id_sort_key,
    parse_movielens,
    split_leave_one_out,
    split_train_val_test,
)
from .metrics import auc, logloss, loo_ranking_eval
from .models import CTRModel, build_model, save_model, train_epochs
from .sensor import embed_stream, load_sensor_csv
from .tensor import build_optimizer

logger = logging.getLogger(__name__)

# Published leave-one-out results on MovieLens 1M (HR@10, NDCG@10), shown for comparison only.
REFERENCE_BASELINES: Tuple[Tuple[str, float, float], ...] = (
    ("ItemKNN", 0.552, 0.3470),
    ("BPR", 0.680, 0.4200),
    ("NCF", 0.730, 0.4470),
)


@dataclass
class RunOutcome:
    config: ExperimentConfig
    run_dir: Path
    report: Dict[str, Any]
    artifacts: Dict[str, Any] = field(default_factory=dict)


def load_dataset(config: ExperimentConfig) -> Dataset:
    ratings, users, movies = config.dataset.movielens_files()
    return parse_movielens(ratings, users, movies)


def selected_indicators(config: ExperimentConfig) -> List[str]:
    sel = config.indicators
    names = list(EVENT_INDICATORS) if sel.events else [PRIMARY_INDICATOR]
    if sel.item_properties:
        names += list(ITEM_PROPERTY_INDICATORS)
    if sel.user_properties:
        names += list(USER_PROPERTY_INDICATORS)
    return names


# --- Stage 1 ---

def fit_cco(config: ExperimentConfig, dataset: Dataset, ratings=None) -> CCORecommender:
    log = build_event_log(
        dataset,
        ratings,
        item_properties=config.indicators.item_properties,
        user_properties=config.indicators.user_properties,
    )
    rec = CCORecommender(
        llr_threshold=config.indicators.llr_threshold,
        max_correlators=config.indicators.max_correlators,
    )
    return rec.fit(log, selected_indicators(config))


def run_cco(config: ExperimentConfig, dataset: Dataset) -> Tuple[Dict[str, Any], Dict[str, Any]]:
    """Leave-one-out HR@k / NDCG@k for PopRec or CCO."""
    train, held_out = split_leave_one_out(dataset)
    seen: Dict[str, set] = {}
    for r in train:
        seen.setdefault(r.user_id, set()).add(r.movie_id)
    catalog = sorted(dataset.movies, key=id_sort_key)
    if config.model == "poprec":
        log = build_event_log(dataset, train)
        recommender: Any = PopularityRecommender().fit(log)
    else:
        recommender = fit_cco(config, dataset, train)
    result = loo_ranking_eval(
        recommender.score_items,
        held_out,
        {u: sorted(s) for u, s in seen.items()},
        catalog,
        negatives_per_user=config.metrics.negatives_per_user,
        k=config.metrics.k,
        seed=config.seed,
    )
    metrics = result.as_dict()
    metrics["indicators"] = ",".join(selected_indicators(config)) if config.model == "cco" else PRIMARY_INDICATOR
    return metrics, {"recommender": recommender}


# --- Stage 2 ---

def stratified_subsample(samples: Sequence[Sample], fraction: float, seed: int) -> List[Sample]:
    if fraction >= 1.0:
        return list(samples)
    rng = np.random.default_rng(seed)
    labels = np.asarray([s.label for s in samples])
    keep: List[int] = []
    for value in (0, 1):
        idx = np.flatnonzero(labels == value)
        take = int(round(fraction * idx.size))
        keep.extend(rng.choice(idx, size=take, replace=False).tolist())
    return [samples[i] for i in sorted(keep)]


@dataclass
class CTRData:
    encoder: FeatureEncoder
    train: Any
    val: Any
    test: Any
    train_samples: List[Sample]
    test_samples: List[Sample]


def prepare_ctr_data(config: ExperimentConfig, dataset: Dataset) -> CTRData:
    samples = stratified_subsample(binarize_ratings(dataset), config.training.subsample, config.seed)
    train, val, test = split_train_val_test(samples, config.training.split, seed=config.seed)
    encoder = FeatureEncoder(include_timestamp=config.training.include_timestamp).fit(train)
    logger.info("CTR samples: train=%d val=%d test=%d", len(train), len(val), len(test))
    return CTRData(
        encoder=encoder,
        train=encoder.transform(train),
        val=encoder.transform(val),
        test=encoder.transform(test),
        train_samples=list(train),
        test_samples=list(test),
    )


def _classification_metrics(model: CTRModel, table: Any, mode: str) -> Dict[str, Optional[float]]:
    if len(table) == 0:
        return {"auc": None, "logloss": None}
    probs = model.predict(table)
    labels = table.labels
    both = 0 < labels.sum() < labels.size
    return {"auc": auc(probs, labels, mode=mode) if both else None, "logloss": logloss(probs, labels)}


def make_model(config: ExperimentConfig, encoder: FeatureEncoder) -> CTRModel:
    return build_model(config.model, encoder.schema, config.autoint, seed=config.seed)


def run_ctr_central(config: ExperimentConfig, dataset: Dataset) -> Tuple[Dict[str, Any], Dict[str, Any]]:
    data = prepare_ctr_data(config, dataset)
    model = make_model(config, data.encoder)
    logger.info("%s parameter groups: %s", config.model, model.parameter_counts())
    optimizer = build_optimizer(config.training.optimizer, config.training.learning_rate)
    trace = train_epochs(model, data.train, optimizer, config.training.batch_size, config.training.epochs, config.seed)
    test = _classification_metrics(model, data.test, config.metrics.auc)
    val = _classification_metrics(model, data.val, config.metrics.auc)
    metrics = {
        "auc": test["auc"],
        "logloss": test["logloss"],
        "val_auc": val["auc"],
        "val_logloss": val["logloss"],
        "train_loss": trace[-1] if trace else None,
        **{f"params_{k}": v for k, v in model.parameter_counts().items()},
    }
    return metrics, {"model": model, "encoder": data.encoder, "trace": trace}


def build_partitions(config: ExperimentConfig, data: CTRData):
    rc = config.rounds
    if rc.partition == "iid":
        return partition_iid(data.train, rc.num_clients, rc.seed, test=data.test)
    if rc.partition == "dirichlet":
        return partition_dirichlet(data.train, rc.num_clients, rc.dirichlet_alpha, rc.seed, test=data.test)
    train_users = [str(s.values["user_id"]) for s in data.train_samples]
    test_users = [str(s.values["user_id"]) for s in data.test_samples]
    interactions = interaction_matrix_from_pairs(
        (str(s.values["user_id"]), str(s.values["movie_id"])) for s in data.train_samples
    )
    rank = min(rc.svd_rank, *interactions.shape)
    if rank < rc.svd_rank:
        logger.warning("SVD rank lowered from %d to %d for a %dx%d interaction matrix", rc.svd_rank, rank, *interactions.shape)
    return partition_cluster(
        data.train,
        train_users,
        interactions,
        rc.num_clients,
        rank=rank,
        seed=rc.seed,
        test=data.test,
        test_users=test_users,
    )


def run_ctr_federated(
    config: ExperimentConfig,
    dataset: Dataset,
    run_dir: Optional[Path] = None,
    on_round: Optional[Callable[[RoundRecord], None]] = None,
) -> Tuple[Dict[str, Any], Dict[str, Any]]:
    data = prepare_ctr_data(config, dataset)
    partitions = build_partitions(config, data)
    result = run_rounds(
        config.rounds,
        partitions,
        lambda: make_model(config, data.encoder),
        auc_mode=config.metrics.auc,
        store_dir=(run_dir / "clients") if run_dir is not None else None,
        on_round=on_round,
    )
    final = result.history.final
    if final is not None:
        fed_auc, fed_loss = final.auc, final.logloss
    else:
        fed_auc, fed_loss = evaluate_clients(result.model, result.model.params, partitions, result.store, config.metrics.auc)
    metrics = {
        "auc": fed_auc,
        "logloss": fed_loss,
        "rounds": len(result.history),
        "clients": len(partitions),
        "plan": ",".join(config.rounds.federation_plan),
        "bytes_per_round": final.bytes if final is not None else 0,
        "client_sizes": {p.client_id: p.n_k for p in partitions},
    }
    return metrics, {"history": result.history, "model": result.model, "encoder": data.encoder}


# --- Sensor features ---

def run_features(config: ExperimentConfig) -> Tuple[Dict[str, Any], Dict[str, Any]]:
    path = config.dataset.sensor_file()
    timestamps, values = load_sensor_csv(path)
    frame = embed_stream(timestamps, values)
    return {"sessions": int(len(frame)), "features": int(frame.shape[1] - 1)}, {"features": frame}


# --- Two-stage ---

def rerank_candidates(
    candidates: RecommendationList,
    user: str,
    dataset: Dataset,
    model: CTRModel,
    encoder: FeatureEncoder,
    timestamp: Optional[float] = None,
) -> RecommendationList:
    """Score Stage-1 candidates with a CTR model; probability descending, ties by item id."""
    profile = dataset.users.get(user)
    if profile is None:
        raise ValueError(f"Unknown user '{user}'")
    if timestamp is None:
        lo_hi = encoder.numeric_range.get("timestamp")
        timestamp = lo_hi[1] if lo_hi else 0.0
    samples = []
    items = []
    for item in candidates.item_ids():
        movie = dataset.movies.get(item)
        if movie is None:
            logger.debug("Candidate %s has no movie metadata; skipped", item)
            continue
        items.append(item)
        samples.append(
            Sample(
                values={
                    "user_id": user,
                    "movie_id": item,
                    "genres": tuple(sorted(movie.genres)),
                    "gender": profile.gender,
                    "age": profile.age,
                    "occupation": profile.occupation,
                    "zip_code": profile.zip_code,
                    "timestamp": float(timestamp),
                },
                label=0,
            )
        )
    if not samples:
        return RecommendationList()
    probs = model.predict(encoder.transform(samples))
    return RecommendationList.from_scores(dict(zip(items, probs.tolist())), len(items))


# --- Reports ---

def _flat_metrics(metrics: Dict[str, Any]) -> Dict[str, Any]:
    return {k: v for k, v in metrics.items() if not isinstance(v, (dict, list))}


def build_report(config: ExperimentConfig, metrics: Dict[str, Any], elapsed: float) -> Dict[str, Any]:
    return {
        "experiment": config.name or f"{config.stage}-{config.model or 'features'}",
        "stage": config.stage,
        "model": config.model,
        "seed": config.seed,
        "config_hash": config_hash(config),
        "dataset_hash": dataset_hash(config),
        "metrics": metrics,
        "elapsed_seconds": round(elapsed, 3),
    }


def write_outputs(outcome: RunOutcome) -> None:
    run_dir = outcome.run_dir
    report = outcome.report
    write_run_json(run_dir / "config.json", outcome.config.model_dump(mode="json"), keep_previous=0)
    archived = write_run_json(run_dir / "report.json", report)
    if archived is not None:
        logger.info("Earlier report for %s kept as %s", report["config_hash"], archived.name)
    row = {k: report[k] for k in ("experiment", "stage", "model", "seed", "config_hash")}
    row.update(_flat_metrics(report["metrics"]))
    atomic_write_text(run_dir / "metrics.csv", pd.DataFrame([row]).to_csv(index=False))
    history = outcome.artifacts.get("history")
    if history is not None:
        history.save(run_dir)
    features = outcome.artifacts.get("features")
    if features is not None:
        atomic_write_text(run_dir / "features.csv", features.to_csv(index=False))
    model = outcome.artifacts.get("model")
    if model is not None:
        save_model(model, run_dir / "model")


def run_experiment(
    config: ExperimentConfig,
    on_round: Optional[Callable[[RoundRecord], None]] = None,
) -> RunOutcome:
    """Execute one configured experiment end to end and write its run directory."""
    run_dir = run_directory(config)
    started = time.perf_counter()
    if config.stage == "features":
        metrics, artifacts = run_features(config)
    else:
        dataset = load_dataset(config)
        if config.stage == "cco":
            metrics, artifacts = run_cco(config, dataset)
        elif config.stage == "ctr-central":
            metrics, artifacts = run_ctr_central(config, dataset)
        else:
            metrics, artifacts = run_ctr_federated(config, dataset, run_dir, on_round)
    report = build_report(config, metrics, time.perf_counter() - started)
    outcome = RunOutcome(config=config, run_dir=run_dir, report=report, artifacts=artifacts)
    write_outputs(outcome)
    logger.info("Run %s written to %s", report["config_hash"], run_dir)
    return outcome


def _report_path(path: Path) -> Path:
    path = Path(path)
    return path / "report.json" if path.is_dir() else path


def load_report(path: Path) -> Dict[str, Any]:
    p = _report_path(path)
    if not p.is_file():
        raise FileNotFoundError(f"Report not found: {p}")
    return json.loads(p.read_text(encoding="utf-8"))


def merge_reports(paths: Sequence[Path], with_baselines: bool = False) -> pd.DataFrame:
    """One row per run; refuses to mix runs over different datasets."""
    reports = [load_report(p) for p in paths]
    if not reports:
        raise ValueError("No reports to merge")
    hashes = {r.get("dataset_hash") for r in reports}
    if len(hashes) != 1:
        raise ValueError(f"Reports were produced from {len(hashes)} different datasets; refusing to merge")
    rows = []
    for r in reports:
        row = {k: r.get(k) for k in ("experiment", "stage", "model", "seed", "config_hash")}
        row.update(_flat_metrics(r.get("metrics", {})))
        row["reference"] = False
        rows.append(row)
    if with_baselines:
        for name, hr, ndcg in REFERENCE_BASELINES:
            rows.append({"experiment": name, "stage": "cco", "model": name, "hr@10": hr, "ndcg@10": ndcg, "reference": True})
    return pd.DataFrame(rows)
