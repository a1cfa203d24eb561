"""Simulated federated training.

Clients are partitions of the global train/test splits. Each round the
participating clients receive the global "plan" groups, train locally, and the
server replaces the plan groups by the size-weighted FedAvg mean. Groups
outside the plan never leave the client; they persist in a per-client store
between rounds.
"""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from .cco import SparseInteractionMatrix
from .clustering import kmeans, truncated_svd
from .config import GROUP_NAMES, RoundConfig
from .ingest import take_rows
from .metrics import auc, federated_metric, logloss
from .models import CTRModel, train_epochs
from .tensor import ParameterSet, build_optimizer, read_checkpoint

logger = logging.getLogger(__name__)

ModelFactory = Callable[[], CTRModel]
FLOAT_BYTES = 8


@dataclass
class ClientPartition:
    client_id: str
    train: Any
    test: Any = None
    train_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    test_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n_k(self) -> int:
        return len(self.train)

    @property
    def test_size(self) -> int:
        return 0 if self.test is None else len(self.test)


def client_name(i: int) -> str:
    return f"client-{i:02d}"


def _build_clients(train: Any, test: Any, train_groups: Sequence[np.ndarray], test_groups: Sequence[np.ndarray]):
    clients = []
    for i, (tr, te) in enumerate(zip(train_groups, test_groups)):
        tr = np.asarray(tr, dtype=np.int64)
        te = np.asarray(te, dtype=np.int64)
        if tr.size == 0:
            logger.warning("%s received no training samples; dropped", client_name(i))
            continue
        clients.append(
            ClientPartition(
                client_id=client_name(i),
                train=take_rows(train, tr),
                test=take_rows(test, te) if test is not None else None,
                train_index=tr,
                test_index=te,
            )
        )
    return clients


def _check_k(n: int, k: int) -> None:
    if k <= 0:
        raise ValueError(f"Number of clients must be positive, got {k}")
    if n < k:
        raise ValueError(f"Cannot split {n} samples across {k} clients")


def partition_iid(train: Any, num_clients: int = 10, seed: int = 0, test: Any = None) -> List[ClientPartition]:
    """Uniform random split into equal shares (sizes differ by at most one)."""
    _check_k(len(train), num_clients)
    rng = np.random.default_rng(seed)
    tr_groups = np.array_split(rng.permutation(len(train)), num_clients)
    n_test = 0 if test is None else len(test)
    te_groups = np.array_split(rng.permutation(n_test), num_clients)
    return _build_clients(train, test, tr_groups, te_groups)


def _allocate(n: int, proportions: np.ndarray, minimum: int) -> np.ndarray:
    """Integer sizes summing to ``n`` following ``proportions``; every share gets ``minimum`` first."""
    k = proportions.size
    spare = n - minimum * k
    raw = proportions * spare
    sizes = np.floor(raw).astype(np.int64)
    remainder = spare - int(sizes.sum())
    if remainder > 0:
        order = np.argsort(-(raw - sizes), kind="stable")
        sizes[order[:remainder]] += 1
    return sizes + minimum


def partition_dirichlet(
    train: Any,
    num_clients: int = 10,
    alpha: float = 0.5,
    seed: int = 0,
    test: Any = None,
) -> List[ClientPartition]:
    """Quantity skew: client shares drawn from Dirichlet(alpha); each client keeps at least one sample."""
    _check_k(len(train), num_clients)
    if alpha <= 0:
        raise ValueError("Dirichlet concentration must be positive")
    rng = np.random.default_rng(seed)
    props = rng.dirichlet(np.full(num_clients, alpha))
    tr_sizes = _allocate(len(train), props, 1)
    tr_groups = np.split(rng.permutation(len(train)), np.cumsum(tr_sizes)[:-1])
    n_test = 0 if test is None else len(test)
    te_sizes = _allocate(n_test, props, 0)
    te_groups = np.split(rng.permutation(n_test), np.cumsum(te_sizes)[:-1])
    return _build_clients(train, test, tr_groups, te_groups)


def cluster_users(
    interactions: SparseInteractionMatrix,
    num_clients: int = 10,
    rank: int = 50,
    seed: int = 0,
) -> Dict[str, int]:
    """User -> cluster from k-means on truncated-SVD user embeddings."""
    svd = truncated_svd(interactions, rank=rank, seed=seed)
    result = kmeans(svd.embeddings, k=num_clients, seed=seed)
    return {user: int(c) for user, c in zip(interactions.row_ids, result.assignments)}


def partition_cluster(
    train: Any,
    train_users: Sequence[str],
    interactions: SparseInteractionMatrix,
    num_clients: int = 10,
    rank: int = 50,
    seed: int = 0,
    test: Any = None,
    test_users: Optional[Sequence[str]] = None,
) -> List[ClientPartition]:
    """Non-IID split: every sample follows its user's behaviour cluster.

    Test samples of users unseen in training go to the largest client.
    """
    if len(train_users) != len(train):
        raise ValueError("train_users must give one user per training sample")
    if test is not None and (test_users is None or len(test_users) != len(test)):
        raise ValueError("test_users must give one user per test sample")
    _check_k(interactions.shape[0], num_clients)
    clusters = cluster_users(interactions, num_clients, rank, seed)
    tr_assign = np.asarray([clusters[str(u)] for u in train_users], dtype=np.int64)
    largest = int(np.argmax(np.bincount(tr_assign, minlength=num_clients)))
    te_assign = np.asarray([clusters.get(str(u), largest) for u in (test_users or [])], dtype=np.int64)
    tr_groups = [np.flatnonzero(tr_assign == c) for c in range(num_clients)]
    te_groups = [np.flatnonzero(te_assign == c) for c in range(num_clients)]
    clients = _build_clients(train, test, tr_groups, te_groups)
    logger.info("Cluster partition sizes: %s", {c.client_id: c.n_k for c in clients})
    return clients


# --- Aggregation ---

def _check_structure(params: Sequence[ParameterSet]) -> None:
    ref = params[0].structure()
    for p in params[1:]:
        if p.structure() != ref:
            raise ValueError("Client parameter sets are not structurally identical")


def fedavg_aggregate(
    client_params: Sequence[ParameterSet],
    sizes: Sequence[int],
    plan: Sequence[str],
) -> ParameterSet:
    """Size-weighted mean of the plan groups over the given (participating) clients."""
    if not client_params:
        raise ValueError("fedavg_aggregate needs at least one client")
    if len(sizes) != len(client_params):
        raise ValueError(f"{len(client_params)} parameter sets but {len(sizes)} sizes")
    _check_structure(client_params)
    total = float(sum(sizes))
    if total <= 0:
        raise ValueError("Sum of client sizes is zero")
    weights = [n / total for n in sizes]
    out = client_params[0].copy([g for g in plan if g in client_params[0]])
    for group in out:
        for name, target, _ in group.items():
            target.fill(0.0)
            for w, params in zip(weights, client_params):
                target += w * params.group(group.name).params[name]
    return out


def zero_sum_noise(
    updates: Sequence[ParameterSet],
    sigma: float,
    sizes: Sequence[int],
    plan: Sequence[str],
    seed: int = 0,
) -> List[ParameterSet]:
    """Add Gaussian noise to the plan groups whose size-weighted sum over clients is zero."""
    if sigma < 0:
        raise ValueError("noise sigma must be >= 0")
    if sigma == 0:
        return list(updates)
    if len(updates) < 2:
        raise ValueError("Zero-sum noise needs at least two participating clients")
    _check_structure(updates)
    total = float(sum(sizes))
    weights = np.asarray(sizes, dtype=np.float64) / total
    rng = np.random.default_rng(seed)
    noised = [u.copy() for u in updates]
    for group in updates[0]:
        if group.name not in plan:
            continue
        for name, p, _ in group.items():
            eta = rng.normal(0.0, sigma, size=(len(updates),) + p.shape)
            eta -= np.tensordot(weights, eta, axes=1)
            for k, params in enumerate(noised):
                params.group(group.name).params[name] += eta[k]
    return noised


def client_drift(updates: Sequence[ParameterSet], global_params: ParameterSet, plan: Sequence[str]) -> float:
    """Mean L2 distance of the clients' plan groups from the pre-round global ones."""
    groups = [g for g in plan if g in global_params]
    if not updates or not groups:
        return 0.0
    dists = []
    for u in updates:
        sq = 0.0
        for gname in groups:
            ref = global_params.group(gname).params
            for k, v in u.group(gname).params.items():
                sq += float(((v - ref[k]) ** 2).sum())
        dists.append(math.sqrt(sq))
    return float(np.mean(dists))


# --- Client state ---

class ClientStateStore:
    """Non-federated groups per client; on disk under ``root`` when given, else in memory."""

    def __init__(self, root: Optional[Path] = None):
        self.root = Path(root) if root is not None else None
        self._memory: Dict[str, Dict[str, Dict[str, np.ndarray]]] = {}

    def path(self, client_id: str) -> Optional[Path]:
        return None if self.root is None else self.root / f"{client_id}.json"

    def save(self, client_id: str, params: ParameterSet, groups: Sequence[str]) -> None:
        groups = [g for g in groups if g in params]
        if not groups:
            return
        path = self.path(client_id)
        if path is None:
            self._memory[client_id] = params.snapshot(groups)
        else:
            params.save(path, names=groups)

    def load(self, client_id: str) -> Optional[Dict[str, Dict[str, np.ndarray]]]:
        path = self.path(client_id)
        if path is None:
            return self._memory.get(client_id)
        return read_checkpoint(path) if path.is_file() else None


def local_groups(params: ParameterSet, plan: Sequence[str]) -> List[str]:
    return [g for g in params.names() if g not in plan]


def local_update(
    model: CTRModel,
    client: ClientPartition,
    global_params: ParameterSet,
    plan: Sequence[str],
    epochs: int,
    batch_size: int,
    optimizer: Any,
    store: ClientStateStore,
    seed: int = 0,
) -> Optional[ParameterSet]:
    """Load plan groups from the global model and the rest from the client's store, then train.

    ``global_params`` also supplies the starting point of non-plan groups for
    a client with no stored state yet. Returns the full trained parameter set,
    or ``None`` for a client without training data.
    """
    if client.n_k == 0:
        logger.warning("%s has no training data; skipped", client.client_id)
        return None
    model.params.load_snapshot(global_params.snapshot())
    own = store.load(client.client_id)
    if own:
        model.params.load_snapshot(own)
    if epochs > 0:
        train_epochs(model, client.train, optimizer, batch_size, epochs, seed=seed)
    store.save(client.client_id, model.params, local_groups(model.params, plan))
    return model.params.copy()


# --- Rounds ---

@dataclass
class RoundRecord:
    round: int
    auc: Optional[float]
    logloss: Optional[float]
    bytes: int
    drift: float
    participants: List[str]
    client_sizes: Dict[str, int]
    wall_time: float


@dataclass
class RoundHistory:
    records: List[RoundRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: RoundRecord) -> None:
        self.records.append(record)

    @property
    def final(self) -> Optional[RoundRecord]:
        return self.records[-1] if self.records else None

    def to_frame(self) -> pd.DataFrame:
        cols = ["round", "auc", "logloss", "bytes", "drift", "participants", "wall_time"]
        rows = [
            {
                "round": r.round,
                "auc": r.auc,
                "logloss": r.logloss,
                "bytes": r.bytes,
                "drift": r.drift,
                "participants": len(r.participants),
                "wall_time": r.wall_time,
            }
            for r in self.records
        ]
        return pd.DataFrame(rows, columns=cols)

    def save(self, directory: Path) -> None:
        from . import atomic_write_text

        directory = Path(directory)
        atomic_write_text(directory / "history.csv", self.to_frame().to_csv(index=False))
        doc = [asdict(r) for r in self.records]
        atomic_write_text(directory / "history.json", json.dumps(doc, indent=2) + "\n")


@dataclass
class FederatedResult:
    history: RoundHistory
    model: CTRModel
    store: ClientStateStore


def round_seed(seed: int, round_no: int, client: int = -1) -> int:
    return int(np.random.SeedSequence([seed, round_no, client + 1]).generate_state(1)[0])


def select_participants(config: RoundConfig, clients: Sequence[ClientPartition], round_no: int) -> List[int]:
    m = min(len(clients), math.ceil(config.client_fraction * len(clients)))
    if m >= len(clients):
        return list(range(len(clients)))
    rng = np.random.default_rng(round_seed(config.seed, round_no))
    return sorted(int(i) for i in rng.choice(len(clients), size=m, replace=False))


def evaluate_clients(
    model: CTRModel,
    global_params: ParameterSet,
    clients: Sequence[ClientPartition],
    store: ClientStateStore,
    auc_mode: str = "thresholded10",
) -> tuple[Optional[float], Optional[float]]:
    """Size-weighted AUC and LogLoss over client test sets, each with its own local groups."""
    aucs, auc_sizes, losses, loss_sizes = [], [], [], []
    for client in clients:
        if client.test_size == 0:
            continue
        model.params.load_snapshot(global_params.snapshot())
        own = store.load(client.client_id)
        if own:
            model.params.load_snapshot(own)
        probs = model.predict(client.test)
        labels = client.test.labels
        losses.append(logloss(probs, labels))
        loss_sizes.append(client.test_size)
        if 0 < labels.sum() < labels.size:
            aucs.append(auc(probs, labels, mode=auc_mode))
            auc_sizes.append(client.test_size)
        else:
            logger.debug("%s test set has a single class; excluded from AUC", client.client_id)
    fed_auc = federated_metric(aucs, auc_sizes) if aucs else None
    fed_loss = federated_metric(losses, loss_sizes) if losses else None
    return fed_auc, fed_loss


def run_rounds(
    config: RoundConfig,
    partitions: Sequence[ClientPartition],
    model_factory: ModelFactory,
    auc_mode: str = "thresholded10",
    store_dir: Optional[Path] = None,
    on_round: Optional[Callable[[RoundRecord], None]] = None,
) -> FederatedResult:
    """FedAvg over ``config.rounds`` rounds; every replica starts from the same initialisation."""
    if not partitions:
        raise ValueError("run_rounds needs at least one client")
    plan = [g for g in config.federation_plan if g in GROUP_NAMES]
    global_model = model_factory()
    plan = [g for g in plan if g in global_model.params]
    store = ClientStateStore(store_dir)
    history = RoundHistory()
    plan_params = sum(global_model.params.group(g).count() for g in plan)
    threads = max(1, config.threads)
    replicas = [model_factory() for _ in range(threads)]
    logger.info(
        "Federated training: %d clients, %d rounds, plan=%s, %d parameters per transfer",
        len(partitions),
        config.rounds,
        plan or "[]",
        plan_params,
    )

    for r in range(1, config.rounds + 1):
        started = time.perf_counter()
        chosen = select_participants(config, partitions, r)
        global_params = global_model.params.copy()

        def _train(slot: int, idx: int) -> Optional[ParameterSet]:
            return local_update(
                replicas[slot],
                partitions[idx],
                global_params,
                plan,
                config.local_epochs,
                config.local_batch,
                build_optimizer(config.optimizer, config.learning_rate),
                store,
                seed=round_seed(config.seed, r, idx),
            )

        if threads == 1:
            results = [_train(0, idx) for idx in chosen]
        else:
            results = [None] * len(chosen)
            # One replica per worker; clients are dealt to workers round-robin.
            with ThreadPoolExecutor(max_workers=threads) as pool:
                def _worker(slot: int) -> None:
                    for j in range(slot, len(chosen), threads):
                        results[j] = _train(slot, chosen[j])

                list(pool.map(_worker, range(threads)))

        trained = [(partitions[i], u) for i, u in zip(chosen, results) if u is not None]
        updates = [u for _, u in trained]
        sizes = [c.n_k for c, _ in trained]
        if updates:
            drift = client_drift(updates, global_params, plan)
            if config.noise_sigma > 0:
                updates = zero_sum_noise(updates, config.noise_sigma, sizes, plan, seed=round_seed(config.seed, r))
            if plan:
                global_model.params.load_snapshot(fedavg_aggregate(updates, sizes, plan).snapshot())
        else:
            drift = 0.0

        fed_auc, fed_loss = evaluate_clients(replicas[0], global_model.params, partitions, store, auc_mode)
        record = RoundRecord(
            round=r,
            auc=fed_auc,
            logloss=fed_loss,
            bytes=2 * len(trained) * plan_params * FLOAT_BYTES,
            drift=drift,
            participants=[c.client_id for c, _ in trained],
            client_sizes={c.client_id: c.n_k for c, _ in trained},
            wall_time=time.perf_counter() - started,
        )
        history.append(record)
        logger.info(
            "Round %d: auc=%s logloss=%s drift=%.4f",
            r,
            "n/a" if fed_auc is None else f"{fed_auc:.4f}",
            "n/a" if fed_loss is None else f"{fed_loss:.4f}",
            drift,
        )
        if on_round is not None:
            on_round(record)
    return FederatedResult(history=history, model=global_model, store=store)
