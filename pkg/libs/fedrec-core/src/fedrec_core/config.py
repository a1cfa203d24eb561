import copy
import hashlib
import json
import math
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import yaml
from pydantic import BaseModel, Field, field_validator, model_validator

from . import resolve_data_path, sha256_files

Stage = Literal["cco", "ctr-central", "ctr-federated", "features"]
ModelName = Literal["lr-raw", "lr-emb", "autoint", "poprec", "cco"]
PartitionKind = Literal["iid", "cluster", "dirichlet"]
AucMode = Literal["exact", "thresholded10"]

GROUP_NAMES: Tuple[str, ...] = ("embedding", "interaction", "output")

STAGE_MODELS: Dict[str, Tuple[str, ...]] = {
    "cco": ("poprec", "cco"),
    "ctr-central": ("lr-raw", "lr-emb", "autoint"),
    "ctr-federated": ("lr-raw", "lr-emb", "autoint"),
    "features": (),
}

CONFIG_HASH_LEN = 12


class AutoIntConfig(BaseModel):
    embedding_dim: int = Field(16, ge=1)
    attention_layers: int = Field(3, ge=0)
    heads: int = Field(2, ge=1)
    attention_size: int = Field(32, ge=1)
    hidden_units: int = Field(32, ge=1)
    dropout: float = Field(0.3, ge=0.0, lt=1.0)
    output_init: Literal["xavier", "zeros"] = "xavier"

    model_config = {"extra": "forbid"}

    @model_validator(mode="after")
    def _heads_divide_width(self) -> "AutoIntConfig":
        if self.attention_size % self.heads != 0:
            raise ValueError(f"attention_size {self.attention_size} is not divisible by heads {self.heads}")
        return self

    @property
    def head_dim(self) -> int:
        return self.attention_size // self.heads


class DatasetPaths(BaseModel):
    """MovieLens file locations; relative paths resolve against ``FEDREC_DATA_ROOT``."""

    root: Optional[str] = None
    ratings: str = "ratings.dat"
    users: str = "users.dat"
    movies: str = "movies.dat"
    sensor: Optional[str] = None

    model_config = {"extra": "forbid"}

    def _resolve(self, name: str) -> Path:
        p = Path(name)
        if self.root and not p.is_absolute():
            p = Path(self.root) / p
        return resolve_data_path(p)

    def movielens_files(self) -> Tuple[Path, Path, Path]:
        return self._resolve(self.ratings), self._resolve(self.users), self._resolve(self.movies)

    def sensor_file(self) -> Optional[Path]:
        return self._resolve(self.sensor) if self.sensor else None


class IndicatorSelection(BaseModel):
    events: bool = True
    item_properties: bool = False
    user_properties: bool = False
    llr_threshold: float = 0.0
    max_correlators: int = Field(50, ge=1)

    model_config = {"extra": "forbid"}


class MetricModes(BaseModel):
    auc: AucMode = "thresholded10"
    k: int = Field(10, ge=1)
    # None ranks against the full catalog of unseen items.
    negatives_per_user: Optional[int] = Field(100, ge=1)

    model_config = {"extra": "forbid"}


class TrainingConfig(BaseModel):
    optimizer: Literal["adam", "sgd"] = "adam"
    learning_rate: float = Field(1e-3, gt=0.0)
    epochs: int = Field(1, ge=0)
    batch_size: int = Field(256, ge=1)
    include_timestamp: bool = True
    split: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    # Fraction of binarized samples kept (stratified by label) before splitting.
    subsample: float = Field(1.0, gt=0.0, le=1.0)

    model_config = {"extra": "forbid"}

    @field_validator("split")
    @classmethod
    def _split_sums_to_one(cls, v: Tuple[float, float, float]) -> Tuple[float, float, float]:
        if any(r < 0 for r in v) or not math.isclose(sum(v), 1.0, abs_tol=1e-9):
            raise ValueError(f"split ratios must be non-negative and sum to 1, got {v}")
        return v


class RoundConfig(BaseModel):
    num_clients: int = Field(10, ge=1)
    client_fraction: float = Field(1.0, gt=0.0, le=1.0)
    local_epochs: int = Field(1, ge=0)
    local_batch: int = Field(256, ge=1)
    rounds: int = Field(20, ge=0)
    federation_plan: List[str] = Field(default_factory=lambda: list(GROUP_NAMES))
    noise_sigma: float = Field(0.0, ge=0.0)
    seed: int = 0
    partition: PartitionKind = "iid"
    svd_rank: int = Field(50, ge=1)
    dirichlet_alpha: float = Field(0.5, gt=0.0)
    threads: int = Field(1, ge=1)
    optimizer: Literal["adam", "sgd"] = "adam"
    learning_rate: float = Field(1e-3, gt=0.0)

    model_config = {"extra": "forbid"}

    @field_validator("federation_plan")
    @classmethod
    def _plan_names(cls, v: List[str]) -> List[str]:
        unknown = [g for g in v if g not in GROUP_NAMES]
        if unknown:
            raise ValueError(f"Unknown parameter groups in federation_plan: {unknown}")
        return list(dict.fromkeys(v))

    def participants_per_round(self) -> int:
        return max(1, math.ceil(self.client_fraction * self.num_clients))


class ExperimentConfig(BaseModel):
    name: str = ""
    stage: Stage
    model: Optional[ModelName] = None
    seed: int
    dataset: DatasetPaths = Field(default_factory=DatasetPaths)
    indicators: IndicatorSelection = Field(default_factory=IndicatorSelection)
    metrics: MetricModes = Field(default_factory=MetricModes)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    autoint: AutoIntConfig = Field(default_factory=AutoIntConfig)
    rounds: RoundConfig = Field(default_factory=RoundConfig)
    output_dir: str = "runs"
    threads: int = Field(1, ge=1)

    model_config = {"extra": "forbid"}

    @model_validator(mode="before")
    @classmethod
    def _propagate_seed(cls, data: Any) -> Any:
        if isinstance(data, dict) and "seed" in data:
            rounds = data.get("rounds")
            rounds = dict(rounds) if isinstance(rounds, dict) else {}
            rounds.setdefault("seed", data["seed"])
            return {**data, "rounds": rounds}
        return data

    @model_validator(mode="after")
    def _stage_model_compatible(self) -> "ExperimentConfig":
        allowed = STAGE_MODELS[self.stage]
        if not allowed:
            if self.model is not None:
                raise ValueError(f"Stage '{self.stage}' takes no model (got '{self.model}')")
        elif self.model not in allowed:
            raise ValueError(f"Stage '{self.stage}' requires model in {list(allowed)}, got '{self.model}'")
        if self.stage == "features" and not self.dataset.sensor:
            raise ValueError("Stage 'features' requires dataset.sensor")
        return self


def deep_merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    result = copy.deepcopy(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and key in result and isinstance(result[key], dict):
            result[key] = deep_merge(result[key], value)
        else:
            result[key] = value
    return result


def load_config_document(path: Path) -> Dict[str, Any]:
    """Raw experiment document from JSON, or YAML for ``.yaml``/``.yml`` files."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Config not found: {path}")
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() in (".yaml", ".yml"):
        data = yaml.safe_load(text)
    else:
        data = json.loads(text)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: top-level config must be a mapping")
    return data


def cli_overrides(
    seed: Optional[int] = None,
    threads: Optional[int] = None,
    out: Optional[str] = None,
) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    if seed is not None:
        overrides["seed"] = seed
        overrides["rounds"] = {"seed": seed}
    if threads is not None:
        overrides["threads"] = threads
        overrides.setdefault("rounds", {})["threads"] = threads
    if out is not None:
        overrides["output_dir"] = out
    return overrides


def load_experiment_config(path: Path, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    data = load_config_document(path)
    if overrides:
        data = deep_merge(data, overrides)
    return ExperimentConfig.model_validate(data)


def config_hash(config: ExperimentConfig) -> str:
    # Where and how parallel a run executes does not change its results.
    doc = config.model_dump(mode="json", exclude={"output_dir": True, "threads": True, "rounds": {"threads"}})
    canonical = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:CONFIG_HASH_LEN]


def dataset_hash(config: ExperimentConfig) -> str:
    if config.stage == "features":
        sensor = config.dataset.sensor_file()
        return sha256_files([sensor] if sensor else [])
    return sha256_files(config.dataset.movielens_files())


def run_directory(config: ExperimentConfig) -> Path:
    return Path(config.output_dir) / config_hash(config)
