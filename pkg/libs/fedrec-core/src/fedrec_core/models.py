"""CTR rankers: logistic regression on raw or embedded inputs, and AutoInt.

All models work on a batch ``SampleTable`` and expose the same surface:
``forward`` (logits), ``predict`` (eval-mode probabilities), ``loss_and_grad``
(one training step's loss with gradients left in ``params``) and ``params``
split into the groups "embedding", "interaction" and "output".
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .config import AutoIntConfig
from .ingest import FeatureSchema, SampleTable
from .tensor import (
    ParameterGroup,
    ParameterSet,
    affine_backward,
    affine_forward,
    bce_loss,
    check_finite,
    dropout_backward,
    dropout_forward,
    relu_backward,
    relu_forward,
    sigmoid,
    softmax_backward,
    softmax_rowwise,
)

logger = logging.getLogger(__name__)

MODEL_NAMES = ("lr-raw", "lr-emb", "autoint")
EMBEDDING_INIT_STD = 0.01
NUMERIC_SHIFT_BOUNDS = (-0.5, 1.5)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _check_indices(name: str, idx: np.ndarray, size: int) -> None:
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise ValueError(f"Field '{name}': index out of vocabulary bounds [0, {size})")


def _warn_numeric_shift(table: SampleTable) -> None:
    lo, hi = NUMERIC_SHIFT_BOUNDS
    for name, x in table.numeric.items():
        if x.size and (x.min() < lo or x.max() > hi):
            logger.warning(
                "Numeric field '%s' outside [%.1f, %.1f] after normalisation (distribution shift)", name, lo, hi
            )


class EmbeddingLayer:
    """Per-field embedding tables.

    categorical -> row of V_i; multi-valued -> mean of the active rows;
    numeric -> v_m scaled by the value.
    """

    def __init__(self, schema: FeatureSchema, dim: int, rng: np.random.Generator, group: ParameterGroup):
        self.schema = schema
        self.dim = dim
        self.group = group
        for f in schema.fields:
            rows = 1 if f.kind == "numeric" else f.size
            group.add(self.tensor_name(f.name), rng.normal(0.0, EMBEDDING_INIT_STD, size=(rows, dim)))

    @staticmethod
    def tensor_name(field_name: str) -> str:
        return f"V_{field_name}"

    def table(self, field_name: str) -> np.ndarray:
        return self.group.params[self.tensor_name(field_name)]

    def forward(self, batch: SampleTable) -> np.ndarray:
        n = len(batch)
        out = np.empty((n, len(self.schema), self.dim), dtype=np.float64)
        for m, f in enumerate(self.schema.fields):
            V = self.table(f.name)
            if f.kind == "categorical":
                idx = batch.categorical[f.name]
                _check_indices(f.name, idx, V.shape[0])
                out[:, m] = V[idx]
            elif f.kind == "multi":
                ids, mask = batch.multi[f.name]
                _check_indices(f.name, ids, V.shape[0])
                q = mask.sum(axis=1, keepdims=True)
                out[:, m] = (V[ids] * mask[..., None]).sum(axis=1) / q
            else:
                out[:, m] = batch.numeric[f.name][:, None] * V[0]
        return out

    def backward(self, batch: SampleTable, d_out: np.ndarray) -> None:
        for m, f in enumerate(self.schema.fields):
            G = self.group.grads[self.tensor_name(f.name)]
            d = d_out[:, m]
            if f.kind == "categorical":
                np.add.at(G, batch.categorical[f.name], d)
            elif f.kind == "multi":
                ids, mask = batch.multi[f.name]
                w = mask / mask.sum(axis=1, keepdims=True)
                np.add.at(G, ids, w[..., None] * d[:, None, :])
            else:
                G[0] += batch.numeric[f.name] @ d


class CTRModel:
    name = "ctr"

    def __init__(self, schema: FeatureSchema):
        self.schema = schema
        self.params = ParameterSet()

    def forward(
        self, batch: SampleTable, train: bool = False, rng: Optional[np.random.Generator] = None
    ) -> np.ndarray:
        raise NotImplementedError

    def backward(self, d_logits: np.ndarray) -> None:
        raise NotImplementedError

    def predict(self, table: SampleTable, batch_size: int = 4096) -> np.ndarray:
        """Eval-mode click probabilities; batching does not change the result."""
        out = np.empty(len(table), dtype=np.float64)
        for start in range(0, len(table), batch_size):
            idx = np.arange(start, min(start + batch_size, len(table)))
            out[idx] = sigmoid(self.forward(table.take(idx), train=False))
        return out

    def loss_and_grad(
        self, batch: SampleTable, train: bool = True, rng: Optional[np.random.Generator] = None
    ) -> float:
        """Mean BCE on ``batch``; gradients are left in ``self.params``."""
        if len(batch) == 0:
            raise ValueError("Empty batch")
        self.params.zero_grad()
        logits = self.forward(batch, train=train, rng=rng)
        probs = sigmoid(logits)
        loss, _ = bce_loss(probs, batch.labels)
        # sigmoid + BCE fused: dL/dz = (p - y) / n
        self.backward((probs - batch.labels) / len(batch))
        return loss

    def parameter_counts(self) -> Dict[str, int]:
        return self.params.counts()


class LogisticRegressionRaw(CTRModel):
    """sigmoid(w . x + b) over one-hot / multi-hot / normalised numeric inputs."""

    name = "lr-raw"

    def __init__(self, schema: FeatureSchema):
        super().__init__(schema)
        self.offsets: Dict[str, int] = {}
        width = 0
        for f in schema.fields:
            self.offsets[f.name] = width
            width += f.size
        self.input_dim = width
        out = self.params.add_group(ParameterGroup("output"))
        out.add("w", np.zeros((width, 1)))
        out.add("b", np.zeros((1, 1)))
        self._batch: Optional[SampleTable] = None

    def dense_inputs(self, batch: SampleTable) -> np.ndarray:
        """Explicit raw input matrix (n, input_dim)."""
        x = np.zeros((len(batch), self.input_dim))
        rows = np.arange(len(batch))
        for f in self.schema.fields:
            off = self.offsets[f.name]
            if f.kind == "categorical":
                x[rows, off + batch.categorical[f.name]] = 1.0
            elif f.kind == "multi":
                ids, mask = batch.multi[f.name]
                np.add.at(x, (np.repeat(rows, ids.shape[1]), (off + ids).reshape(-1)), mask.reshape(-1))
            else:
                x[:, off] = batch.numeric[f.name]
        return x

    def forward(self, batch, train=False, rng=None):
        _warn_numeric_shift(batch)
        w = self.params.group("output").params["w"][:, 0]
        b = self.params.group("output").params["b"][0, 0]
        z = np.full(len(batch), b)
        for f in self.schema.fields:
            off = self.offsets[f.name]
            if f.kind == "categorical":
                idx = batch.categorical[f.name]
                _check_indices(f.name, idx, f.size)
                z += w[off + idx]
            elif f.kind == "multi":
                ids, mask = batch.multi[f.name]
                _check_indices(f.name, ids, f.size)
                z += (w[off + ids] * mask).sum(axis=1)
            else:
                z += w[off] * batch.numeric[f.name]
        self._batch = batch
        return check_finite(z, "lr-raw logits")

    def backward(self, d_logits):
        batch = self._batch
        grads = self.params.group("output").grads
        gw = grads["w"][:, 0]
        for f in self.schema.fields:
            off = self.offsets[f.name]
            if f.kind == "categorical":
                np.add.at(gw, off + batch.categorical[f.name], d_logits)
            elif f.kind == "multi":
                ids, mask = batch.multi[f.name]
                np.add.at(gw, off + ids, mask * d_logits[:, None])
            else:
                gw[off] += batch.numeric[f.name] @ d_logits
        grads["b"][0, 0] += d_logits.sum()


class LogisticRegressionEmb(CTRModel):
    """Embedding layer, field vectors concatenated to M*d, then sigmoid-affine."""

    name = "lr-emb"

    def __init__(self, schema: FeatureSchema, embedding_dim: int = 16, seed: int = 0):
        super().__init__(schema)
        rng = np.random.default_rng(seed)
        self.embedding = EmbeddingLayer(schema, embedding_dim, rng, self.params.add_group(ParameterGroup("embedding")))
        width = len(schema) * embedding_dim
        out = self.params.add_group(ParameterGroup("output"))
        out.add("w", xavier_uniform(rng, width, 1))
        out.add("b", np.zeros((1, 1)))
        self._cache: Tuple = ()

    def forward(self, batch, train=False, rng=None):
        e = self.embedding.forward(batch)
        flat = e.reshape(len(batch), -1)
        out = self.params.group("output").params
        z, aff = affine_forward(flat, out["w"], out["b"])
        self._cache = (batch, e.shape, aff)
        return check_finite(z[:, 0], "lr-emb logits")

    def backward(self, d_logits):
        batch, e_shape, aff = self._cache
        dx, dw, db = affine_backward(d_logits[:, None], aff)
        g = self.params.group("output").grads
        g["w"] += dw
        g["b"] += db
        self.embedding.backward(batch, dx.reshape(e_shape))


class AutoInt(CTRModel):
    """Embedding -> stacked multi-head self-attention -> MLP(hidden) -> logit.

    Attention scores are plain dot products (no scaling). Each layer's head
    outputs are concatenated, dropped out in training, and added to a residual
    (projected when the width changes) before ReLU.
    """

    name = "autoint"

    def __init__(self, schema: FeatureSchema, config: Optional[AutoIntConfig] = None, seed: int = 0):
        super().__init__(schema)
        self.config = config or AutoIntConfig()
        cfg = self.config
        rng = np.random.default_rng(seed)
        self.embedding = EmbeddingLayer(schema, cfg.embedding_dim, rng, self.params.add_group(ParameterGroup("embedding")))
        inter = self.params.add_group(ParameterGroup("interaction"))
        d_in = cfg.embedding_dim
        self.residual_projected: List[bool] = []
        for layer in range(cfg.attention_layers):
            for key in ("Wq", "Wk", "Wv"):
                inter.add(f"{key}_{layer}", xavier_uniform(rng, d_in, cfg.attention_size))
            projected = d_in != cfg.attention_size
            if projected:
                inter.add(f"Wres_{layer}", xavier_uniform(rng, d_in, cfg.attention_size))
            self.residual_projected.append(projected)
            d_in = cfg.attention_size
        self.d_out = d_in
        out = self.params.add_group(ParameterGroup("output"))
        out.add("W1", xavier_uniform(rng, len(schema) * self.d_out, cfg.hidden_units))
        out.add("b1", np.zeros((1, cfg.hidden_units)))
        if cfg.output_init == "zeros":
            out.add("W2", np.zeros((cfg.hidden_units, 1)))
        else:
            out.add("W2", xavier_uniform(rng, cfg.hidden_units, 1))
        out.add("b2", np.zeros((1, 1)))
        self.last_attention: List[np.ndarray] = []
        self._cache: Dict[str, Any] = {}

    def _split_heads(self, x: np.ndarray) -> np.ndarray:
        n, m, a = x.shape
        h = self.config.heads
        return x.reshape(n, m, h, a // h).transpose(0, 2, 1, 3)

    @staticmethod
    def _merge_heads(x: np.ndarray) -> np.ndarray:
        n, h, m, dh = x.shape
        return x.transpose(0, 2, 1, 3).reshape(n, m, h * dh)

    def attention_forward(
        self, x: np.ndarray, layer: int, train: bool = False, rng: Optional[np.random.Generator] = None
    ) -> Tuple[np.ndarray, Dict[str, Any]]:
        """One interacting layer on field embeddings ``x`` of shape (n, M, d_in)."""
        p = self.params.group("interaction").params
        q = self._split_heads(x @ p[f"Wq_{layer}"])
        k = self._split_heads(x @ p[f"Wk_{layer}"])
        v = self._split_heads(x @ p[f"Wv_{layer}"])
        alpha = softmax_rowwise(q @ k.transpose(0, 1, 3, 2))
        concat = self._merge_heads(alpha @ v)
        dropped, mask = dropout_forward(concat, self.config.dropout, train, rng)
        res = x @ p[f"Wres_{layer}"] if self.residual_projected[layer] else x
        y, relu_cache = relu_forward(dropped + res)
        cache = {"x": x, "q": q, "k": k, "v": v, "alpha": alpha, "mask": mask, "relu": relu_cache}
        return check_finite(y, f"attention layer {layer}"), cache

    def attention_backward(self, dy: np.ndarray, layer: int, cache: Dict[str, Any]) -> np.ndarray:
        group = self.params.group("interaction")
        p, g = group.params, group.grads
        x = cache["x"]
        x2 = x.reshape(-1, x.shape[-1])
        dz = relu_backward(dy, cache["relu"])
        if self.residual_projected[layer]:
            g[f"Wres_{layer}"] += x2.T @ dz.reshape(-1, dz.shape[-1])
            dx = dz @ p[f"Wres_{layer}"].T
        else:
            dx = dz.copy()
        dconcat = dropout_backward(dz, cache["mask"])
        dheads = self._split_heads(dconcat)
        q, k, v, alpha = cache["q"], cache["k"], cache["v"], cache["alpha"]
        dalpha = dheads @ v.transpose(0, 1, 3, 2)
        dv = alpha.transpose(0, 1, 3, 2) @ dheads
        ds = softmax_backward(dalpha, alpha)
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        for key, d in (("Wq", dq), ("Wk", dk), ("Wv", dv)):
            d = self._merge_heads(d)
            g[f"{key}_{layer}"] += x2.T @ d.reshape(-1, d.shape[-1])
            dx += d @ p[f"{key}_{layer}"].T
        return dx

    def forward(self, batch, train=False, rng=None):
        if train and self.config.dropout > 0 and rng is None:
            raise ValueError("Training-mode forward needs a random generator for dropout")
        h = self.embedding.forward(batch)
        layer_caches = []
        self.last_attention = []
        for layer in range(self.config.attention_layers):
            h, c = self.attention_forward(h, layer, train=train, rng=rng)
            layer_caches.append(c)
            self.last_attention.append(c["alpha"])
        n = len(batch)
        flat = h.reshape(n, -1)
        out = self.params.group("output").params
        hid, aff1 = affine_forward(flat, out["W1"], out["b1"])
        act, relu_cache = relu_forward(hid)
        act_d, mask = dropout_forward(act, self.config.dropout, train, rng)
        z, aff2 = affine_forward(act_d, out["W2"], out["b2"])
        self._cache = {
            "batch": batch,
            "layers": layer_caches,
            "h_shape": h.shape,
            "aff1": aff1,
            "relu": relu_cache,
            "mask": mask,
            "aff2": aff2,
        }
        return check_finite(z[:, 0], "autoint logits")

    def backward(self, d_logits):
        c = self._cache
        g = self.params.group("output").grads
        d_act, dW2, db2 = affine_backward(d_logits[:, None], c["aff2"])
        g["W2"] += dW2
        g["b2"] += db2
        d_hid = relu_backward(dropout_backward(d_act, c["mask"]), c["relu"])
        d_flat, dW1, db1 = affine_backward(d_hid, c["aff1"])
        g["W1"] += dW1
        g["b1"] += db1
        dh = d_flat.reshape(c["h_shape"])
        for layer in reversed(range(self.config.attention_layers)):
            dh = self.attention_backward(dh, layer, c["layers"][layer])
        self.embedding.backward(c["batch"], dh)


def build_model(
    name: str,
    schema: FeatureSchema,
    autoint: Optional[AutoIntConfig] = None,
    seed: int = 0,
) -> CTRModel:
    cfg = autoint or AutoIntConfig()
    if name == "lr-raw":
        model: CTRModel = LogisticRegressionRaw(schema)
    elif name == "lr-emb":
        model = LogisticRegressionEmb(schema, embedding_dim=cfg.embedding_dim, seed=seed)
    elif name == "autoint":
        model = AutoInt(schema, cfg, seed=seed)
    else:
        raise ValueError(f"Unknown CTR model '{name}' (expected one of {MODEL_NAMES})")
    logger.debug(
        "%s parameters: %s",
        name,
        ", ".join(f"{k}={v}" for k, v in model.parameter_counts().items()),
    )
    return model


def embed_sample(model: CTRModel, sample: Mapping[str, Any]) -> List[np.ndarray]:
    """Field vectors for one encoded sample (index, index set or normalised scalar per field)."""
    embedding = getattr(model, "embedding", None)
    if embedding is None:
        raise ValueError(f"Model '{model.name}' has no embedding layer")
    table = SampleTable.from_encoded(model.schema, [sample], [0])
    e = embedding.forward(table)[0]
    return [e[m].copy() for m in range(e.shape[0])]


def train_epochs(
    model: CTRModel,
    table: SampleTable,
    optimizer: Any,
    batch_size: int,
    epochs: int,
    seed: int = 0,
) -> List[float]:
    """Shuffled mini-batch training; returns the per-epoch mean loss."""
    if len(table) == 0:
        raise ValueError("Cannot train on an empty dataset")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng(seed)
    trace: List[float] = []
    n = len(table)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            loss = model.loss_and_grad(table.take(idx), train=True, rng=rng)
            optimizer.step(model.params)
            total += loss * len(idx)
        trace.append(total / n)
        logger.debug("%s epoch %d: loss %.5f", model.name, epoch + 1, trace[-1])
    return trace


def save_model(model: CTRModel, directory: Path) -> Path:
    """Writes ``params.json`` and the ``schema.json`` descriptor it was trained against."""
    from . import atomic_write_text

    directory = Path(directory)
    model.params.save(directory / "params.json")
    atomic_write_text(directory / "schema.json", json.dumps(model.schema.descriptor(), indent=2) + "\n")
    return directory


def load_model(model: CTRModel, directory: Path) -> CTRModel:
    directory = Path(directory)
    schema_path = directory / "schema.json"
    if not schema_path.is_file():
        raise FileNotFoundError(f"Schema descriptor not found: {schema_path}")
    stored = json.loads(schema_path.read_text(encoding="utf-8"))
    if stored != model.schema.descriptor():
        raise ValueError(f"Checkpoint in {directory} was trained against a different feature schema")
    model.params.load(directory / "params.json")
    return model
