"""Dense numerical core: layer kernels with hand-written backward passes,
binary cross-entropy, optimizers, parameter groups and gradient checking.

Everything is float64 numpy. Layer functions return ``(output, cache)`` and
the matching ``*_backward`` consumes the cache.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

BCE_EPS = 1e-7
GRAD_CHECK_FLOOR = 1e-8
CHECKPOINT_FORMAT = "fedrec-params"
CHECKPOINT_VERSION = 1


def check_finite(arr: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"Non-finite values in {what}")
    return arr


def as_tensor(values: Any, rows: Optional[int] = None, cols: Optional[int] = None) -> np.ndarray:
    """Coerce to a finite 2-D float64 array; 1-D input becomes a row vector."""
    arr = np.asarray(values, dtype=np.float64)
    if rows is not None and cols is not None:
        if arr.size != rows * cols:
            raise ValueError(f"Expected {rows * cols} values for a {rows}x{cols} tensor, got {arr.size}")
        arr = arr.reshape(rows, cols)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2:
        raise ValueError(f"Expected a 2-D tensor, got shape {arr.shape}")
    return check_finite(arr)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul output")


# --- Layers ---

def affine_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, Tuple]:
    """``x @ w + b`` over the last axis; x may carry extra leading axes."""
    if x.shape[-1] != w.shape[0] or b.shape[-1] != w.shape[1]:
        raise ValueError(f"affine shape mismatch: x{x.shape} w{w.shape} b{b.shape}")
    out = x @ w + b.reshape(-1)
    return out, (x, w)


def affine_backward(dout: np.ndarray, cache: Tuple) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    x, w = cache
    if dout.shape[:-1] != x.shape[:-1] or dout.shape[-1] != w.shape[1]:
        raise ValueError(f"affine backward shape mismatch: dout{dout.shape} x{x.shape}")
    dx = dout @ w.T
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    dw = x2.T @ d2
    db = d2.sum(axis=0).reshape(1, -1)
    return dx, dw, db


def relu_forward(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return np.maximum(x, 0.0), x


def relu_backward(dout: np.ndarray, cache: np.ndarray) -> np.ndarray:
    if dout.shape != cache.shape:
        raise ValueError(f"relu backward shape mismatch: {dout.shape} vs {cache.shape}")
    return dout * (cache > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_forward(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    out = sigmoid(np.asarray(x, dtype=np.float64))
    return out, out


def sigmoid_backward(dout: np.ndarray, cache: np.ndarray) -> np.ndarray:
    if dout.shape != cache.shape:
        raise ValueError(f"sigmoid backward shape mismatch: {dout.shape} vs {cache.shape}")
    return dout * cache * (1.0 - cache)


def softmax_rowwise(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis."""
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(dout: np.ndarray, probs: np.ndarray) -> np.ndarray:
    inner = (dout * probs).sum(axis=-1, keepdims=True)
    return probs * (dout - inner)


def dropout_forward(
    x: np.ndarray,
    mask_prob: float,
    train: bool,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Inverted dropout: kept units are scaled by 1/(1-p) in training; eval is identity."""
    if not 0.0 <= mask_prob < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {mask_prob}")
    if not train or mask_prob == 0.0:
        return x, None
    if rng is None:
        raise ValueError("Training-mode dropout needs a random generator")
    mask = (rng.random(x.shape) >= mask_prob) / (1.0 - mask_prob)
    return x * mask, mask


def dropout_backward(dout: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    return dout if mask is None else dout * mask


def dropout(x: np.ndarray, mask_prob: float, train: bool, seed: int = 0) -> np.ndarray:
    out, _ = dropout_forward(x, mask_prob, train, np.random.default_rng(seed))
    return out


# --- Loss ---

def bce_loss(probs: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient with respect to ``probs``.

    Probabilities are clamped to [eps, 1 - eps] first; the gradient is that of
    the clamped expression.
    """
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if p.size == 0:
        raise ValueError("bce_loss on an empty batch")
    if p.shape != y.shape:
        raise ValueError(f"bce_loss shape mismatch: {p.shape} vs {y.shape}")
    check_finite(p, "probabilities")
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    n = p.size
    loss = -float(np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)))
    grad = (-(y / pc) + (1.0 - y) / (1.0 - pc)) / n
    grad = np.where((p > BCE_EPS) & (p < 1.0 - BCE_EPS), grad, 0.0)
    return loss, grad.reshape(np.shape(probs))


# --- Parameters ---

@dataclass
class ParameterGroup:
    """Named tensors with gradient buffers of identical shape."""

    name: str
    params: Dict[str, np.ndarray] = field(default_factory=dict)
    grads: Dict[str, np.ndarray] = field(default_factory=dict)

    def add(self, tensor_name: str, value: np.ndarray) -> np.ndarray:
        value = np.ascontiguousarray(value, dtype=np.float64)
        self.params[tensor_name] = value
        self.grads[tensor_name] = np.zeros_like(value)
        return value

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def items(self) -> Iterator[Tuple[str, np.ndarray, np.ndarray]]:
        for k, p in self.params.items():
            yield k, p, self.grads[k]


class ParameterSet:
    """Ordered, uniquely named parameter groups."""

    def __init__(self, groups: Iterable[ParameterGroup] = ()):
        self.groups: List[ParameterGroup] = []
        for g in groups:
            self.add_group(g)

    def add_group(self, group: ParameterGroup) -> ParameterGroup:
        if group.name in self.names():
            raise ValueError(f"Duplicate parameter group '{group.name}'")
        self.groups.append(group)
        return group

    def names(self) -> List[str]:
        return [g.name for g in self.groups]

    def group(self, name: str) -> ParameterGroup:
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(f"No parameter group '{name}' (have {self.names()})")

    def __contains__(self, name: object) -> bool:
        return name in self.names()

    def __iter__(self) -> Iterator[ParameterGroup]:
        return iter(self.groups)

    def zero_grad(self) -> None:
        for g in self.groups:
            g.zero_grad()

    def counts(self) -> Dict[str, int]:
        return {g.name: g.count() for g in self.groups}

    def copy(self, names: Optional[Sequence[str]] = None) -> "ParameterSet":
        out = ParameterSet()
        for gname, tensors in self.snapshot(names).items():
            group = out.add_group(ParameterGroup(gname))
            for k, v in tensors.items():
                group.add(k, v)
        return out

    def structure(self) -> List[Tuple[str, str, Tuple[int, ...]]]:
        return [(g.name, k, p.shape) for g in self.groups for k, p in g.params.items()]

    def snapshot(self, names: Optional[Sequence[str]] = None) -> Dict[str, Dict[str, np.ndarray]]:
        """Deep copy of parameter values, optionally restricted to some groups."""
        keep = set(names) if names is not None else set(self.names())
        return {g.name: {k: p.copy() for k, p in g.params.items()} for g in self.groups if g.name in keep}

    def load_snapshot(self, values: Mapping[str, Mapping[str, np.ndarray]]) -> None:
        """Overwrite parameters in place (model references stay valid)."""
        for gname, tensors in values.items():
            group = self.group(gname)
            for tname, arr in tensors.items():
                target = group.params.get(tname)
                if target is None or target.shape != np.shape(arr):
                    raise ValueError(f"Tensor {gname}/{tname} missing or shape mismatch")
                np.copyto(target, arr)

    def to_document(self, names: Optional[Sequence[str]] = None) -> Dict[str, Any]:
        keep = set(names) if names is not None else set(self.names())
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "groups": [
                {
                    "name": g.name,
                    "tensors": [
                        {"name": k, "shape": list(p.shape), "values": p.reshape(-1).tolist()}
                        for k, p in g.params.items()
                    ],
                }
                for g in self.groups
                if g.name in keep
            ],
        }

    def save(self, path: Path, names: Optional[Sequence[str]] = None) -> Path:
        from . import atomic_write_text

        atomic_write_text(Path(path), json.dumps(self.to_document(names)) + "\n")
        return Path(path)

    def load(self, path: Path) -> None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"Checkpoint not found: {path}")
        self.load_snapshot(read_checkpoint(path))


def read_checkpoint(path: Path) -> Dict[str, Dict[str, np.ndarray]]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION} checkpoint")
    out: Dict[str, Dict[str, np.ndarray]] = {}
    for g in doc["groups"]:
        out[g["name"]] = {
            t["name"]: np.asarray(t["values"], dtype=np.float64).reshape(t["shape"]) for t in g["tensors"]
        }
    return out


# --- Optimizers ---

def sgd_step(param: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    """In-place ``w <- w - lr * g``."""
    if param.shape != grad.shape:
        raise ValueError(f"sgd shape mismatch: {param.shape} vs {grad.shape}")
    param -= lr * grad
    return param


@dataclass
class AdamSlot:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adam_step(
    param: np.ndarray,
    grad: np.ndarray,
    slot: AdamSlot,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> np.ndarray:
    """One bias-corrected Adam update, in place on ``param`` and ``slot``."""
    if param.shape != grad.shape or slot.m.shape != param.shape or slot.v.shape != param.shape:
        raise ValueError(f"adam shape mismatch: param{param.shape} grad{grad.shape} state{slot.m.shape}")
    slot.t += 1
    slot.m *= beta1
    slot.m += (1.0 - beta1) * grad
    slot.v *= beta2
    slot.v += (1.0 - beta2) * grad * grad
    m_hat = slot.m / (1.0 - beta1**slot.t)
    v_hat = slot.v / (1.0 - beta2**slot.t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return param


class SGD:
    def __init__(self, lr: float = 1e-3):
        self.lr = lr

    def step(self, params: ParameterSet) -> None:
        for group in params:
            for _, p, g in group.items():
                sgd_step(p, g, self.lr)


class Adam:
    """Adam over a ParameterSet; state is keyed by (group, tensor)."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state: Dict[Tuple[str, str], AdamSlot] = {}

    def step(self, params: ParameterSet) -> None:
        for group in params:
            for name, p, g in group.items():
                slot = self.state.get((group.name, name))
                if slot is None:
                    slot = AdamSlot(np.zeros_like(p), np.zeros_like(p))
                    self.state[(group.name, name)] = slot
                adam_step(p, g, slot, self.lr, self.beta1, self.beta2, self.eps)


def build_optimizer(name: str, lr: float):
    name = name.lower()
    if name == "adam":
        return Adam(lr=lr)
    if name == "sgd":
        return SGD(lr=lr)
    raise ValueError(f"Unknown optimizer '{name}' (expected 'adam' or 'sgd')")


# --- Gradient checking ---

@dataclass
class GradientCheckReport:
    max_rel_error: float
    per_group: Dict[str, float]
    coordinates: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), GRAD_CHECK_FLOOR)


def gradient_check(
    loss_fn: Callable[[], float],
    params: ParameterSet,
    tolerance: float = 1e-4,
    h: float = 1e-4,
    coords_per_group: int = 50,
    seed: int = 0,
    analytic: Optional[Mapping[str, Mapping[str, np.ndarray]]] = None,
) -> GradientCheckReport:
    """Compare analytic gradients against central differences.

    ``loss_fn`` evaluates the loss at the current parameter values and fills
    the gradient buffers. The analytic gradients are those left in the buffers
    by a first call, unless ``analytic`` supplies them explicitly. At most
    ``coords_per_group`` coordinates are sampled per group (all of them when
    the group is smaller).
    """
    rng = np.random.default_rng(seed)
    params.zero_grad()
    base = loss_fn()
    if not math.isfinite(base):
        raise FloatingPointError("Loss is not finite at the checked point")
    if analytic is None:
        analytic = {g.name: {k: gr.copy() for k, gr in g.grads.items()} for g in params}

    per_group: Dict[str, float] = {}
    total = 0
    for group in params:
        sizes = [(k, p.size) for k, p in group.params.items()]
        flat = [(k, i) for k, n in sizes for i in range(n)]
        if not flat:
            continue
        picks = rng.choice(len(flat), size=min(coords_per_group, len(flat)), replace=False)
        worst = 0.0
        for idx in picks:
            k, i = flat[int(idx)]
            p = group.params[k].reshape(-1)
            old = p[i]
            p[i] = old + h
            plus = loss_fn()
            p[i] = old - h
            minus = loss_fn()
            p[i] = old
            if not (math.isfinite(plus) and math.isfinite(minus)):
                raise FloatingPointError(f"Non-finite loss while perturbing {group.name}/{k}")
            numeric = (plus - minus) / (2.0 * h)
            a = float(np.asarray(analytic[group.name][k]).reshape(-1)[i])
            worst = max(worst, relative_error(a, numeric))
        per_group[group.name] = worst
        total += len(picks)
    params.zero_grad()
    loss_fn()
    return GradientCheckReport(
        max_rel_error=max(per_group.values(), default=0.0),
        per_group=per_group,
        coordinates=total,
        tolerance=tolerance,
    )
