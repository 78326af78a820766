"""Synthetic data and logistic-regression training for simulated parties.

Parameters are laid out as ``[w_0, ..., w_{dim-1}, bias]``.
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field

import numpy as np

from teefl.errors import InvalidInputError, ShapeError
from teefl.params import ParameterVector, as_vector

PROB_CLAMP = 1e-12
LOGISTIC = "logistic-regression"


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ShapeError(f"features must be a non-empty 2-D array, got {x.shape}")
        if y.shape != (x.shape[0],):
            raise ShapeError("labels must have one entry per sample")
        if not np.all((y == 0) | (y == 1)):
            raise InvalidInputError("labels must be 0 or 1")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    @property
    def size(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def to_bytes(self) -> bytes:
        """Canonical binary form; used for dataset commitments."""
        header = struct.pack(">II", self.size, self.dim)
        return header + self.labels.astype("<i8").tobytes() + self.features.astype("<f8").tobytes()

    def to_text(self) -> str:
        buf = io.StringIO()
        for label, row in zip(self.labels, self.features):
            buf.write(",".join([str(int(label))] + [repr(float(v)) for v in row]))
            buf.write("\n")
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "Dataset":
        labels, rows = [], []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            cells = line.split(",")
            if len(cells) < 2:
                raise InvalidInputError(f"line {lineno}: expected label and features")
            labels.append(int(cells[0]))
            rows.append([float(c) for c in cells[1:]])
        if not rows:
            raise InvalidInputError("empty dataset file")
        return cls(np.array(rows), np.array(labels))


@dataclass(frozen=True)
class ModelSpec:
    dim: int
    model_kind: str = LOGISTIC
    hash: bytes = field(init=False, repr=False)

    def __post_init__(self):
        if self.dim < 1:
            raise InvalidInputError("model dim must be >= 1")
        object.__setattr__(self, "hash", hashlib.sha256(self.canonical_bytes()).digest())

    def canonical_bytes(self) -> bytes:
        kind = self.model_kind.encode("utf-8")
        return struct.pack(">I", self.dim) + struct.pack(">I", len(kind)) + kind

    @property
    def n_params(self) -> int:
        return self.dim + 1


def gen_synthetic(seed: int, n_samples: int, dim: int, margin: float) -> Dataset:
    """Two unit-covariance Gaussian blobs centred at ``±margin`` on axis 0."""
    if n_samples < 2:
        raise InvalidInputError("n_samples must be >= 2")
    if dim < 2:
        raise InvalidInputError("dim must be >= 2")
    if margin < 0:
        raise InvalidInputError("margin must be non-negative")
    rng = np.random.default_rng(seed)
    n_pos = n_samples // 2
    labels = np.zeros(n_samples, dtype=np.int64)
    labels[:n_pos] = 1
    rng.shuffle(labels)
    x = rng.standard_normal((n_samples, dim))
    x[:, 0] += np.where(labels == 1, margin, -margin)
    return Dataset(x, labels)


def init_model(spec: ModelSpec, seed: int) -> ParameterVector:
    rng = np.random.default_rng([seed, spec.dim])
    return rng.uniform(-0.01, 0.01, size=spec.n_params)


def _check_shape(params: np.ndarray, data: Dataset) -> None:
    if params.size != data.dim + 1:
        raise ShapeError(f"params have dim {params.size}, data needs {data.dim + 1}")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def predict_proba(params, features: np.ndarray) -> np.ndarray:
    params = as_vector(params)
    return _sigmoid(features @ params[:-1] + params[-1])


def gradient(params: np.ndarray, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of mean binary cross-entropy w.r.t. ``[w, b]``."""
    err = _sigmoid(features @ params[:-1] + params[-1]) - labels
    g = np.empty_like(params)
    g[:-1] = features.T @ err / labels.shape[0]
    g[-1] = err.mean()
    return g


def local_train(start, data: Dataset, epochs: int, lr: float, batch: int,
                seed: int) -> ParameterVector:
    """Mini-batch SGD on binary cross-entropy from ``start``."""
    params = as_vector(start)
    _check_shape(params, data)
    if epochs < 1 or batch < 1:
        raise InvalidInputError("epochs and batch must be positive")
    if lr < 0:
        raise InvalidInputError("lr must be non-negative")
    rng = np.random.default_rng(seed)
    x, y = data.features, data.labels
    for _ in range(epochs):
        order = rng.permutation(data.size)
        for lo in range(0, data.size, batch):
            idx = order[lo:lo + batch]
            params = params - lr * gradient(params, x[idx], y[idx])
    return params


def evaluate(params, data: Dataset) -> tuple[float, float]:
    """Mean clamped cross-entropy and accuracy (p = 0.5 predicts class 1)."""
    params = as_vector(params)
    _check_shape(params, data)
    p = np.clip(predict_proba(params, data.features), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = data.labels
    loss = -np.mean(y * np.log(p) + (1 - y) * np.log1p(-p))
    acc = np.mean((p >= 0.5).astype(np.int64) == y)
    return float(loss), float(acc)
