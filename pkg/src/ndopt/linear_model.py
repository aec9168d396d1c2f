"""Linear softmax classifier over fixed features, with feature-space mixup.

The classifier scores ``h(x) = W^T x``. A bias is modelled by appending a
constant-1 column to the features (:func:`add_bias`), so every gradient below
is with respect to the single matrix ``W`` of shape (d, K).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from ._math import log_softmax, softmax

CHECKPOINT_MAGIC = b"NDW1"


@dataclass(frozen=True)
class FeatureMatrix:
    x: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] < 1:
            raise ValueError("features must be an N x d matrix with d >= 1")
        if not np.all(np.isfinite(x)):
            raise ValueError("features contain non-finite entries")
        object.__setattr__(self, "x", x)
        if self.labels is not None:
            y = np.asarray(self.labels, dtype=np.int64)
            if y.shape != (x.shape[0],):
                raise ValueError("labels must have one entry per row")
            if y.size and y.min() < 0:
                raise ValueError("labels must be nonnegative")
            object.__setattr__(self, "labels", y)

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def d(self):
        return self.x.shape[1]


@dataclass(frozen=True)
class LinearClassifier:
    w: np.ndarray

    def __post_init__(self):
        w = np.array(self.w, dtype=np.float64)
        if w.ndim != 2:
            raise ValueError("weights must be a d x K matrix")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights contain non-finite entries")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    @property
    def d(self):
        return self.w.shape[0]

    @property
    def k(self):
        return self.w.shape[1]

    @classmethod
    def zeros(cls, d, k):
        return cls(np.zeros((d, k)))


@dataclass(frozen=True)
class ClassCentroids:
    z: np.ndarray
    source_counts: np.ndarray


@dataclass(frozen=True)
class MixupDirection:
    v: np.ndarray
    pair: tuple


@dataclass(frozen=True)
class TrainConfig:
    eta: float = 0.05
    beta_min: float = 0.6
    batch_size: int = 64
    steps_per_cycle: int = 50
    cycles: int = 20
    weight_decay: float = 0.0
    seed: int = 0
    s: float = 10.0

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if not 0.0 <= self.beta_min <= 1.0:
            raise ValueError("beta_min must lie in [0, 1]")
        if self.batch_size < 1 or self.steps_per_cycle < 1 or self.cycles < 0:
            raise ValueError("batch_size and steps_per_cycle must be positive, cycles nonnegative")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")

    @property
    def beta_eval(self):
        return 0.5 * (1.0 + self.beta_min)


def add_bias(x):
    x = np.asarray(x, dtype=np.float64)
    return np.hstack([x, np.ones((x.shape[0], 1))])


def _features(x):
    return x.x if isinstance(x, FeatureMatrix) else np.atleast_2d(np.asarray(x, dtype=np.float64))


def logits(m, x):
    xs = _features(x)
    if xs.shape[1] != m.d:
        raise ValueError(f"feature dim {xs.shape[1]} does not match classifier dim {m.d}")
    return xs @ m.w


def predict_probs(m, x):
    return softmax(logits(m, x), axis=1)


def predict(m, x):
    # np.argmax returns the first maximal index, i.e. ties go to the lowest class
    return np.argmax(logits(m, x), axis=1)


def class_centroids(val, k=None):
    if val.labels is None:
        raise ValueError("centroids need labelled features")
    k = int(val.labels.max()) + 1 if k is None else k
    counts = np.bincount(val.labels, minlength=k)
    if counts.size > k or np.any(counts[:k] == 0):
        missing = [int(i) for i in np.flatnonzero(counts[:k] == 0)]
        raise ValueError(f"centroid undefined for classes {missing}")
    sums = np.zeros((k, val.d))
    np.add.at(sums, val.labels, val.x)
    return ClassCentroids(sums / counts[:, None], counts)


def mixup_loss(m, f1, f2, y, beta):
    zeta = beta * np.asarray(f1, dtype=np.float64) + (1.0 - beta) * np.asarray(f2, dtype=np.float64)
    return float(-log_softmax(zeta @ m.w)[y])


def mixup_direction(m, z, i, j, beta_eval):
    """Negative gradient of the centroid mixup loss for pair (i, j)."""
    zc = z.z if isinstance(z, ClassCentroids) else np.asarray(z)
    zeta = beta_eval * zc[i] + (1.0 - beta_eval) * zc[j]
    p = softmax(zeta @ m.w)
    target = np.zeros(m.k)
    target[i] = 1.0
    return MixupDirection(np.outer(zeta, target - p), (int(i), int(j)))


def _as_batch(batch):
    if isinstance(batch, tuple) and len(batch) == 4 and np.ndim(batch[0]) == 2:
        f1, f2, y, beta = batch
    else:
        if len(batch) == 0:
            raise ValueError("empty batch")
        f1 = np.array([b[0] for b in batch], dtype=np.float64)
        f2 = np.array([b[1] for b in batch], dtype=np.float64)
        y = np.array([b[2] for b in batch], dtype=np.int64)
        beta = np.array([b[3] for b in batch], dtype=np.float64)
    return (np.asarray(f1, dtype=np.float64), np.asarray(f2, dtype=np.float64),
            np.asarray(y, dtype=np.int64), np.asarray(beta, dtype=np.float64))


def mixup_batch_loss(m, batch):
    f1, f2, y, beta = _as_batch(batch)
    zeta = beta[:, None] * f1 + (1.0 - beta[:, None]) * f2
    lp = log_softmax(zeta @ m.w, axis=1)
    return float(-np.mean(lp[np.arange(y.size), y]))


def mixup_batch_grad(m, batch):
    """Mean SCE-mixup gradient over the batch, shape (d, K)."""
    f1, f2, y, beta = _as_batch(batch)
    if y.size == 0:
        raise ValueError("empty batch")
    zeta = beta[:, None] * f1 + (1.0 - beta[:, None]) * f2
    resid = softmax(zeta @ m.w, axis=1)
    resid[np.arange(y.size), y] -= 1.0
    return zeta.T @ resid / y.size


def sgd_mixup_step(m, batch, cfg):
    grad = mixup_batch_grad(m, batch)
    return LinearClassifier(m.w - cfg.eta * (grad + cfg.weight_decay * m.w))


def sce_grad(w, x, y, sample_weight=None):
    resid = softmax(x @ w, axis=1)
    resid[np.arange(y.size), y] -= 1.0
    if sample_weight is not None:
        resid *= sample_weight[:, None]
        return x.T @ resid / np.sum(sample_weight)
    return x.T @ resid / y.size


def fit_softmax(x, y, k, eta=0.5, steps=500, weight_decay=1e-4, w0=None):
    """Full-batch gradient descent on softmax cross-entropy (ERM baseline)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    w = np.zeros((x.shape[1], k)) if w0 is None else np.array(w0, dtype=np.float64)
    for _ in range(steps):
        w -= eta * (sce_grad(w, x, y) + weight_decay * w)
    return LinearClassifier(w)


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(m, path, config=None):
    """Write ``NDW1`` binary weights plus a JSON sidecar next to it."""
    d, k = m.w.shape
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", d, k))
        fh.write(np.asarray(m.w, dtype="<f8").tobytes(order="F"))
    sidecar = {"d": d, "k": k}
    if config is not None:
        sidecar["config"] = asdict(config) if hasattr(config, "__dataclass_fields__") else config
    with open(f"{path}.json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError("bad magic")
    d, k = struct.unpack("<II", raw[4:12])
    body = raw[12:]
    if len(body) != 8 * d * k:
        raise ValueError("truncated checkpoint")
    w = np.frombuffer(body, dtype="<f8").reshape((d, k), order="F")
    return LinearClassifier(w.astype(np.float64))
