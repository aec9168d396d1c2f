"""Synthetic long-tailed Gaussian data and feature-matrix file formats.

Binary layout (``NDM1``): magic, u32 rows, u32 cols, u8 has_labels, then
row-major little-endian float32 features, then u32 labels when present.

CSV layout: optional header ``# d=<cols>[,labeled]``; with ``labeled`` the
last column of each row is the integer class label.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .linear_model import FeatureMatrix

MATRIX_MAGIC = b"NDM1"
SPLIT_NAMES = ("labeled", "unlabeled", "val", "test")


class FeatureFormatError(ValueError):
    pass


class BadMagicError(FeatureFormatError):
    pass


class RaggedRowsError(FeatureFormatError):
    pass


class NonFiniteError(FeatureFormatError):
    pass


class LabelRangeError(FeatureFormatError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    k: int = 5
    d: int = 10
    n1: int = 1000
    rho_l: float = 100.0
    rho_u: float = 100.0
    m1: int = 2000
    sep: float = 3.0
    seed: int = 0
    n_val: int = 50
    n_test: int = 200

    def __post_init__(self):
        if self.k < 2 or self.d < 1:
            raise ValueError("need k >= 2 and d >= 1")
        if self.sep <= 0:
            raise ValueError("sep must be positive")
        if self.rho_l < 1:
            raise ValueError("rho_l must be >= 1")
        if self.rho_u <= 0:
            raise ValueError("rho_u must be positive")
        if self.n_val < 20 or self.n_test < 20:
            raise ValueError("val/test need at least 20 samples per class")


@dataclass(frozen=True)
class DatasetBundle:
    labeled: FeatureMatrix
    unlabeled: FeatureMatrix
    val: FeatureMatrix
    test: FeatureMatrix
    k: int
    unlabeled_truth: np.ndarray | None = None

    def splits(self):
        return dict(zip(SPLIT_NAMES, (self.labeled, self.unlabeled, self.val, self.test)))


def longtail_counts(head, k, rho):
    """N_c = round(head * rho^(-c/(K-1))) for c = 0..K-1."""
    exps = np.arange(k) / (k - 1)
    return np.rint(head * np.power(float(rho), -exps)).astype(np.int64)


def class_means(k, d, sep, rng):
    means = np.zeros((k, d))
    for c in range(min(k, d)):
        means[c, c] = sep
    if k > d:
        extra = rng.standard_normal((k - d, d))
        extra /= np.linalg.norm(extra, axis=1, keepdims=True)
        means[d:] = sep * extra
    return means


def _sample(rng, means, counts):
    labels = np.repeat(np.arange(len(counts)), counts)
    x = means[labels] + rng.standard_normal((labels.size, means.shape[1]))
    # round through float32 so the binary format reproduces the bundle exactly
    return x.astype(np.float32).astype(np.float64), labels


def gen_longtail_gaussians(spec):
    counts_l = longtail_counts(spec.n1, spec.k, spec.rho_l)
    counts_u = longtail_counts(spec.m1, spec.k, spec.rho_u)
    if counts_l.min() < 1 or counts_u.min() < 1:
        raise ValueError("tail class count rounds to 0; increase n1")
    rng = np.random.default_rng(spec.seed)
    means = class_means(spec.k, spec.d, spec.sep, rng)
    xl, yl = _sample(rng, means, counts_l)
    xu, yu = _sample(rng, means, counts_u)
    xv, yv = _sample(rng, means, np.full(spec.k, spec.n_val))
    xt, yt = _sample(rng, means, np.full(spec.k, spec.n_test))
    perm = rng.permutation(yu.size)
    return DatasetBundle(
        labeled=FeatureMatrix(xl, yl),
        unlabeled=FeatureMatrix(xu[perm]),
        val=FeatureMatrix(xv, yv),
        test=FeatureMatrix(xt, yt),
        k=spec.k,
        unlabeled_truth=yu[perm],
    )


# -- binary format -----------------------------------------------------------------


def write_bin(path, fm):
    has_labels = fm.labels is not None
    with open(path, "wb") as fh:
        fh.write(MATRIX_MAGIC)
        fh.write(struct.pack("<IIB", fm.n, fm.d, int(has_labels)))
        fh.write(np.ascontiguousarray(fm.x, dtype="<f4").tobytes())
        if has_labels:
            fh.write(np.asarray(fm.labels, dtype="<u4").tobytes())


def read_bin(path, k=None):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MATRIX_MAGIC:
        raise BadMagicError("bad magic")
    if len(raw) < 13:
        raise FeatureFormatError("truncated header")
    rows, cols, has_labels = struct.unpack("<IIB", raw[4:13])
    n_feat = rows * cols * 4
    expected = 13 + n_feat + (4 * rows if has_labels else 0)
    if len(raw) != expected:
        raise FeatureFormatError(f"expected {expected} bytes, found {len(raw)}")
    x = np.frombuffer(raw[13:13 + n_feat], dtype="<f4").reshape(rows, cols).astype(np.float64)
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("non-finite feature entries")
    labels = None
    if has_labels:
        labels = np.frombuffer(raw[13 + n_feat:], dtype="<u4").astype(np.int64)
        _check_labels(labels, k)
    return FeatureMatrix(x, labels)


# -- CSV format ---------------------------------------------------------------------


def _parse_header(line):
    body = line.lstrip("#").strip()
    parts = [p.strip() for p in body.split(",")]
    if not parts[0].startswith("d="):
        raise FeatureFormatError(f"malformed header: {line!r}")
    return int(parts[0][2:]), "labeled" in parts[1:]


def write_csv(path, fm):
    labeled = fm.labels is not None
    with open(path, "w") as fh:
        fh.write(f"# d={fm.d}{',labeled' if labeled else ''}\n")
        for i in range(fm.n):
            cells = [repr(float(v)) for v in fm.x[i]]
            if labeled:
                cells.append(str(int(fm.labels[i])))
            fh.write(",".join(cells) + "\n")


def read_csv(path, k=None):
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    d, labeled = None, False
    if lines and lines[0].lstrip("# ").startswith("d="):
        d, labeled = _parse_header(lines[0])
        lines = lines[1:]
    rows = [ln.split(",") for ln in lines]
    if not rows:
        raise FeatureFormatError("no data rows")
    width = len(rows[0]) if d is None else d + int(labeled)
    if any(len(r) != width for r in rows):
        raise RaggedRowsError("rows have differing numbers of columns")
    table = np.array([[float(v) for v in r] for r in rows])
    if not np.all(np.isfinite(table)):
        raise NonFiniteError("non-finite feature entries")
    if labeled:
        raw_labels = table[:, -1]
        labels = raw_labels.astype(np.int64)
        if np.any(labels != raw_labels):
            raise LabelRangeError("labels must be integers")
        _check_labels(labels, k)
        return FeatureMatrix(table[:, :-1], labels)
    return FeatureMatrix(table)


def _check_labels(labels, k):
    if labels.size and (labels.min() < 0 or (k is not None and labels.max() >= k)):
        raise LabelRangeError(f"label out of range [0, {k})")


def load_features(path, fmt=None, k=None):
    fmt = fmt or ("csv" if str(path).endswith(".csv") else "bin")
    if fmt == "csv":
        return read_csv(path, k)
    if fmt == "bin":
        return read_bin(path, k)
    raise ValueError(f"unknown format {fmt!r}")


# -- bundles on disk ------------------------------------------------------------------


def _sha256(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def save_bundle(bundle, out_dir, spec=None):
    os.makedirs(out_dir, exist_ok=True)
    files = {}
    for name, fm in bundle.splits().items():
        path = os.path.join(out_dir, f"{name}.bin")
        write_bin(path, fm)
        files[name] = {"file": f"{name}.bin", "rows": fm.n, "cols": fm.d,
                       "sha256": _sha256(path)}
    manifest = {"schema": "ndopt.dataset/1", "k": bundle.k, "files": files}
    if spec is not None:
        manifest["spec"] = asdict(spec)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def load_bundle(data_dir):
    with open(os.path.join(data_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    k = manifest["k"]
    parts = {name: read_bin(os.path.join(data_dir, manifest["files"][name]["file"]), k)
             for name in SPLIT_NAMES}
    return DatasetBundle(parts["labeled"], parts["unlabeled"], parts["val"], parts["test"], k)


def median_within_class_std(fm):
    """Median over classes and dims of the per-class feature std."""
    stds = [fm.x[fm.labels == c].std(axis=0) for c in np.unique(fm.labels)
            if np.sum(fm.labels == c) > 1]
    if not stds:
        return 1.0
    return float(np.median(np.concatenate(stds)))


def imbalance_profile(spec):
    return longtail_counts(spec.n1, spec.k, spec.rho_l), longtail_counts(spec.m1, spec.k, spec.rho_u)

