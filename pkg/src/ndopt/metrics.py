"""Confusion matrices, non-decomposable metrics and their unconstrained gradients.

A confusion matrix ``C`` holds the joint probability of (true class, predicted
class); row ``i`` sums to the class prior ``pi[i]``. Metrics are evaluated on
per-class recalls ``rec_i = C_ii / sum_j C_ij`` and coverages
``cov_j = sum_i C_ij``.

Gradients are taken with respect to the unconstrained matrix ``C~`` where each
row is mapped through ``C_i = pi_i * softmax(C~_i)``. Lagrange multipliers are
held constant while differentiating.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from ._math import softmax

PROB_TOL = 1e-9
RECALL_CLAMP = 1e-12


class MetricKind(str, enum.Enum):
    MEAN_RECALL = "mean"
    MIN_RECALL = "min-recall"
    GMEAN = "gmean"
    HMEAN = "hmean"
    MEAN_RECALL_COVERAGE = "mean-cov"
    HMEAN_COVERAGE = "hmean-cov"
    MIN_HEAD_TAIL_RECALL = "min-ht"
    MEAN_RECALL_HT_COVERAGE = "mean-ht-cov"

    @property
    def is_head_tail(self):
        return self in (MetricKind.MIN_HEAD_TAIL_RECALL, MetricKind.MEAN_RECALL_HT_COVERAGE)

    @property
    def is_coverage(self):
        return self in (
            MetricKind.MEAN_RECALL_COVERAGE,
            MetricKind.HMEAN_COVERAGE,
            MetricKind.MEAN_RECALL_HT_COVERAGE,
        )

    @property
    def is_min_recall(self):
        return self in (MetricKind.MIN_RECALL, MetricKind.MIN_HEAD_TAIL_RECALL)

    @property
    def needs_clamp(self):
        return self in (MetricKind.GMEAN, MetricKind.HMEAN, MetricKind.HMEAN_COVERAGE)


class DegeneratePriorError(ValueError):
    pass


@dataclass(frozen=True)
class ClassPrior:
    pi: np.ndarray

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=np.float64)
        if pi.ndim != 1 or pi.size < 2:
            raise ValueError("class prior needs K >= 2 entries")
        if np.any(pi < 0) or abs(pi.sum() - 1.0) > PROB_TOL:
            raise ValueError("class prior must be nonnegative and sum to 1")
        object.__setattr__(self, "pi", pi)

    @property
    def k(self):
        return self.pi.size


@dataclass(frozen=True)
class ConfusionMatrix:
    c: np.ndarray
    pi: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.c, dtype=np.float64)
        pi = ClassPrior(self.pi).pi
        k = pi.size
        if c.shape != (k, k):
            raise ValueError(f"confusion matrix must be {k}x{k}, got {c.shape}")
        if np.any(c < -PROB_TOL) or np.any(c > 1 + PROB_TOL):
            raise ValueError("confusion entries must lie in [0, 1]")
        if abs(c.sum() - 1.0) > PROB_TOL:
            raise ValueError("confusion matrix must sum to 1")
        if np.max(np.abs(c.sum(axis=1) - pi)) > PROB_TOL:
            raise ValueError("confusion rows must sum to the class prior")
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "pi", pi)

    @property
    def k(self):
        return self.pi.size

    def to_dict(self):
        return {"k": self.k, "pi": self.pi.tolist(), "c": self.c.tolist()}

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, obj):
        c = np.asarray(obj["c"], dtype=np.float64)
        if c.shape != (obj["k"], obj["k"]):
            raise ValueError("'k' does not match matrix shape")
        return cls(c, np.asarray(obj["pi"], dtype=np.float64))

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def to_csv(self):
        return matrix_to_csv(self.c)


def matrix_to_csv(m):
    """Row-major CSV with 9 significant digits."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for row in np.atleast_2d(m):
        writer.writerow([f"{v:.9g}" for v in row])
    return buf.getvalue()


@dataclass(frozen=True)
class MetricSpec:
    kind: MetricKind
    omega: float = 20.0
    lambda_max: float = 100.0
    tau_cov: float = 0.01
    alpha: float = 0.95
    head_set: tuple = ()
    tail_set: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", MetricKind(self.kind))
        if self.omega <= 0 or self.lambda_max <= 0 or self.tau_cov <= 0:
            raise ValueError("omega, lambda_max and tau_cov must be positive")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        object.__setattr__(self, "head_set", tuple(int(i) for i in self.head_set))
        object.__setattr__(self, "tail_set", tuple(int(i) for i in self.tail_set))

    def check_partition(self, k):
        if not self.kind.is_head_tail:
            return
        head, tail = set(self.head_set), set(self.tail_set)
        if not head or not tail:
            raise ValueError("head-tail metric needs nonempty head and tail sets")
        if head & tail or head | tail != set(range(k)):
            raise ValueError("head and tail sets must partition the classes")

    def with_default_partition(self, class_counts):
        """Tail = the ceil(K/10) least frequent classes, the rest is head."""
        counts = np.asarray(class_counts)
        k = counts.size
        n_tail = math.ceil(k / 10)
        order = np.argsort(counts, kind="stable")
        tail = tuple(sorted(int(i) for i in order[:n_tail]))
        head = tuple(i for i in range(k) if i not in tail)
        return MetricSpec(self.kind, self.omega, self.lambda_max, self.tau_cov,
                          self.alpha, head, tail)


@dataclass(frozen=True)
class LagrangeState:
    lam: np.ndarray
    domain: str  # "simplex" or "nonneg"
    lambda_max: float = math.inf

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=np.float64)
        object.__setattr__(self, "lam", lam)
        if self.domain == "simplex":
            if np.any(lam < 0) or abs(lam.sum() - 1.0) > PROB_TOL:
                raise ValueError("simplex multipliers must be nonnegative and sum to 1")
        elif self.domain == "nonneg":
            if np.any(lam < 0) or np.any(lam > self.lambda_max):
                raise ValueError("multipliers must lie in [0, lambda_max]")
        else:
            raise ValueError(f"unknown multiplier domain {self.domain!r}")


@dataclass(frozen=True)
class MetricGradient:
    d_psi_d_ctilde: np.ndarray
    pi: np.ndarray
    clamped: bool = False

    def to_dict(self):
        return {"k": int(self.pi.size), "pi": self.pi.tolist(),
                "c": self.d_psi_d_ctilde.tolist(), "clamped": self.clamped}

    def to_json(self):
        return json.dumps(self.to_dict())

    def to_csv(self):
        return matrix_to_csv(self.d_psi_d_ctilde)


# -- construction ------------------------------------------------------------


def confusion_from_predictions(true_labels, predicted_labels, k=None):
    y = np.asarray(true_labels, dtype=np.int64)
    yhat = np.asarray(predicted_labels, dtype=np.int64)
    if y.size == 0:
        raise ValueError("empty evaluation set")
    if y.shape != yhat.shape:
        raise ValueError("label and prediction lists differ in length")
    if k is None:
        k = int(max(y.max(), yhat.max())) + 1
    if y.min() < 0 or yhat.min() < 0 or y.max() >= k or yhat.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    counts = np.zeros((k, k))
    np.add.at(counts, (y, yhat), 1.0)
    pi = counts.sum(axis=1) / y.size
    if np.any(pi == 0):
        raise DegeneratePriorError("degenerate prior: some class has no true samples")
    return ConfusionMatrix(counts / y.size, pi)


def reparam_confusion(c_tilde, pi):
    """Map an unconstrained K x K matrix to a confusion matrix, row-wise."""
    ct = np.asarray(c_tilde, dtype=np.float64)
    pi = ClassPrior(pi).pi
    if ct.shape != (pi.size, pi.size):
        raise ValueError("c_tilde must be K x K")
    if not np.all(np.isfinite(ct)):
        raise ValueError("c_tilde has non-finite entries")
    return ConfusionMatrix(pi[:, None] * softmax(ct, axis=1), pi)


def recalls_and_coverages(c):
    cm = c.c if isinstance(c, ConfusionMatrix) else np.asarray(c, dtype=np.float64)
    rows = cm.sum(axis=1)
    if np.any(rows <= 0):
        raise DegeneratePriorError("degenerate prior: zero row in confusion matrix")
    return np.diag(cm) / rows, cm.sum(axis=0)


# -- metric values and partial derivatives ------------------------------------


def initial_lagrange(spec, k):
    """Uniform simplex for min-recall kinds, zeros for coverage kinds."""
    kind = spec.kind
    size = 2 if kind.is_head_tail else k
    if kind.is_min_recall:
        return LagrangeState(np.full(size, 1.0 / size), "simplex")
    if kind.is_coverage:
        return LagrangeState(np.zeros(size), "nonneg", spec.lambda_max)
    return None


def _recalls(spec, cm):
    rows = cm.sum(axis=1)
    if np.any(rows <= 0):
        raise DegeneratePriorError("degenerate prior: zero row in confusion matrix")
    diag = np.diag(cm)
    clamped = False
    if spec.kind.needs_clamp and np.any(diag < RECALL_CLAMP):
        diag = np.maximum(diag, RECALL_CLAMP)
        clamped = True
    return diag / rows, rows, clamped


def _lam(spec, lam, size):
    if lam is None:
        raise ValueError(f"metric {spec.kind.value} needs Lagrange multipliers")
    vec = lam.lam if isinstance(lam, LagrangeState) else np.asarray(lam, dtype=np.float64)
    if vec.shape != (size,):
        raise ValueError(f"expected {size} multipliers, got shape {vec.shape}")
    return vec


def _value_and_partials(spec, cm, lam):
    """psi together with d psi / d rec_i and d psi / d cov_j."""
    k = cm.shape[0]
    spec.check_partition(k)
    rec, _, clamped = _recalls(spec, cm)
    cov = cm.sum(axis=0)
    kind = spec.kind
    d_rec = np.zeros(k)
    d_cov = np.zeros(k)

    if kind in (MetricKind.MEAN_RECALL, MetricKind.MEAN_RECALL_COVERAGE,
                MetricKind.MEAN_RECALL_HT_COVERAGE):
        value = rec.mean()
        d_rec[:] = 1.0 / k
    elif kind is MetricKind.MIN_RECALL:
        lv = _lam(spec, lam, k)
        value = float(lv @ rec)
        d_rec[:] = lv
    elif kind is MetricKind.GMEAN:
        value = float(np.exp(np.mean(np.log(rec))))
        d_rec[:] = value / (k * rec)
    elif kind in (MetricKind.HMEAN, MetricKind.HMEAN_COVERAGE):
        value = k / np.sum(1.0 / rec)
        d_rec[:] = value**2 / (k * rec**2)
    elif kind is MetricKind.MIN_HEAD_TAIL_RECALL:
        lv = _lam(spec, lam, 2)
        head, tail = list(spec.head_set), list(spec.tail_set)
        d_rec[head] = lv[0] / len(head)
        d_rec[tail] = lv[1] / len(tail)
        value = float(d_rec @ rec)
    else:  # pragma: no cover - enum is closed
        raise ValueError(kind)

    target = spec.alpha / k
    if kind in (MetricKind.MEAN_RECALL_COVERAGE, MetricKind.HMEAN_COVERAGE):
        lv = _lam(spec, lam, k)
        value += float(lv @ (cov - target))
        d_cov[:] = lv
    elif kind is MetricKind.MEAN_RECALL_HT_COVERAGE:
        lv = _lam(spec, lam, 2)
        head, tail = list(spec.head_set), list(spec.tail_set)
        d_cov[head] = lv[0] / len(head)
        d_cov[tail] = lv[1] / len(tail)
        value += float(lv[0] * (cov[head].sum() / len(head) - target)
                       + lv[1] * (cov[tail].sum() / len(tail) - target))
    return float(value), d_rec, d_cov, clamped


def metric_value(spec, c, lam=None):
    cm = c.c if isinstance(c, ConfusionMatrix) else np.asarray(c, dtype=np.float64)
    return _value_and_partials(spec, cm, lam)[0]


def metric_grad_confusion(spec, c, lam=None):
    """d psi / d C as a K x K matrix, with the row sums held at their priors."""
    cm = c.c if isinstance(c, ConfusionMatrix) else np.asarray(c, dtype=np.float64)
    _, d_rec, d_cov, clamped = _value_and_partials(spec, cm, lam)
    rows = cm.sum(axis=1)
    d_c = np.diag(d_rec / rows) + d_cov[None, :]
    return d_c, clamped


def metric_grad_unconstrained(spec, c, lam=None):
    """Chain d psi / d C through the row-softmax map to get d psi / d C~.

    The softmax Jacobian of row i is C_ij (delta_lj - C_il / pi_i), so entry
    (i, j) equals C_ij * (D_ij - sum_l D_il C_il / pi_i) with D = d psi / d C.
    """
    cm = c.c if isinstance(c, ConfusionMatrix) else np.asarray(c, dtype=np.float64)
    d_c, clamped = metric_grad_confusion(spec, cm, lam)
    rows = cm.sum(axis=1)
    row_mean = np.sum(d_c * cm, axis=1) / rows
    grad = cm * (d_c - row_mean[:, None])
    return MetricGradient(grad, rows.copy(), clamped)


# -- Lagrange multipliers -----------------------------------------------------


def lagrange_update_minrecall(recalls, omega):
    """Soft arg-min of the recalls: softmax(-omega * rec)."""
    rec = np.asarray(recalls, dtype=np.float64)
    if omega <= 0:
        raise ValueError("omega must be positive")
    return LagrangeState(softmax(-omega * rec), "simplex")


def lagrange_update_coverage(coverages, spec):
    cov = np.asarray(coverages, dtype=np.float64)
    k = cov.size if not spec.kind.is_head_tail else None
    target = spec.alpha / (k if k is not None else _k_from_sets(spec))
    with np.errstate(over="ignore"):
        lam = spec.lambda_max * (1.0 - np.exp((cov - target) / spec.tau_cov))
    lam = np.clip(lam, 0.0, spec.lambda_max)
    return LagrangeState(lam, "nonneg", spec.lambda_max)


def _k_from_sets(spec):
    return len(spec.head_set) + len(spec.tail_set)


def head_tail_aggregates(spec, c):
    """Mean head/tail recall and mean head/tail coverage."""
    rec, cov = recalls_and_coverages(c)
    head, tail = list(spec.head_set), list(spec.tail_set)
    return (np.array([rec[head].mean(), rec[tail].mean()]),
            np.array([cov[head].mean(), cov[tail].mean()]))


def update_lagrange(spec, c, lam=None):
    """One momentum-free multiplier update for whichever kind ``spec`` names."""
    kind = spec.kind
    if not (kind.is_min_recall or kind.is_coverage):
        return None
    if kind.is_head_tail:
        spec.check_partition(c.k)
        rec, cov = head_tail_aggregates(spec, c)
    else:
        rec, cov = recalls_and_coverages(c)
    if kind.is_min_recall:
        return lagrange_update_minrecall(rec, spec.omega)
    return lagrange_update_coverage(cov, spec)


# -- reporting ------------------------------------------------------------------


@dataclass
class Evaluation:
    mean_recall: float
    min_recall: float
    hmean: float
    gmean: float
    min_coverage: float
    recalls: list = field(default_factory=list)
    coverages: list = field(default_factory=list)

    def as_row(self):
        return {
            "mean_recall": self.mean_recall,
            "min_recall": self.min_recall,
            "hmean": self.hmean,
            "gmean": self.gmean,
            "min_coverage": self.min_coverage,
        }


def evaluate(c):
    """Hard metric table used in reports (no multipliers, no clamping)."""
    rec, cov = recalls_and_coverages(c)
    with np.errstate(divide="ignore"):
        hm = 0.0 if np.any(rec == 0) else rec.size / np.sum(1.0 / rec)
        gm = float(np.exp(np.mean(np.log(rec)))) if np.all(rec > 0) else 0.0
    return Evaluation(float(rec.mean()), float(rec.min()), float(hm), gm,
                      float(cov.min()), rec.tolist(), cov.tolist())
