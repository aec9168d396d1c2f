"""Cost-sensitive self-training (CSST) for linear classifiers.

Constrained metrics are reduced to cost-sensitive learning with a gain matrix
``G`` (reward ``G_ij`` for predicting j when the truth is i). ``G`` is split as
``G = M D`` with ``D`` its diagonal; losses apply a ``-log D`` logit adjustment
and weight the log-softmax terms by rows of ``M``. Unlabeled data enters via a
weighted consistency loss whose target is ``norm(G^T p_hat)``, gated by a KL
threshold between that target and the weak-view prediction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import metrics as M
from ._math import kl_divergence, log_softmax, softmax
from .data_io import median_within_class_std
from .linear_model import LinearClassifier, add_bias
from .selmix import PolicyTrace


@dataclass(frozen=True)
class CslGainMatrix:
    g: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.g, dtype=np.float64)
        if g.ndim != 2 or g.shape[0] != g.shape[1]:
            raise ValueError("gain matrix must be square")
        if not np.all(np.isfinite(g)):
            raise ValueError("gain matrix has non-finite entries")
        object.__setattr__(self, "g", g)

    @property
    def k(self):
        return self.g.shape[0]

    @property
    def diagonal(self):
        return bool(np.all(self.g[~np.eye(self.k, dtype=bool)] == 0))


@dataclass(frozen=True)
class HybridLossSpec:
    m: np.ndarray
    d_diag: np.ndarray

    @property
    def log_d(self):
        return np.log(self.d_diag)


@dataclass(frozen=True)
class SelfTrainConfig:
    lambda_u: float = 1.0
    tau_kl: float = 0.3
    sigma_aug: float | None = None
    omega: float = 0.25
    eval_period: int = 32
    steps: int = 1600
    lr: float = 0.02
    batch_size: int = 64
    mu: int = 4
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.lambda_u < 0:
            raise ValueError("lambda_u must be nonnegative")
        if self.tau_kl <= 0:
            raise ValueError("tau_kl must be positive")
        if self.sigma_aug is not None and self.sigma_aug < 0:
            raise ValueError("sigma_aug must be nonnegative")
        if self.eval_period < 1 or self.steps < 0 or self.batch_size < 1 or self.mu < 1:
            raise ValueError("eval_period, batch_size and mu must be positive")
        if self.lr <= 0 or self.omega <= 0:
            raise ValueError("lr and omega must be positive")


def _gain(g):
    return g.g if isinstance(g, CslGainMatrix) else np.asarray(g, dtype=np.float64)


def _prior(pi):
    pi = np.asarray(pi.pi if isinstance(pi, M.ClassPrior) else pi, dtype=np.float64)
    if np.any(pi <= 0):
        raise ValueError("zero prior: every class needs positive mass")
    return pi


# -- gain matrices --------------------------------------------------------------------


def csl_gain_minrecall(lam, pi):
    lv = lam.lam if isinstance(lam, M.LagrangeState) else np.asarray(lam, dtype=np.float64)
    return CslGainMatrix(np.diag(lv / _prior(pi)))


def csl_gain_coverage(lam, pi):
    lv = lam.lam if isinstance(lam, M.LagrangeState) else np.asarray(lam, dtype=np.float64)
    if np.any(lv < 0):
        raise ValueError("coverage multipliers must be nonnegative")
    pi = _prior(pi)
    k = pi.size
    return CslGainMatrix(np.diag(1.0 / (k * pi)) + lv[None, :])


def _ht_column_weights(spec, lam, k):
    w = np.zeros(k)
    head, tail = list(spec.head_set), list(spec.tail_set)
    w[head] = lam[0] / len(head)
    w[tail] = lam[1] / len(tail)
    return w


def csl_gain_for(spec, lam, pi):
    """Gain matrix of the cost-sensitive problem ``spec`` reduces to, for fixed multipliers."""
    pi = _prior(pi)
    k = pi.size
    kind = spec.kind
    lv = lam.lam if isinstance(lam, M.LagrangeState) else np.asarray(lam, dtype=np.float64)
    if kind is M.MetricKind.MIN_RECALL:
        return csl_gain_minrecall(lv, pi)
    if kind is M.MetricKind.MEAN_RECALL_COVERAGE:
        return csl_gain_coverage(lv, pi)
    if kind is M.MetricKind.MIN_HEAD_TAIL_RECALL:
        spec.check_partition(k)
        return CslGainMatrix(np.diag(_ht_column_weights(spec, lv, k) / pi))
    if kind is M.MetricKind.MEAN_RECALL_HT_COVERAGE:
        spec.check_partition(k)
        return CslGainMatrix(np.diag(1.0 / (k * pi)) + _ht_column_weights(spec, lv, k)[None, :])
    if kind is M.MetricKind.MEAN_RECALL:
        return CslGainMatrix(np.diag(1.0 / (k * pi)))
    raise ValueError(f"{kind.value} has no linear cost-sensitive reduction")


def ensure_positive_diagonal(g, eps=1e-12):
    """Shift every entry by one constant so the diagonal is strictly positive.

    Adding a constant to all entries adds the same amount to the CSL objective
    for every classifier (the confusion matrix sums to one), so maximizers are
    unchanged.
    """
    gm = _gain(g)
    low = np.min(np.diag(gm))
    if low > 0:
        return CslGainMatrix(gm)
    return CslGainMatrix(gm + (eps - low + eps * np.max(np.abs(gm))))


def decompose(g):
    gm = _gain(g)
    d = np.diag(gm).copy()
    if np.any(d <= 0):
        raise ValueError("decomposition undefined: gain diagonal must be positive")
    return HybridLossSpec(gm / d[None, :], d)


# -- losses -----------------------------------------------------------------------


def _adjusted_log_softmax(logits, dec):
    return log_softmax(np.asarray(logits, dtype=np.float64) - dec.log_d, axis=-1)


def hybrid_loss(y, logits, g):
    dec = decompose(g)
    return float(-np.sum(dec.m[y] * _adjusted_log_softmax(logits, dec)))


def optimal_target(p_hat, g):
    """norm(G^T p_hat): the prediction that maximizes expected gain."""
    gm = _gain(g)
    mass = np.asarray(p_hat, dtype=np.float64) @ gm
    total = np.sum(mass, axis=-1, keepdims=True)
    if np.any(total <= 0):
        raise ValueError("G^T p_hat has no positive mass")
    return mass / total


def weighted_consistency_loss(p_hat, logits_strong, g):
    """-sum_i (M^T p_hat)_i log softmax(strong - log D)_i.

    Minimizing over the strong-view logits drives softmax(strong) to
    norm(G^T p_hat).
    """
    gm = _gain(g)
    p_hat = np.asarray(p_hat, dtype=np.float64)
    if np.sum(p_hat @ gm) <= 0:
        raise ValueError("G^T p_hat has no positive mass")
    dec = decompose(gm)
    weights = p_hat @ dec.m
    return float(-np.sum(weights * _adjusted_log_softmax(logits_strong, dec)))


def weighted_loss_grad(weights, logits, dec):
    """Per-row gradient of -sum_i w_i log softmax(logits - log D)_i w.r.t. logits."""
    q = softmax(np.asarray(logits) - dec.log_d, axis=-1)
    return np.sum(weights, axis=-1, keepdims=True) * q - weights


def kl_threshold_mask(p_hat, p_weak, g, tau):
    """True where KL(norm(G^T p_hat) || p_weak) <= tau."""
    return kl_divergence(optimal_target(p_hat, g), p_weak) <= tau


# -- multiplier updates -----------------------------------------------------------


def eg_update(lam, recalls, omega):
    """Exponentiated-gradient step on the simplex."""
    new = np.asarray(lam, dtype=np.float64) * np.exp(-omega * np.asarray(recalls))
    new /= new.sum()
    return M.LagrangeState(new, "simplex")


def projected_update(lam, coverages, omega, target):
    new = np.maximum(0.0, np.asarray(lam, dtype=np.float64) - omega * (np.asarray(coverages) - target))
    return M.LagrangeState(new, "nonneg")


def _update_multipliers(spec, c, lam, omega):
    k = c.k
    if spec.kind.is_head_tail:
        rec, cov = M.head_tail_aggregates(spec, c)
    else:
        rec, cov = M.recalls_and_coverages(c)
    if spec.kind.is_min_recall:
        return eg_update(lam.lam, rec, omega)
    if spec.kind.is_coverage:
        return projected_update(lam.lam, cov, omega, spec.alpha / k)
    return lam


# -- training loop -----------------------------------------------------------------


def csst_train(data, m0, spec, cfg, fixed_gain=None):
    """Alternate multiplier/gain updates with SGD on hybrid + consistency losses.

    ``fixed_gain`` pins G (e.g. the identity for vanilla self-training); the
    multipliers are then left untouched.
    """
    k = data.k
    xl, yl = add_bias(data.labeled.x), data.labeled.labels
    xv, yv = add_bias(data.val.x), data.val.labels
    xu_raw = data.unlabeled.x if data.unlabeled is not None else np.zeros((0, data.labeled.d))
    pi = np.bincount(yl, minlength=k) / yl.size
    sigma = cfg.sigma_aug
    if sigma is None:
        sigma = 0.5 * median_within_class_std(data.labeled)

    trace = PolicyTrace()
    use_unlabeled = cfg.lambda_u > 0 and xu_raw.shape[0] > 0
    if cfg.lambda_u > 0 and xu_raw.shape[0] == 0:
        trace.notes.append("empty unlabeled set: supervised cost-sensitive training only")

    root = np.random.SeedSequence(cfg.seed)
    rng_l, rng_u, rng_aug = (np.random.default_rng(s) for s in root.spawn(3))

    if spec.kind.is_min_recall:
        size = 2 if spec.kind.is_head_tail else k
        lam = M.LagrangeState(np.full(size, 1.0 / size), "simplex")
    elif spec.kind.is_coverage:
        lam = M.LagrangeState(np.zeros(2 if spec.kind.is_head_tail else k), "nonneg")
    else:
        lam = None

    w = np.array(m0.w, dtype=np.float64)
    gain = dec = None
    accepted = seen = 0

    def record(step, c):
        trace.append({
            "cycle": step,
            "lambda": None if lam is None else lam.lam.tolist(),
            "eval": M.evaluate(c).as_row(),
            "mask_rate": accepted / seen if seen else None,
            "gain_diagonal": None if gain is None else np.diag(gain.g).tolist(),
        })

    for step in range(cfg.steps):
        if step % cfg.eval_period == 0:
            c = M.confusion_from_predictions(yv, np.argmax(xv @ w, axis=1), k)
            if step > 0:
                record(step, c)
            accepted = seen = 0
            if fixed_gain is not None:
                gain = CslGainMatrix(fixed_gain)
            else:
                if lam is not None:
                    lam = _update_multipliers(spec, c, lam, cfg.omega)
                gain = csl_gain_for(spec, lam, pi)
            gain = ensure_positive_diagonal(gain)
            dec = decompose(gain)

        idx = rng_l.integers(0, yl.size, size=cfg.batch_size)
        xb = xl[idx]
        grad_logits = weighted_loss_grad(dec.m[yl[idx]], xb @ w, dec)
        grad = xb.T @ grad_logits / idx.size

        if use_unlabeled:
            iu = rng_u.integers(0, xu_raw.shape[0], size=cfg.mu * cfg.batch_size)
            weak = add_bias(xu_raw[iu])
            p_weak = softmax(weak @ w, axis=1)
            p_hat = np.eye(k)[np.argmax(p_weak, axis=1)]
            mask = kl_threshold_mask(p_hat, p_weak, gain, cfg.tau_kl)
            accepted += int(mask.sum())
            seen += mask.size
            if sigma > 0:
                noise = rng_aug.standard_normal(xu_raw[iu].shape) * sigma
                strong = add_bias(xu_raw[iu] + noise)
            else:
                strong = weak
            g_u = weighted_loss_grad(p_hat @ dec.m, strong @ w, dec) * mask[:, None]
            grad = grad + cfg.lambda_u * (strong.T @ g_u / iu.size)

        w -= cfg.lr * (grad + cfg.weight_decay * w)

    c = M.confusion_from_predictions(yv, np.argmax(xv @ w, axis=1), k)
    record(cfg.steps, c)
    trace.records[-1]["final"] = True
    trace.records[-1]["confusion"] = c.to_dict()
    return LinearClassifier(w), trace
