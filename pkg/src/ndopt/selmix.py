"""Selective mixup fine-tuning of a linear classifier.

Each training cycle estimates, for every class pair (i, j), how much the
target metric would move if the classifier took a gradient step on the mixup
loss of the pair's validation centroids. Pairs are then sampled from a scaled
softmax of these gains (negative gains masked out) to build mixup batches.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import metrics as M
from ._math import softmax
from .linear_model import (
    FeatureMatrix,
    add_bias,
    class_centroids,
    mixup_direction,
    predict,
    sgd_mixup_step,
)

log = logging.getLogger(__name__)

POLICIES = ("selmix", "uniform", "greedy")
MAX_PAIR_RETRIES = 10


@dataclass(frozen=True)
class MixupGainMatrix:
    g: np.ndarray
    normalized: bool
    raw_max_abs: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.g)):
            raise ValueError("gain matrix has non-finite entries")
        if self.normalized and np.max(np.abs(self.g)) > 1 + 1e-12:
            raise ValueError("normalized gains must lie in [-1, 1]")


@dataclass(frozen=True)
class MixupPolicy:
    p: np.ndarray
    kind: str
    fallback: bool = False

    def __post_init__(self):
        if np.any(self.p < 0) or abs(self.p.sum() - 1.0) > 1e-9:
            raise ValueError("policy must be a probability matrix")


@dataclass
class PolicyTrace:
    records: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def append(self, record):
        if self.records and record["cycle"] < self.records[-1]["cycle"]:
            raise ValueError("trace cycles must be monotone")
        self.records.append(record)


@dataclass(frozen=True)
class RegretReport:
    avg_gain_selmix: float
    best_nonadaptive_gain: float
    bound: float
    regret: float
    holds: bool
    best_pair: tuple

    def to_dict(self):
        return {
            "avg_gain_selmix": self.avg_gain_selmix,
            "best_nonadaptive_gain": self.best_nonadaptive_gain,
            "bound": self.bound,
            "regret": self.regret,
            "holds": self.holds,
            "best_pair": list(self.best_pair),
        }


# -- gains and policies -----------------------------------------------------------


def mixup_directions(m, z, beta_eval):
    """All K*K mixup directions as an array of shape (K, K, d, K)."""
    k = m.k
    return np.stack([np.stack([mixup_direction(m, z, i, j, beta_eval).v for j in range(k)])
                     for i in range(k)])


def mixup_gain_matrix(m, z, grad, cfg, normalize=True):
    """G_ij = sum_{k,l} dpsi/dC~_kl * (V_ij[:, l] . z_k).

    V_ij is the rank-one matrix zeta_ij (e_i - p_ij)^T, so the double sum
    collapses to (Z zeta_ij) . (dpsi/dC~ (e_i - p_ij)).
    """
    zc = z.z if hasattr(z, "z") else np.asarray(z, dtype=np.float64)
    gmat = grad.d_psi_d_ctilde if isinstance(grad, M.MetricGradient) else np.asarray(grad)
    k = m.k
    if zc.shape != (k, m.d):
        raise ValueError(f"centroids of shape {zc.shape} do not match classifier ({k}, {m.d})")
    beta = cfg.beta_eval
    zeta = beta * zc[:, None, :] + (1.0 - beta) * zc[None, :, :]      # (K, K, d)
    p = softmax(zeta @ m.w, axis=-1)                                  # (K, K, K)
    resid = np.eye(k)[:, None, :] - p                                 # e_i - p_ij
    logit_shift = zeta @ zc.T                                         # (K, K, K): z_k . zeta_ij
    g = np.einsum("ijk,kl,ijl->ij", logit_shift, gmat, resid)
    raw = float(np.max(np.abs(g)))
    if normalize and raw > 0:
        g = g / raw
    return MixupGainMatrix(g, normalize, raw)


def selmix_distribution(g, s):
    gm = g.g if isinstance(g, MixupGainMatrix) else np.asarray(g, dtype=np.float64)
    if s < 0:
        raise ValueError("s must be nonnegative")
    keep = gm >= 0
    if not np.any(keep):
        log.info("all gains negative; falling back to uniform mixup")
        return MixupPolicy(np.full(gm.shape, 1.0 / gm.size), "selmix", fallback=True)
    scores = np.where(keep, s * gm, -np.inf)
    p = np.zeros_like(gm)
    p[keep] = softmax(scores[keep])
    return MixupPolicy(p, "selmix")


def make_policy(kind, g, s):
    gm = g.g if isinstance(g, MixupGainMatrix) else np.asarray(g)
    if kind == "uniform":
        return MixupPolicy(np.full(gm.shape, 1.0 / gm.size), "uniform")
    if kind == "greedy":
        p = np.zeros(gm.shape)
        p.flat[int(np.argmax(gm))] = 1.0
        return MixupPolicy(p, "greedy")
    if kind == "selmix":
        return selmix_distribution(g, s)
    raise ValueError(f"unknown policy {kind!r}")


def refresh_pseudolabels(m, unlabeled):
    """Partition unlabeled rows by predicted class; returns (parts, empty_classes)."""
    x = unlabeled.x if isinstance(unlabeled, FeatureMatrix) else np.asarray(unlabeled)
    if x.shape[0] == 0:
        raise ValueError("unlabeled set is empty")
    yhat = predict(m, x)
    parts = [np.flatnonzero(yhat == c) for c in range(m.k)]
    empty = [c for c, idx in enumerate(parts) if idx.size == 0]
    return parts, empty


# -- fine-tuning loop -----------------------------------------------------------------


def _partition(labels, k):
    return [np.flatnonzero(labels == c) for c in range(k)]


def _confusion(m, x, y, k):
    return M.confusion_from_predictions(y, predict(m, x), k)


def _pool(parts):
    sizes = np.array([p.size for p in parts])
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    flat = np.concatenate(parts) if sizes.sum() else np.zeros(0, dtype=np.int64)
    return flat, starts, sizes


def _draw(rng, pool, classes):
    """One uniform member of each requested class partition."""
    flat, starts, sizes = pool
    offs = np.floor(rng.random(classes.size) * sizes[classes]).astype(np.int64)
    return flat[starts[classes] + offs]


def _sample_pairs(rng, policy, n, parts_a, parts_b):
    """Draw n (i, j) pairs whose two partitions are nonempty."""
    k = policy.shape[0]
    flat = policy.ravel()
    has_a = np.array([p.size > 0 for p in parts_a])
    has_b = np.array([p.size > 0 for p in parts_b])
    out = np.empty((n, 2), dtype=np.int64)
    filled = 0
    for _ in range(MAX_PAIR_RETRIES):
        draw = rng.choice(flat.size, size=n - filled, p=flat)
        i, j = np.divmod(draw, k)
        take = np.flatnonzero(has_a[i] & has_b[j])
        out[filled:filled + take.size, 0] = i[take]
        out[filled:filled + take.size, 1] = j[take]
        filled += take.size
        if filled == n:
            return out
    return out[:filled]


def finetune(data, m0, spec, cfg, policy_kind="selmix", semi=True, keep_gains=False):
    """Alternate validation-driven gain estimation with n mixup SGD steps.

    Returns the fine-tuned classifier and a :class:`PolicyTrace` holding one
    record per cycle plus a final evaluation record.
    """
    if policy_kind not in POLICIES:
        raise ValueError(f"unknown policy {policy_kind!r}")
    k = data.k
    spec.check_partition(k)
    xl, yl = add_bias(data.labeled.x), data.labeled.labels
    xv, yv = add_bias(data.val.x), data.val.labels
    z = class_centroids(FeatureMatrix(xv, yv), k)
    parts_l = _partition(yl, k)
    if semi:
        if data.unlabeled is None or data.unlabeled.n == 0:
            raise ValueError("semi-supervised mode requires an unlabeled set")
        xu = add_bias(data.unlabeled.x)
        parts_u, _ = refresh_pseudolabels(m0, xu)
    else:
        xu, parts_u = xl, parts_l

    rng = np.random.default_rng(cfg.seed)
    lam = M.initial_lagrange(spec, k)
    trace = PolicyTrace()
    m = m0
    for t in range(cfg.cycles):
        c = _confusion(m, xv, yv, k)
        lam = M.update_lagrange(spec, c, lam)
        grad = M.metric_grad_unconstrained(spec, c, lam)
        gain = mixup_gain_matrix(m, z, grad, cfg)
        policy = make_policy(policy_kind, gain, cfg.s)
        if policy.fallback:
            trace.notes.append(f"cycle {t}: all gains negative, uniform fallback")

        pool_l, pool_u = _pool(parts_l), _pool(parts_u)
        pair_counts = np.zeros((k, k), dtype=np.int64)
        for step in range(cfg.steps_per_cycle):
            pairs = _sample_pairs(rng, policy.p, cfg.batch_size, parts_l, parts_u)
            if pairs.shape[0] == 0:
                trace.notes.append(f"cycle {t} step {step}: no sampleable pair, skipped")
                continue
            i, j = pairs[:, 0], pairs[:, 1]
            np.add.at(pair_counts, (i, j), 1)
            a = _draw(rng, pool_l, i)
            b = _draw(rng, pool_u, j)
            beta = rng.uniform(cfg.beta_min, 1.0, size=i.size)
            m = sgd_mixup_step(m, (xl[a], xu[b], i, beta), cfg)

        if semi:
            parts_u, empty = refresh_pseudolabels(m, xu)
            if empty:
                trace.notes.append(f"cycle {t}: empty pseudo-label classes {empty}")

        rec = {
            "cycle": t,
            "metric": M.metric_value(spec, c, lam),
            "lambda": None if lam is None else lam.lam.tolist(),
            "gain_max": gain.raw_max_abs,
            "gain_argmax": [int(v) for v in np.unravel_index(np.argmax(gain.g), gain.g.shape)],
            "gain_masked_frac": float(np.mean(gain.g < 0)),
            "policy_fallback": policy.fallback,
            "eval": M.evaluate(c).as_row(),
            "pair_counts": pair_counts.tolist(),
        }
        if keep_gains:
            rec["gain"] = gain.g.tolist()
        trace.append(rec)

    c = _confusion(m, xv, yv, k)
    lam_final = M.update_lagrange(spec, c, lam)
    trace.append({
        "cycle": cfg.cycles,
        "final": True,
        "metric": M.metric_value(spec, c, lam_final),
        "lambda": None if lam_final is None else lam_final.lam.tolist(),
        "eval": M.evaluate(c).as_row(),
        "confusion": c.to_dict(),
    })
    return m, trace


# -- policy simulation ----------------------------------------------------------------


def simulate_policies(gain_stream, s, lookahead=True, slack=1e-9):
    """Expected average gain of the softmax-of-cumulative-gain policy vs the best fixed pair.

    With ``lookahead`` the policy at step t uses gains up to and including t,
    and the regret is bounded by 2 ln K / (s T). Without it (Hedge form) the
    policy uses gains strictly before t and the bound gains a ``s / 2`` term;
    at s = 2 sqrt(ln K / T) the total is 2 sqrt(ln K / T).
    """
    gs = np.asarray(gain_stream, dtype=np.float64)
    if gs.ndim != 3 or gs.shape[1] != gs.shape[2] or gs.shape[0] < 1:
        raise ValueError("gain stream must have shape (T, K, K) with T >= 1")
    if np.max(np.abs(gs)) > 1.0 + 1e-12:
        raise ValueError("gain stream must be normalized to |G| <= 1")
    if s < 0:
        raise ValueError("s must be nonnegative")
    t_len, k, _ = gs.shape
    flat = gs.reshape(t_len, -1)
    cum = np.cumsum(flat, axis=0)
    if not lookahead:
        cum = np.vstack([np.zeros(k * k), cum[:-1]])
    probs = softmax(s * cum, axis=1)
    avg_policy = float(np.mean(np.sum(probs * flat, axis=1)))
    per_pair = flat.mean(axis=0)
    best = int(np.argmax(per_pair))
    bound = 2.0 * math.log(k) / (s * t_len) if s > 0 else math.inf
    if not lookahead:
        bound += s / 2.0
    regret = float(per_pair[best]) - avg_policy
    return RegretReport(avg_policy, float(per_pair[best]), bound, regret,
                        bool(regret <= bound + slack), tuple(int(v) for v in divmod(best, k)))


def hedge_rate(k, t_len):
    """Scale s that balances the two terms of the Hedge-form bound."""
    return 2.0 * math.sqrt(math.log(k) / t_len)


def gain_stream(kind, k, t_len, rng):
    """Bounded synthetic gain streams used for regret simulations."""
    if kind == "constant":
        g = rng.uniform(-1, 1, size=(k, k))
        return np.broadcast_to(g, (t_len, k, k)).copy()
    if kind == "random":
        return rng.uniform(-1, 1, size=(t_len, k, k))
    if kind == "adversarial":
        # the leading pair flips sign every step; the rest hover slightly below zero
        out = np.full((t_len, k, k), -0.1)
        signs = np.where(np.arange(t_len) % 2 == 0, 1.0, -1.0)
        out[:, 0, 0] = signs
        out[:, -1, -1] = -signs
        return out
    raise ValueError(f"unknown stream kind {kind!r}")

