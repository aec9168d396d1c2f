"""Finite-difference and brute-force checks for the analytic derivatives and gains."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import metrics as M
from .linear_model import LinearClassifier, TrainConfig, add_bias, predict
from .selmix import mixup_directions, mixup_gain_matrix

SCHEMA = "ndopt.gain-check/1"


@dataclass(frozen=True)
class FiniteDiffReport:
    max_rel_err: float
    max_abs_err: float
    worst_index: tuple
    passed: bool
    rtol: float
    atol: float

    def to_dict(self):
        out = asdict(self)
        out["worst_index"] = list(self.worst_index)
        return out


def compare(analytic, numeric, rtol=1e-5, atol=1e-9):
    """Entrywise check: each entry must be within ``atol`` or within ``rtol`` relatively.

    ``max_rel_err`` is taken over the entries that miss the absolute floor, so
    ``passed`` holds exactly when ``max_rel_err <= rtol``.
    """
    a = np.asarray(analytic, dtype=np.float64)
    f = np.asarray(numeric, dtype=np.float64)
    if a.shape != f.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {f.shape}")
    abs_err = np.abs(a - f)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(abs_err > atol, abs_err / np.abs(f), 0.0)
    rel = np.nan_to_num(rel, nan=np.inf)
    worst = np.unravel_index(int(np.argmax(rel if rel.max() > 0 else abs_err)), a.shape)
    max_rel = float(rel.max()) if rel.size else 0.0
    return FiniteDiffReport(max_rel, float(abs_err.max()) if abs_err.size else 0.0,
                            tuple(int(i) for i in worst), bool(max_rel <= rtol), rtol, atol)


def _lam_vec(lam):
    if lam is None:
        return None
    return np.asarray(lam.lam if isinstance(lam, M.LagrangeState) else lam, dtype=np.float64)


def psi_stack(spec, c, lam=None):
    """Metric values for a stack of confusion matrices shaped (..., K, K).

    Written directly from the metric definitions and kept apart from the
    analytic-gradient code, so finite differences of it are an independent check.
    """
    c = np.asarray(c, dtype=np.float64)
    k = c.shape[-1]
    spec.check_partition(k)
    kind = spec.kind
    lv = _lam_vec(lam)
    if lv is None and (kind.is_min_recall or kind.is_coverage):
        raise ValueError(f"metric {kind.value} needs Lagrange multipliers")
    diag = np.diagonal(c, axis1=-2, axis2=-1)
    if kind.needs_clamp:
        diag = np.maximum(diag, M.RECALL_CLAMP)
    rec = diag / c.sum(axis=-1)
    cov = c.sum(axis=-2)
    target = spec.alpha / k
    head, tail = list(spec.head_set), list(spec.tail_set)

    if kind is M.MetricKind.GMEAN:
        return np.exp(np.mean(np.log(rec), axis=-1))
    if kind is M.MetricKind.MIN_RECALL:
        return rec @ lv
    if kind is M.MetricKind.MIN_HEAD_TAIL_RECALL:
        return lv[0] * rec[..., head].mean(axis=-1) + lv[1] * rec[..., tail].mean(axis=-1)
    if kind in (M.MetricKind.HMEAN, M.MetricKind.HMEAN_COVERAGE):
        value = k / np.sum(1.0 / rec, axis=-1)
    else:
        value = rec.mean(axis=-1)
    if kind in (M.MetricKind.MEAN_RECALL_COVERAGE, M.MetricKind.HMEAN_COVERAGE):
        value = value + (cov - target) @ lv
    elif kind is M.MetricKind.MEAN_RECALL_HT_COVERAGE:
        value = (value + lv[0] * (cov[..., head].mean(axis=-1) - target)
                 + lv[1] * (cov[..., tail].mean(axis=-1) - target))
    return value


def _reparam_stack(c_tilde, pi):
    e = np.exp(c_tilde - c_tilde.max(axis=-1, keepdims=True))
    return pi[:, None] * e / e.sum(axis=-1, keepdims=True)


def _psi(spec, c_tilde, pi, lam):
    pi = np.asarray(pi, dtype=np.float64)
    return float(psi_stack(spec, _reparam_stack(np.asarray(c_tilde, dtype=np.float64), pi), lam))


def fd_metric_grad(spec, c_tilde, pi, lam=None, h=1e-5):
    """Central differences of psi(reparam(C~)) entry by entry, multipliers frozen."""
    if not 1e-8 <= h <= 1e-3:
        raise ValueError("h must lie in [1e-8, 1e-3]")
    ct = np.asarray(c_tilde, dtype=np.float64)
    pi = M.ClassPrior(pi).pi
    k = pi.size
    if ct.shape != (k, k):
        raise ValueError("c_tilde must be K x K")
    # one perturbed copy of C~ per entry, all evaluated in a single stack
    bumps = h * np.eye(k * k).reshape(k * k, k, k)
    up = psi_stack(spec, _reparam_stack(ct + bumps, pi), lam)
    down = psi_stack(spec, _reparam_stack(ct - bumps, pi), lam)
    return M.MetricGradient(((up - down) / (2 * h)).reshape(k, k), pi)


def surrogate_value(w, z, pi, spec, lam):
    """psi evaluated on the confusion matrix whose k-th unconstrained row is W^T z_k."""
    zc = z.z if hasattr(z, "z") else np.asarray(z)
    return _psi(spec, zc @ w, pi, lam)


def fd_surrogate_gain(m, z, pi, spec, lam, v, eta=1e-6):
    if not 1e-8 <= eta <= 1e-4:
        raise ValueError("eta must lie in [1e-8, 1e-4]")
    vm = v.v if hasattr(v, "v") else np.asarray(v)
    up = surrogate_value(m.w + eta * vm, z, pi, spec, lam)
    down = surrogate_value(m.w - eta * vm, z, pi, spec, lam)
    return (up - down) / (2 * eta)


def _val_features(m, val):
    x = val.x
    return add_bias(x) if x.shape[1] + 1 == m.d else x


def empirical_gain(m, v, eta, val, spec, lam=None):
    """Change of the true validation metric after the step W -> W + eta V."""
    vm = v.v if hasattr(v, "v") else np.asarray(v)
    x = _val_features(m, val)
    k = m.k
    before = M.confusion_from_predictions(val.labels, predict(m, x), k)
    after = M.confusion_from_predictions(val.labels, predict(LinearClassifier(m.w + eta * vm), x), k)
    return M.metric_value(spec, after, lam) - M.metric_value(spec, before, lam)


def empirical_gain_matrix(m, z, val, spec, lam, cfg, step_scale=0.1):
    """Empirical metric change for every mixup pair using one shared step size.

    The step is ``step_scale / max_ij ||V_ij||`` so pairs with larger
    directions move further, as they would in training.
    """
    dirs = mixup_directions(m, z, cfg.beta_eval)
    norms = np.linalg.norm(dirs.reshape(m.k, m.k, -1), axis=-1)
    top = norms.max()
    eta = step_scale / top if top > 0 else 0.0
    out = np.zeros((m.k, m.k))
    for i in range(m.k):
        for j in range(m.k):
            out[i, j] = empirical_gain(m, dirs[i, j], eta, val, spec, lam)
    return out


def fd_self_consistent(spec, c_tilde, pi, lam, h, tol):
    """Oracle agrees with itself at h and h/2 to within 10x ``tol``."""
    a = fd_metric_grad(spec, c_tilde, pi, lam, h).d_psi_d_ctilde
    b = fd_metric_grad(spec, c_tilde, pi, lam, h / 2).d_psi_d_ctilde
    return compare(a, b, rtol=10 * tol, atol=10 * 1e-9).passed


# -- randomized self-test used by the gain-check command -----------------------------------


def _grad_with_squared_prior(spec, c, lam):
    # deliberately wrong Jacobian (squared prior in the diagonal term) for self-testing
    cm = c.c
    _, d_rec, d_cov, clamped = M._value_and_partials(spec, cm, lam)
    rows = cm.sum(axis=1)
    d_c = np.diag(d_rec / rows**2) + d_cov[None, :]
    row_mean = np.sum(d_c * cm, axis=1) / rows
    return M.MetricGradient(cm * (d_c - row_mean[:, None]), rows, clamped)


def random_spec(kind, k, rng):
    spec = M.MetricSpec(kind)
    if spec.kind.is_head_tail:
        n_tail = max(1, k // 3)
        spec = M.MetricSpec(kind, head_set=tuple(range(k - n_tail)),
                            tail_set=tuple(range(k - n_tail, k)))
    return spec


def random_lagrange(spec, k, rng):
    size = 2 if spec.kind.is_head_tail else k
    if spec.kind.is_min_recall:
        return M.LagrangeState(rng.dirichlet(np.ones(size)), "simplex")
    if spec.kind.is_coverage:
        return M.LagrangeState(rng.uniform(0, 2, size), "nonneg", spec.lambda_max)
    return None


def gain_check(seed=0, ks=(2, 3, 5), trials=5, d=6, rtol=1e-4, atol=1e-9, inject_bug=False):
    """Compare analytic metric gradients and mixup gains against finite differences.

    Returns a JSON-ready dict with one FiniteDiffReport per check and an
    overall ``passed`` flag.
    """
    rng = np.random.default_rng(seed)
    cfg = TrainConfig()
    checks = []
    for kind in M.MetricKind:
        for k in ks:
            for t in range(trials):
                spec = random_spec(kind, k, rng)
                lam = random_lagrange(spec, k, rng)
                pi = rng.dirichlet(np.full(k, 4.0))
                ct = rng.standard_normal((k, k))
                c = M.reparam_confusion(ct, pi)
                grad = (_grad_with_squared_prior(spec, c, lam) if inject_bug
                        else M.metric_grad_unconstrained(spec, c, lam))
                fd = fd_metric_grad(spec, ct, pi, lam, 1e-5)
                rep = compare(grad.d_psi_d_ctilde, fd.d_psi_d_ctilde, 1e-5, atol)
                checks.append({"check": "metric_grad", "kind": kind.value, "k": k,
                               "trial": t, **rep.to_dict()})

                w = rng.standard_normal((d, k))
                z = rng.standard_normal((k, d))
                m = LinearClassifier(w)
                c_surr = M.reparam_confusion(z @ w, pi)
                g_surr = (_grad_with_squared_prior(spec, c_surr, lam) if inject_bug
                          else M.metric_grad_unconstrained(spec, c_surr, lam))
                gain = mixup_gain_matrix(m, z, g_surr, cfg, normalize=False).g
                dirs = mixup_directions(m, z, cfg.beta_eval)
                fd_gain = np.array([[fd_surrogate_gain(m, z, pi, spec, lam, dirs[i, j])
                                     for j in range(k)] for i in range(k)])
                rep = compare(gain, fd_gain, rtol, atol)
                checks.append({"check": "mixup_gain", "kind": kind.value, "k": k,
                               "trial": t, **rep.to_dict()})
    return {
        "schema": SCHEMA,
        "seed": seed,
        "inject_bug": inject_bug,
        "n_checks": len(checks),
        "n_failed": sum(not c["passed"] for c in checks),
        "passed": all(c["passed"] for c in checks),
        "checks": checks,
    }
