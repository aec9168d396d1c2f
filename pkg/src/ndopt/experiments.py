"""Canonical synthetic benchmark shared by the CLI and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import metrics as M
from .csst import SelfTrainConfig, csst_train
from .data_io import SyntheticSpec, gen_longtail_gaussians
from .linear_model import TrainConfig, add_bias, fit_softmax, predict
from .selmix import finetune

CANONICAL_DATA = SyntheticSpec(k=5, d=10, n1=1000, rho_l=100, rho_u=100, m1=2000,
                               sep=3.0, n_val=100, n_test=500)
CANONICAL_TRAIN = TrainConfig(eta=0.005, batch_size=64, steps_per_cycle=50, cycles=20)
CANONICAL_CSST = SelfTrainConfig()


def erm_init(bundle, steps=500, eta=0.5):
    """Plain softmax regression on the labeled split (bias column appended)."""
    return fit_softmax(add_bias(bundle.labeled.x), bundle.labeled.labels, bundle.k,
                       eta=eta, steps=steps)


def split_eval(m, fm, k):
    c = M.confusion_from_predictions(fm.labels, predict(m, add_bias(fm.x)), k)
    return M.evaluate(c)


@dataclass
class RunResult:
    seed: int
    label: str
    val: M.Evaluation
    test: M.Evaluation


def selmix_runs(seeds, policies=("selmix", "uniform", "greedy"), objective="min-recall",
                data_spec=CANONICAL_DATA, cfg=CANONICAL_TRAIN, semi=True):
    """ERM init then fine-tune with each policy; one result per (seed, policy) plus 'erm'."""
    out = []
    for seed in seeds:
        bundle = gen_longtail_gaussians(replace(data_spec, seed=seed))
        m0 = erm_init(bundle)
        out.append(RunResult(seed, "erm", split_eval(m0, bundle.val, bundle.k),
                             split_eval(m0, bundle.test, bundle.k)))
        spec = M.MetricSpec(objective)
        if spec.kind.is_head_tail:
            spec = spec.with_default_partition(np.bincount(bundle.labeled.labels, minlength=bundle.k))
        for policy in policies:
            m, _ = finetune(bundle, m0, spec, replace(cfg, seed=seed), policy, semi=semi)
            out.append(RunResult(seed, policy, split_eval(m, bundle.val, bundle.k),
                                 split_eval(m, bundle.test, bundle.k)))
    return out


def csst_runs(seeds, data_spec=CANONICAL_DATA, cfg=CANONICAL_CSST, objective="min-recall"):
    """CSST with the objective's gain matrix against vanilla self-training (G = I)."""
    out = []
    for seed in seeds:
        bundle = gen_longtail_gaussians(replace(data_spec, seed=seed))
        m0 = erm_init(bundle)
        spec = M.MetricSpec(objective)
        run_cfg = replace(cfg, seed=seed)
        for label, gain in (("csst", None), ("vanilla", np.eye(bundle.k))):
            m, _ = csst_train(bundle, m0, spec, run_cfg, fixed_gain=gain)
            out.append(RunResult(seed, label, split_eval(m, bundle.val, bundle.k),
                                 split_eval(m, bundle.test, bundle.k)))
    return out


def mean_of(results, label, split, field):
    vals = [getattr(getattr(r, split), field) for r in results if r.label == label]
    return float(np.mean(vals))
