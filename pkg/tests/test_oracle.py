import json

import numpy as np
import pytest

from ndopt import metrics as M
from ndopt.linear_model import FeatureMatrix, LinearClassifier, TrainConfig
from ndopt.oracle import (
    compare,
    empirical_gain,
    empirical_gain_matrix,
    fd_metric_grad,
    fd_self_consistent,
    fd_surrogate_gain,
    gain_check,
    psi_stack,
    random_lagrange,
    random_spec,
)


class TestCompare:
    def test_absolute_floor(self):
        rep = compare([1e-12], [0.0], rtol=1e-5, atol=1e-9)
        assert rep.passed and rep.max_rel_err == 0.0

    def test_relative_miss(self):
        rep = compare([1.0, 2.0], [1.0, 2.1], rtol=1e-3, atol=1e-9)
        assert not rep.passed
        assert rep.worst_index == (1,)
        assert rep.max_rel_err == pytest.approx(0.1 / 2.1)

    def test_passed_iff_rel_within_tolerance(self, rng):
        for _ in range(200):
            a = rng.standard_normal(5)
            f = a + rng.standard_normal(5) * 10.0 ** rng.uniform(-12, -2)
            rep = compare(a, f, 1e-5, 1e-9)
            assert rep.passed == (rep.max_rel_err <= 1e-5)

    def test_zero_reference_with_large_error(self):
        rep = compare([1.0], [0.0])
        assert not rep.passed

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            compare(np.ones(2), np.ones(3))

    def test_report_serializes(self):
        json.dumps(compare([1.0], [1.0]).to_dict())


class TestMetricFd:
    def test_step_bounds(self):
        with pytest.raises(ValueError):
            fd_metric_grad(M.MetricSpec("mean"), np.zeros((2, 2)), [0.5, 0.5], h=1e-2)

    def test_error_shrinks_quadratically(self, rng):
        spec = M.MetricSpec("gmean")
        pi = np.array([0.5, 0.3, 0.2])
        ct = rng.standard_normal((3, 3))
        exact = M.metric_grad_unconstrained(spec, M.reparam_confusion(ct, pi)).d_psi_d_ctilde
        e1 = np.abs(fd_metric_grad(spec, ct, pi, h=1e-3).d_psi_d_ctilde - exact).max()
        e2 = np.abs(fd_metric_grad(spec, ct, pi, h=5e-4).d_psi_d_ctilde - exact).max()
        assert 3.0 <= e1 / e2 <= 5.0

    def test_row_shift_has_zero_derivative(self, rng):
        # adding a constant to an unconstrained row leaves C unchanged
        spec = M.MetricSpec("hmean")
        pi = np.array([0.6, 0.4])
        g = fd_metric_grad(spec, rng.standard_normal((2, 2)), pi).d_psi_d_ctilde
        np.testing.assert_allclose(g.sum(axis=1), 0.0, atol=1e-9)

    def test_self_consistency(self, rng):
        spec = M.MetricSpec("mean")
        assert fd_self_consistent(spec, rng.standard_normal((3, 3)), [0.2, 0.3, 0.5], None, 1e-4, 1e-5)


class TestPsiStack:
    @pytest.mark.parametrize("kind", [k.value for k in M.MetricKind])
    def test_agrees_with_metric_value(self, kind, rng):
        spec = random_spec(kind, 4, rng)
        lam = random_lagrange(spec, 4, rng)
        pi = rng.dirichlet(np.full(4, 3.0))
        stack = [M.reparam_confusion(rng.standard_normal((4, 4)), pi) for _ in range(6)]
        batch = psi_stack(spec, np.stack([c.c for c in stack]), lam)
        for c, v in zip(stack, batch):
            assert v == pytest.approx(M.metric_value(spec, c, lam), rel=1e-12)

    def test_missing_multipliers(self):
        with pytest.raises(ValueError, match="multipliers"):
            psi_stack(M.MetricSpec("min-recall"), np.eye(2) / 2)


class TestSurrogateFd:
    def test_zero_direction(self, rng):
        m = LinearClassifier(rng.standard_normal((3, 2)))
        z = rng.standard_normal((2, 3))
        assert fd_surrogate_gain(m, z, [0.5, 0.5], M.MetricSpec("mean"), None, np.zeros((3, 2))) == 0.0

    def test_linear_in_direction(self, rng):
        m = LinearClassifier(rng.standard_normal((3, 2)))
        z = rng.standard_normal((2, 3))
        v = rng.standard_normal((3, 2))
        spec = M.MetricSpec("gmean")
        a = fd_surrogate_gain(m, z, [0.5, 0.5], spec, None, v)
        b = fd_surrogate_gain(m, z, [0.5, 0.5], spec, None, 2 * v, eta=5e-7)
        assert b == pytest.approx(2 * a, rel=1e-5)

    def test_eta_bounds(self, rng):
        with pytest.raises(ValueError):
            fd_surrogate_gain(LinearClassifier.zeros(2, 2), np.eye(2), [0.5, 0.5],
                              M.MetricSpec("mean"), None, np.ones((2, 2)), eta=1e-2)


class TestEmpiricalGain:
    @pytest.fixture
    def problem(self, rng):
        x = rng.standard_normal((40, 3))
        y = rng.integers(0, 2, 40)
        return LinearClassifier(rng.standard_normal((3, 2))), FeatureMatrix(x, y)

    def test_zero_step(self, problem, rng):
        m, val = problem
        assert empirical_gain(m, rng.standard_normal((3, 2)), 0.0, val, M.MetricSpec("mean")) == 0.0

    def test_zero_direction(self, problem):
        m, val = problem
        assert empirical_gain(m, np.zeros((3, 2)), 5.0, val, M.MetricSpec("mean")) == 0.0

    def test_matches_direct_recount(self, problem, rng):
        m, val = problem
        v = rng.standard_normal((3, 2))
        def mean_recall(w):
            pred = np.argmax(val.x @ w, axis=1)
            return np.mean([np.mean(pred[val.labels == c] == c) for c in range(2)])
        expected = mean_recall(m.w + 0.7 * v) - mean_recall(m.w)
        assert empirical_gain(m, v, 0.7, val, M.MetricSpec("mean")) == pytest.approx(expected)

    def test_bias_column_added(self, rng):
        m = LinearClassifier(rng.standard_normal((4, 2)))
        val = FeatureMatrix(rng.standard_normal((20, 3)), rng.integers(0, 2, 20))
        assert np.isfinite(empirical_gain(m, np.ones((4, 2)), 0.1, val, M.MetricSpec("mean")))

    def test_matrix_shape(self, rng):
        m = LinearClassifier(rng.standard_normal((3, 3)))
        z = rng.standard_normal((3, 3))
        val = FeatureMatrix(rng.standard_normal((30, 3)), rng.integers(0, 3, 30))
        g = empirical_gain_matrix(m, z, val, M.MetricSpec("mean"), None, TrainConfig())
        assert g.shape == (3, 3) and np.all(np.abs(g) <= 1.0)


class TestGainCheck:
    def test_passes_on_correct_gradients(self):
        out = gain_check(seed=1, ks=(2, 3), trials=2)
        assert out["passed"] and out["n_failed"] == 0
        assert out["n_checks"] == 2 * 2 * 2 * len(M.MetricKind)

    def test_detects_injected_bug(self):
        out = gain_check(seed=1, ks=(2, 3), trials=2, inject_bug=True)
        assert not out["passed"]
        assert out["n_failed"] > 0

    def test_json_ready(self):
        json.dumps(gain_check(seed=0, ks=(2,), trials=1))

    def test_random_helpers_valid(self, rng):
        for kind in M.MetricKind:
            spec = random_spec(kind, 5, rng)
            spec.check_partition(5)
            lam = random_lagrange(spec, 5, rng)
            if spec.kind.is_min_recall:
                assert lam.lam.sum() == pytest.approx(1.0)
