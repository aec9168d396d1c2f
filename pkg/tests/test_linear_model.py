import math

import numpy as np
import pytest

from ndopt.linear_model import (
    FeatureMatrix,
    LinearClassifier,
    TrainConfig,
    class_centroids,
    load_checkpoint,
    mixup_batch_loss,
    mixup_direction,
    mixup_loss,
    predict,
    predict_probs,
    save_checkpoint,
    sgd_mixup_step,
)


def _fd_grad_mixup(m, f1, f2, y, beta, h=1e-6):
    g = np.zeros_like(m.w)
    for idx in np.ndindex(*m.w.shape):
        e = np.zeros_like(m.w)
        e[idx] = h
        up = mixup_loss(LinearClassifier(m.w + e), f1, f2, y, beta)
        down = mixup_loss(LinearClassifier(m.w - e), f1, f2, y, beta)
        g[idx] = (up - down) / (2 * h)
    return g


class TestPredict:
    def test_zero_weights_uniform(self):
        p = predict_probs(LinearClassifier.zeros(3, 4), np.ones((5, 3)))
        np.testing.assert_allclose(p, 0.25)

    def test_dominant_logit(self):
        w = np.zeros((3, 5))
        w[0, 2] = 10.0
        p = predict_probs(LinearClassifier(w), np.array([[1.0, 0, 0]]))
        assert p[0, 2] > 0.99

    def test_batch_matches_rows(self, rng):
        m = LinearClassifier(rng.standard_normal((4, 3)))
        x = rng.standard_normal((7, 4))
        batch = predict_probs(m, x)
        for i in range(7):
            # BLAS may sum a single row in a different order; allow one ulp or so
            np.testing.assert_allclose(batch[i], predict_probs(m, x[i:i + 1])[0], rtol=1e-14)

    def test_ties_go_to_lowest_index(self):
        assert predict(LinearClassifier.zeros(2, 3), np.ones((4, 2))).tolist() == [0, 0, 0, 0]

    def test_large_logits_stay_normalized(self, rng):
        m = LinearClassifier(rng.standard_normal((3, 4)) * 1e4)
        p = predict_probs(m, rng.standard_normal((10, 3)))
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError, match="does not match"):
            predict_probs(LinearClassifier.zeros(3, 2), np.ones((1, 4)))

    def test_weights_are_immutable(self):
        m = LinearClassifier.zeros(2, 2)
        with pytest.raises(ValueError):
            m.w[0, 0] = 1.0


class TestCentroids:
    def test_one_sample_per_class(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        z = class_centroids(FeatureMatrix(x, [0, 1]))
        np.testing.assert_array_equal(z.z, x)

    def test_mean(self):
        z = class_centroids(FeatureMatrix(np.array([[0.0, 0.0], [2.0, 2.0], [5.0, 5.0]]), [0, 0, 1]))
        np.testing.assert_array_equal(z.z[0], [1.0, 1.0])
        assert z.source_counts.tolist() == [2, 1]

    def test_matches_loop_accumulation(self, rng):
        x = rng.standard_normal((200, 5))
        y = rng.integers(0, 4, 200)
        z = class_centroids(FeatureMatrix(x, y), 4)
        for c in range(4):
            total = np.zeros(5)
            n = 0
            for row, lab in zip(x, y):
                if lab == c:
                    total += row
                    n += 1
            np.testing.assert_allclose(z.z[c], total / n, rtol=1e-12)

    def test_missing_class(self):
        with pytest.raises(ValueError, match="centroid undefined"):
            class_centroids(FeatureMatrix(np.ones((2, 2)), [0, 0]), 2)


class TestMixupLoss:
    def test_beta_one_is_plain_sce(self, rng):
        m = LinearClassifier(rng.standard_normal((3, 4)))
        f1, f2 = rng.standard_normal(3), rng.standard_normal(3)
        logits = f1 @ m.w
        expected = -(logits[2] - np.log(np.sum(np.exp(logits))))
        assert mixup_loss(m, f1, f2, 2, 1.0) == pytest.approx(expected)

    def test_zero_weights_give_log_k(self, rng):
        m = LinearClassifier.zeros(3, 5)
        assert mixup_loss(m, rng.standard_normal(3), rng.standard_normal(3), 1, 0.7) == pytest.approx(math.log(5))

    def test_identical_endpoints(self, rng):
        m = LinearClassifier(rng.standard_normal((3, 4)))
        f = rng.standard_normal(3)
        assert mixup_loss(m, f, f, 0, 0.6) == pytest.approx(mixup_loss(m, f, f, 0, 0.95))


class TestMixupDirection:
    def test_zero_weights_k2(self):
        z = np.array([[1.0, 2.0], [3.0, -1.0]])
        v = mixup_direction(LinearClassifier.zeros(2, 2), z, 0, 1, 0.8)
        zeta = 0.8 * z[0] + 0.2 * z[1]
        np.testing.assert_allclose(v.v[:, 0], 0.5 * zeta)
        np.testing.assert_allclose(v.v[:, 1], -0.5 * zeta)
        assert v.pair == (0, 1)

    def test_confident_prediction_gives_tiny_direction(self):
        z = np.eye(2)
        w = np.array([[50.0, -50.0], [0.0, 0.0]])
        v = mixup_direction(LinearClassifier(w), z, 0, 0, 0.8)
        assert np.abs(v.v).max() < 1e-20

    def test_matches_finite_differences(self, rng):
        for _ in range(50):
            m = LinearClassifier(rng.standard_normal((4, 3)))
            z = rng.standard_normal((3, 4))
            i, j = rng.integers(0, 3, 2)
            beta = rng.uniform(0.6, 1.0)
            v = mixup_direction(m, z, i, j, beta)
            fd = _fd_grad_mixup(m, z[i], z[j], i, beta)
            np.testing.assert_allclose(v.v, -fd, rtol=1e-5, atol=1e-9)


class TestSgdStep:
    def test_single_pair_beta_one_is_plain_sce_step(self, rng):
        m = LinearClassifier(rng.standard_normal((3, 4)))
        f1, f2 = rng.standard_normal(3), rng.standard_normal(3)
        cfg = TrainConfig(eta=0.1)
        stepped = sgd_mixup_step(m, [(f1, f2, 1, 1.0)], cfg)
        p = np.exp(f1 @ m.w)
        p /= p.sum()
        p[1] -= 1.0
        np.testing.assert_allclose(stepped.w, m.w - 0.1 * np.outer(f1, p), rtol=1e-12)

    def test_zero_gradient_leaves_weights(self):
        m = LinearClassifier(np.array([[80.0, -80.0], [0.0, 0.0]]))
        f = np.array([1.0, 0.0])
        stepped = sgd_mixup_step(m, [(f, f, 0, 1.0)], TrainConfig(eta=0.5))
        np.testing.assert_allclose(stepped.w, m.w, atol=1e-30)

    def test_doubled_batch_linearity(self, rng):
        m = LinearClassifier(rng.standard_normal((3, 3)))
        batch = [(rng.standard_normal(3), rng.standard_normal(3), int(rng.integers(3)), 0.7)
                 for _ in range(4)]
        cfg = TrainConfig(eta=0.2)
        once = sgd_mixup_step(m, batch, cfg)
        doubled = sgd_mixup_step(m, batch + batch, cfg)
        np.testing.assert_allclose(once.w, doubled.w, rtol=1e-12)

    @pytest.mark.parametrize("eta", [1e-3, 1e-4])
    def test_small_step_decreases_loss(self, eta, rng):
        for _ in range(20):
            m = LinearClassifier(rng.standard_normal((4, 3)))
            batch = [(rng.standard_normal(4), rng.standard_normal(4), int(rng.integers(3)),
                      rng.uniform(0.6, 1)) for _ in range(8)]
            before = mixup_batch_loss(m, batch)
            after = mixup_batch_loss(sgd_mixup_step(m, batch, TrainConfig(eta=eta)), batch)
            assert after < before

    def test_weight_decay(self):
        m = LinearClassifier(np.array([[80.0, -80.0], [0.0, 0.0]]))
        f = np.array([1.0, 0.0])
        stepped = sgd_mixup_step(m, [(f, f, 0, 1.0)], TrainConfig(eta=0.5, weight_decay=0.1))
        np.testing.assert_allclose(stepped.w, 0.95 * m.w, rtol=1e-12)


class TestConfig:
    def test_beta_eval_is_midpoint(self):
        assert TrainConfig(beta_min=0.6).beta_eval == pytest.approx(0.8)

    def test_rejects_bad_beta(self):
        with pytest.raises(ValueError):
            TrainConfig(beta_min=1.2)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, rng):
        m = LinearClassifier(rng.standard_normal((4, 3)))
        path = tmp_path / "w.ndw"
        save_checkpoint(m, str(path), TrainConfig())
        np.testing.assert_array_equal(load_checkpoint(str(path)).w, m.w)
        assert (tmp_path / "w.ndw.json").exists()

    def test_layout_is_column_major(self, tmp_path):
        w = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        path = tmp_path / "w.ndw"
        save_checkpoint(LinearClassifier(w), str(path))
        raw = path.read_bytes()
        assert raw[:4] == b"NDW1"
        assert np.frombuffer(raw[12:], "<f8").tolist() == [1, 3, 5, 2, 4, 6]

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "w.ndw"
        path.write_bytes(b"XXXX" + bytes(12))
        with pytest.raises(ValueError, match="bad magic"):
            load_checkpoint(str(path))
