import numpy as np
import pytest

from smoothcert.attack import (
    AttackConfig,
    attack_id_accuracy,
    margin_score_fn,
    pgd_maximize,
    pgd_maximize_batch,
    starting_points,
)
from smoothcert.mlp import MlpModel, TrainConfig, classifier_accuracy, train_classifier
from smoothcert.numerics import RngStream
from smoothcert.synthdata import LabeledDataset, MixtureSpec, sample_id


def linear_score(w):
    w = np.asarray(w, dtype=float)

    def fn(points, stream):
        return points @ w, np.tile(w, (len(points), 1))

    return fn


class TestStartingPoints:
    def test_epsilon_zero_collapses_to_z(self):
        cfg = AttackConfig(epsilon=0.0)
        z = np.array([0.7, -0.4])
        pts = starting_points(z, cfg, RngStream(1))
        assert pts.shape == (cfg.start_count, 2)
        np.testing.assert_allclose(pts, np.tile(z, (cfg.start_count, 1)),
                                   atol=1e-15)

    def test_decontrast_at_box_center_is_z(self):
        cfg = AttackConfig(epsilon=0.3)
        z = np.zeros(2)
        pts = starting_points(z, cfg, RngStream(2))
        np.testing.assert_allclose(pts[1], z, atol=1e-15)

    def test_decontrast_projects_center_onto_ball(self):
        cfg = AttackConfig(epsilon=0.25)
        z = np.array([2.0, -1.0])
        pts = starting_points(z, cfg, RngStream(3))
        np.testing.assert_allclose(pts[1], [1.75, -0.75], atol=1e-15)

    def test_membership(self):
        cfg = AttackConfig(epsilon=0.2)
        z = np.array([5.95, -5.9])     # near the box corner
        pts = starting_points(z, cfg, RngStream(4), box_bound=6.0)
        assert np.all(np.abs(pts - z) <= cfg.epsilon + 1e-12)
        assert np.all(np.abs(pts) <= 6.0 + 1e-12)

    def test_clean_input_is_first_start(self):
        cfg = AttackConfig(epsilon=0.5)
        z = np.array([1.0, 1.0])
        pts = starting_points(z, cfg, RngStream(5))
        np.testing.assert_array_equal(pts[0], z)


class TestPgdMaximize:
    def test_linear_closed_form(self):
        w = np.array([2.0, -1.0, 0.5])
        cfg = AttackConfig(epsilon=0.3, steps=200)
        z = np.array([0.2, 0.1, -0.5])
        z_adv, score = pgd_maximize(linear_score(w), z, cfg, RngStream(6))
        optimum = z + cfg.epsilon * np.sign(w)
        np.testing.assert_allclose(z_adv, optimum, atol=1e-6)
        assert score == pytest.approx(w @ z + cfg.epsilon * np.abs(w).sum(),
                                      abs=1e-9)

    def test_zero_gradient_returns_best_start(self):
        def flat(points, stream):
            return np.zeros(len(points)), np.zeros_like(points)

        cfg = AttackConfig(epsilon=0.4, steps=50)
        z = np.array([0.3, 0.3])
        z_adv, score = pgd_maximize(flat, z, cfg, RngStream(7))
        assert score == 0.0
        assert np.all(np.abs(z_adv - z) <= cfg.epsilon + 1e-12)

    def test_best_of_ensemble_at_least_clean(self):
        # clean trajectory starts at z, so the result can never be worse
        gen = np.random.default_rng(8)
        w = gen.normal(size=2)

        def wiggly(points, stream):
            vals = points @ w + np.sin(3 * points).sum(axis=1)
            grads = np.tile(w, (len(points), 1)) + 3 * np.cos(3 * points)
            return vals, grads

        cfg = AttackConfig(epsilon=0.2, steps=60)
        pts = gen.uniform(-2, 2, size=(100, 2))
        clean_vals, _ = wiggly(pts, None)
        _, scores = pgd_maximize_batch(wiggly, pts, cfg, RngStream(9))
        assert np.all(scores >= clean_vals - 1e-12)

    def test_feasibility_of_returned_points(self):
        gen = np.random.default_rng(10)
        w = gen.normal(size=2)
        cfg = AttackConfig(epsilon=0.15, steps=40)
        pts = gen.uniform(-5.9, 5.9, size=(50, 2))
        adv, _ = pgd_maximize_batch(linear_score(w), pts, cfg, RngStream(11))
        assert np.all(np.abs(adv - pts) <= cfg.epsilon + 1e-12)
        assert np.all(np.abs(adv) <= 6.0 + 1e-12)

    def test_deterministic(self):
        def noisy(points, stream):
            noise = stream.generator().standard_normal(points.shape)
            vals = (points + 0.01 * noise).sum(axis=1)
            return vals, np.ones_like(points)

        cfg = AttackConfig(epsilon=0.1, steps=20)
        pts = np.random.default_rng(12).uniform(-1, 1, size=(10, 2))
        a = pgd_maximize_batch(noisy, pts, cfg, RngStream(13))
        b = pgd_maximize_batch(noisy, pts, cfg, RngStream(13))
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])


@pytest.fixture(scope="module")
def blob_model():
    spec = MixtureSpec(means=np.array([[-1.5, 0.0], [1.5, 0.0]]),
                       cov_scale=0.25, weights=np.array([0.5, 0.5]))
    data = sample_id(spec, 400, RngStream(14))
    model = train_classifier(data, TrainConfig(epochs=150, seed=15))
    return model, data


class TestAttackIdAccuracy:

    def test_epsilon_zero_equals_clean_accuracy(self, blob_model):
        model, data = blob_model
        cfg = AttackConfig(epsilon=0.0, steps=10)
        assert attack_id_accuracy(model, data, cfg) == pytest.approx(
            classifier_accuracy(model, data))

    def test_nonincreasing_in_epsilon(self, blob_model):
        model, data = blob_model
        accs = [attack_id_accuracy(model, data,
                                   AttackConfig(epsilon=e, steps=60))
                for e in (0.0, 0.5, 1.2)]
        assert accs[1] <= accs[0] + 1e-12
        assert accs[2] <= accs[1] + 1e-12

    def test_linear_classifier_matches_robust_margin(self):
        # binary linear net: prediction survives iff margin > eps*||w||_1
        w = np.array([[1.0, 0.5], [-1.0, -0.5]])
        b = np.array([0.0, 0.2])
        model = MlpModel(weights=(w,), biases=(b,))
        gen = np.random.default_rng(16)
        points = gen.uniform(-3, 3, size=(200, 2))
        logits = points @ w.T + b
        labels = logits.argmax(axis=1)
        data = LabeledDataset(points=points, labels=labels)
        eps = 0.2
        w_diff = w[1] - w[0]
        margin = np.abs(logits[:, 1] - logits[:, 0])
        robust = margin > eps * np.abs(w_diff).sum()
        got = attack_id_accuracy(model, data,
                                 AttackConfig(epsilon=eps, steps=100))
        assert got == pytest.approx(robust.mean(), abs=1e-12)

    def test_margin_score_gradient(self, blob_model):
        model, data = blob_model
        fn = margin_score_fn(model, data.labels[:5])
        pts = data.points[:5]
        vals, grads = fn(pts, None)
        step = 1e-6
        for i in range(5):
            for j in range(2):
                hi = pts.copy(); hi[i, j] += step
                lo = pts.copy(); lo[i, j] -= step
                fd = (fn(hi, None)[0][i] - fn(lo, None)[0][i]) / (2 * step)
                assert grads[i, j] == pytest.approx(fd, abs=1e-5)
