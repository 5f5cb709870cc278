import math

import numpy as np
import pytest

from smoothcert.diffusion import (
    CosineSchedule,
    DenoiserSpec,
    analytic_denoiser,
    denoise_once,
    denoiser_jacobian,
    denoising_mse,
    find_timestep,
    learned_denoiser,
    load_denoiser,
    noise_and_scale,
    save_denoiser,
    train_denoiser,
)
from smoothcert.errors import CheckpointError
from smoothcert.mlp import TrainConfig, model_payload
from smoothcert.numerics import RngStream
from smoothcert.synthdata import MixtureSpec, default_geometry, sample_id


@pytest.fixture(scope="module")
def schedule():
    return CosineSchedule.create()


class TestSchedule:
    def test_invariants(self, schedule):
        ab = schedule.alpha_bar
        assert ab[0] == 1.0
        assert np.all(np.diff(ab) < 0)
        assert np.all(ab > 0) and np.all(ab <= 1.0)

    def test_definition(self, schedule):
        # alpha_bar[t] = f(t)/f(0), f = cos^2(((t/T + s)/(1+s)) pi/2)
        t = 137
        f = lambda u: math.cos(((u / schedule.T + schedule.s)
                                / (1 + schedule.s)) * math.pi / 2) ** 2
        assert schedule.alpha_bar[t] == pytest.approx(f(t) / f(0), rel=1e-12)


class TestFindTimestep:
    def test_sigma_zero(self, schedule):
        assert find_timestep(schedule, 0.0) == 0

    def test_sigma_paper_value(self, schedule):
        # nearest ratio to 0.0144, i.e. alpha_bar near 1/1.0144
        t = find_timestep(schedule, 0.12)
        target = 0.12 ** 2
        ratio = schedule.noise_ratio
        assert abs(ratio[t] - target) == np.abs(ratio - target).min()
        assert schedule.alpha_bar[t] == pytest.approx(1 / 1.0144, abs=2e-3)

    def test_linear_scan_oracle(self, schedule):
        for sigma in (0.05, 0.12, 0.25, 0.7, 2.0):
            t = find_timestep(schedule, sigma)
            diffs = [abs(r - sigma ** 2) for r in schedule.noise_ratio]
            assert t == int(np.argmin(diffs))

    def test_monotone_in_sigma(self, schedule):
        ts = [find_timestep(schedule, s) for s in np.linspace(0, 3, 40)]
        assert all(b >= a for a, b in zip(ts, ts[1:]))

    def test_too_large_sigma_rejected(self, schedule):
        # the cosine schedule covers noise ratios up to ~2.7e32
        with pytest.raises(ValueError):
            find_timestep(schedule, 1e17)


class TestNoiseAndScale:
    def test_sigma_zero_identity(self, schedule):
        x = np.array([1.0, -2.0])
        x_t, t = noise_and_scale(x, 0.0, schedule, RngStream(0))
        assert t == 0
        np.testing.assert_array_equal(x_t, x)

    def test_mean_and_variance(self, schedule):
        sigma = 0.25
        x = np.array([0.7, -0.3])
        reps = np.tile(x, (10 ** 4, 1))
        x_t, t = noise_and_scale(reps, sigma, schedule, RngStream(1))
        ab = schedule.alpha_bar[t]
        # E[x_t] = sqrt(ab) x within 4 standard errors
        se = math.sqrt(ab) * sigma / math.sqrt(len(reps))
        assert np.all(np.abs(x_t.mean(axis=0) - math.sqrt(ab) * x) < 4 * se)
        # per-coordinate variance is ab * sigma^2 which also equals
        # (1 - ab) up to the timestep discretization gap
        var = x_t.var(axis=0)
        assert np.all(np.abs(var - ab * sigma ** 2) < 4e-3)
        assert np.allclose(var, 1 - ab, atol=5e-3)

    def test_deterministic(self, schedule):
        x = np.array([0.4, 0.1])
        a, _ = noise_and_scale(x, 0.3, schedule, RngStream(2, 5))
        b, _ = noise_and_scale(x, 0.3, schedule, RngStream(2, 5))
        np.testing.assert_array_equal(a, b)


class TestAnalyticDenoiser:
    def test_single_component_conjugate_form(self, schedule):
        # prior N(0, I), effective noise variance ~1 at sigma = 1
        prior = MixtureSpec(means=np.zeros((1, 2)), cov_scale=1.0,
                            weights=np.array([1.0]))
        spec = analytic_denoiser(prior)
        t = find_timestep(schedule, 1.0)
        ab = schedule.alpha_bar[t]
        s2 = (1 - ab) / ab
        y = np.array([2.0, 0.0])
        out = denoise_once(spec, math.sqrt(ab) * y, t, schedule)
        np.testing.assert_allclose(out, y / (1 + s2), atol=1e-10)
        np.testing.assert_allclose(out, [1.0, 0.0], atol=0.01)

    def test_midpoint_between_symmetric_components(self, schedule):
        prior = MixtureSpec(means=np.array([[-1.5, 0.0], [1.5, 0.0]]),
                            cov_scale=0.3, weights=np.array([0.5, 0.5]))
        spec = analytic_denoiser(prior)
        t = find_timestep(schedule, 0.4)
        ab = schedule.alpha_bar[t]
        y = np.array([0.0, 0.8])     # on the perpendicular bisector
        out = denoise_once(spec, math.sqrt(ab) * y, t, schedule)
        assert abs(out[0]) < 1e-12

    def test_sigma_zero_is_identity(self, schedule):
        spec = analytic_denoiser(default_geometry())
        x = np.array([0.3, 1.1])
        out = denoise_once(spec, x, 0, schedule)
        np.testing.assert_array_equal(out, x)

    def test_translation_equivariance(self, schedule):
        base = default_geometry()
        shift = np.array([1.3, -0.7])
        shifted = MixtureSpec(means=base.means + shift,
                              cov_scale=base.cov_scale, weights=base.weights)
        t = find_timestep(schedule, 0.3)
        ab = math.sqrt(schedule.alpha_bar[t])
        y = np.array([0.5, 0.2])
        a = denoise_once(analytic_denoiser(base), ab * y, t, schedule)
        b = denoise_once(analytic_denoiser(shifted), ab * (y + shift), t,
                         schedule)
        np.testing.assert_allclose(b, a + shift, atol=1e-9)

    def test_mse_optimality_against_alternatives(self, schedule):
        spec = default_geometry()
        data = sample_id(spec, 10 ** 4, RngStream(3))
        den = analytic_denoiser(spec)
        sigma = 0.12
        x_t, t = noise_and_scale(data.points, sigma, schedule, RngStream(4))
        ab, s2 = schedule.alpha_bar[t], None
        s2 = (1 - ab) / ab
        est = denoise_once(den, x_t, t, schedule)
        mse = ((est - data.points) ** 2).sum(axis=1).mean()
        # no-op: unscale only
        noop = ((x_t / math.sqrt(ab) - data.points) ** 2).sum(axis=1).mean()
        # single-Gaussian shrinkage toward the global mean
        mu = spec.means.mean(axis=0)
        tau2 = np.var(spec.means, axis=0).mean() + spec.cov_scale ** 2
        shrunk = mu + (tau2 / (tau2 + s2)) * (x_t / math.sqrt(ab) - mu)
        shrink_mse = ((shrunk - data.points) ** 2).sum(axis=1).mean()
        noise_floor = 5 * mse / math.sqrt(len(data))
        assert mse <= noop - noise_floor or mse <= noop
        assert mse < noop
        assert mse < shrink_mse

    def test_jacobian_matches_finite_differences(self, schedule):
        spec = analytic_denoiser(default_geometry())
        t = find_timestep(schedule, 0.3)
        gen = np.random.default_rng(5)
        pts = gen.uniform(-3, 3, size=(5, 2))
        jac = denoiser_jacobian(spec, pts, t, schedule)
        step = 1e-6
        for n in range(len(pts)):
            for e in range(2):
                hi = pts[n].copy(); hi[e] += step
                lo = pts[n].copy(); lo[e] -= step
                fd = (denoise_once(spec, hi, t, schedule)
                      - denoise_once(spec, lo, t, schedule)) / (2 * step)
                np.testing.assert_allclose(jac[n, :, e], fd, atol=1e-5)


@pytest.fixture(scope="module")
def trained(schedule):
    data = sample_id(default_geometry(), 2000, RngStream(6))
    cfg = TrainConfig(epochs=600, batch_size=128, learning_rate=0.05, seed=7)
    model = train_denoiser(data, schedule, cfg)
    return model, data


class TestLearnedDenoiser:

    def test_beats_noop_baseline(self, trained, schedule):
        model, _ = trained
        held_out = sample_id(default_geometry(), 1000, RngStream(8))
        sigma = 0.12
        mse = denoising_mse(learned_denoiser(model), held_out.points, sigma,
                            schedule, RngStream(9))
        t = find_timestep(schedule, sigma)
        ab = schedule.alpha_bar[t]
        noop = 2 * (1 - ab) / ab        # d * sigma_eff^2
        assert mse < noop

    def test_within_factor_of_analytic(self, trained, schedule):
        model, _ = trained
        held_out = sample_id(default_geometry(), 1000, RngStream(10))
        sigma = 0.12
        learned_mse = denoising_mse(learned_denoiser(model), held_out.points,
                                    sigma, schedule, RngStream(11))
        analytic_mse = denoising_mse(analytic_denoiser(default_geometry()),
                                     held_out.points, sigma, schedule,
                                     RngStream(11))
        assert learned_mse <= 3 * analytic_mse

    def test_training_deterministic(self, schedule):
        data = sample_id(default_geometry(), 300, RngStream(12))
        cfg = TrainConfig(epochs=10, seed=13)
        a = train_denoiser(data, schedule, cfg)
        b = train_denoiser(data, schedule, cfg)
        assert model_payload(a) == model_payload(b)

    def test_jacobian_matches_finite_differences(self, schedule):
        data = sample_id(default_geometry(), 200, RngStream(14))
        model = train_denoiser(data, schedule, TrainConfig(epochs=5, seed=15))
        spec = learned_denoiser(model)
        t = find_timestep(schedule, 0.2)
        pts = np.array([[0.5, -1.0], [2.0, 1.0]])
        jac = denoiser_jacobian(spec, pts, t, schedule)
        step = 1e-6
        for n in range(len(pts)):
            for e in range(2):
                hi = pts[n].copy(); hi[e] += step
                lo = pts[n].copy(); lo[e] -= step
                fd = (denoise_once(spec, hi, t, schedule)
                      - denoise_once(spec, lo, t, schedule)) / (2 * step)
                np.testing.assert_allclose(jac[n, :, e], fd, atol=1e-5)


class TestDenoiserCheckpoint:
    def test_round_trip(self, tmp_path, schedule):
        data = sample_id(default_geometry(), 100, RngStream(16))
        model = train_denoiser(data, schedule, TrainConfig(epochs=3, seed=17))
        path = tmp_path / "den.ckpt"
        save_denoiser(model, path)
        assert model_payload(load_denoiser(path)) == model_payload(model)

    def test_plain_checkpoint_rejected(self, tmp_path):
        from smoothcert.mlp import init_model, save_model
        path = tmp_path / "plain.ckpt"
        save_model(init_model(2, (4,), 2, RngStream(0)), path)
        with pytest.raises(CheckpointError, match="flag"):
            load_denoiser(path)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            DenoiserSpec(kind="analytic")
        with pytest.raises(ValueError):
            DenoiserSpec(kind="unknown")
