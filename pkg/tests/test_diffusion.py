import math

import numpy as np
import pytest

from helpers import TINY, perturbed_params
from trajdiff.diffusion import (
    DDIMParams,
    NoiseSchedule,
    TrainBatch,
    ddim_loop,
    ddim_sample,
    decode_samples,
    ema_update,
    history_targets,
    masked_l1,
    q_sample,
    training_loss,
)
from trajdiff.net import CondBatch, ModelParams
from trajdiff.trackcore import velocities_from_positions

S = NoiseSchedule()


def _alpha_bar_oracle(tau):
    return math.prod(1.0 - (1e-4 + (0.02 - 1e-4) * s / 999) for s in range(tau))


class TestSchedule:
    def test_values(self):
        ab = S.alpha_bars
        assert np.all(np.diff(ab) < 0) and np.all((ab > 0) & (ab < 1))
        assert math.isclose(ab[0], 1 - 1e-4, rel_tol=0, abs_tol=1e-15)
        assert S.alpha_bar(0) == 1.0
        for tau in (1, 10, 500, 1000):
            assert math.isclose(float(S.alpha_bar(tau)), _alpha_bar_oracle(tau), rel_tol=1e-10)
        assert S.alpha_bar(1000) < 0.01

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            S.alpha_bar(1001)


class TestQSample:
    def test_noise_free(self, rng):
        z0 = rng.normal(size=(3, 5))
        assert np.allclose(q_sample(z0, 400, 0.0, S), np.sqrt(S.alpha_bar(400)) * z0)

    def test_pure_noise_end(self, rng):
        eps = rng.normal(size=5)
        assert np.allclose(q_sample(np.zeros(5), 1000, eps, S), np.sqrt(1 - S.alpha_bar(1000)) * eps)

    def test_batched_tau(self, rng):
        z0 = rng.normal(size=(2, 3, 4))
        eps = rng.normal(size=z0.shape)
        out = q_sample(z0, np.array([5, 900]), eps, S)
        assert np.allclose(out[1], q_sample(z0[1], 900, eps[1], S))

    @pytest.mark.parametrize("tau", [0, 1001])
    def test_range(self, tau):
        with pytest.raises(ValueError):
            q_sample(np.zeros(2), tau, np.zeros(2), S)


def _oracle(z0):
    return lambda z, tau: z0


class TestDDIM:
    def test_one_step_hand_computation(self, rng):
        z0 = rng.normal(size=(2, 7))
        eps = rng.normal(size=z0.shape)
        ddim = DDIMParams(100)
        for tau in (1000, 530, 20):
            z = q_sample(z0, tau, eps, S)
            nxt = _one_step(z0, z, tau, ddim)
            ab_prev = float(S.alpha_bar(tau - 10))
            assert np.allclose(nxt, np.sqrt(ab_prev) * z0 + np.sqrt(1 - ab_prev) * eps, atol=1e-12)

    @pytest.mark.parametrize("start", [1000, 500, 10])
    def test_oracle_recovers_clean(self, rng, start):
        z0 = rng.normal(size=(3, 11))
        z = q_sample(z0, start, rng.normal(size=z0.shape), S)
        out = ddim_loop(_oracle(z0), z, S, DDIMParams(100), start_tau=start)
        assert np.max(np.abs(out - z0)) < 1e-6

    def test_sigma_zero_when_deterministic(self):
        assert all(DDIMParams(100, 0.0).sigma(S, t) == 0 for t in (1000, 500, 10))

    @pytest.mark.parametrize("tau", [2, 400, 1000])
    def test_ancestral_scale(self, tau):
        # posterior variance of the one-step reverse process: beta_t (1 - abar_{t-1}) / (1 - abar_t)
        beta = 1e-4 + (0.02 - 1e-4) * (tau - 1) / 999
        post = beta * (1 - _alpha_bar_oracle(tau - 1)) / (1 - _alpha_bar_oracle(tau))
        assert math.isclose(DDIMParams(1000, 1.0).sigma(S, tau) ** 2, post, rel_tol=1e-9)

    def test_stride_validation(self):
        with pytest.raises(ValueError):
            DDIMParams(7).stride(S)
        assert DDIMParams(100).timesteps(S)[[0, -1]].tolist() == [1000, 10]
        with pytest.raises(ValueError):
            ddim_loop(_oracle(np.zeros(2)), np.zeros(2), S, DDIMParams(100), start_tau=15)

    def test_stochastic_needs_rng(self):
        with pytest.raises(ValueError):
            ddim_loop(_oracle(np.zeros(2)), np.zeros(2), S, DDIMParams(100, 1.0))

    def test_nan_aborts(self):
        from trajdiff.net import NumericError
        with pytest.raises(NumericError, match="step"):
            ddim_loop(lambda z, t: np.full_like(z, np.nan), np.zeros(2), S, DDIMParams(10))


def _one_step(z0, z, tau, ddim):
    """Single update written out from the definitions, independent of the loop."""
    delta = 1000 // ddim.n_steps
    ab, ab_prev = float(S.alpha_bar(tau)), float(S.alpha_bar(tau - delta))
    eps_hat = (z - np.sqrt(ab) * z0) / np.sqrt(1 - ab)
    return np.sqrt(ab_prev) * z0 + np.sqrt(1 - ab_prev) * eps_hat


def _cond(rng, b, n, history=1.0, disp=0.0):
    return CondBatch(rng.normal(scale=0.01, size=(b, n, TINY.t_cond - 1, 2)), np.ones((b, n, TINY.t_cond)),
                     rng.uniform(size=(b, n, 2)), rng.normal(scale=0.05, size=(b, 2)) * disp,
                     np.full(b, disp), np.full(b, history))


class TestSampling:
    def test_deterministic(self, rng):
        p = perturbed_params(TINY, scale=0.05)
        cond = _cond(rng, 2, 5)
        feats = rng.normal(size=(2, 5, TINY.feature_dim))
        a = ddim_sample(p, cond, feats, TINY, DDIMParams(20), np.random.default_rng(3))
        b = ddim_sample(p, cond, feats, TINY, DDIMParams(20), np.random.default_rng(3))
        assert np.array_equal(a, b) and a.shape == (2, 5, TINY.target_dim)

    def test_history_clamped(self, rng):
        p = perturbed_params(TINY, scale=0.05)
        cond = _cond(rng, 1, 5)
        flat = ddim_sample(p, cond, rng.normal(size=(5, 4)), TINY, DDIMParams(20), np.random.default_rng(0))
        values, slots = history_targets(cond, TINY)
        assert np.allclose(flat[..., slots], values[..., slots])
        free = ddim_sample(p, cond, rng.normal(size=(5, 4)), TINY, DDIMParams(20), np.random.default_rng(0),
                           clamp_history=False)
        assert not np.allclose(free[..., slots], values[..., slots])

    def test_oracle_denoiser_through_sampler(self, rng):
        cond = _cond(rng, 1, 4, history=0.0)
        z0 = rng.normal(size=(1, 4, TINY.target_dim))
        out = ddim_sample(None, cond, np.zeros((4, 4)), TINY, DDIMParams(50), rng, denoiser=_oracle(z0))
        assert np.max(np.abs(out - z0)) < 1e-6

    def test_decode_round_trip(self, rng):
        p = perturbed_params(TINY, scale=0.05)
        cond = _cond(rng, 2, 5)
        flat = ddim_sample(p, cond, rng.normal(size=(2, 5, 4)), TINY, DDIMParams(20), rng)
        tracks = decode_samples(flat, cond, TINY)
        for i, ts in enumerate(tracks):
            assert np.allclose(ts.positions[:, 0], cond.start_points[i])
            got = flat[i, :, :2 * (TINY.horizon - 1)].reshape(5, -1, 2)
            # positions integrate every sampled velocity, visible or not
            assert np.allclose(np.diff(ts.positions, axis=1), got / 12.0)
            occ = flat[i, :, 2 * (TINY.horizon - 1):]
            assert np.array_equal(ts.visibility, (occ > 0.05).astype(np.uint8))
            # visible steps survive a re-encode
            assert np.allclose(12.0 * velocities_from_positions(ts.positions, np.ones_like(ts.visibility)), got)


class TestLoss:
    def test_l1_examples(self, rng):
        t = rng.normal(size=(2, 4, 3))
        mask = np.ones((2, 4), bool)
        assert masked_l1(t, t, mask)[0] == 0
        assert math.isclose(masked_l1(t + 0.1, t, mask)[0], 0.1, rel_tol=1e-12)

    def test_masked_rows_ignored(self, rng):
        t = rng.normal(size=(2, 4, 3))
        mask = np.array([[1, 1, 0, 0], [1, 1, 1, 1]], bool)
        pred = t + rng.normal(size=t.shape)
        t2 = t.copy()
        t2[0, 2:] += 50
        assert masked_l1(pred, t, mask)[0] == masked_l1(pred, t2, mask)[0]
        assert np.all(masked_l1(pred, t2, mask)[1][0, 2:] == 0)
        with pytest.raises(ValueError):
            masked_l1(pred, t, np.zeros((2, 4), bool))

    def test_gradient_matches_finite_difference(self, rng):
        pred = rng.normal(size=(1, 3, 2))
        target = rng.normal(size=pred.shape)
        mask = np.array([[1, 0, 1]], bool)
        _, g = masked_l1(pred, target, mask)
        pred2 = pred.copy()
        pred2[0, 2, 1] += 1e-6
        assert math.isclose((masked_l1(pred2, target, mask)[0] - masked_l1(pred, target, mask)[0]) / 1e-6,
                            g[0, 2, 1], rel_tol=1e-6)

    def test_training_loss_no_leaks(self, rng):
        # away from the zero-initialized modulation, so the global condition reaches the output
        p = perturbed_params(TINY, scale=0.1)
        b, n = 3, 5
        batch = TrainBatch(rng.normal(size=(b, n, TINY.target_dim)), rng.normal(size=(b, n, 4)),
                           _cond(rng, b, n, disp=0.0), np.ones((b, n), bool))
        loss, g = training_loss(p, batch, TINY, rng)
        assert loss > 0 and np.all(g["disp.w"] == 0)
        batch.cond = _cond(rng, b, n, disp=1.0)
        _, g = training_loss(p, batch, TINY, rng)
        assert np.abs(g["disp.w"]).max() > 0


class TestEMA:
    def test_examples(self):
        ema = {"w": np.zeros(3)}
        ema_update(ema, {"w": np.ones(3)}, 0.9997)
        assert np.allclose(ema["w"], 0.0003)
        same = {"w": np.full(2, 0.7)}
        ema_update(same, {"w": np.full(2, 0.7)})
        assert np.allclose(same["w"], 0.7, rtol=0, atol=1e-15)

    def test_geometric_gap(self):
        ema = ModelParams({"w": np.array([5.0])})
        target = ModelParams({"w": np.array([1.0])})
        for _ in range(50):
            ema_update(ema, target, 0.9)
        assert math.isclose(ema["w"][0] - 1.0, 4.0 * 0.9 ** 50, rel_tol=1e-9)

    def test_lag_bound(self, rng):
        decay = 0.95
        theta = np.zeros(4)
        ema = {"w": theta.copy()}
        bound = 0.0
        for _ in range(200):
            step = rng.normal(scale=0.1, size=4)
            theta = theta + step
            ema_update(ema, {"w": theta}, decay)
            bound = decay * (bound + np.linalg.norm(step))
            assert np.linalg.norm(theta - ema["w"]) <= bound + 1e-12
