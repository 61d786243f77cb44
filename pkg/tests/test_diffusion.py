import numpy as np
import pytest

from diffdepth import diffusion as D
from diffdepth.diffusion import ScheduleError
from diffdepth.networks import NetworkSet
from diffdepth.tensor import Tensor


@pytest.fixture(scope="module")
def sched():
    return D.build_schedule()


def oracle_eps(d_tau, z0, tau, sched):
    """Noise that makes ``d_tau`` consistent with ``z0`` at step ``tau``."""
    ab = sched.alpha_bars[tau]
    return (d_tau - np.sqrt(ab) * z0) / np.sqrt(1.0 - ab)


class TestSchedule:
    def test_zero_betas_give_unit_alpha_bars(self):
        s = D.schedule_from_betas(np.zeros(10), 5)
        np.testing.assert_array_equal(s.alpha_bars, 1.0)

    def test_final_alpha_bar_matches_brute_force_product(self, sched):
        prod = 1.0
        for s in range(1, 1001):
            beta = 1e-4 + (0.02 - 1e-4) * (s - 1) / 999
            prod *= 1.0 - beta
        assert sched.alpha_bars[1000] == pytest.approx(prod, rel=1e-12)
        assert 1e-5 < sched.alpha_bars[1000] < 1e-4

    def test_inference_steps_are_uniform_stride(self, sched):
        assert sched.infer_steps == tuple(range(50, 1001, 50))

    def test_invariants(self, sched):
        assert sched.alpha_bars[0] == 1.0
        assert np.all(np.diff(sched.alpha_bars) < 0)
        assert np.all((sched.betas > 0) & (sched.betas < 1))
        assert all(1 <= s <= sched.T_train for s in sched.infer_steps)
        assert np.all(np.diff(sched.infer_steps) > 0)

    @pytest.mark.parametrize(
        "kwargs",
        [dict(beta_start=0.0), dict(beta_start=0.03, beta_end=0.02), dict(beta_end=1.0), dict(infer_count=2000), dict(T_train=0)],
    )
    def test_invalid_bounds_raise(self, kwargs):
        with pytest.raises(ScheduleError):
            D.build_schedule(**kwargs)


class TestLatent:
    def test_half_maps_to_zero(self):
        assert D.to_latent(np.array(0.5)) == 0.0

    @pytest.mark.parametrize("d", [0.1, 0.25, 0.9])
    def test_round_trip(self, d):
        assert abs(D.from_latent(D.to_latent(np.array(d))) - d) < 1e-9

    def test_zero_depth_is_clamped(self):
        assert D.to_latent(np.array(0.0)) == pytest.approx(np.log(1e-4 / (1 - 1e-4)), abs=1e-12)

    def test_from_latent_stays_inside_open_interval(self):
        out = D.from_latent(np.array([-1e6, -50.0, 0.0, 50.0, 1e6]))
        assert np.all((out > 0) & (out < 1))

    def test_tensor_and_array_paths_agree(self, rng):
        d = rng.uniform(0.01, 0.99, size=(2, 1, 3, 3))
        np.testing.assert_allclose(D.to_latent(Tensor(d)).data, D.to_latent(d), atol=1e-12)

    def test_linear_mode_is_identity(self, rng):
        d = rng.uniform(size=(4,))
        assert D.to_latent(d, logit_space=False) is d
        assert D.from_latent(d, logit_space=False) is d


class TestQSample:
    def test_zero_noise_is_pure_rescale(self, sched, rng):
        z0 = rng.normal(size=(2, 1, 4, 4))
        out = D.q_sample(z0, 300, np.zeros_like(z0), sched)
        np.testing.assert_allclose(out, np.sqrt(sched.alpha_bars[300]) * z0, atol=1e-15)

    def test_zero_signal_is_scaled_noise(self, sched, rng):
        eps = rng.normal(size=(3, 1, 4, 4))
        out = D.q_sample(np.zeros_like(eps), 700, eps, sched)
        np.testing.assert_array_equal(out, eps * np.sqrt(1.0 - sched.alpha_bars[700]))

    def test_final_step_is_nearly_standard_normal(self, sched):
        r = np.random.default_rng(0)
        z0 = np.full(20000, 3.0)
        out = D.q_sample(z0, 1000, r.standard_normal(z0.shape), sched)
        assert abs(out.mean()) < 0.03
        assert abs(out.var() - 1.0) < 0.03

    def test_per_sample_steps(self, sched, rng):
        z0 = rng.normal(size=(2, 1, 3, 3))
        eps = rng.normal(size=z0.shape)
        out = D.q_sample(z0, np.array([10, 900]), eps, sched)
        np.testing.assert_allclose(out[1], D.q_sample(z0[1], 900, eps[1], sched), atol=1e-15)

    @pytest.mark.parametrize("tau", [0, 1001])
    def test_step_out_of_range(self, sched, tau):
        with pytest.raises(ScheduleError):
            D.q_sample(np.zeros(3), tau, np.zeros(3), sched)


class TestDDIMStep:
    @pytest.mark.parametrize("tau", [1, 50, 500, 1000])
    def test_single_step_inversion_is_exact(self, sched, tau):
        r = np.random.default_rng(tau)
        z0 = r.normal(size=(2, 1, 8, 8)) * 3
        eps = r.normal(size=z0.shape)
        d_tau = D.q_sample(z0, tau, eps, sched)
        assert np.max(np.abs(D.ddim_step(d_tau, eps, tau, 0, sched) - z0)) < 1e-6

    def test_zero_noise_estimate_rescales(self, sched, rng):
        d = rng.normal(size=(1, 1, 4, 4))
        out = D.ddim_step(d, np.zeros_like(d), 600, 400, sched)
        expected = d * np.sqrt(sched.alpha_bars[400]) / np.sqrt(sched.alpha_bars[600])
        np.testing.assert_allclose(out, expected, rtol=1e-14)

    def test_oracle_chain_recovers_clean_latent(self, sched):
        r = np.random.default_rng(11)
        z0 = D.to_latent(r.uniform(0.05, 0.95, size=(2, 1, 8, 8)))
        d = D.q_sample(z0, sched.T_train, r.standard_normal(z0.shape), sched)
        steps = list(sched.infer_steps)
        for i in range(len(steps) - 1, -1, -1):
            tau, prev = steps[i], (steps[i - 1] if i else 0)
            d = D.ddim_step(d, oracle_eps(d, z0, tau, sched), tau, prev, sched)
        assert np.max(np.abs(d - z0)) < 1e-4

    @pytest.mark.parametrize("tau,prev", [(100, 100), (100, 200), (1001, 50), (50, -1)])
    def test_step_order_violation(self, sched, tau, prev):
        with pytest.raises(ScheduleError):
            D.ddim_step(np.zeros(2), np.zeros(2), tau, prev, sched)


class TestSampling:
    def test_randomness_only_in_initial_latent(self, sched):
        calls = []

        def denoiser(d, tau):
            calls.append(tau)
            return np.sin(d)

        r1 = np.random.default_rng(5)
        D.sample_latent(denoiser, (1, 1, 4, 4), sched, r1)
        r2 = np.random.default_rng(5)
        r2.standard_normal((1, 1, 4, 4))
        assert r1.random() == r2.random()
        assert calls == list(reversed(sched.infer_steps))

    def test_denoise_depth_is_bitwise_repeatable(self, sched, rng):
        nets = NetworkSet(seed=2, zero_final=False)
        cond = Tensor(rng.uniform(size=(2, 4, 8, 8)))
        a = D.denoise_depth(cond, nets.denoiser, sched, np.random.default_rng(9))
        b = D.denoise_depth(cond, nets.denoiser, sched, np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("seed", range(5))
    def test_random_denoiser_output_in_open_interval(self, sched, seed):
        nets = NetworkSet(seed=seed, zero_final=False)
        cond = Tensor(np.random.default_rng(seed).uniform(size=(2, 4, 8, 8)))
        out = D.denoise_depth(cond, nets.denoiser, sched, np.random.default_rng(seed))
        assert out.shape == (2, 1, 8, 8)
        assert np.all(np.isfinite(out)) and np.all((out > 0) & (out < 1))

    def test_linear_space_can_leave_unit_interval(self, sched):
        nets = NetworkSet(seed=0, zero_final=False)
        cond = Tensor(np.random.default_rng(0).uniform(size=(2, 4, 8, 8)))
        out = D.denoise_depth(cond, nets.denoiser, sched, np.random.default_rng(0), logit_space=False)
        assert np.any((out <= 0) | (out >= 1))

    def test_trajectory_records_every_step(self, sched):
        traj = []
        D.sample_latent(lambda d, t: np.zeros_like(d), (1, 1, 2, 2), sched, np.random.default_rng(0), trajectory=traj)
        assert len(traj) == len(sched.infer_steps)
