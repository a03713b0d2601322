import math

import numpy as np
import pytest
import torch

from ehrsynth.diffusion import (NoiseSchedule, ScheduleError, ancestral_sample,
                                build_schedule, forward_chain, forward_noise,
                                invert_forward_noise, posterior_mean_from_eps,
                                posterior_mean_from_x0, predict_next_visit)

# frozen by an exact-rational evaluation of the 1000-step linear schedule product
ALPHA_BAR_1000 = 4.0358297653756835e-05


class TestSchedule:
    def test_single_step_endpoint(self):
        sched = NoiseSchedule(np.array([0.5]))
        assert float(sched.alpha_bars[0]) == 0.5
        assert float(sched.alpha_bars_prev[0]) == 1.0
        assert float(sched.posterior_variance[0]) == 0.0

    def test_two_half_steps(self):
        sched = NoiseSchedule(np.array([0.5, 0.5]))
        np.testing.assert_allclose(sched.alpha_bars.numpy(), [0.5, 0.25])
        assert math.isclose(float(sched.posterior_variance[1]), 1.0 / 3.0, rel_tol=1e-15)

    def test_default_linear_1000(self):
        sched = build_schedule(1000)
        value = float(sched.alpha_bars[-1])
        assert math.isclose(value, ALPHA_BAR_1000, rel_tol=5e-4)  # 4 significant figures
        assert math.isclose(value, ALPHA_BAR_1000, rel_tol=1e-12)

    def test_invariants(self):
        sched = build_schedule(200)
        bars = sched.alpha_bars.numpy()
        assert np.all(np.diff(bars) < 0)
        assert bars[-1] < bars[0] < 1.0
        betas = sched.betas.numpy()
        post = sched.posterior_variance.numpy()
        assert np.all(post >= 0) and np.all(post <= betas)
        one_minus = sched.one_minus_alpha_bars.numpy()
        one_minus_prev = sched.one_minus_alpha_bars_prev.numpy()
        np.testing.assert_array_equal(post, one_minus_prev / one_minus * betas)
        # the complement arrays equal 1 - alpha_bar up to the step-1 rounding fix
        prev = np.concatenate([[1.0], bars[:-1]])
        np.testing.assert_allclose(post, (1.0 - prev) / (1.0 - bars) * betas,
                                   rtol=1e-12, atol=0)

    @pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02),
                                      (10, 0.03, 0.02), (10, 1e-4, 1.0)])
    def test_invalid_bounds(self, args):
        with pytest.raises(ScheduleError):
            build_schedule(*args)

    def test_unsupported_shape(self):
        with pytest.raises(ScheduleError, match="shape"):
            build_schedule(10, shape="cosine")

    def test_degenerate_beta_rejected(self):
        # beta so small that 1 - beta rounds to 1.0 makes the posterior undefined
        with pytest.raises(ScheduleError):
            NoiseSchedule(np.array([1e-17]))


class TestForwardNoise:
    def test_near_identity_at_tiny_beta(self):
        sched = build_schedule(1, beta_start=1e-12, beta_end=1e-12)
        v0 = torch.randn(16, dtype=torch.float64)
        eps = torch.randn(16, dtype=torch.float64)
        torch.testing.assert_close(forward_noise(v0, 1, eps, sched), v0, rtol=0, atol=1e-5)

    def test_zero_signal(self):
        sched = build_schedule(5)
        eps = torch.randn(8, dtype=torch.float64)
        out = forward_noise(torch.zeros(8, dtype=torch.float64), 3, eps, sched)
        expected = math.sqrt(1.0 - float(sched.alpha_bars[2])) * eps
        torch.testing.assert_close(out, expected)

    def test_plug_in_arithmetic(self):
        sched = NoiseSchedule(np.array([0.5, 0.5]))  # alpha_bar_2 = 0.25
        v0 = torch.tensor([1.0, 0.0], dtype=torch.float64)
        eps = torch.tensor([0.0, 1.0], dtype=torch.float64)
        out = forward_noise(v0, 2, eps, sched)
        torch.testing.assert_close(
            out, torch.tensor([0.5, math.sqrt(0.75)], dtype=torch.float64))

    def test_step_out_of_range(self):
        sched = build_schedule(5)
        with pytest.raises(ScheduleError):
            forward_noise(torch.zeros(2), 6, torch.zeros(2), sched)


class TestForwardChain:
    def test_noise_free_chain_matches_closed_form(self):
        sched = build_schedule(20)
        v0 = torch.randn(8, dtype=torch.float64)
        traj = forward_chain(v0, torch.zeros(20, 8, dtype=torch.float64), sched)
        for s in (1, 7, 20):
            expected = math.sqrt(float(sched.alpha_bars[s - 1])) * v0
            torch.testing.assert_close(traj[s - 1], expected)

    def test_single_step_equals_forward_noise(self):
        sched = build_schedule(1, beta_start=0.3, beta_end=0.3)
        v0 = torch.randn(4, dtype=torch.float64)
        eps = torch.randn(1, 4, dtype=torch.float64)
        torch.testing.assert_close(forward_chain(v0, eps, sched)[0],
                                   forward_noise(v0, 1, eps[0], sched))

    def test_distribution_matches_closed_form(self):
        # smaller sibling of the acceptance run: 2000 chains at 10 steps
        sched = build_schedule(10)
        gen = torch.Generator().manual_seed(5)
        v0 = torch.randn(4, generator=gen, dtype=torch.float64)
        n = 2000
        noises = torch.randn(10, n, 4, generator=gen, dtype=torch.float64)
        final = forward_chain(v0.expand(n, 4), noises, sched)[-1]
        abar = float(sched.alpha_bars[-1])
        se = math.sqrt((1.0 - abar) / n)
        assert (final.mean(0) - math.sqrt(abar) * v0).abs().max() < 3 * se
        pooled = float(((final - math.sqrt(abar) * v0) ** 2).mean())
        assert abs(pooled - (1.0 - abar)) / (1.0 - abar) < 0.05

    def test_wrong_noise_count(self):
        sched = build_schedule(3)
        with pytest.raises(ScheduleError):
            forward_chain(torch.zeros(2), torch.zeros(2, 2), sched)


class TestPosteriorMeans:
    def test_step_one_recovers_clean_exactly(self):
        sched = build_schedule(10)
        v_s = torch.randn(6, dtype=torch.float64)
        v0 = torch.randn(6, dtype=torch.float64)
        torch.testing.assert_close(posterior_mean_from_x0(v_s, v0, 1, sched), v0,
                                   rtol=0, atol=0)

    def test_coefficient_sum_identity(self):
        sched = build_schedule(50)
        ones = torch.ones(1, dtype=torch.float64)
        for s in (1, 2, 17, 50):
            alpha = float(sched.alphas[s - 1])
            abar = float(sched.alpha_bars[s - 1])
            abar_prev = float(sched.alpha_bars_prev[s - 1])
            beta = float(sched.betas[s - 1])
            expected = (math.sqrt(alpha) * (1 - abar_prev)
                        + math.sqrt(abar_prev) * beta) / (1 - abar)
            got = float(posterior_mean_from_x0(ones, ones, s, sched))
            assert abs(got - expected) < 1e-12

    def test_eps_zero(self):
        sched = build_schedule(8)
        v_s = torch.randn(4, dtype=torch.float64)
        out = posterior_mean_from_eps(v_s, torch.zeros(4, dtype=torch.float64), 5, sched)
        torch.testing.assert_close(out, v_s / math.sqrt(float(sched.alphas[4])))

    def test_alpha_near_one_limit(self):
        sched = build_schedule(2, beta_start=1e-9, beta_end=0.3)
        v_s = torch.randn(4, dtype=torch.float64)
        eps = torch.randn(4, dtype=torch.float64)
        out = posterior_mean_from_eps(v_s, eps, 1, sched)
        torch.testing.assert_close(out, v_s, rtol=0, atol=1e-4)

    def test_x0_and_eps_forms_agree(self):
        # the two parameterizations are algebraically identical once the noise
        # is consistent with (state, clean) under the closed form
        sched = build_schedule(50)
        gen = torch.Generator().manual_seed(7)
        worst = 0.0
        for trial in range(1000):
            s = int(torch.randint(1, 51, (1,), generator=gen))
            v0 = torch.randn(8, generator=gen, dtype=torch.float64)
            eps = torch.randn(8, generator=gen, dtype=torch.float64)
            v_s = forward_noise(v0, s, eps, sched)
            from_x0 = posterior_mean_from_x0(v_s, v0, s, sched)
            from_eps = posterior_mean_from_eps(v_s, eps, s, sched)
            worst = max(worst, float((from_x0 - from_eps).abs().max()))
        assert worst < 1e-9

    def test_invert_forward_noise_round_trip(self):
        sched = build_schedule(20)
        v0 = torch.randn(8, dtype=torch.float64)
        eps = torch.randn(8, dtype=torch.float64)
        v_s = forward_noise(v0, 9, eps, sched)
        torch.testing.assert_close(invert_forward_noise(v_s, v0, 9, sched), eps)


class _ConstantNet:
    def __init__(self, value):
        self.value = value

    def __call__(self, v, condition, step):
        return self.value.expand_as(v) if v.dim() > 1 else self.value


class TestGeneration:
    def test_one_shot_shape_and_determinism(self):
        sched = build_schedule(5)
        net = _ConstantNet(torch.arange(4, dtype=torch.float64))
        v = torch.randn(4, dtype=torch.float64)
        eps = torch.randn(4, dtype=torch.float64)
        out1 = predict_next_visit(net, v, torch.zeros(12), 3, eps, sched)
        out2 = predict_next_visit(net, v, torch.zeros(12), 3, eps, sched)
        assert torch.equal(out1, out2)
        assert out1.shape == (4,)

    def test_single_step_chain_returns_prediction(self):
        sched = build_schedule(1, beta_start=0.4, beta_end=0.4)
        target = torch.tensor([1.0, -2.0], dtype=torch.float64)
        net = _ConstantNet(target)
        out = ancestral_sample(net, torch.randn(2, dtype=torch.float64),
                               torch.zeros(6), sched, zero_noise=True)
        torch.testing.assert_close(out, target)

    def test_constant_net_is_fixed_point(self):
        sched = build_schedule(7)
        target = torch.tensor([0.5, 0.25, -1.0], dtype=torch.float64)
        net = _ConstantNet(target)
        gen = torch.Generator().manual_seed(3)
        out = ancestral_sample(net, torch.randn(3, dtype=torch.float64),
                               torch.zeros(9), sched, generator=gen)
        torch.testing.assert_close(out, target)

    def test_zero_noise_mode_repeatable(self):
        sched = build_schedule(6)
        net = _ConstantNet(torch.tensor([2.0], dtype=torch.float64))
        v = torch.randn(1, dtype=torch.float64)
        eps = torch.randn(1, dtype=torch.float64)
        a = ancestral_sample(net, v, torch.zeros(3), sched, eps_init=eps, zero_noise=True)
        b = ancestral_sample(net, v, torch.zeros(3), sched, eps_init=eps, zero_noise=True)
        assert torch.equal(a, b)
