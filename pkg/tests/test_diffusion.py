import math

import numpy as np
import pytest
import torch

from seqamodal.diffusion import (ConditionedInput, forward_sample,
                                 linear_schedule, reverse_step, training_loss)

# regression constant from a one-off log-domain product (see oracle below)
ABAR_1000_LINEAR = 4.035829765375676e-05


def log_domain_abar(T, beta_start, beta_end, t):
    """Independent oracle: product of alphas computed as exp(sum(log))."""
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return math.exp(np.log1p(-beta[:t]).sum())


class TestLinearSchedule:
    def test_two_step_by_hand(self):
        s = linear_schedule(2, 0.1, 0.2)
        assert np.allclose(s.alpha, [0.9, 0.8])
        assert np.allclose(s.alpha_bar, [0.9, 0.72])

    def test_alpha_bar_strictly_decreasing(self):
        s = linear_schedule(1000)
        assert np.all(np.diff(s.alpha_bar) < 0)
        assert s.abar(1000) < s.abar(1)

    def test_recursion_identity(self):
        s = linear_schedule(1000)
        for t in range(2, 1001):
            rel = abs(s.abar(t) - s.abar(t - 1) * s.a(t)) / s.abar(t)
            assert rel < 1e-12

    def test_abar_t1000_matches_log_domain_oracle(self):
        s = linear_schedule(1000, 1e-4, 0.02)
        oracle = log_domain_abar(1000, 1e-4, 0.02, 1000)
        assert s.abar(1000) == pytest.approx(oracle, rel=1e-10)
        assert s.abar(1000) == pytest.approx(ABAR_1000_LINEAR, rel=1e-12)

    def test_abar0_convention(self):
        assert linear_schedule(10).abar(0) == 1.0

    def test_sigma_modes(self):
        s = linear_schedule(10, sigma_mode="beta")
        assert np.allclose(s.sigma ** 2, s.beta)
        s2 = linear_schedule(10, sigma_mode="beta_tilde")
        abar_prev = np.concatenate(([1.0], s2.alpha_bar[:-1]))
        assert np.allclose(s2.sigma ** 2,
                           (1 - abar_prev) / (1 - s2.alpha_bar) * s2.beta)

    @pytest.mark.parametrize("args", [
        (1, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.02, 1e-4), (10, 0.5, 1.0),
    ])
    def test_invalid_ranges(self, args):
        with pytest.raises(ValueError):
            linear_schedule(*args)


class TestForwardSample:
    def test_zero_noise_limit(self):
        s = linear_schedule(100)
        m = torch.rand(1, 1, 8, 8) * 2 - 1
        out = forward_sample(s, m, 42, torch.zeros_like(m))
        assert torch.allclose(out, math.sqrt(s.abar(42)) * m)

    def test_identity_limit_near_t_where_abar_close_to_one(self):
        # tiny betas keep abar within 1e-6 of 1 at t = 1
        s = linear_schedule(10, 1e-7, 1e-7 + 1e-12)
        assert 1 - s.abar(1) < 1e-6
        m = torch.rand(1, 1, 8, 8) * 2 - 1
        eps = torch.randn_like(m)
        out = forward_sample(s, m, 1, eps)
        assert torch.allclose(out, m, atol=1e-2)

    def test_accepts_boolean_mask(self):
        s = linear_schedule(10)
        mask = np.zeros((4, 4), dtype=bool)
        mask[1, 1] = True
        out = forward_sample(s, mask, 1, torch.zeros(4, 4))
        signed = np.where(mask, 1.0, -1.0)
        assert np.allclose(out.numpy(), math.sqrt(s.abar(1)) * signed)

    def test_shape_mismatch(self):
        s = linear_schedule(10)
        with pytest.raises(ValueError):
            forward_sample(s, torch.zeros(2, 2), 1, torch.zeros(3, 3))

    @pytest.mark.parametrize("t_probe", ["first", "mid", "last"])
    def test_matches_iterated_single_steps(self, t_probe):
        """Monte-Carlo oracle: iterate x_t = sqrt(a_t) x_{t-1} + sqrt(1-a_t) e_t
        and compare mean/variance against the closed form."""
        T = 1000
        s = linear_schedule(T)
        t = {"first": 1, "mid": T // 2, "last": T}[t_probe]
        m = torch.full((10_000, 4), 1.0)  # flat +1 mask, 10k draws
        g = torch.Generator().manual_seed(123 + t)
        x = m.clone()
        for step in range(1, t + 1):
            e = torch.randn(m.shape, generator=g)
            x = math.sqrt(s.a(step)) * x + math.sqrt(1 - s.a(step)) * e
        # deterministic part agrees exactly with zero noise
        closed_mean = math.sqrt(s.abar(t))
        assert x.mean().item() == pytest.approx(closed_mean, abs=4 * math.sqrt((1 - s.abar(t)) / 40_000) + 1e-9)
        var = x.var().item()
        expected_var = 1 - s.abar(t)
        if expected_var > 1e-8:
            assert var == pytest.approx(expected_var, rel=0.02)

    def test_zero_noise_iteration_matches_closed_form_exactly(self):
        T = 1000
        s = linear_schedule(T)
        m = torch.full((1, 4), 1.0, dtype=torch.float64)
        x = m.clone()
        for step in range(1, T + 1):
            x = math.sqrt(s.a(step)) * x
        closed = forward_sample(s, m, T, torch.zeros_like(m))
        assert torch.allclose(x, closed, rtol=1e-9)


class TestReverseStep:
    def test_zero_eps_zero_z_degenerate(self):
        s = linear_schedule(50)
        mt = torch.randn(1, 1, 4, 4)
        cond = ConditionedInput(torch.zeros(1, 3, 4, 4), torch.zeros(1, 1, 4, 4),
                                mt, torch.tensor([7]))
        out = reverse_step(s, lambda c: torch.zeros_like(c.noisy_mask), cond,
                           torch.zeros_like(mt))
        assert torch.allclose(out, mt / math.sqrt(s.a(7)))

    def test_linear_in_z(self):
        s = linear_schedule(50)
        mt = torch.randn(1, 1, 4, 4)
        z1 = torch.randn_like(mt)
        z2 = torch.randn_like(mt)
        outs = []
        for z in (z1, z2):
            cond = ConditionedInput(torch.zeros(1, 3, 4, 4),
                                    torch.zeros(1, 1, 4, 4), mt, torch.tensor([9]))
            outs.append(reverse_step(s, lambda c: torch.zeros_like(c.noisy_mask),
                                     cond, z))
        assert torch.allclose(outs[0] - outs[1], s.sig(9) * (z1 - z2), atol=1e-6)

    def test_z_must_be_zero_at_t1(self):
        s = linear_schedule(50)
        mt = torch.randn(1, 1, 4, 4)
        cond = ConditionedInput(torch.zeros(1, 3, 4, 4), torch.zeros(1, 1, 4, 4),
                                mt, torch.tensor([1]))
        with pytest.raises(ValueError):
            reverse_step(s, lambda c: torch.zeros_like(c.noisy_mask), cond,
                         torch.ones_like(mt))

    def test_denoiser_shape_mismatch(self):
        s = linear_schedule(50)
        mt = torch.randn(1, 1, 4, 4)
        cond = ConditionedInput(torch.zeros(1, 3, 4, 4), torch.zeros(1, 1, 4, 4),
                                mt, torch.tensor([5]))
        with pytest.raises(ValueError):
            reverse_step(s, lambda c: torch.zeros(1, 1, 2, 2), cond,
                         torch.zeros_like(mt))

    def test_exact_eps_oracle_rollout_recovers_mask(self, oracle_rollout):
        final, target = oracle_rollout(T=200, seed=0)
        assert (final - target).abs().max().item() < 1e-4

    def test_clip_is_noop_when_x0_in_range(self):
        # eps_hat chosen so the implied clean signal lands inside [-1, 1]:
        # both mean formulas must then agree.
        s = linear_schedule(50)
        t = 23
        x0 = torch.rand(1, 1, 4, 4) * 2 - 1
        eps = torch.randn(1, 1, 4, 4)
        mt = forward_sample(s, x0, t, eps)
        cond = ConditionedInput(torch.zeros(1, 3, 4, 4), torch.zeros(1, 1, 4, 4),
                                mt, torch.tensor([t]))
        plain = reverse_step(s, lambda c: eps, cond, torch.zeros_like(mt))
        clipped = reverse_step(s, lambda c: eps, cond, torch.zeros_like(mt),
                               clip_x0=True)
        assert torch.allclose(plain, clipped, atol=1e-5)

    def test_clip_bounds_runaway_estimates(self):
        # a denoiser that wildly underestimates the noise implies x0 far
        # outside [-1, 1]; the clipped posterior mean must stay bounded by
        # the x0 = +/-1 extremes while the plain one blows up.
        s = linear_schedule(50)
        t = 40
        mt = torch.full((1, 1, 4, 4), 30.0)
        cond = ConditionedInput(torch.zeros(1, 3, 4, 4), torch.zeros(1, 1, 4, 4),
                                mt, torch.tensor([t]))
        denoiser = lambda c: torch.zeros_like(c.noisy_mask)
        plain = reverse_step(s, denoiser, cond, torch.zeros_like(mt))
        clipped = reverse_step(s, denoiser, cond, torch.zeros_like(mt),
                               clip_x0=True)
        a_t, abar_t = s.a(t), s.abar(t)
        abar_prev = s.abar(t - 1)
        bound = (math.sqrt(abar_prev) * (1 - a_t) / (1 - abar_t)
                 + math.sqrt(a_t) * (1 - abar_prev) / (1 - abar_t) * 30.0)
        assert clipped.abs().max().item() <= bound * (1 + 1e-5)
        assert clipped.abs().max() < plain.abs().max()

    def test_oracle_rollout_exact_with_clip(self):
        from conftest import OracleDenoiser
        s = linear_schedule(100)
        rng = torch.Generator().manual_seed(5)
        target = torch.where(torch.rand(1, 1, 8, 8, generator=rng) > 0.5, 1.0, -1.0)
        oracle = OracleDenoiser(s, target, image_size=8)
        x = forward_sample(s, target, 100, torch.randn(1, 1, 8, 8, generator=rng))
        for t in range(100, 0, -1):
            cond = ConditionedInput(torch.zeros(1, 3, 8, 8),
                                    torch.zeros(1, 1, 8, 8), x, torch.tensor([t]))
            x = reverse_step(s, oracle, cond, torch.zeros_like(x), clip_x0=True)
        assert (x - target).abs().max().item() < 1e-4

    def test_never_touches_image_or_cm(self):
        s = linear_schedule(20)
        image = torch.randn(1, 3, 4, 4)
        cm = torch.randn(1, 1, 4, 4)
        image_before, cm_before = image.clone(), cm.clone()
        cond = ConditionedInput(image, cm, torch.randn(1, 1, 4, 4), torch.tensor([3]))
        reverse_step(s, lambda c: torch.zeros_like(c.noisy_mask), cond,
                     torch.zeros(1, 1, 4, 4))
        assert torch.equal(image, image_before)
        assert torch.equal(cm, cm_before)


@pytest.fixture
def oracle_rollout(request):
    from conftest import OracleDenoiser

    def run(T=200, seed=0):
        s = linear_schedule(T)
        rng = torch.Generator().manual_seed(seed)
        target = torch.where(torch.rand(1, 1, 8, 8, generator=rng) > 0.5, 1.0, -1.0)
        oracle = OracleDenoiser(s, target, image_size=8)
        eps0 = torch.randn(1, 1, 8, 8, generator=rng)
        x = forward_sample(s, target, T, eps0)
        for t in range(T, 0, -1):
            cond = ConditionedInput(torch.zeros(1, 3, 8, 8), torch.zeros(1, 1, 8, 8),
                                    x, torch.tensor([t]))
            x = reverse_step(s, oracle, cond, torch.zeros_like(x))
        return x, target

    return run


class TestTrainingLoss:
    def test_perfect_oracle_gives_zero(self):
        from conftest import OracleDenoiser
        s = linear_schedule(100)
        target = torch.where(torch.rand(1, 1, 8, 8) > 0.5, 1.0, -1.0)
        oracle = OracleDenoiser(s, target, image_size=8)
        eps = torch.randn(1, 1, 8, 8)
        loss = training_loss(s, oracle, torch.zeros(1, 3, 8, 8),
                             torch.zeros(1, 1, 8, 8), target, 37, eps)
        assert loss.item() < 1e-10

    def test_zero_denoiser_gives_mean_eps_squared(self):
        s = linear_schedule(100)
        g = torch.Generator().manual_seed(3)
        eps = torch.randn(4, 1, 64, 64, generator=g)
        loss = training_loss(s, lambda c: torch.zeros_like(c.noisy_mask),
                             torch.zeros(4, 3, 64, 64), torch.zeros(4, 1, 64, 64),
                             torch.zeros(4, 1, 64, 64), 10, eps)
        assert loss.item() == pytest.approx((eps ** 2).mean().item(), rel=1e-6)
        assert loss.item() == pytest.approx(1.0, abs=0.05)

    def test_nonnegative_and_zero_iff_exact(self):
        s = linear_schedule(10)
        eps = torch.randn(1, 1, 4, 4)
        loss = training_loss(s, lambda c: eps, torch.zeros(1, 3, 4, 4),
                             torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 4), 5, eps)
        assert loss.item() == 0.0
        loss2 = training_loss(s, lambda c: eps + 0.1, torch.zeros(1, 3, 4, 4),
                              torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 4), 5, eps)
        assert loss2.item() > 0

    def test_nonfinite_loss_raises(self):
        s = linear_schedule(10)
        eps = torch.randn(1, 1, 4, 4)
        with pytest.raises(FloatingPointError):
            training_loss(s, lambda c: torch.full_like(c.noisy_mask, float("nan")),
                          torch.zeros(1, 3, 4, 4), torch.zeros(1, 1, 4, 4),
                          torch.zeros(1, 1, 4, 4), 5, eps)

    def test_finite_difference_gradient_tiny_linear_denoiser(self):
        """Two-parameter linear denoiser: eps_hat = w * M_t + b."""
        s = linear_schedule(50)
        g = torch.Generator().manual_seed(0)
        # float64 throughout so central differences resolve to ~1e-9
        eps = torch.randn(1, 1, 6, 6, generator=g, dtype=torch.float64)
        mask = torch.where(torch.rand(1, 1, 6, 6, generator=g) > 0.5, 1.0, -1.0).double()
        zeros3 = torch.zeros(1, 3, 6, 6, dtype=torch.float64)
        zeros1 = torch.zeros(1, 1, 6, 6, dtype=torch.float64)
        w = torch.tensor(0.7, dtype=torch.float64, requires_grad=True)
        b = torch.tensor(-0.2, dtype=torch.float64, requires_grad=True)
        den = lambda c: w * c.noisy_mask + b
        loss = training_loss(s, den, zeros3, zeros1, mask, 17, eps)
        loss.backward()
        h = 1e-6
        for p, grad in ((w, w.grad), (b, b.grad)):
            with torch.no_grad():
                orig = p.item()
                p += h
                up = training_loss(s, den, zeros3, zeros1, mask, 17, eps).item()
                p -= 2 * h
                down = training_loss(s, den, zeros3, zeros1, mask, 17, eps).item()
                p.copy_(torch.tensor(orig, dtype=torch.float64))
            fd = (up - down) / (2 * h)
            assert grad.item() == pytest.approx(fd, rel=1e-4, abs=1e-8)
