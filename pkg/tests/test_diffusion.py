"""DDPM machinery tests: schedule identities, noising, reverse updates."""

import math

import numpy as np
import pytest

from subgoal_diffusion.diffusion import (DenoisingStep, NoiseSchedule, action_loss,
                                         build_schedule, forward_noise, reverse_step,
                                         sample_actions, timestep_embedding,
                                         timestep_table)
from subgoal_diffusion.errors import ConfigurationError, InputError, SamplingError


def test_schedule_identities_exact():
    """alpha_bar is the running product and sigma_1 is exactly zero."""
    sched = build_schedule(n_steps=50, beta_start=1e-4, beta_end=0.02)
    assert sched.n_steps == 50
    np.testing.assert_allclose(sched.alpha, 1.0 - sched.beta, rtol=0, atol=0)
    # direct-product oracle, computed independently of cumprod
    running = 1.0
    for k in range(50):
        running *= 1.0 - sched.beta[k]
        assert abs(sched.alpha_bar[k] - running) <= 1e-12
    assert sched.sigma[0] == 0.0
    assert np.all(sched.sigma >= 0.0)
    assert np.all(np.diff(sched.alpha_bar) < 0.0)
    # sigma_k^2 = beta_k * (1 - alpha_bar_{k-1}) / (1 - alpha_bar_k)
    for k in range(1, 50):
        expected = math.sqrt(sched.beta[k] * (1.0 - sched.alpha_bar[k - 1])
                             / (1.0 - sched.alpha_bar[k]))
        assert abs(sched.sigma[k] - expected) <= 1e-12


def test_schedule_betas_linear():
    sched = build_schedule(n_steps=5, beta_start=0.1, beta_end=0.3)
    np.testing.assert_allclose(sched.beta, np.linspace(0.1, 0.3, 5), rtol=0, atol=1e-15)


def test_schedule_validation():
    with pytest.raises(ConfigurationError):
        build_schedule(n_steps=0)
    with pytest.raises(ConfigurationError):
        build_schedule(beta_start=0.0)
    with pytest.raises(ConfigurationError):
        build_schedule(beta_start=0.3, beta_end=0.2)
    with pytest.raises(ConfigurationError):
        build_schedule(beta_end=1.0)


def test_schedule_digest_stable_and_sensitive():
    a = build_schedule(50, 1e-4, 0.02)
    b = build_schedule(50, 1e-4, 0.02)
    c = build_schedule(50, 1e-4, 0.021)
    assert a.digest() == b.digest()
    assert a.digest() != c.digest()
    assert len(a.digest()) == 16


def test_forward_noise_zero_noise_case():
    sched = build_schedule(10, 0.01, 0.1)
    a0 = np.arange(6.0).reshape(2, 3)
    for k in (1, 5, 10):
        out = forward_noise(sched, a0, k, np.zeros_like(a0))
        np.testing.assert_allclose(out, math.sqrt(sched.alpha_bar[k - 1]) * a0,
                                   rtol=0, atol=1e-15)


def test_forward_noise_unit_alpha_bar_identity():
    """At vanishing beta the forward process must stay close to a0."""
    sched = build_schedule(1, 1e-10, 2e-10)
    a0 = np.ones((2, 2))
    out = forward_noise(sched, a0, 1, np.zeros_like(a0))
    np.testing.assert_allclose(out, a0, rtol=0, atol=1e-9)


def test_forward_noise_monte_carlo_mean():
    """Empirical mean over 10^5 draws within 4 standard errors of sqrt(ab)*a0."""
    sched = build_schedule(20, 1e-3, 0.05)
    rng = np.random.default_rng(7)
    a0 = np.array([0.8, -0.4])
    k = 12
    n = 100_000
    draws = rng.standard_normal((n, 2))
    outs = forward_noise(sched, np.broadcast_to(a0, (n, 2)), k, draws)
    ab = sched.alpha_bar[k - 1]
    se = math.sqrt(1.0 - ab) / math.sqrt(n)
    for j in range(2):
        assert abs(outs[:, j].mean() - math.sqrt(ab) * a0[j]) < 4 * se


def test_forward_noise_validation():
    sched = build_schedule(10)
    a0 = np.zeros((2, 3))
    with pytest.raises(InputError):
        forward_noise(sched, a0, 0, np.zeros_like(a0))
    with pytest.raises(InputError):
        forward_noise(sched, a0, 11, np.zeros_like(a0))
    with pytest.raises(InputError):
        forward_noise(sched, a0, 3, np.zeros((1, 3)))


def test_action_loss_value_and_gradient():
    eps = np.array([[1.0, 2.0], [3.0, 4.0]])
    pred = np.array([[1.5, 2.0], [2.0, 4.0]])
    loss, grad = action_loss(eps, pred)
    # mean of squared differences: (0.25 + 0 + 1 + 0) / 4
    assert abs(loss - 0.3125) <= 1e-15
    np.testing.assert_allclose(grad, 2.0 * (pred - eps) / 4.0, rtol=0, atol=1e-15)


def test_reverse_step_hand_fed_values():
    """Feed a 2-step schedule explicit numbers and check the update formula."""
    sched = build_schedule(2, 0.1, 0.2)
    a_k = np.array([0.5, -1.0])
    eps = np.array([0.2, 0.1])
    z = np.array([1.0, -2.0])
    k = 2
    alpha = 1.0 - 0.2
    ab1 = 1.0 - 0.1
    ab2 = ab1 * alpha
    mean = (a_k - (1.0 - alpha) / math.sqrt(1.0 - ab2) * eps) / math.sqrt(alpha)
    sigma = math.sqrt(0.2 * (1.0 - ab1) / (1.0 - ab2))
    out = reverse_step(sched, DenoisingStep(k=2, a_k=a_k, epsilon_pred=eps, z=z))
    np.testing.assert_allclose(out, mean + sigma * z, rtol=1e-15, atol=1e-15)


def test_reverse_step_final_step_ignores_z():
    sched = build_schedule(3, 0.05, 0.1)
    a_1 = np.array([0.3, 0.7])
    eps = np.array([-0.2, 0.4])
    with_z = reverse_step(sched, DenoisingStep(k=1, a_k=a_1, epsilon_pred=eps,
                                               z=np.array([5.0, 5.0])))
    without = reverse_step(sched, DenoisingStep(k=1, a_k=a_1, epsilon_pred=eps))
    np.testing.assert_array_equal(with_z, without)


def test_forward_then_ideal_denoiser_recovers_a0():
    """The closed-form a0 estimate inverts forward_noise exactly."""
    sched = build_schedule(50)
    rng = np.random.default_rng(3)
    a0 = rng.normal(size=(4, 3))
    for k in (1, 17, 50):
        noise = rng.standard_normal(a0.shape)
        a_k = forward_noise(sched, a0, k, noise)
        ab = sched.alpha_bar[k - 1]
        est = (a_k - math.sqrt(1.0 - ab) * noise) / math.sqrt(ab)
        np.testing.assert_allclose(est, a0, rtol=0, atol=1e-10)


def test_sample_actions_zero_denoiser_composition_of_rescales():
    """With eps_hat = 0 every reverse step is a rescale by 1/sqrt(alpha_k)."""
    sched = build_schedule(8, 1e-3, 1e-2)
    shape = (2, 3)
    seed = 11
    out = sample_actions(sched, lambda a, k, c: np.zeros_like(a), None, shape, seed)
    # replicate: the initial a_K draw, then deterministic rescale + sigma*z
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    a = rng.standard_normal(shape)
    for k in range(8, 0, -1):
        a = a / math.sqrt(sched.alpha[k - 1])
        if k > 1:
            a = a + sched.sigma[k - 1] * rng.standard_normal(shape)
    np.testing.assert_allclose(out, a, rtol=0, atol=1e-12)


def test_sample_actions_deterministic_in_seed():
    sched = build_schedule(5)
    denoiser = lambda a, k, c: 0.1 * a
    one = sample_actions(sched, denoiser, None, (2, 2), 42)
    two = sample_actions(sched, denoiser, None, (2, 2), 42)
    other = sample_actions(sched, denoiser, None, (2, 2), 43)
    np.testing.assert_array_equal(one, two)
    assert not np.array_equal(one, other)


def test_sample_actions_single_step_schedule():
    """K = 1 runs exactly one reverse step and injects no noise."""
    sched = build_schedule(1, 0.04, 0.05)
    out = sample_actions(sched, lambda a, k, c: np.zeros_like(a), None, (3,), 5)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(5)))
    a_1 = rng.standard_normal((3,))
    np.testing.assert_allclose(out, a_1 / math.sqrt(sched.alpha[0]), rtol=0, atol=1e-15)


def test_sample_actions_rejects_non_finite_denoiser():
    sched = build_schedule(4)

    def broken(a, k, c):
        return np.full_like(a, np.nan)

    with pytest.raises(SamplingError) as err:
        sample_actions(sched, broken, None, (2,), 0)
    assert "k=4" in str(err.value)


def test_timestep_embedding_structure():
    emb = timestep_embedding(3, 8)
    assert emb.shape == (8,)
    # first half sines, second half cosines of the same angles
    np.testing.assert_allclose(emb[:4] ** 2 + emb[4:] ** 2, np.ones(4),
                               rtol=0, atol=1e-12)
    with pytest.raises(ConfigurationError):
        timestep_embedding(1, 7)
    with pytest.raises(InputError):
        timestep_embedding(0, 8)


def test_timestep_table_rows_match_single_calls():
    table = timestep_table(6, 10)
    assert table.shape == (6, 10)
    for k in range(1, 7):
        np.testing.assert_array_equal(table[k - 1], timestep_embedding(k, 10))
