import numpy as np
import pytest
import torch

import gradcases
from fped.prior import DiffusionPrior, DiffusionSchedule, dp_loss, noising, predict_x0, prior_clip_loss, sample_prior

F64 = torch.float64


def _cos(a, b):
    return float(torch.nn.functional.cosine_similarity(a, b).mean())


def test_schedule_properties():
    s = DiffusionSchedule()
    abar = s.alpha_bars
    assert abar.shape == (100,)
    assert bool((abar[1:] < abar[:-1]).all())
    assert float(abar[0].sqrt()) >= 0.99994
    assert float(abar[-1]) < 0.4
    assert bool(((s.betas > 0) & (s.betas < 1)).all())


def test_noising_endpoints():
    s = DiffusionSchedule()
    x0, eps = torch.randn(4, 3, dtype=F64), torch.randn(4, 3, dtype=F64)
    assert torch.allclose(noising(x0, 0, eps, s), x0, atol=0.02)
    x_t = noising(x0, 57, eps, s)
    assert torch.allclose(predict_x0(x_t, 57, eps, s), x0, atol=1e-12)


def test_noising_second_moment_monte_carlo():
    s = DiffusionSchedule()
    rng = np.random.default_rng(0)
    x0 = torch.full((200_000, 1), 1.5, dtype=F64)
    for t in (0, 30, 99):
        eps = torch.from_numpy(rng.standard_normal((200_000, 1)))
        abar = float(s.alpha_bars[t])
        expected = abar * 1.5 ** 2 + (1 - abar)
        got = float((noising(x0, t, eps, s) ** 2).mean())
        assert abs(got - expected) / expected < 0.02


@pytest.mark.parametrize("t", [-1, 100])
def test_timestep_range(t):
    with pytest.raises(ValueError):
        noising(torch.zeros(1, 2, dtype=F64), t, torch.zeros(1, 2, dtype=F64), DiffusionSchedule())


def test_dp_loss_examples():
    s = DiffusionSchedule()
    x0, b = torch.randn(5, 4, dtype=F64), torch.randn(5, 4, dtype=F64)
    rng = np.random.default_rng(0)
    t = torch.full((5,), 10)
    eps = torch.randn(5, 4, dtype=F64)
    assert float(dp_loss(lambda x, tt, bb: eps, x0, b, rng, s, t=t, eps=eps)) == 0.0
    assert float(dp_loss(lambda x, tt, bb: eps + 1.0, x0, b, rng, s, t=t, eps=eps)) == pytest.approx(1.0, abs=1e-12)


def test_dp_loss_of_zero_predictor_is_noise_variance():
    # predicting zero noise costs E[eps^2] = 1
    s = DiffusionSchedule()
    x0 = torch.randn(20_000, 8, dtype=F64)
    loss = float(dp_loss(lambda x, t, b: torch.zeros_like(x), x0, x0, np.random.default_rng(1), s))
    assert abs(loss - 1.0) < 0.05


def test_sampling_is_deterministic_given_rng():
    prior = DiffusionPrior(6, hidden=16, rng=np.random.default_rng(0))
    b = torch.randn(3, 6, dtype=F64)
    a = prior.sample(b, np.random.default_rng(4))
    assert torch.equal(a, prior.sample(b, np.random.default_rng(4)))
    assert not torch.equal(a, prior.sample(b, np.random.default_rng(5)))
    assert torch.isfinite(a).all()


def test_sampling_with_oracle_denoiser_recovers_point():
    # with the exact noise predictor for a single-point data set, sampling lands on that point
    s = DiffusionSchedule()
    target = torch.tensor([[0.5, -1.0, 2.0]], dtype=F64)
    abar = s.alpha_bars

    def oracle(x, t, b):
        a = abar[t.long()][:, None]
        return (x - a.sqrt() * target) / (1 - a).sqrt()

    out = sample_prior(oracle, target, np.random.default_rng(0), s)
    assert torch.allclose(out, target, atol=1e-8)


def test_memorises_a_single_pair():
    prior = DiffusionPrior(8, hidden=64, rng=np.random.default_rng(0))
    rng = np.random.default_rng(1)
    b, c = torch.from_numpy(rng.standard_normal((1, 8))), torch.from_numpy(rng.standard_normal((1, 8)))
    # repeating the pair gives each step many noise draws of the same target
    prior.fit(b.repeat(64, 1), c.repeat(64, 1), epochs=400, lr=3e-3, lambda_prior=0.0, rng=np.random.default_rng(2))
    assert _cos(prior.sample(b, np.random.default_rng(3)), c) > 0.9


def test_prior_clip_examples():
    c = torch.eye(2, 4, dtype=F64)
    assert float(prior_clip_loss(c, c, 1.0, 1.0)) == pytest.approx(0.58220, abs=1e-5)
    assert float(prior_clip_loss(c, c, 0.0)) == 0.0
    assert float(prior_clip_loss(c, c, 2.0, 1.0)) == pytest.approx(2 * 0.58220, abs=2e-5)


@pytest.mark.parametrize("case", ["prior.dp_loss_params", "prior.prior_clip"])
def test_prior_gradients(case):
    assert gradcases.run_case(case, 10) < 1e-4
