import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import gradcases
from fped.checkpoint import CheckpointError
from fped.numerics import ShapeError
from fped.stroute import (IMAGE_SIZE, SpatialRouter, Stage2Config, Stage2Model, TemporalGate, fit_stage2,
                          generate_image, load_stage2, patchify, read_pgm, render_target_image, save_stage2,
                          spatial_attend, temporal_gate, unpatchify, write_pgm)

F64 = torch.float64


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 99))
def test_gate_is_on_the_simplex(t):
    with torch.no_grad():
        g_c, g_f = temporal_gate(t, 100)
    assert float(g_c) >= 0 and float(g_f) >= 0
    assert abs(float(g_c + g_f) - 1.0) < 1e-12


def test_gate_prefers_coarse_early_in_denoising():
    gate = TemporalGate(100)
    g = gate(torch.arange(100))
    assert float(g[99, 0]) > 0.9 > float(g[0, 0])
    assert float(g[0, 1]) > 0.9
    assert bool((g[1:, 0] >= g[:-1, 0] - 1e-3).all())


def test_gate_errors():
    with pytest.raises(ValueError):
        temporal_gate(100, 100)
    with pytest.raises(ValueError):
        temporal_gate(-1, 100)
    with pytest.raises(ValueError):
        temporal_gate(3, 50, TemporalGate(100))
    with pytest.raises(ValueError):
        TemporalGate(0)


def test_single_brain_token_gets_full_attention():
    router = SpatialRouter(4, 3, rng=np.random.default_rng(0))
    z, brain = torch.randn(2, 5, 4, dtype=F64), torch.randn(2, 1, 3, dtype=F64)
    out, attn = spatial_attend(z, brain, router)
    assert torch.equal(attn, torch.ones(2, 5, 1, dtype=F64))
    assert torch.allclose(out, (brain @ router.w_v).expand(2, 5, 4))


def test_identical_brain_tokens_give_uniform_attention():
    router = SpatialRouter(4, 3, rng=np.random.default_rng(0))
    brain = torch.randn(1, 1, 3, dtype=F64).expand(1, 6, 3)
    _, attn = spatial_attend(torch.randn(1, 2, 4, dtype=F64), brain, router)
    assert torch.allclose(attn, torch.full((1, 2, 6), 1 / 6, dtype=F64))


def test_attention_rows_are_distributions():
    router = SpatialRouter(4, 3, rng=np.random.default_rng(1))
    _, attn = router(torch.randn(3, 7, 4, dtype=F64) * 5, torch.randn(3, 9, 3, dtype=F64) * 5)
    assert torch.allclose(attn.sum(-1), torch.ones(3, 7, dtype=F64), atol=1e-12)
    assert bool((attn >= 0).all())


def test_attention_shape_errors():
    router = SpatialRouter(4, 3)
    with pytest.raises(ShapeError):
        spatial_attend(torch.zeros(1, 2, 5, dtype=F64), torch.zeros(1, 2, 3, dtype=F64), router)
    with pytest.raises(ShapeError):
        spatial_attend(torch.zeros(1, 2, 4, dtype=F64), torch.zeros(2, 2, 3, dtype=F64), router)


def test_patchify_round_trip():
    images = torch.randn(3, IMAGE_SIZE, IMAGE_SIZE, dtype=F64)
    tokens = patchify(images)
    assert tokens.shape == (3, 16, 16)
    assert torch.equal(tokens[0, 0], images[0, :4, :4].reshape(-1))
    assert torch.equal(unpatchify(tokens), images)


def test_render_is_deterministic_and_bounded():
    c = np.random.default_rng(0).standard_normal((4, 8))
    a = render_target_image(c, seed=1)
    assert a.shape == (4, 16, 16) and a.min() > 0 and a.max() < 1
    assert np.array_equal(a, render_target_image(c, seed=1))
    assert render_target_image(c[0]).shape == (16, 16)


def test_pgm_round_trip(tmp_path):
    image = np.linspace(0, 1, 16 * 12).reshape(12, 16)
    write_pgm(tmp_path / "a.pgm", image)
    back = read_pgm(tmp_path / "a.pgm")
    assert back.shape == (12, 16) and back[0, 0] == 0 and back[-1, -1] == 255
    assert np.abs(back / 255.0 - image).max() <= 0.5 / 255 + 1e-12
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n16 12\n255\n")
    with pytest.raises(ShapeError):
        write_pgm(tmp_path / "b.pgm", np.zeros(3))


def _pairs(n=8, seed=0):
    rng = np.random.default_rng(seed)
    coarse, fine = rng.standard_normal((n, 8, 32)), rng.standard_normal((n, 8, 32))
    images = render_target_image(rng.standard_normal((n, 16)))
    return coarse, fine, images


def test_generation_is_deterministic_and_in_range():
    model = Stage2Model(Stage2Config(hidden=16, diffusion_steps=20))
    coarse, fine, _ = _pairs(2)
    a = generate_image(model, coarse, fine, seed=3)
    assert a.shape == (2, 16, 16) and a.min() >= 0 and a.max() <= 1
    assert np.array_equal(a, generate_image(model, coarse, fine, seed=3))
    assert generate_image(model, coarse[0], fine[0]).shape == (16, 16)


def test_training_lowers_the_loss():
    model = Stage2Model(Stage2Config(hidden=32))
    history = fit_stage2(model, *_pairs(8), epochs=40)
    assert len(history) == 41
    assert history[-1] < 0.75 * history[0]


def test_checkpoint_round_trip(tmp_path):
    model = Stage2Model(Stage2Config(hidden=16, seed=4))
    save_stage2(tmp_path / "s.ckpt", model)
    back = load_stage2(tmp_path / "s.ckpt")
    assert back.config == model.config
    for k, v in model.state_dict().items():
        assert torch.equal(v, back.state_dict()[k])


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError):
        load_stage2(tmp_path / "missing.ckpt")
    (tmp_path / "bad.ckpt").write_bytes(b"garbage")
    with pytest.raises(CheckpointError):
        load_stage2(tmp_path / "bad.ckpt")


@pytest.mark.parametrize("case", ["stroute.temporal_gate", "stroute.spatial_inputs", "stroute.spatial_params"])
def test_stage2_gradients(case):
    assert gradcases.run_case(case, 10) < 1e-4
