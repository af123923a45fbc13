import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mvar.errors import InvalidArgument, InvalidConfig, NumericFailure
from mvar.model import MVAR, ModelConfig
from mvar.quantizer import Codebook, decode_pyramid, fit_codebook
from mvar.sampler import (
    SamplerConfig,
    cfg_combine,
    filter_top_k_top_p,
    generate,
    generate_with_cache,
    read_ppm,
    sample_token_map,
    write_generation,
    write_ppm,
)


def toy(variant="markov", schedule=((1, 1), (2, 2), (4, 4), (8, 8)), seed=0):
    torch.manual_seed(seed)
    cfg = ModelConfig(depth=2, embed_dim=16, head_count=2, vocab_size=12, class_count=4, schedule=[list(s) for s in schedule], variant=variant)
    codebook = fit_codebook(np.random.default_rng(seed).random((300, 3)), 12, seed=seed, iters=5)
    return MVAR(cfg).eval(), codebook


# -- guidance and filtering --------------------------------------------------


def test_cfg_combine_examples():
    cond, uncond = torch.tensor([2.0, 0.0]), torch.tensor([0.0, 0.0])
    assert torch.equal(cfg_combine(cond, uncond, 1.0), cond)
    assert torch.equal(cfg_combine(cond, uncond, 0.0), uncond)
    torch.testing.assert_close(cfg_combine(cond, uncond, 2.7), torch.tensor([5.4, 0.0]))
    c, u = torch.randn(3, 5), torch.randn(3, 5)
    assert torch.equal(cfg_combine(c, u, 1.0), c) and torch.equal(cfg_combine(c, u, 0.0), u)
    with pytest.raises(InvalidArgument):
        cfg_combine(torch.zeros(2), torch.zeros(3), 1.0)


def test_top_k_one_is_argmax():
    p = filter_top_k_top_p(np.array([0.1, 3.0, -1.0, 3.0]), 1, 1.0)
    assert p.tolist() == [0.0, 1.0, 0.0, 0.0]


def test_identity_filter_is_softmax():
    logits = np.array([0.3, -1.2, 2.0, 0.0])
    e = np.exp(logits - logits.max())
    np.testing.assert_allclose(filter_top_k_top_p(logits, 4, 1.0), e / e.sum(), atol=1e-15)


def test_top_p_prefix_arithmetic():
    p = filter_top_k_top_p(np.log([0.5, 0.3, 0.2]), 0, 0.7)
    np.testing.assert_allclose(p, [0.5 / 0.8, 0.3 / 0.8, 0.0], atol=1e-12)


def test_empty_mass_is_a_numeric_failure():
    with pytest.raises(NumericFailure):
        filter_top_k_top_p(np.full(3, -np.inf), 2, 0.9)


@settings(max_examples=80, deadline=None)
@given(
    arrays(np.float64, st.integers(1, 12), elements=st.floats(-30, 30)),
    st.integers(0, 12),
    st.floats(0.01, 1.0),
)
def test_filter_normalises_and_respects_top_k(logits, top_k, top_p):
    top_k = min(top_k, logits.size)
    p = filter_top_k_top_p(logits, top_k, top_p)
    assert abs(p.sum() - 1.0) <= 1e-9
    assert (p > 0).sum() <= (top_k or logits.size)
    assert p.min() >= 0


# -- sampling ----------------------------------------------------------------


def test_one_hot_distributions_ignore_seed():
    logits = np.full((3, 3, 5), -50.0)
    want = np.arange(9).reshape(3, 3) % 5
    np.put_along_axis(logits, want[..., None], 50.0, axis=-1)
    for seed in range(5):
        cfg = SamplerConfig(top_k=0, top_p=1.0, seed=seed)
        assert np.array_equal(sample_token_map(logits, cfg), want)


def test_same_seed_same_map():
    logits = np.random.default_rng(0).normal(size=(4, 4, 6))
    cfg = SamplerConfig(seed=3, top_p=1.0)
    assert np.array_equal(sample_token_map(logits, cfg, 2), sample_token_map(logits, cfg, 2))


def test_two_code_uniform_frequency_within_three_sigma():
    n = 10_000
    draws = sample_token_map(np.zeros((n, 2)), SamplerConfig(top_p=1.0, seed=11))
    assert abs(draws.mean() - 0.5) <= 3 * math.sqrt(0.25 / n)


def test_sampler_config_validation():
    with pytest.raises(InvalidConfig):
        SamplerConfig(top_p=0.0)
    with pytest.raises(InvalidConfig):
        SamplerConfig(guidance=-1.0)
    with pytest.raises(InvalidConfig):
        SamplerConfig(top_k=13).validate(12)


# -- generation --------------------------------------------------------------


def test_single_scale_schedule():
    model, cb = toy(schedule=((4, 4),))
    out = generate(model, cb, SamplerConfig(seed=0))
    assert len(out.pyramid) == 1 and out.pyramid.maps[0].shape == (4, 4)
    assert len(out.trace.stages) == 1


def test_generation_is_deterministic_and_shaped():
    model, cb = toy()
    a = generate(model, cb, SamplerConfig(seed=5, guidance=0.0))
    b = generate(model, cb, SamplerConfig(seed=5, guidance=0.0))
    assert all(np.array_equal(x, y) for x, y in zip(a.pyramid.maps, b.pyramid.maps))
    assert a.pyramid.shapes() == [(1, 1), (2, 2), (4, 4), (8, 8)]
    assert a.image.shape == (8, 8, 3)


def test_intermediates_use_first_l_maps():
    model, cb = toy()
    out = generate(model, cb, SamplerConfig(seed=1), intermediates=True)
    for l, img in enumerate(out.intermediates, start=1):
        np.testing.assert_array_equal(img, decode_pyramid(out.pyramid, cb, model.cfg.scales, upto=l))
    np.testing.assert_array_equal(out.intermediates[-1], out.image)


@pytest.mark.parametrize("seed", range(5))
def test_stateless_matches_cached_reference(seed):
    model, cb = toy(seed=seed)
    cfg = SamplerConfig(seed=seed, class_label=seed % 4)
    a, b = generate(model, cb, cfg), generate_with_cache(model, cb, cfg)
    assert all(np.array_equal(x, y) for x, y in zip(a.pyramid.maps, b.pyramid.maps))
    assert a.trace.retained_bytes == 0
    assert b.trace.retained_bytes > 0


def test_full_causal_cache_holds_keys_and_values():
    # depth 1 so the count is one block's keys plus values for the single start token
    torch.manual_seed(0)
    cfg = ModelConfig(depth=1, embed_dim=8, head_count=2, vocab_size=6, class_count=2, schedule=[[1, 1], [2, 2]], variant="full-causal")
    cb = Codebook(np.random.default_rng(0).random((6, 3)))
    out = generate(MVAR(cfg), cb, SamplerConfig(seed=0))
    assert out.trace.stages[0].retained_reals == 2 * 1 * 8
    assert out.trace.retained_bytes == 2 * 1 * 8 * 4


def test_codebook_mismatch_is_a_config_error():
    model, _ = toy()
    with pytest.raises(InvalidConfig):
        generate(model, Codebook(np.zeros((5, 3))), SamplerConfig())


# -- pixmaps -----------------------------------------------------------------


def test_ppm_round_trip_and_clamping(tmp_path):
    img = np.array([[[0.0, 0.5, 1.0], [-0.3, 1.7, 0.25]]])
    write_ppm(tmp_path / "a.ppm", img)
    raw = (tmp_path / "a.ppm").read_bytes()
    assert raw.startswith(b"P6\n2 1\n255\n")
    assert read_ppm(tmp_path / "a.ppm").tolist() == [[[0, 128, 255], [0, 255, 64]]]


def test_write_generation_names_stage_files(tmp_path):
    model, cb = toy()
    out = generate(model, cb, SamplerConfig(seed=0), intermediates=True)
    paths = write_generation(out, tmp_path, stem="s")
    assert [p.name for p in paths] == ["s.ppm"] + [f"s_stage{l}.ppm" for l in range(1, 5)]
