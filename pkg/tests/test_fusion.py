import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from upsam import attnet, fusion, protocol
from upsam.attnet import NetworkConfig, TrainedModel
from upsam.fusion import FusionConfig, GainTable

import oracles

seeds = st.integers(0, 2**31 - 1)


def _model(seed=0, L=4, c=5):
    rng = np.random.default_rng(seed)
    cfg = NetworkConfig(bands=L, pieces1=8, pieces2=c)
    p = attnet.init_params(cfg, rng)
    p = {k: v + 0.3 * rng.standard_normal(v.shape) for k, v in p.items()}
    return TrainedModel(cfg, p, [])


@settings(max_examples=30, deadline=None)
@given(seeds, st.integers(1, 6))
def test_regression_recovers_planted_weights(seed, L):
    rng = np.random.default_rng(seed)
    msi = rng.uniform(size=(L, 9, 9))
    alpha = rng.uniform(-1, 1, L)
    pan = np.tensordot(alpha, msi, axes=1) + 0.25
    c = fusion.fit_pan_regression(msi, pan)
    assert np.allclose(c.alpha, alpha, atol=1e-8)
    assert c.intercept == pytest.approx(0.25, abs=1e-8)


def test_regression_rejects_constant_bands():
    with pytest.raises(fusion.DegenerateError):
        fusion.fit_pan_regression(np.ones((2, 4, 4)), np.ones((4, 4)))


def test_synth_low_pan_and_detail():
    c = fusion.RegressionCoeffs(np.array([1.0, 2.0]), 0.5)
    up = np.ones((2, 3, 3))
    p = fusion.synth_low_pan(c, up)
    assert np.allclose(p, 3.5)
    assert np.allclose(fusion.extract_detail(np.full((1, 3, 3), 4.0), p), 0.5)
    with pytest.raises(ValueError):
        fusion.extract_detail(np.ones((3, 3)), np.ones((3, 4)))


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(2, 40))
def test_projective_gain_matches_loop(seed, n):
    x, y = np.random.default_rng(seed).normal(size=(2, n))
    assert fusion.projective_gain(x, y) == pytest.approx(oracles.cov_loop(x, y), rel=1e-10, abs=1e-12)


def test_projective_gain_zero_variance():
    with pytest.raises(fusion.DegenerateError):
        fusion.projective_gain(np.arange(3.0), np.ones(3))


def test_msim_tie_break_and_scale_invariance():
    s = np.array([[[0.5, 0.2]], [[0.5, 0.8]]])
    assert fusion.compute_msim(s).tolist() == [[0, 1]]
    rng = np.random.default_rng(0)
    stack = rng.dirichlet(np.ones(4), size=(6, 6)).transpose(2, 0, 1)
    assert np.array_equal(fusion.compute_msim(stack), fusion.compute_msim(3.7 * stack))


@settings(max_examples=30, deadline=None)
@given(seeds, st.integers(0, 3))
def test_constant_msim_reduces_to_global(seed, region):
    rng = np.random.default_rng(seed)
    stack = rng.uniform(size=(4, 10, 10))
    p = rng.uniform(size=(10, 10))
    msim = np.full((10, 10), region)
    g = fusion.global_gains(stack, p)
    v = fusion.variant_gains(stack, p, msim, n_regions=4)
    assert np.allclose(v.gains[:, region], g.gains, atol=1e-10)
    assert np.allclose(v.gain_map(msim), g.gain_map(), atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(seeds, st.floats(-3, 3), st.floats(-1, 1))
def test_planted_affine_gain_recovered(seed, a, b):
    rng = np.random.default_rng(seed)
    p = rng.uniform(size=(8, 8))
    msim = (rng.uniform(size=(8, 8)) > 0.5).astype(int)
    stack = rng.uniform(size=(2, 8, 8))
    stack[1][msim == 1] = a * p[msim == 1] + b
    v = fusion.variant_gains(stack, p, msim)
    if 1 not in v.degenerate:
        assert v.gains[1, 1] == pytest.approx(a, abs=1e-8)


def test_degenerate_regions_get_zero_gain():
    rng = np.random.default_rng(0)
    stack = rng.uniform(size=(3, 6, 6))
    p = rng.uniform(size=(6, 6))
    msim = np.zeros((6, 6), dtype=int)
    msim[0, :3] = 1  # three pixels only
    msim[5, :] = 2
    p[5, :] = 0.3  # flat synthetic PAN in region 2
    v = fusion.variant_gains(stack, p, msim, n_regions=3)
    assert v.degenerate == [1, 2]
    assert np.all(v.gains[:, 1:] == 0)
    with pytest.raises(KeyError):
        v.gain_map(np.full((6, 6), 3))


def test_zero_detail_and_zero_gain_fixpoints():
    model = _model()
    rng = np.random.default_rng(1)
    stack = rng.dirichlet(np.ones(5), size=(6, 6)).transpose(2, 0, 1)
    base = attnet.decode_image(model, stack)
    gains = GainTable("global", rng.normal(size=5))
    assert np.array_equal(fusion.inject_and_reconstruct(model, stack, gains, np.zeros((6, 6))), base)
    zero = GainTable("global", np.zeros(5))
    assert np.array_equal(fusion.inject_and_reconstruct(model, stack, zero, rng.normal(size=(6, 6))), base)


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_injection_is_linear_in_detail(seed):
    model = _model(seed % 7)
    rng = np.random.default_rng(seed)
    stack = rng.dirichlet(np.ones(5), size=(6, 6)).transpose(2, 0, 1)
    msim = fusion.compute_msim(stack)
    gains = GainTable("msim", rng.normal(size=(5, 5)))
    d = rng.normal(size=(6, 6))
    base = attnet.decode_image(model, stack)
    one = fusion.inject_and_reconstruct(model, stack, gains, d, msim) - base
    two = fusion.inject_and_reconstruct(model, stack, gains, 2 * d, msim) - base
    assert np.allclose(two, 2 * one, atol=1e-10)


@settings(max_examples=15, deadline=None)
@given(seeds, st.sampled_from(["msim", "global"]))
def test_maps_and_bands_domains_coincide(seed, injection):
    # decoder and bicubic resampling are both linear, so injecting on the maps
    # and decoding equals injecting on the decoded bands with projected gains
    model = _model(seed % 5)
    rng = np.random.default_rng(seed)
    stack = rng.dirichlet(np.ones(5), size=(6, 6)).transpose(2, 0, 1)
    up = protocol.upsample(stack, 2)
    bands_up = protocol.upsample(attnet.decode_image(model, stack), 2)
    p = rng.uniform(size=(12, 12))
    d = rng.normal(size=(12, 12))
    msim = fusion.compute_msim(up)
    if injection == "global":
        gm, gb = fusion.global_gains(up, p), fusion.global_gains(bands_up, p)
    else:
        gm = fusion.variant_gains(up, p, msim, n_regions=5, min_pixels=2)
        gb = fusion.variant_gains(bands_up, p, msim, n_regions=5, min_pixels=2)
    x_maps = fusion.inject_and_reconstruct(model, up, gm, d, msim)
    x_bands = fusion.inject_bands(bands_up, gb, d, msim)
    assert np.allclose(x_maps, x_bands, atol=1e-10)


def _tiny_pair(seed=0):
    from upsam.synth import gen_synthetic_pair

    return gen_synthetic_pair(size=32, r=4, seed=seed)


def _fast_cfg(**kw):
    net = NetworkConfig(bands=4, pieces1=8, pieces2=4, iterations=40, batch_size=32)
    return FusionConfig(network=net, **kw)


def test_pansharpen_shapes_and_report():
    pair = _tiny_pair()
    res = fusion.pansharpen(pair.msi, pair.pan, 4, _fast_cfg())
    assert res.fused.shape == (4, 32, 32)
    assert np.all(np.isfinite(res.fused))
    rep = res.report()
    assert rep["schema"] == 1
    assert "timings_s" not in rep
    assert set(res.report(include_timings=True)["timings_s"]) == {
        "attention", "pan_synthesis", "detail", "gains", "reconstruction"}
    assert sum(rep["msim_counts"]) == 32 * 32
    json.dumps(rep)


def test_pansharpen_is_deterministic():
    pair = _tiny_pair(1)
    a = fusion.pansharpen(pair.msi, pair.pan, 4, _fast_cfg(seed=5))
    b = fusion.pansharpen(pair.msi, pair.pan, 4, _fast_cfg(seed=5))
    assert np.array_equal(a.fused, b.fused)
    assert a.report() == b.report()


def test_pansharpen_with_given_model_skips_training():
    pair = _tiny_pair()
    first = fusion.pansharpen(pair.msi, pair.pan, 4, _fast_cfg())
    again = fusion.pansharpen(pair.msi, pair.pan, 4, _fast_cfg(injection="global"), model=first.model)
    assert again.model is first.model
    assert again.gains.mode == "global"


def test_stage_errors_carry_step():
    pair = _tiny_pair()
    with pytest.raises(fusion.StageError) as info:
        fusion.pansharpen(np.ones((4, 8, 8)), pair.pan, 4, _fast_cfg())
    assert info.value.step == 2
    with pytest.raises(ValueError):
        fusion.pansharpen(pair.msi, pair.pan[:, :16], 4, _fast_cfg())
    with pytest.raises(fusion.StageError) as info:
        bad = NetworkConfig(bands=4, pieces1=8, pieces2=4, iterations=5, learning_rate=float("inf"))
        fusion.pansharpen(pair.msi, pair.pan, 4, FusionConfig(network=bad))
    assert info.value.step == 1


def test_fusion_config_validation():
    with pytest.raises(ValueError):
        FusionConfig(injection="local")
    with pytest.raises(ValueError):
        FusionConfig(domain="pixels")
    cfg = FusionConfig(seed=3)
    assert cfg.network_for(6).bands == 6 and cfg.network_for(6).seed == 3


@settings(max_examples=20, deadline=None)
@given(seeds, st.integers(1, 5))
def test_regression_residual_orthogonal_to_regressors(seed, L):
    rng = np.random.default_rng(seed)
    msi = rng.uniform(size=(L, 10, 10))
    pan = rng.uniform(size=(10, 10))
    c = fusion.fit_pan_regression(msi, pan)
    res = pan - np.tensordot(c.alpha, msi, axes=1) - c.intercept
    assert abs(res.sum()) < 1e-8
    for band in msi:
        assert abs(np.sum(res * band)) < 1e-8


def test_detail_hand_case():
    d = fusion.extract_detail(np.eye(2)[None], np.full((2, 2), 0.5))
    assert d.tolist() == [[0.5, -0.5], [-0.5, 0.5]]


def test_two_region_gains_match_brute_force():
    rng = np.random.default_rng(3)
    stack = rng.uniform(size=(3, 8, 8))
    p = rng.uniform(size=(8, 8))
    msim = np.zeros((8, 8), dtype=int)
    msim[:, 5:] = 1
    v = fusion.variant_gains(stack, p, msim, n_regions=2)
    for region in (0, 1):
        m = msim == region
        for j in range(3):
            assert v.gains[j, region] == pytest.approx(oracles.cov_loop(stack[j][m], p[m]), abs=1e-10)


def test_noiseless_fusion_beats_upsampling():
    from upsam.synth import gen_synthetic_pair
    from upsam.metrics import psnr

    pair = gen_synthetic_pair(size=64, r=4, seed=1)
    res = fusion.pansharpen(pair.msi, pair.pan, 4, FusionConfig())
    assert psnr(pair.hr_ref, res.fused) > psnr(pair.hr_ref, protocol.upsample(pair.msi, 4))
