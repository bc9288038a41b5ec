import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from upsam import attnet
from upsam.attnet import NetworkConfig, TrainedModel

import oracles

seeds = st.integers(0, 2**31 - 1)


def _perturbed(cfg, rng, scale=0.3):
    p = attnet.init_params(cfg, rng)
    return {k: v + scale * rng.standard_normal(v.shape) for k, v in p.items()}


def test_dense_forward_values():
    W = np.array([[1.0, -2.0], [0.5, 1.0]])
    out = attnet.dense_forward(W, np.array([0.0, 1.0]), np.array([2.0, 2.0]), "leaky_relu")
    assert out == pytest.approx([3.0, 0.01 * -1.0])
    assert attnet.dense_forward(W, None, np.array([1.0, 0.0])) == pytest.approx([1.0, -2.0])
    with pytest.raises(ValueError):
        attnet.dense_forward(W, None, np.ones(3))


def test_stick_break_examples():
    s = attnet.stick_break(np.array([0.5, 0.5, 0.5]), 1.0)
    assert s == pytest.approx([0.5, 0.25, 0.25])
    # beta changes the break: v = 1 - (1 - u)^(1/beta)
    s = attnet.stick_break(np.array([0.75, 0.3]), 2.0)
    assert s == pytest.approx([0.5, 0.5])
    with pytest.raises(ValueError):
        attnet.stick_break(np.array([0.0, 0.5]), 1.0)
    with pytest.raises(ValueError):
        attnet.stick_break(np.array([0.2, 0.5]), 0.0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(1e-6, 1 - 1e-6), min_size=2, max_size=20), st.floats(1e-3, 1e3))
def test_stick_break_on_simplex(u, beta):
    s = attnet.stick_break(np.array(u), beta)
    assert np.all(s >= 0)
    assert s.sum() == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(seeds, st.integers(2, 12))
def test_entropy_bounds(seed, c):
    s = np.random.default_rng(seed).dirichlet(np.ones(c) * 0.3)
    h = attnet.entropy(s, eps=0.0)
    assert -1e-12 <= h <= math.log(c) + 1e-9


def test_entropy_extremes():
    assert attnet.entropy(np.array([1.0, 0.0, 0.0]), eps=0.0) == pytest.approx(0.0, abs=1e-12)
    assert attnet.entropy(np.full(4, 0.25)) == pytest.approx(math.log(4))


@settings(max_examples=20, deadline=None)
@given(seeds, st.integers(2, 6), st.integers(2, 5))
def test_encode_matches_primitive_loop(seed, L, c):
    rng = np.random.default_rng(seed)
    cfg = NetworkConfig(bands=L, pieces1=6, pieces2=c)
    params = _perturbed(cfg, rng)
    x = rng.uniform(0, 1, (5, L))
    batch = attnet.encode(params, x, cfg)
    for i in range(5):
        one = oracles.network_loop(params, x[i], cfg, attnet.dense_forward, attnet.stick_break, attnet.BETA_FLOOR)
        assert np.allclose(batch[i], one, atol=1e-12)
        assert np.allclose(attnet.decode(params, batch[i]), oracles.decode_loop(params, batch[i]), atol=1e-12)


def test_image_helpers_match_loop():
    rng = np.random.default_rng(4)
    cfg = NetworkConfig(bands=3, pieces1=5, pieces2=3)
    model = TrainedModel(cfg, _perturbed(cfg, rng), [])
    img = rng.uniform(size=(3, 4, 5))
    S = attnet.encode_image(model, img)
    assert S.shape == (3, 4, 5)
    for i in range(4):
        for j in range(5):
            assert np.allclose(S[:, i, j], attnet.encode(model.params, img[:, i, j], cfg), atol=1e-12)
    X = attnet.decode_image(model, S)
    assert X.shape == img.shape
    assert np.allclose(X[:, 2, 3], attnet.decode(model.params, S[:, 2, 3]), atol=1e-12)
    with pytest.raises(ValueError):
        attnet.encode_image(model, img[:2])
    with pytest.raises(ValueError):
        attnet.decode_image(model, S[:2])


@settings(max_examples=30, deadline=None)
@given(seeds, st.floats(-3, 3), st.floats(-3, 3))
def test_decoder_is_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    cfg = NetworkConfig(bands=4, pieces1=6, pieces2=5)
    p = attnet.init_params(cfg, rng)
    s1, s2 = rng.uniform(size=(2, 5))
    lhs = attnet.decode(p, a * s1 + b * s2)
    rhs = a * attnet.decode(p, s1) + b * attnet.decode(p, s2)
    assert np.allclose(lhs, rhs, atol=1e-10)


@pytest.mark.parametrize("lam", [0.0, 0.3])
def test_gradients_match_finite_differences(lam):
    rng = np.random.default_rng(11)
    cfg = NetworkConfig(bands=4, pieces1=6, pieces2=4, lam=lam)
    params = _perturbed(cfg, rng)
    x = rng.uniform(0, 1, (3, 4))
    grads = attnet.gradients(params, x, cfg)
    assert list(grads) == list(attnet.param_shapes(cfg))
    worst = oracles.finite_difference_check(lambda p: attnet.loss(p, x, cfg)[0].mean(), params, grads, rng)
    assert worst < 1e-4


def test_gradients_with_separate_target():
    rng = np.random.default_rng(12)
    cfg = NetworkConfig(bands=3, pieces1=5, pieces2=3, lam=0.05)
    params = _perturbed(cfg, rng)
    inp = rng.normal(size=(4, 3))
    tgt = rng.uniform(size=(4, 3))
    *_, grads = attnet.loss_and_grads(params, inp, cfg, target=tgt)

    def f(p):
        s = attnet.encode(p, inp, cfg)
        r = np.sqrt(np.sum((attnet.decode(p, s) - tgt) ** 2, axis=1) + attnet.RECON_GUARD)
        return np.mean(r + cfg.lam * attnet.entropy(s, cfg.eps))

    assert oracles.finite_difference_check(f, params, grads, rng, n_coords=8) < 1e-4


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_folding_standardization_preserves_outputs(seed):
    rng = np.random.default_rng(seed)
    cfg = NetworkConfig(bands=5, pieces1=6, pieces2=4)
    params = _perturbed(cfg, rng)
    x = rng.uniform(0, 1, (10, 5))
    mean = rng.uniform(0, 1, 5)
    scale = rng.uniform(0.1, 2, 5)
    folded = attnet.fold_standardization(params, cfg, mean, scale)
    assert np.allclose(attnet.encode(folded, x, cfg), attnet.encode(params, (x - mean) / scale, cfg), atol=1e-10)


def test_param_layout():
    cfg = NetworkConfig(bands=8)
    shapes = attnet.param_shapes(cfg)
    assert shapes["dense1.2.W"] == (8 + 3 + 3, 3)
    assert shapes["u1.W"] == (17, 20)
    assert shapes["dense2.0.W"] == (20, 3)
    assert shapes["u2.W"] == (29, 10)
    assert shapes["decoder.0.W"] == (10, 10)
    assert shapes["decoder.1.W"] == (10, 8)
    assert not any(k.startswith("decoder") and k.endswith(".b") for k in shapes)


@pytest.mark.parametrize("kwargs", [{"pieces2": 21}, {"pieces2": 1}, {"lam": -1.0}, {"bands": 0},
                                    {"batch_size": 0}])
def test_config_validation(kwargs):
    base = {"bands": 4}
    base.update(kwargs)
    with pytest.raises(ValueError):
        NetworkConfig(**base)


def _small_cfg(**kw):
    d = dict(bands=8, pieces1=6, pieces2=4, iterations=60, batch_size=64, log_every=20)
    d.update(kw)
    return NetworkConfig(**d)


def test_training_is_deterministic_and_logs():
    img = np.random.default_rng(0).uniform(size=(8, 16, 16))
    a = attnet.train(img, _small_cfg(seed=3))
    b = attnet.train(img, _small_cfg(seed=3))
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])
    assert a.history == b.history
    assert [h["iteration"] for h in a.history] == [0, 20, 40, 59]
    assert all(math.isfinite(v) for h in a.history for v in h.values())
    c = attnet.train(img, _small_cfg(seed=4))
    assert not np.array_equal(a.params["u1.W"], c.params["u1.W"])


def test_training_reduces_loss():
    img = np.random.default_rng(1).uniform(size=(8, 16, 16))
    m = attnet.train(img, _small_cfg(iterations=400))
    assert m.history[-1]["recon"] < m.history[0]["recon"]


def test_train_rejects_band_mismatch():
    with pytest.raises(ValueError):
        attnet.train(np.zeros((3, 4, 4)), _small_cfg())


def test_model_round_trip(tmp_path):
    img = np.random.default_rng(2).uniform(size=(8, 8, 8))
    m = attnet.train(img, _small_cfg(iterations=20))
    m.save(tmp_path / "model")
    back = TrainedModel.load(tmp_path / "model")
    assert back.config == m.config
    assert back.history == m.history
    for k in m.params:
        assert np.array_equal(back.params[k], m.params[k].astype(np.float32))
    raw = (tmp_path / "model.f32").read_bytes()
    assert len(raw) == 4 * sum(v.size for v in m.params.values())


def test_sparsity_pressure_lowers_entropy():
    from upsam.synth import gen_toy

    toy = gen_toy(1)
    x = attnet.image_pixels(toy.msi)
    mean_h = []
    for lam in (0.0, 0.1):
        m = attnet.train(toy.msi, NetworkConfig(bands=8, pieces2=4, lam=lam, iterations=1000))
        mean_h.append(attnet.entropy(attnet.encode(m.params, x, m.config)).mean())
    assert mean_h[1] <= mean_h[0]


def test_entropy_hand_value():
    assert attnet.entropy(np.array([0.5, 0.25, 0.25])) == pytest.approx(1.0397, abs=1e-3)


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_encoder_is_continuous(seed):
    rng = np.random.default_rng(seed)
    cfg = NetworkConfig(bands=4, pieces1=8, pieces2=4)
    params = _perturbed(cfg, rng)
    x = rng.uniform(size=4)
    dx = 1e-8 * rng.normal(size=4)
    assert np.max(np.abs(attnet.encode(params, x + dx, cfg) - attnet.encode(params, x, cfg))) < 1e-4


def test_noiseless_toy_is_reconstructed():
    from upsam.synth import gen_toy

    toy = gen_toy(0, snr_db=float("inf"))
    m = attnet.train(toy.msi, NetworkConfig(bands=8, pieces2=4))
    X = attnet.decode_image(m, attnet.encode_image(m, toy.msi))
    rmse = np.sqrt(np.mean((X - toy.msi) ** 2, axis=0))
    assert rmse.max() < 0.02
