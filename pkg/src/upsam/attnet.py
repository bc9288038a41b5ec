"""Stacked stick-breaking self-attention autoencoder.

Every pixel spectrum is encoded into a point on the probability simplex by
two stacked stick-breaking stages, then decoded by a bias-free linear
decoder whose effective rows act as spectral signatures. Forward and
backward passes are written out by hand in numpy; all internal arithmetic
is float64.

Arrays follow a batch-first convention: a batch of pixels is ``(n, L)``, a
batch of attention vectors ``(n, c)``. Images are band-sequential
``(bands, height, width)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import xlogy

LEAKY_SLOPE = 0.01
RECON_GUARD = 1e-12
BETA_FLOOR = 1e-6


class NumericError(FloatingPointError):
    """A non-finite value appeared inside the network."""

    def __init__(self, layer: str):
        super().__init__(f"non-finite values produced at layer '{layer}'")
        self.layer = layer


class TrainingError(RuntimeError):
    def __init__(self, iteration: int, detail: str = "non-finite loss"):
        super().__init__(f"training diverged at iteration {iteration}: {detail}")
        self.iteration = iteration


@dataclass
class NetworkConfig:
    bands: int
    dense1: tuple[int, ...] = (3, 3, 3)
    pieces1: int = 20
    dense2: tuple[int, ...] = (3, 3, 3)
    pieces2: int = 10
    decoder_hidden: int = 10
    lam: float = 0.001
    eps: float = 1e-9
    iterations: int = 8000
    batch_size: int = 256
    learning_rate: float = 1e-3
    decoder_decay: float = 0.3
    standardize: bool = True
    seed: int = 0
    log_every: int = 10

    def __post_init__(self):
        self.dense1 = tuple(int(w) for w in self.dense1)
        self.dense2 = tuple(int(w) for w in self.dense2)
        if self.bands < 1:
            raise ValueError("bands must be >= 1")
        if not 2 <= self.pieces2 <= self.pieces1:
            raise ValueError(
                f"need 2 <= pieces2 <= pieces1, got pieces1={self.pieces1}, pieces2={self.pieces2}"
            )
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.decoder_decay < 0:
            raise ValueError("decoder_decay must be non-negative")
        if self.iterations < 0 or self.batch_size < 1 or self.log_every < 1:
            raise ValueError("iterations >= 0, batch_size >= 1 and log_every >= 1 required")

    @property
    def maps(self) -> int:
        return self.pieces2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dense1"] = list(self.dense1)
        d["dense2"] = list(self.dense2)
        return d


# --------------------------------------------------------------------------
# activations and primitives
# --------------------------------------------------------------------------


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softplus(z):
    z = np.asarray(z, dtype=float)
    return np.logaddexp(0.0, z)


def leaky_relu(z):
    return np.where(z > 0, z, LEAKY_SLOPE * z)


def _leaky_grad(z):
    return np.where(z > 0, 1.0, LEAKY_SLOPE)


def identity(z):
    return np.asarray(z, dtype=float)


ACTIVATIONS = {
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "identity": identity,
}


def dense_forward(weights, biases, x, activation="identity"):
    """One fully connected layer, ``activation(x @ W + b)``.

    ``weights`` has shape ``(in, out)``; ``x`` may be a single vector or a
    batch ``(n, in)``. ``biases`` may be None for bias-free layers.
    """
    W = np.asarray(weights, dtype=float)
    x = np.asarray(x, dtype=float)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ValueError(f"dimension mismatch: input {x.shape} vs weights {W.shape}")
    z = x @ W
    if biases is not None:
        b = np.asarray(biases, dtype=float)
        if b.shape != (W.shape[1],):
            raise ValueError(f"bias shape {b.shape} does not match {W.shape[1]} outputs")
        z = z + b
    try:
        act = ACTIVATIONS[activation]
    except KeyError:
        raise ValueError(f"unknown activation {activation!r}") from None
    return act(z)


def stick_break(u, beta):
    """Map break fractions to a simplex vector.

    ``u`` holds ``c`` values in (0, 1), ``beta`` is positive (scalar, or one
    value per row when ``u`` is a batch). The first ``c - 1`` fractions go
    through the Kumaraswamy(1, beta) inverse CDF, the last piece takes
    whatever stick is left so the result sums to one exactly.
    """
    u = np.asarray(u, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if np.any(~(u > 0)) or np.any(~(u < 1)):
        raise ValueError("stick_break: every u must lie strictly inside (0, 1)")
    if np.any(~(beta > 0)):
        raise ValueError("stick_break: beta must be positive")
    if beta.ndim == u.ndim - 1:
        beta = beta[..., None]
    rest = np.exp(np.log1p(-u[..., :-1]) / beta)
    v = 1.0 - rest
    return _pieces(v, rest)


def _pieces(v, rest):
    # v, rest = 1 - v: (..., c-1) -> s: (..., c)
    remaining = np.concatenate(
        [np.ones(v.shape[:-1] + (1,)), np.cumprod(rest, axis=-1)], axis=-1
    )
    s = remaining.copy()
    s[..., :-1] *= v
    return s


def entropy(s, eps=1e-9):
    """Shannon entropy (nats) of the eps-perturbed, renormalised vector(s)."""
    q = np.abs(np.asarray(s, dtype=float)) + eps
    p = q / q.sum(axis=-1, keepdims=True)
    return -np.sum(xlogy(p, p), axis=-1)


def _entropy_grad(s, eps):
    # dH/ds for s >= 0, batch (n, c)
    q = s + eps
    Q = q.sum(axis=1, keepdims=True)
    p = q / Q
    g = -(np.log(p) + 1.0)
    return (g - np.sum(g * p, axis=1, keepdims=True)) / Q


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------


def param_shapes(cfg: NetworkConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes in their declared (serialisation) order."""
    shapes: dict[str, tuple[int, ...]] = {}
    width = cfg.bands
    for k, w in enumerate(cfg.dense1):
        shapes[f"dense1.{k}.W"] = (width, w)
        shapes[f"dense1.{k}.b"] = (w,)
        width += w
    shapes["u1.W"] = (width, cfg.pieces1)
    shapes["u1.b"] = (cfg.pieces1,)
    shapes["beta1.W"] = (width, 1)
    shapes["beta1.b"] = (1,)
    width = cfg.pieces1
    for k, w in enumerate(cfg.dense2):
        shapes[f"dense2.{k}.W"] = (width, w)
        shapes[f"dense2.{k}.b"] = (w,)
        width += w
    shapes["u2.W"] = (width, cfg.pieces2)
    shapes["u2.b"] = (cfg.pieces2,)
    shapes["beta2.W"] = (width, 1)
    shapes["beta2.b"] = (1,)
    shapes["decoder.0.W"] = (cfg.pieces2, cfg.decoder_hidden)
    shapes["decoder.1.W"] = (cfg.decoder_hidden, cfg.bands)
    return shapes


def init_params(cfg: NetworkConfig, rng: np.random.Generator | None = None) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, size=shape)
    return params


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------


def _check(x, layer):
    if not np.all(np.isfinite(x)):
        raise NumericError(layer)


def _dense_block(params, prefix, x, n_layers):
    feats = x
    cache = []
    for k in range(n_layers):
        z = feats @ params[f"{prefix}.{k}.W"] + params[f"{prefix}.{k}.b"]
        _check(z, f"{prefix}.{k}")
        cache.append((feats, z))
        feats = np.concatenate([feats, leaky_relu(z)], axis=1)
    return feats, cache


def _dense_block_backward(params, prefix, cache, g_feats, grads):
    for k in reversed(range(len(cache))):
        feats, z = cache[k]
        d_in = feats.shape[1]
        g_z = g_feats[:, d_in:] * _leaky_grad(z)
        W = params[f"{prefix}.{k}.W"]
        grads[f"{prefix}.{k}.W"] = feats.T @ g_z
        grads[f"{prefix}.{k}.b"] = g_z.sum(axis=0)
        g_feats = g_feats[:, :d_in] + g_z @ W.T
    return g_feats


def _stick_stage(params, prefix, feats):
    zu = feats @ params[f"u{prefix}.W"] + params[f"u{prefix}.b"]
    zb = feats @ params[f"beta{prefix}.W"] + params[f"beta{prefix}.b"]
    beta = softplus(zb) + BETA_FLOOR
    # log(1 - sigmoid(z)) == -softplus(z), exact and overflow free
    log_rest_u = -softplus(zu[:, :-1])
    rest = np.exp(log_rest_u / beta)
    v = 1.0 - rest
    s = _pieces(v, rest)
    _check(s, f"stick{prefix}")
    return s, (feats, zu, zb, beta, log_rest_u, rest, v, s)


def _stick_stage_backward(params, prefix, cache, g_s, grads):
    feats, zu, zb, beta, log_rest_u, rest, v, s = cache
    n, c = s.shape
    # s_j = v_j R_j (j < c), s_c = R_c, R_{j+1} = R_j (1 - v_j)
    remaining = np.concatenate([np.ones((n, 1)), np.cumprod(rest, axis=1)], axis=1)
    g_rest = np.empty_like(rest)
    g_R = g_s[:, c - 1].copy()
    for j in range(c - 2, -1, -1):
        g_v = g_s[:, j] * remaining[:, j]
        g_rest[:, j] = g_R * remaining[:, j] - g_v
        g_R = g_s[:, j] * v[:, j] + g_R * rest[:, j]
    u = sigmoid(zu[:, :-1])
    g_zu = np.zeros_like(zu)
    g_zu[:, :-1] = g_rest * rest * (-u / beta)
    g_beta = np.sum(g_rest * rest * (-log_rest_u / beta**2), axis=1, keepdims=True)
    g_zb = g_beta * sigmoid(zb)
    grads[f"u{prefix}.W"] = feats.T @ g_zu
    grads[f"u{prefix}.b"] = g_zu.sum(axis=0)
    grads[f"beta{prefix}.W"] = feats.T @ g_zb
    grads[f"beta{prefix}.b"] = g_zb.sum(axis=0)
    return g_zu @ params[f"u{prefix}.W"].T + g_zb @ params[f"beta{prefix}.W"].T


def _encode_cached(params, x, cfg):
    _check(x, "input")
    f1, c_d1 = _dense_block(params, "dense1", x, len(cfg.dense1))
    s1, c_s1 = _stick_stage(params, "1", f1)
    f2, c_d2 = _dense_block(params, "dense2", s1, len(cfg.dense2))
    s2, c_s2 = _stick_stage(params, "2", f2)
    return s2, (c_d1, c_s1, c_d2, c_s2)


def encode(params, pixels, cfg: NetworkConfig):
    """Attention vector(s) for one spectrum ``(L,)`` or a batch ``(n, L)``."""
    x = np.asarray(pixels, dtype=float)
    single = x.ndim == 1
    s, _ = _encode_cached(params, np.atleast_2d(x), cfg)
    return s[0] if single else s


def decode(params, s):
    s = np.asarray(s, dtype=float)
    if s.shape[-1] != params["decoder.0.W"].shape[0]:
        raise ValueError(f"decode expects {params['decoder.0.W'].shape[0]} maps, got {s.shape[-1]}")
    return (s @ params["decoder.0.W"]) @ params["decoder.1.W"]


def loss(params, pixels, cfg: NetworkConfig, lam=None, eps=None):
    """Per-pixel ``(total, recon, sparsity)`` arrays; ``recon`` is the unsquared l2 error."""
    lam = cfg.lam if lam is None else lam
    eps = cfg.eps if eps is None else eps
    x = np.atleast_2d(np.asarray(pixels, dtype=float))
    s = encode(params, x, cfg)
    resid = decode(params, s) - x
    recon = np.sqrt(np.sum(resid**2, axis=1) + RECON_GUARD)
    sparsity = entropy(s, eps)
    return recon + lam * sparsity, recon, sparsity


def loss_and_grads(params, pixels, cfg: NetworkConfig, lam=None, eps=None, target=None):
    """Mean batch loss and its exact gradient with respect to every parameter.

    Returns ``(total, recon, sparsity, grads)`` where the first three are
    batch means. ``target`` (default: ``pixels``) is what the decoder must
    reproduce; training passes standardized pixels as input and raw ones
    as target.
    """
    lam = cfg.lam if lam is None else lam
    eps = cfg.eps if eps is None else eps
    inp = np.atleast_2d(np.asarray(pixels, dtype=float))
    x = inp if target is None else np.atleast_2d(np.asarray(target, dtype=float))
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    if inp.shape[0] != n:
        raise ValueError("input and target batches differ in length")
    s, (c_d1, c_s1, c_d2, c_s2) = _encode_cached(params, inp, cfg)
    h = s @ params["decoder.0.W"]
    xhat = h @ params["decoder.1.W"]
    resid = xhat - x
    recon = np.sqrt(np.sum(resid**2, axis=1) + RECON_GUARD)
    sparsity = entropy(s, eps)

    grads: dict[str, np.ndarray] = {}
    g_xhat = resid / recon[:, None] / n
    grads["decoder.1.W"] = h.T @ g_xhat
    g_h = g_xhat @ params["decoder.1.W"].T
    grads["decoder.0.W"] = s.T @ g_h
    g_s = g_h @ params["decoder.0.W"].T
    if lam:
        g_s = g_s + (lam / n) * _entropy_grad(s, eps)

    g_f2 = _stick_stage_backward(params, "2", c_s2, g_s, grads)
    g_s1 = _dense_block_backward(params, "dense2", c_d2, g_f2, grads)
    g_f1 = _stick_stage_backward(params, "1", c_s1, g_s1, grads)
    _dense_block_backward(params, "dense1", c_d1, g_f1, grads)

    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"grad:{name}")
    ordered = {name: grads[name] for name in params}
    total = float(np.mean(recon + lam * sparsity))
    return total, float(np.mean(recon)), float(np.mean(sparsity)), ordered


def gradients(params, pixels, cfg: NetworkConfig, lam=None, eps=None):
    return loss_and_grads(params, pixels, cfg, lam, eps)[3]


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass
class TrainedModel:
    config: NetworkConfig
    params: dict[str, np.ndarray]
    history: list[dict] = field(default_factory=list)

    @property
    def maps(self) -> int:
        return self.config.maps

    def save(self, path) -> None:
        """Write ``<path>.json`` (manifest) and ``<path>.f32`` (parameters)."""
        path = Path(path)
        shapes = param_shapes(self.config)
        manifest = {
            "schema": 1,
            "config": self.config.to_dict(),
            "seed": self.config.seed,
            "params": [{"name": k, "shape": list(v)} for k, v in shapes.items()],
            "history": self.history,
        }
        blob = np.concatenate([self.params[k].ravel() for k in shapes]).astype("<f4")
        path.with_suffix(".json").write_text(json.dumps(manifest, indent=2))
        path.with_suffix(".f32").write_bytes(blob.tobytes())

    @classmethod
    def load(cls, path) -> "TrainedModel":
        path = Path(path)
        manifest = json.loads(path.with_suffix(".json").read_text())
        cfg = NetworkConfig(**manifest["config"])
        blob = np.frombuffer(path.with_suffix(".f32").read_bytes(), dtype="<f4").astype(float)
        shapes = param_shapes(cfg)
        expected = sum(math.prod(s) for s in shapes.values())
        if blob.size != expected:
            raise ValueError(f"parameter blob has {blob.size} values, manifest needs {expected}")
        params, at = {}, 0
        for name, shape in shapes.items():
            size = math.prod(shape)
            params[name] = blob[at : at + size].reshape(shape).copy()
            at += size
        return cls(cfg, params, manifest.get("history", []))


def _adam(params, grads, state, t, lr, b1=0.9, b2=0.999, eps=1e-8):
    m, v = state
    for k, g in grads.items():
        m[k] = b1 * m[k] + (1 - b1) * g
        v[k] = b2 * v[k] + (1 - b2) * g * g
        mhat = m[k] / (1 - b1**t)
        vhat = v[k] / (1 - b2**t)
        params[k] = params[k] - lr * mhat / (np.sqrt(vhat) + eps)


def image_pixels(img) -> np.ndarray:
    """(bands, H, W) -> (H*W, bands)"""
    img = np.asarray(img, dtype=float)
    return img.reshape(img.shape[0], -1).T


def input_consumers(cfg: NetworkConfig) -> list[str]:
    """Layers whose input features start with the raw pixel spectrum."""
    return [f"dense1.{k}" for k in range(len(cfg.dense1))] + ["u1", "beta1"]


def fold_standardization(params, cfg: NetworkConfig, mean, scale) -> dict[str, np.ndarray]:
    """Rewrite weights trained on ``(x - mean) / scale`` so they accept raw ``x``."""
    out = {k: v.copy() for k, v in params.items()}
    L = cfg.bands
    for layer in input_consumers(cfg):
        W = params[f"{layer}.W"]
        out[f"{layer}.W"][:L] = W[:L] / scale[:, None]
        out[f"{layer}.b"] = params[f"{layer}.b"] - (mean / scale) @ W[:L]
    return out


def train(msi, cfg: NetworkConfig) -> TrainedModel:
    """Fit the autoencoder to the pixels of one image.

    Adam on shuffled minibatches (a fresh seeded permutation per epoch),
    with decoupled weight decay on the two decoder matrices only. When
    ``cfg.standardize`` is set the encoder sees per-band standardized
    spectra during training; the returned parameters have that affine map
    folded into the first layers, so they act on raw spectra.

    The loss history records batch means every ``cfg.log_every`` steps and
    at the last step.
    """
    msi = np.asarray(msi, dtype=float)
    if msi.shape[0] != cfg.bands:
        raise ValueError(f"image has {msi.shape[0]} bands, network expects {cfg.bands}")
    x = image_pixels(msi)
    n = x.shape[0]
    if cfg.standardize:
        mean = x.mean(axis=0)
        scale = x.std(axis=0)
        scale[scale == 0] = 1.0
    else:
        mean, scale = np.zeros(cfg.bands), np.ones(cfg.bands)
    xin = (x - mean) / scale
    rng = np.random.default_rng(cfg.seed)
    params = init_params(cfg, rng)
    state = ({k: np.zeros_like(p) for k, p in params.items()},
             {k: np.zeros_like(p) for k, p in params.items()})
    decay = 1.0 - cfg.learning_rate * cfg.decoder_decay
    batch = min(cfg.batch_size, n)
    history = []
    order = rng.permutation(n)
    at = 0
    for it in range(cfg.iterations):
        if at + batch > n:
            order = rng.permutation(n)
            at = 0
        idx = order[at : at + batch]
        at += batch
        try:
            total, recon, sparsity, grads = loss_and_grads(params, xin[idx], cfg, target=x[idx])
        except NumericError as exc:
            raise TrainingError(it, str(exc)) from exc
        if not math.isfinite(total):
            raise TrainingError(it)
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            history.append({"iteration": it, "total": total, "recon": recon, "sparsity": sparsity})
        _adam(params, grads, state, it + 1, cfg.learning_rate)
        params["decoder.0.W"] *= decay
        params["decoder.1.W"] *= decay
    return TrainedModel(cfg, fold_standardization(params, cfg, mean, scale), history)


def encode_image(model: TrainedModel, msi) -> np.ndarray:
    """(L, H, W) image -> (c, H, W) attention stack."""
    msi = np.asarray(msi, dtype=float)
    if msi.shape[0] != model.config.bands:
        raise ValueError(f"image has {msi.shape[0]} bands, model expects {model.config.bands}")
    s = encode(model.params, image_pixels(msi), model.config)
    return s.T.reshape((model.maps,) + msi.shape[1:])


def decode_image(model: TrainedModel, stack) -> np.ndarray:
    """(c, H, W) attention stack -> (L, H, W) image."""
    stack = np.asarray(stack, dtype=float)
    if stack.shape[0] != model.maps:
        raise ValueError(f"stack has {stack.shape[0]} maps, model expects {model.maps}")
    x = decode(model.params, image_pixels(stack))
    return x.T.reshape((model.config.bands,) + stack.shape[1:])
