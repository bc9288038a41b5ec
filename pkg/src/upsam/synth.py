"""Synthetic scenes with known ground truth.

Provides the three-signature toy mixture, noise injection at a prescribed
SNR, a k-means labelling baseline, and full MSI/PAN pairs built from a
known high-resolution reference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.optimize import linear_sum_assignment

from . import protocol

# Three smooth 8-band signatures: rising, falling, and peaked mid-spectrum.
TOY_SIGNATURES = np.array(
    [
        [0.10, 0.18, 0.27, 0.36, 0.45, 0.54, 0.63, 0.72],
        [0.80, 0.72, 0.64, 0.55, 0.46, 0.38, 0.30, 0.22],
        [0.20, 0.24, 0.41, 0.71, 0.77, 0.49, 0.26, 0.21],
    ]
)

TOY_SIZE = 64
TOY_SNR_DB = 30.0
# sigmoid scale giving a 10%-90% transition over 4 pixels
_TOY_EDGE_SCALE = 4.0


@dataclass
class ToyFixture:
    signatures: np.ndarray  # (3, 8)
    abundances: np.ndarray  # (3, H, W)
    clean: np.ndarray  # (8, H, W), abundances mixed through signatures
    msi: np.ndarray  # (8, H, W), clean + noise
    labels: np.ndarray  # (H, W) argmax of abundances


def mix(abundances, signatures):
    """Linear mixing: (c, H, W) proportions and (c, L) signatures -> (L, H, W)."""
    return np.tensordot(signatures, abundances, axes=([0], [0]))


def _toy_abundances(size=TOY_SIZE):
    rows = np.arange(size, dtype=float)[:, None]
    cols = np.arange(size, dtype=float)[None, :]
    third = size / 3.0
    wave = 2.5 * np.sin(2 * np.pi * cols / size)
    edge1 = third - 0.5 + wave
    edge2 = 2 * third - 0.5 - wave
    below1 = 1.0 / (1.0 + np.exp(-(rows - edge1) / _TOY_EDGE_SCALE))
    below2 = 1.0 / (1.0 + np.exp(-(rows - edge2) / _TOY_EDGE_SCALE))
    a = np.stack([1.0 - below1, below1 - below2, below2 + 0.0 * rows])
    return np.broadcast_to(a, (3, size, size)).copy()


def gen_toy(seed: int = 0, snr_db: float = TOY_SNR_DB, size: int = TOY_SIZE) -> ToyFixture:
    """The three-material toy scene: horizontal bands with soft, wavy edges."""
    abundances = _toy_abundances(size)
    clean = mix(abundances, TOY_SIGNATURES)
    msi = add_noise_snr(clean, snr_db, seed)
    labels = np.argmax(abundances, axis=0)
    return ToyFixture(TOY_SIGNATURES.copy(), abundances, clean, msi, labels)


def add_noise_snr(img, snr_db: float, seed: int = 0) -> np.ndarray:
    """Add white Gaussian noise so that mean signal power / noise power = snr_db.

    ``snr_db = inf`` returns an unchanged copy.
    """
    img = np.asarray(img, dtype=float)
    if math.isinf(snr_db) and snr_db > 0:
        return img.copy()
    if not math.isfinite(snr_db):
        raise ValueError("snr_db must be finite or +inf")
    power = float(np.mean(img**2))
    if power == 0.0:
        raise ValueError("cannot set an SNR on a zero-power image")
    sigma = math.sqrt(power / 10.0 ** (snr_db / 10.0))
    rng = np.random.default_rng(seed)
    return img + rng.normal(0.0, sigma, size=img.shape)


def measured_snr_db(clean, noisy) -> float:
    clean = np.asarray(clean, dtype=float)
    noise = np.asarray(noisy, dtype=float) - clean
    return 10.0 * math.log10(np.mean(clean**2) / np.mean(noise**2))


def kmeans_labels(msi, k: int, seed: int = 0) -> np.ndarray:
    """Lloyd's k-means (k-means++ seeding) on pixel spectra; returns an (H, W) label map."""
    from sklearn.cluster import KMeans

    msi = np.asarray(msi, dtype=float)
    if msi.size == 0:
        raise ValueError("empty image")
    x = msi.reshape(msi.shape[0], -1).T
    if not 1 <= k <= x.shape[0]:
        raise ValueError(f"k must be in [1, {x.shape[0]}], got {k}")
    km = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=100, tol=1e-6, random_state=seed)
    return km.fit_predict(x).reshape(msi.shape[1:])


def label_agreement(pred, truth) -> float:
    """Fraction of pixels matching after the best one-to-one relabelling of ``pred``.

    Predicted labels left unmatched (more clusters than classes) count as errors.
    """
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    if pred.shape != truth.shape:
        raise ValueError("label maps differ in size")
    p_ids, p_inv = np.unique(pred, return_inverse=True)
    t_ids, t_inv = np.unique(truth, return_inverse=True)
    counts = np.zeros((p_ids.size, t_ids.size), dtype=np.int64)
    np.add.at(counts, (p_inv, t_inv), 1)
    rows, cols = linear_sum_assignment(-counts)
    return counts[rows, cols].sum() / pred.size


# --------------------------------------------------------------------------
# full-reference MSI/PAN pairs
# --------------------------------------------------------------------------

# Four-band (blue, green, red, NIR) reflectance-like signatures.
PAIR_SIGNATURES = np.array(
    [
        [0.06, 0.09, 0.05, 0.45],  # vegetation
        [0.22, 0.24, 0.27, 0.30],  # concrete
        [0.10, 0.08, 0.06, 0.03],  # water
        [0.18, 0.22, 0.30, 0.36],  # bare soil
        [0.35, 0.36, 0.37, 0.38],  # roof
    ]
)
PAIR_ALPHA = np.array([0.12, 0.28, 0.33, 0.27])


def textured_abundances(n_materials: int, size: int, seed: int = 0) -> np.ndarray:
    """Random simplex-valued maps with both smooth patches and sharp structure."""
    rng = np.random.default_rng(seed)
    logits = np.zeros((n_materials, size, size))
    for scale, weight in ((12.0, 6.0), (4.0, 3.0), (1.5, 1.5)):
        field = rng.standard_normal((n_materials, size, size))
        for j in range(n_materials):
            f = gaussian_filter(field[j], scale, mode="wrap")
            logits[j] += weight * (f - f.mean()) / (f.std() + 1e-12)
    # sharp-edged blocks give the degradation real high frequencies to destroy
    n_blocks = max(1, size // 8)
    for _ in range(n_blocks):
        j = rng.integers(n_materials)
        y, x = rng.integers(0, size - 4, size=2)
        h, w = rng.integers(3, max(4, size // 6), size=2)
        logits[j, y : y + h, x : x + w] += 6.0
    logits -= logits.max(axis=0, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=0, keepdims=True)


@dataclass
class SyntheticPair:
    hr_ref: np.ndarray  # (L, S, S) ground truth
    msi: np.ndarray  # (L, S/r, S/r)
    pan: np.ndarray  # (1, S, S)
    factor: int
    alpha: np.ndarray  # (L,) true PAN band weights
    abundances: np.ndarray
    pan_lr: np.ndarray  # (1, S/r, S/r) PAN through the same MTF as the MSI


def gen_synthetic_pair(signatures=None, size: int = 128, r: int = 4, seed: int = 0,
                       alpha=None, degrade: protocol.DegradeConfig | None = None) -> SyntheticPair:
    """Mix signatures over textured abundance maps and derive PAN and LR MSI.

    PAN is an exact positive combination of the HR bands; the LR MSI is the
    HR reference passed through the MTF degradation. ``pan_lr`` applies the
    first band's MTF to the PAN, so with equal band gains it is exactly the
    same combination of the LR bands.
    """
    signatures = PAIR_SIGNATURES if signatures is None else np.asarray(signatures, dtype=float)
    alpha = PAIR_ALPHA if alpha is None else np.asarray(alpha, dtype=float)
    if size % r:
        raise ValueError(f"size {size} is not divisible by factor {r}")
    if alpha.shape != (signatures.shape[1],):
        raise ValueError("alpha must have one weight per band")
    abundances = textured_abundances(signatures.shape[0], size, seed)
    hr = mix(abundances, signatures)
    pan = np.tensordot(alpha, hr, axes=1)[None]
    cfg = degrade or protocol.DegradeConfig(factor=r)
    if cfg.factor != r:
        raise ValueError("degrade config factor disagrees with r")
    msi = protocol.mtf_degrade_msi(hr, cfg)
    pan_lr = protocol.mtf_degrade_msi(pan, replace(cfg, nyquist_gain=float(np.atleast_1d(cfg.nyquist_gain)[0])))
    return SyntheticPair(hr, msi, pan, r, alpha.copy(), abundances, pan_lr)
