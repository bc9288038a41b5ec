"""Resolution reduction (Wald protocol) and the upsampling operator.

Images are ``(bands, height, width)`` arrays. LR pixel ``i`` sits on HR
pixel ``r * i`` (decimation phase 0), and the interpolator uses the same
grid alignment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import convolve1d
from scipy.signal import firwin

UPSAMPLE_KERNELS = ("bicubic", "nearest")


@dataclass
class DegradeConfig:
    factor: int = 4
    nyquist_gain: float | list[float] = 0.29
    taps: int = 41
    upsample_kernel: str = "bicubic"

    def __post_init__(self):
        if int(self.factor) != self.factor or self.factor < 2:
            raise ValueError(f"factor must be an integer >= 2, got {self.factor}")
        self.factor = int(self.factor)
        gains = np.atleast_1d(np.asarray(self.nyquist_gain, dtype=float))
        if np.any(gains <= 0) or np.any(gains >= 1):
            raise ValueError("Nyquist gains must lie in (0, 1)")
        if self.taps < 3 or self.taps % 2 == 0:
            raise ValueError("taps must be an odd integer >= 3")
        if self.upsample_kernel not in UPSAMPLE_KERNELS:
            raise ValueError(f"unsupported upsample kernel {self.upsample_kernel!r}")

    def band_gains(self, bands: int) -> np.ndarray:
        gains = np.atleast_1d(np.asarray(self.nyquist_gain, dtype=float))
        if gains.size == 1:
            return np.full(bands, gains[0])
        if gains.size != bands:
            raise ValueError(f"{gains.size} Nyquist gains given for {bands} bands")
        return gains

    @classmethod
    def from_dict(cls, d: dict) -> "DegradeConfig":
        known = {"factor", "nyquist_gain", "taps", "upsample_kernel"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown DegradeConfig fields: {sorted(unknown)}")
        return cls(**d)


def _as_stack(img):
    img = np.asarray(img, dtype=float)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3:
        raise ValueError(f"expected (bands, H, W) image, got shape {img.shape}")
    return img


def _check_divisible(img, r):
    h, w = img.shape[1:]
    if h % r or w % r:
        raise ValueError(f"image size {h}x{w} is not divisible by factor {r}")


def gaussian_sigma(nyquist_gain: float, r: int) -> float:
    """Std-dev (HR pixels) of the Gaussian whose response at 1/(2r) cycles/pixel is ``nyquist_gain``."""
    return r * math.sqrt(-2.0 * math.log(nyquist_gain)) / math.pi


def mtf_kernel(nyquist_gain: float, r: int, taps: int = 41) -> np.ndarray:
    """1-D sampled Gaussian MTF kernel, unit sum."""
    sigma = gaussian_sigma(nyquist_gain, r)
    n = np.arange(taps) - taps // 2
    k = np.exp(-0.5 * (n / sigma) ** 2)
    return k / k.sum()


def pan_kernel(r: int, taps: int = 41) -> np.ndarray:
    """Hamming-windowed sinc low-pass, cutoff pi/r, unit DC gain."""
    return firwin(taps, 1.0 / r, window="hamming")


def separable_filter(img, kernel) -> np.ndarray:
    """Filter rows then columns of every band with symmetric boundary extension."""
    img = _as_stack(img)
    out = convolve1d(img, kernel, axis=2, mode="reflect")
    return convolve1d(out, kernel, axis=1, mode="reflect")


def decimate(img, r: int) -> np.ndarray:
    return _as_stack(img)[:, ::r, ::r]


def mtf_degrade_msi(msi, cfg: DegradeConfig) -> np.ndarray:
    msi = _as_stack(msi)
    r = cfg.factor
    _check_divisible(msi, r)
    gains = cfg.band_gains(msi.shape[0])
    out = np.empty((msi.shape[0], msi.shape[1] // r, msi.shape[2] // r))
    for k in range(msi.shape[0]):
        blurred = separable_filter(msi[k], mtf_kernel(gains[k], r, cfg.taps))
        out[k] = decimate(blurred, r)[0]
    return out


def lowpass_pan(pan, cfg: DegradeConfig) -> np.ndarray:
    return separable_filter(pan, pan_kernel(cfg.factor, cfg.taps))


def downsample_pan(pan, cfg: DegradeConfig) -> np.ndarray:
    pan = _as_stack(pan)
    _check_divisible(pan, cfg.factor)
    return decimate(lowpass_pan(pan, cfg), cfg.factor)


def _cubic_weights(t, a=-0.5):
    # Keys cubic convolution weights for offsets t in [0, 1): taps at -1, 0, 1, 2
    t = np.asarray(t, dtype=float)
    def near(x):
        return (a + 2) * x**3 - (a + 3) * x**2 + 1
    def far(x):
        return a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a
    return np.stack([far(1 + t), near(t), near(1 - t), far(2 - t)], axis=-1)


def _reflect_index(idx, n):
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - 1 - idx, idx)


def cubic_matrix(n: int, r: int) -> np.ndarray:
    """(r*n, n) matrix interpolating a length-n signal onto the r-times finer grid."""
    pos = np.arange(n * r) / r
    base = np.floor(pos).astype(int)
    w = _cubic_weights(pos - base)
    A = np.zeros((n * r, n))
    rows = np.arange(n * r)
    for tap in range(4):
        cols = _reflect_index(base + tap - 1, n)
        np.add.at(A, (rows, cols), w[:, tap])
    return A


def upsample(img, r: int, kernel: str = "bicubic") -> np.ndarray:
    """Scale every band by integer factor ``r``."""
    img = _as_stack(img)
    if kernel == "nearest":
        return np.repeat(np.repeat(img, r, axis=1), r, axis=2)
    if kernel != "bicubic":
        raise ValueError(f"unsupported upsample kernel {kernel!r}")
    Ay = cubic_matrix(img.shape[1], r)
    Ax = cubic_matrix(img.shape[2], r)
    return np.einsum("ij,bjk,lk->bil", Ay, img, Ax, optimize=True)


@dataclass
class WaldResult:
    msi: np.ndarray
    pan: np.ndarray
    factor: int
    reference: np.ndarray = field(repr=False)


def wald_reduce(msi, pan, cfg: DegradeConfig) -> WaldResult:
    """Degrade an (MSI, PAN) pair by ``cfg.factor``; the input MSI becomes the reference."""
    msi = _as_stack(msi)
    pan = _as_stack(pan)
    r = cfg.factor
    if pan.shape[1] != r * msi.shape[1] or pan.shape[2] != r * msi.shape[2]:
        raise ValueError(f"PAN {pan.shape[1:]} is not {r}x the MSI {msi.shape[1:]}")
    return WaldResult(mtf_degrade_msi(msi, cfg), downsample_pan(pan, cfg), r, msi)
