"""Attention-driven detail extraction and injection.

The five stages of the method, in order:

1. train the autoencoder on the LR MSI and encode it into attention maps;
2. regress a nearest-neighbour decimated PAN on the LR bands, then
   synthesise a low-pass PAN from the upsampled network reconstruction;
3. take the PAN detail as PAN minus that synthetic low-pass PAN;
4. segment the upsampled attention stack by its argmax (the major
   spectral index map) and estimate projective injection gains, globally or
   per segment;
5. inject the detail into each upsampled attention map and decode.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import attnet, protocol
from .attnet import NetworkConfig, TrainedModel

MIN_REGION_PIXELS = 8
REGRESSION_DAMPING = 1e-8

INJECTION_MODES = ("msim", "global")
INJECTION_DOMAINS = ("maps", "bands")


class DegenerateError(ValueError):
    pass


class StageError(RuntimeError):
    """A pipeline stage failed; ``step`` is its 1-based position in the method."""

    def __init__(self, step: int, cause: BaseException):
        super().__init__(f"step {step} failed: {cause}")
        self.step = step
        self.cause = cause


def _as_plane(img):
    img = np.asarray(img, dtype=float)
    if img.ndim == 3:
        if img.shape[0] != 1:
            raise ValueError(f"expected a single-band image, got {img.shape[0]} bands")
        img = img[0]
    return img


@dataclass
class RegressionCoeffs:
    alpha: np.ndarray
    intercept: float

    def to_dict(self) -> dict:
        return {"alpha": [float(a) for a in self.alpha], "intercept": float(self.intercept)}


def fit_pan_regression(msi_lr, pan_lr, damping: float = REGRESSION_DAMPING) -> RegressionCoeffs:
    """Least-squares fit of PAN on the MSI bands plus an intercept.

    Solves the damped normal equations, then applies two steps of iterative
    refinement so the damping only guards conditioning and does not bias a
    well-posed fit.
    """
    msi_lr = np.asarray(msi_lr, dtype=float)
    pan_lr = _as_plane(pan_lr)
    if msi_lr.shape[1:] != pan_lr.shape:
        raise ValueError(f"MSI {msi_lr.shape[1:]} and PAN {pan_lr.shape} differ in size")
    L = msi_lr.shape[0]
    bands = msi_lr.reshape(L, -1).T
    if np.all(np.ptp(bands, axis=0) == 0):
        raise DegenerateError("every band is constant; regression is undetermined")
    A = np.hstack([bands, np.ones((bands.shape[0], 1))])
    y = pan_lr.ravel()
    N = A.T @ A + damping * np.eye(L + 1)
    coef = np.linalg.solve(N, A.T @ y)
    for _ in range(2):
        coef = coef + np.linalg.solve(N, A.T @ (y - A @ coef))
    return RegressionCoeffs(coef[:L], float(coef[L]))


def synth_low_pan(coeffs: RegressionCoeffs, msi_hat_up) -> np.ndarray:
    msi_hat_up = np.asarray(msi_hat_up, dtype=float)
    if msi_hat_up.shape[0] != coeffs.alpha.size:
        raise ValueError(f"{msi_hat_up.shape[0]} bands but {coeffs.alpha.size} coefficients")
    return np.tensordot(coeffs.alpha, msi_hat_up, axes=1) + coeffs.intercept


def extract_detail(pan, pan_low_hat) -> np.ndarray:
    pan = _as_plane(pan)
    pan_low_hat = _as_plane(pan_low_hat)
    if pan.shape != pan_low_hat.shape:
        raise ValueError(f"PAN {pan.shape} and synthetic PAN {pan_low_hat.shape} differ")
    return pan - pan_low_hat


def compute_msim(stack) -> np.ndarray:
    """Index of the largest attention value per pixel (lowest index on ties)."""
    return np.argmax(np.asarray(stack), axis=0)


def projective_gain(x, y) -> float:
    """cov(x, y) / var(y), population moments, two-pass."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    dy = y - y.mean()
    var = np.mean(dy * dy)
    if var == 0:
        raise DegenerateError("variance of the synthetic PAN is zero")
    return float(np.mean((x - x.mean()) * dy) / var)


@dataclass
class GainTable:
    """Injection gains: ``(maps,)`` when global, ``(maps, regions)`` when per-region."""

    mode: str
    gains: np.ndarray
    degenerate: list[int] = field(default_factory=list)

    def gain_map(self, msim=None) -> np.ndarray:
        """Per-pixel gains, shape ``(maps, H, W)`` (or ``(maps, 1, 1)`` when global)."""
        if self.mode == "global":
            return self.gains[:, None, None]
        if msim is None:
            raise ValueError("a spatially variant gain table needs the MSIM")
        msim = np.asarray(msim)
        if msim.min() < 0 or msim.max() >= self.gains.shape[1]:
            raise KeyError("MSIM references a region with no gain entry")
        return self.gains[:, msim]

    def to_dict(self) -> dict:
        return {"mode": self.mode, "gains": np.asarray(self.gains).tolist(),
                "degenerate_regions": list(self.degenerate)}


def global_gains(stack, pan_low_hat) -> GainTable:
    stack = np.asarray(stack, dtype=float)
    p = _as_plane(pan_low_hat)
    if stack.shape[1:] != p.shape:
        raise ValueError("stack and synthetic PAN differ in size")
    return GainTable("global", np.array([projective_gain(s, p) for s in stack]))


def variant_gains(stack, pan_low_hat, msim, n_regions: int | None = None,
                  min_pixels: int = MIN_REGION_PIXELS) -> GainTable:
    """Per-region projective gains; tiny or flat regions get gain 0 and are flagged."""
    stack = np.asarray(stack, dtype=float)
    p = _as_plane(pan_low_hat)
    msim = np.asarray(msim)
    if stack.shape[1:] != p.shape or msim.shape != p.shape:
        raise ValueError("stack, synthetic PAN and MSIM must share a size")
    if n_regions is None:
        n_regions = max(stack.shape[0], int(msim.max()) + 1)
    gains = np.zeros((stack.shape[0], n_regions))
    degenerate = []
    for t in range(n_regions):
        mask = msim == t
        if mask.sum() < min_pixels:
            degenerate.append(t)
            continue
        pt = p[mask]
        try:
            gains[:, t] = [projective_gain(s[mask], pt) for s in stack]
        except DegenerateError:
            degenerate.append(t)
    return GainTable("msim", gains, degenerate)


def inject_and_reconstruct(model: TrainedModel, stack_up, gains: GainTable, detail, msim=None):
    """Add gain-weighted detail to every attention map, then decode to spectra."""
    stack_up = np.asarray(stack_up, dtype=float)
    detail = _as_plane(detail)
    if detail.shape != stack_up.shape[1:]:
        raise ValueError("detail and attention stack differ in size")
    injected = stack_up + gains.gain_map(msim) * detail
    return attnet.decode_image(model, injected)


def inject_bands(msi_up, gains: GainTable, detail, msim=None):
    """Band-domain variant: detail added straight onto the upsampled bands."""
    detail = _as_plane(detail)
    return np.asarray(msi_up, dtype=float) + gains.gain_map(msim) * detail


@dataclass
class FusionConfig:
    injection: str = "msim"
    domain: str = "maps"
    upsample_kernel: str = "bicubic"
    network: NetworkConfig | None = None
    seed: int = 0

    def __post_init__(self):
        if self.injection not in INJECTION_MODES:
            raise ValueError(f"injection must be one of {INJECTION_MODES}")
        if self.domain not in INJECTION_DOMAINS:
            raise ValueError(f"domain must be one of {INJECTION_DOMAINS}")
        if self.upsample_kernel not in protocol.UPSAMPLE_KERNELS:
            raise ValueError(f"upsample kernel must be one of {protocol.UPSAMPLE_KERNELS}")

    def network_for(self, bands: int) -> NetworkConfig:
        if self.network is None:
            return NetworkConfig(bands=bands, seed=self.seed)
        return replace(self.network, bands=bands, seed=self.seed)


@dataclass
class FusionResult:
    fused: np.ndarray
    model: TrainedModel
    stack: np.ndarray
    stack_up: np.ndarray
    msim: np.ndarray
    coeffs: RegressionCoeffs
    gains: GainTable
    config: FusionConfig
    timings: dict[str, float] = field(default_factory=dict)

    def report(self, include_timings: bool = False) -> dict:
        rep = {
            "schema": 1,
            "injection": self.config.injection,
            "domain": self.config.domain,
            "seed": self.config.seed,
            "network": self.model.config.to_dict(),
            "loss_curve": self.model.history,
            "regression": self.coeffs.to_dict(),
            "gains": self.gains.to_dict(),
            "msim_counts": np.bincount(self.msim.ravel(), minlength=self.model.maps).tolist(),
        }
        if include_timings:
            rep["timings_s"] = dict(self.timings)
        return rep


def pansharpen(msi, pan, r: int, cfg: FusionConfig | None = None,
               model: TrainedModel | None = None) -> FusionResult:
    """Fuse an LR MSI ``(L, m, n)`` with a PAN ``(r*m, r*n)`` into an ``(L, r*m, r*n)`` image.

    A pre-trained ``model`` skips step 1's training (the image is still encoded).
    """
    cfg = cfg or FusionConfig()
    msi = np.asarray(msi, dtype=float)
    pan = _as_plane(pan)
    if pan.shape != (r * msi.shape[1], r * msi.shape[2]):
        raise ValueError(f"PAN {pan.shape} is not {r}x the MSI {msi.shape[1:]}")
    timings: dict[str, float] = {}
    clock = time.perf_counter

    t0 = clock()
    try:
        if model is None:
            model = attnet.train(msi, cfg.network_for(msi.shape[0]))
        stack = attnet.encode_image(model, msi)
    except Exception as exc:
        raise StageError(1, exc) from exc
    timings["attention"] = clock() - t0

    t0 = clock()
    try:
        pan_lr = pan[::r, ::r]
        coeffs = fit_pan_regression(msi, pan_lr)
        msi_hat = attnet.decode_image(model, stack)
        msi_hat_up = protocol.upsample(msi_hat, r, cfg.upsample_kernel)
        pan_low_hat = synth_low_pan(coeffs, msi_hat_up)
    except Exception as exc:
        raise StageError(2, exc) from exc
    timings["pan_synthesis"] = clock() - t0

    t0 = clock()
    try:
        detail = extract_detail(pan, pan_low_hat)
    except Exception as exc:
        raise StageError(3, exc) from exc
    timings["detail"] = clock() - t0

    t0 = clock()
    try:
        stack_up = protocol.upsample(stack, r, cfg.upsample_kernel)
        msim = compute_msim(stack_up)
        target = stack_up if cfg.domain == "maps" else msi_hat_up
        if cfg.injection == "global":
            gains = global_gains(target, pan_low_hat)
        else:
            gains = variant_gains(target, pan_low_hat, msim, n_regions=model.maps)
    except Exception as exc:
        raise StageError(4, exc) from exc
    timings["gains"] = clock() - t0

    t0 = clock()
    try:
        if cfg.domain == "maps":
            fused = inject_and_reconstruct(model, stack_up, gains, detail, msim)
        else:
            fused = inject_bands(msi_hat_up, gains, detail, msim)
        if not np.all(np.isfinite(fused)):
            raise FloatingPointError("non-finite fused samples")
    except Exception as exc:
        raise StageError(5, exc) from exc
    timings["reconstruction"] = clock() - t0

    return FusionResult(fused, model, stack, stack_up, msim, coeffs, gains, cfg, timings)
