"""Fusion quality indices.

Reduced resolution (with a reference): PSNR, SAM, ERGAS, Q2^n.
Full resolution (no reference): D_lambda, D_S and QNR built on the UIQI.

All images are ``(bands, height, width)`` float arrays on a peak-1 scale.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

PSNR_CAP = 99.0


def _pair(ref, test):
    ref = np.asarray(ref, dtype=float)
    test = np.asarray(test, dtype=float)
    if ref.ndim == 2:
        ref = ref[None]
    if test.ndim == 2:
        test = test[None]
    if ref.shape != test.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {test.shape}")
    return ref, test


def psnr(ref, test, peak: float = 1.0) -> float:
    """Band-averaged PSNR in dB; exact bands score PSNR_CAP."""
    ref, test = _pair(ref, test)
    mse = np.mean((ref - test) ** 2, axis=(1, 2))
    with np.errstate(divide="ignore"):
        per_band = np.where(mse > 0, 10.0 * np.log10(peak**2 / np.where(mse > 0, mse, 1.0)), PSNR_CAP)
    return float(np.mean(per_band))


def sam(ref, test) -> float:
    """Mean spectral angle in degrees; pixels where either spectrum is zero are skipped."""
    ref, test = _pair(ref, test)
    x = ref.reshape(ref.shape[0], -1)
    y = test.reshape(test.shape[0], -1)
    nx = np.linalg.norm(x, axis=0)
    ny = np.linalg.norm(y, axis=0)
    ok = (nx > 0) & (ny > 0)
    if not np.any(ok):
        return 0.0
    # half-angle form: exact zero for equal directions, no arccos roundoff near 1
    u = x[:, ok] / nx[ok]
    v = y[:, ok] / ny[ok]
    ang = 2.0 * np.arctan2(np.linalg.norm(u - v, axis=0), np.linalg.norm(u + v, axis=0))
    return float(np.degrees(np.mean(ang)))


def ergas(ref, test, r: float) -> float:
    ref, test = _pair(ref, test)
    mu = np.mean(ref, axis=(1, 2))
    if np.any(mu == 0):
        raise ValueError("ERGAS undefined: a reference band has zero mean")
    rmse2 = np.mean((ref - test) ** 2, axis=(1, 2))
    return float(100.0 / r * math.sqrt(np.mean(rmse2 / mu**2)))


def _block_starts(n, block, shift):
    if block > n:
        raise ValueError(f"block size {block} exceeds image size {n}")
    return range(0, n - block + 1, shift)


def _q_block(a, b):
    ma, mb = a.mean(), b.mean()
    va = np.mean((a - ma) ** 2)
    vb = np.mean((b - mb) ** 2)
    cab = np.mean((a - ma) * (b - mb))
    den = (va + vb) * (ma**2 + mb**2)
    if den == 0:
        return 1.0 if np.array_equal(a, b) else 0.0
    return 4.0 * cab * ma * mb / den


def uiqi(a, b, block: int = 32, shift: int = 32) -> float:
    """Universal image quality index averaged over (block x block) windows."""
    a = np.asarray(a, dtype=float).squeeze()
    b = np.asarray(b, dtype=float).squeeze()
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"uiqi needs two equal 2-D images, got {a.shape} and {b.shape}")
    vals = [
        _q_block(a[i : i + block, j : j + block], b[i : i + block, j : j + block])
        for i in _block_starts(a.shape[0], block, shift)
        for j in _block_starts(a.shape[1], block, shift)
    ]
    return float(np.mean(vals))


# --------------------------------------------------------------------------
# hypercomplex (Cayley-Dickson) algebra for Q2^n
# --------------------------------------------------------------------------


def cd_conj(z):
    out = -z
    out[..., 0] = z[..., 0]
    return out


def cd_mult(z, w):
    """Cayley-Dickson product over the last axis (length a power of two).

    (a, b)(c, d) = (ac - d* b, d a + b c*).
    """
    n = z.shape[-1]
    if n == 1:
        return z * w
    h = n // 2
    a, b = z[..., :h], z[..., h:]
    c, d = w[..., :h], w[..., h:]
    first = cd_mult(a, c) - cd_mult(cd_conj(d), b)
    second = cd_mult(d, a) + cd_mult(b, cd_conj(c))
    return np.concatenate([first, second], axis=-1)


def pad_bands_pow2(img):
    img = np.asarray(img, dtype=float)
    L = img.shape[0]
    D = 1 << max(0, math.ceil(math.log2(L)))
    if D == L:
        return img
    return np.concatenate([img, np.zeros((D - L,) + img.shape[1:])], axis=0)


def _q2n_block(z, w):
    # z, w: (P, D) hypercomplex pixels
    if np.array_equal(z, w):
        return 1.0
    mz, mw = z.mean(axis=0), w.mean(axis=0)
    vz = np.mean(np.sum(z**2, axis=1)) - np.sum(mz**2)
    vw = np.mean(np.sum(w**2, axis=1)) - np.sum(mw**2)
    cov = np.mean(cd_mult(z, cd_conj(w)), axis=0) - cd_mult(mz, cd_conj(mw))
    nmz2, nmw2 = np.sum(mz**2), np.sum(mw**2)
    den = (vz + vw) * (nmz2 + nmw2)
    if den <= 0:
        return 0.0
    return 4.0 * np.linalg.norm(cov) * math.sqrt(nmz2 * nmw2) / den


def q2n(ref, test, block: int = 32, shift: int = 32) -> float:
    """Hypercomplex quality index Q2^n averaged over non-overlapping blocks.

    Bands are zero-padded to the next power of two; each pixel spectrum is
    then one Cayley-Dickson number.
    """
    ref, test = _pair(ref, test)
    ref = pad_bands_pow2(ref)
    test = pad_bands_pow2(test)
    D = ref.shape[0]
    vals = []
    for i in _block_starts(ref.shape[1], block, shift):
        for j in _block_starts(ref.shape[2], block, shift):
            z = ref[:, i : i + block, j : j + block].reshape(D, -1).T
            w = test[:, i : i + block, j : j + block].reshape(D, -1).T
            vals.append(_q2n_block(z, w))
    return float(np.mean(vals))


# --------------------------------------------------------------------------
# no-reference
# --------------------------------------------------------------------------


def d_lambda(fused, msi_lr, block: int = 32, shift: int = 32) -> float:
    fused = np.asarray(fused, dtype=float)
    msi_lr = np.asarray(msi_lr, dtype=float)
    L = fused.shape[0]
    if msi_lr.shape[0] != L:
        raise ValueError("fused and LR MSI band counts differ")
    if L < 2:
        return 0.0
    total = 0.0
    for l in range(L):
        for k in range(l + 1, L):
            total += abs(uiqi(fused[l], fused[k], block, shift) - uiqi(msi_lr[l], msi_lr[k], block, shift))
    return 2.0 * total / (L * (L - 1))


def d_s(fused, msi_lr, pan, pan_lr, block: int = 32, shift: int = 32) -> float:
    fused = np.asarray(fused, dtype=float)
    msi_lr = np.asarray(msi_lr, dtype=float)
    pan = np.asarray(pan, dtype=float).squeeze()
    pan_lr = np.asarray(pan_lr, dtype=float).squeeze()
    if fused.shape[1:] != pan.shape or msi_lr.shape[1:] != pan_lr.shape:
        raise ValueError("PAN / MSI sizes are inconsistent")
    L = fused.shape[0]
    total = sum(
        abs(uiqi(fused[l], pan, block, shift) - uiqi(msi_lr[l], pan_lr, block, shift)) for l in range(L)
    )
    return total / L


def qnr(fused, msi_lr, pan, pan_lr, block: int = 32, shift: int = 32):
    """Returns ``(d_lambda, d_s, qnr)`` with unit exponents."""
    fused = np.asarray(fused, dtype=float)
    msi_lr = np.asarray(msi_lr, dtype=float)
    pan = np.asarray(pan, dtype=float).squeeze()
    pan_lr = np.asarray(pan_lr, dtype=float).squeeze()
    if fused.shape[0] != msi_lr.shape[0]:
        raise ValueError("fused and LR MSI band counts differ")
    if fused.shape[1:] != pan.shape:
        raise ValueError(f"fused {fused.shape[1:]} and PAN {pan.shape} differ in size")
    if msi_lr.shape[1:] != pan_lr.shape:
        raise ValueError(f"LR MSI {msi_lr.shape[1:]} and LR PAN {pan_lr.shape} differ in size")
    dl = d_lambda(fused, msi_lr, block, shift)
    ds = d_s(fused, msi_lr, pan, pan_lr, block, shift)
    return dl, ds, (1.0 - dl) * (1.0 - ds)


@dataclass
class MetricsReport:
    psnr: float | None = None
    sam: float | None = None
    ergas: float | None = None
    q2n: float | None = None
    d_lambda: float | None = None
    d_s: float | None = None
    qnr: float | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def reduced_resolution(ref, test, r: int, block: int = 32, shift: int = 32) -> MetricsReport:
    ref, test = _pair(ref, test)
    block = min(block, ref.shape[1], ref.shape[2])
    shift = min(shift, block)
    return MetricsReport(
        psnr=psnr(ref, test),
        sam=sam(ref, test),
        ergas=ergas(ref, test, r),
        q2n=q2n(ref, test, block, shift),
    )


def full_resolution(fused, msi_lr, pan, pan_lr, block: int = 32, shift: int = 32) -> MetricsReport:
    dl, ds, q = qnr(fused, msi_lr, pan, pan_lr, block, shift)
    return MetricsReport(d_lambda=dl, d_s=ds, qnr=q)


_COLUMNS = [("psnr", "PSNR"), ("sam", "SAM"), ("ergas", "ERGAS"), ("q2n", "Q2^n"),
            ("d_lambda", "D_lambda"), ("d_s", "D_S"), ("qnr", "QNR")]


def format_table(rows: dict[str, MetricsReport]) -> str:
    """Aligned plain-text table, one row per method, one column per metric present."""
    present = [(k, h) for k, h in _COLUMNS if any(getattr(r, k) is not None for r in rows.values())]
    name_w = max([len("Method")] + [len(n) for n in rows])
    header = "Method".ljust(name_w) + " | " + " | ".join(h.rjust(9) for _, h in present)
    lines = [header, "-" * len(header)]
    for name, rep in rows.items():
        cells = []
        for k, _ in present:
            v = getattr(rep, k)
            cells.append(("-" if v is None else f"{v:.4f}").rjust(9))
        lines.append(name.ljust(name_w) + " | " + " | ".join(cells))
    return "\n".join(lines)
