"""Raster container and the sidecar file format.

A raster named ``scene`` on disk is two files:

* ``scene.json`` -- header with ``width, height, bands, dtype, layout,
  endianness`` and optional ``band_names`` / ``resolution_m``;
* ``scene.f32`` -- little-endian float32 samples, band-sequential, each band
  row-major.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DTYPE_TAG = "f32"
LAYOUT_TAG = "bsq"
ENDIAN_TAG = "little"
_REQUIRED = ("width", "height", "bands", "dtype", "layout", "endianness")
_OPTIONAL = ("band_names", "resolution_m")


class RasterError(Exception):
    pass


class MissingFileError(RasterError):
    def __init__(self, path):
        super().__init__(f"missing raster file: {path}")
        self.path = Path(path)


class HeaderError(RasterError):
    def __init__(self, field_name, detail):
        super().__init__(f"bad header field '{field_name}': {detail}")
        self.field = field_name


class SizeMismatchError(RasterError):
    def __init__(self, expected, actual):
        super().__init__(f"data holds {actual} bytes, header requires {expected}")
        self.expected = expected
        self.actual = actual


class NonFiniteError(RasterError):
    def __init__(self, offset):
        super().__init__(f"non-finite sample at offset {offset}")
        self.offset = offset


@dataclass(frozen=True, eq=False)
class RasterImage:
    """``data`` is ``(bands, height, width)``."""

    data: np.ndarray
    band_names: tuple[str, ...] | None = None
    resolution_m: float | None = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"raster data must be (bands, height, width), got {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        bad = np.flatnonzero(~np.isfinite(data.ravel()))
        if bad.size:
            raise NonFiniteError(int(bad[0]))
        if self.band_names is not None:
            names = tuple(str(n) for n in self.band_names)
            if len(names) != data.shape[0]:
                raise ValueError(f"{len(names)} band names for {data.shape[0]} bands")
            object.__setattr__(self, "band_names", names)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def samples(self) -> np.ndarray:
        return self.data.ravel()

    def header(self) -> dict:
        h = {"width": self.width, "height": self.height, "bands": self.bands,
             "dtype": DTYPE_TAG, "layout": LAYOUT_TAG, "endianness": ENDIAN_TAG}
        if self.band_names is not None:
            h["band_names"] = list(self.band_names)
        if self.resolution_m is not None:
            h["resolution_m"] = self.resolution_m
        return h


def raster_paths(path) -> tuple[Path, Path]:
    """Header and data paths for a raster base name (a ``.json``/``.f32`` suffix is stripped)."""
    p = Path(path)
    if p.suffix in (".json", ".f32"):
        p = p.with_suffix("")
    return p.parent / (p.name + ".json"), p.parent / (p.name + ".f32")


def _parse_header(text) -> dict:
    try:
        h = json.loads(text)
    except json.JSONDecodeError as exc:
        raise HeaderError("<json>", str(exc)) from None
    if not isinstance(h, dict):
        raise HeaderError("<json>", "header must be a JSON object")
    for key in _REQUIRED:
        if key not in h:
            raise HeaderError(key, "missing")
    unknown = set(h) - set(_REQUIRED) - set(_OPTIONAL)
    if unknown:
        raise HeaderError(sorted(unknown)[0], "unknown field")
    for key in ("width", "height", "bands"):
        v = h[key]
        if not isinstance(v, int) or isinstance(v, bool) or v < 1:
            raise HeaderError(key, f"must be a positive integer, got {v!r}")
    for key, tag in (("dtype", DTYPE_TAG), ("layout", LAYOUT_TAG), ("endianness", ENDIAN_TAG)):
        if h[key] != tag:
            raise HeaderError(key, f"must be {tag!r}, got {h[key]!r}")
    names = h.get("band_names")
    if names is not None and (not isinstance(names, list) or len(names) != h["bands"]
                              or not all(isinstance(n, str) for n in names)):
        raise HeaderError("band_names", "must be a list of one string per band")
    res = h.get("resolution_m")
    if res is not None and (isinstance(res, bool) or not isinstance(res, (int, float)) or res <= 0):
        raise HeaderError("resolution_m", f"must be a positive number, got {res!r}")
    return h


def load_raster(path) -> RasterImage:
    header_path, data_path = raster_paths(path)
    for p in (header_path, data_path):
        if not p.is_file():
            raise MissingFileError(p)
    h = _parse_header(header_path.read_text())
    raw = data_path.read_bytes()
    n = h["width"] * h["height"] * h["bands"]
    if len(raw) != 4 * n:
        raise SizeMismatchError(4 * n, len(raw))
    samples = np.frombuffer(raw, dtype="<f4")
    bad = np.flatnonzero(~np.isfinite(samples))
    if bad.size:
        raise NonFiniteError(int(bad[0]))
    data = samples.astype(np.float32).reshape(h["bands"], h["height"], h["width"])
    names = tuple(h["band_names"]) if h.get("band_names") is not None else None
    return RasterImage(data, names, h.get("resolution_m"))


def save_raster(img, path) -> None:
    """Write header and data; accepts a RasterImage or a ``(bands, H, W)`` array."""
    if not isinstance(img, RasterImage):
        img = RasterImage(np.asarray(img))
    header_path, data_path = raster_paths(path)
    payload = np.ascontiguousarray(img.data, dtype="<f4").tobytes()
    try:
        header_path.write_text(json.dumps(img.header(), indent=2) + "\n")
        data_path.write_bytes(payload)
    except OSError as exc:
        raise RasterError(f"cannot write raster at {header_path.parent}: {exc}") from exc


NORMALIZE_MODES = ("global-max", "per-band-max", "fixed-peak")


def normalize(img, mode: str = "global-max", peak: float | None = None):
    """Scale non-negative samples into [0, 1]; returns the same type it was given."""
    is_raster = isinstance(img, RasterImage)
    data = np.asarray(img.data if is_raster else img, dtype=float)
    if data.size == 0:
        raise ValueError("empty image")
    if data.min() < 0:
        raise ValueError("normalize expects non-negative samples")
    if mode == "global-max":
        scale = data.max()
        if scale == 0:
            raise ValueError("all-zero image has no scale")
        out = data / scale
    elif mode == "per-band-max":
        stack = data if data.ndim == 3 else data[None]
        scale = stack.reshape(stack.shape[0], -1).max(axis=1)
        if np.any(scale == 0):
            raise ValueError(f"band {int(np.argmin(scale))} is all zero; no scale")
        out = (stack / scale[:, None, None]).reshape(data.shape)
    elif mode == "fixed-peak":
        if peak is None or peak <= 0:
            raise ValueError("fixed-peak mode needs a positive peak")
        if data.max() > peak:
            raise ValueError(f"sample {data.max()} exceeds the declared peak {peak}")
        out = data / peak
    else:
        raise ValueError(f"unknown normalize mode {mode!r}")
    if is_raster:
        return RasterImage(out, img.band_names, img.resolution_m)
    return out


def stretch_channel(x, low_pct: float = 1.0, high_pct: float = 99.0) -> np.ndarray:
    """Linear 8-bit stretch between two percentiles; a flat channel becomes mid-gray."""
    x = np.asarray(x, dtype=float)
    lo, hi = np.percentile(x, [low_pct, high_pct])
    if hi <= lo:
        return np.full(x.shape, 128, dtype=np.uint8)
    y = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    return np.round(255.0 * y).astype(np.uint8)


def preview_array(img, band_indices=(0, 1, 2)) -> np.ndarray:
    data = np.asarray(img.data if isinstance(img, RasterImage) else img)
    if data.ndim == 2:
        data = data[None]
    if len(band_indices) != 3:
        raise ValueError("a preview needs exactly three band indices")
    for i in band_indices:
        if not 0 <= i < data.shape[0]:
            raise IndexError(f"band index {i} out of range for {data.shape[0]} bands")
    return np.stack([stretch_channel(data[i]) for i in band_indices], axis=-1)


def export_preview(img, band_indices, path) -> None:
    """Write an 8-bit RGB PNG built from three bands."""
    from PIL import Image

    Image.fromarray(preview_array(img, band_indices), mode="RGB").save(path, format="PNG")
