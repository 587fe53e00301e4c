"""Grayscale raster I/O, synthetic phantoms and the preprocessing stage.

Images are plain 2-D ``float64`` arrays of shape ``(height, width)`` holding
intensities in ``[0, 1]``; label masks are ``uint8`` arrays of the same shape
holding 0/1.  The helpers :func:`as_gray` and :func:`as_mask` validate those
conventions at module boundaries.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ImageFormatError",
    "UnsupportedFormatError",
    "MalformedHeaderError",
    "TruncatedDataError",
    "Nodule",
    "PhantomSpec",
    "as_gray",
    "as_mask",
    "load_pgm",
    "save_pgm",
    "save_ppm",
    "load_ppm",
    "generate_phantom",
    "random_phantom_spec",
    "median_filter",
    "intensity_window",
    "gamma_correct",
    "overlay_mask",
]


class ImageFormatError(ValueError):
    """Base class for raster parsing failures."""


class UnsupportedFormatError(ImageFormatError):
    pass


class MalformedHeaderError(ImageFormatError):
    pass


class TruncatedDataError(ImageFormatError):
    pass


def as_gray(image) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {arr.shape}")
    if arr.size and (not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError("image intensities must lie in [0, 1]")
    return arr


def as_mask(mask) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D mask, got shape {arr.shape}")
    if arr.dtype == bool:
        return arr.astype(np.uint8)
    if arr.size and not np.all((arr == 0) | (arr == 1)):
        raise ValueError("mask labels must be exactly 0 or 1")
    return arr.astype(np.uint8)


def _check_same_shape(*arrays: np.ndarray) -> None:
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"dimension mismatch: {sorted(shapes)}")


# --------------------------------------------------------------------------
# Netpbm I/O
# --------------------------------------------------------------------------

def _read_header(data: bytes, magic: bytes) -> tuple[list[int], int]:
    """Parse ``width height maxval`` after the magic number.

    Returns the three integers and the offset of the first raster byte.
    """
    if data[:2] != magic:
        found = data[:2].decode("latin-1", errors="replace")
        raise UnsupportedFormatError(f"unsupported format {found!r}, expected {magic.decode()}")
    pos = 2
    values: list[int] = []
    n = len(data)
    while len(values) < 3:
        if pos >= n:
            raise MalformedHeaderError("header ended before width/height/maxval")
        ch = data[pos:pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise MalformedHeaderError("unterminated comment in header")
            pos = end + 1
        elif ch.isdigit():
            start = pos
            while pos < n and data[pos:pos + 1].isdigit():
                pos += 1
            values.append(int(data[start:pos]))
        else:
            raise MalformedHeaderError(f"unexpected byte {ch!r} in header")
    if pos >= n or not data[pos:pos + 1].isspace():
        raise MalformedHeaderError("missing whitespace after maxval")
    pos += 1
    width, height, maxval = values
    if width <= 0 or height <= 0:
        raise MalformedHeaderError(f"invalid dimensions {width}x{height}")
    if not 0 < maxval < 65536:
        raise MalformedHeaderError(f"invalid maxval {maxval}")
    return values, pos


def _read_raster(path, magic: bytes, channels: int) -> tuple[np.ndarray, int]:
    data = Path(path).read_bytes()  # FileNotFoundError propagates as-is
    (width, height, maxval), offset = _read_header(data, magic)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    payload = data[offset:]
    if len(payload) < count * dtype.itemsize:
        raise TruncatedDataError(
            f"expected {count * dtype.itemsize} pixel bytes, found {len(payload)}"
        )
    raw = np.frombuffer(payload, dtype=dtype, count=count)
    shape = (height, width) if channels == 1 else (height, width, channels)
    return raw.reshape(shape), maxval


def load_pgm(path) -> np.ndarray:
    """Read a binary (P5) PGM into a float image normalized by maxval."""
    raw, maxval = _read_raster(path, b"P5", 1)
    return raw.astype(np.float64) / maxval


def load_ppm(path) -> np.ndarray:
    """Read a binary (P6) PPM into a ``(h, w, 3)`` float raster."""
    raw, maxval = _read_raster(path, b"P6", 3)
    return raw.astype(np.float64) / maxval


def _quantize(values: np.ndarray, bit_depth: int) -> tuple[np.ndarray, int]:
    if bit_depth not in (8, 16):
        raise ValueError("bit depth must be 8 or 16")
    maxval = 255 if bit_depth == 8 else 65535
    # round half up
    q = np.floor(values * maxval + 0.5).astype(np.int64)
    dtype = np.dtype("u1") if bit_depth == 8 else np.dtype(">u2")
    return np.clip(q, 0, maxval).astype(dtype), maxval


def _write_raster(path, magic: bytes, raster: np.ndarray, bit_depth: int) -> None:
    q, maxval = _quantize(raster, bit_depth)
    height, width = raster.shape[:2]
    header = b"%s\n%d %d\n%d\n" % (magic, width, height, maxval)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(q.tobytes())


def save_pgm(image, path, bit_depth: int = 8) -> None:
    _write_raster(path, b"P5", as_gray(image), bit_depth)


def save_ppm(rgb, path, bit_depth: int = 8) -> None:
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected an (h, w, 3) raster, got shape {rgb.shape}")
    _write_raster(path, b"P6", rgb, bit_depth)


# --------------------------------------------------------------------------
# Phantoms
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Nodule:
    center_x: float
    center_y: float
    radius: float
    intensity: float


@dataclass(frozen=True)
class PhantomSpec:
    width: int
    height: int
    nodules: tuple[Nodule, ...] = field(default_factory=tuple)
    background_intensity: float = 0.25
    gaussian_noise_sigma: float = 0.0
    salt_pepper_fraction: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "nodules", tuple(self.nodules))
        if self.width <= 0 or self.height <= 0:
            raise ValueError("phantom dimensions must be positive")
        if not 0.0 <= self.background_intensity <= 1.0:
            raise ValueError("background-intensity must lie in [0, 1]")
        if self.gaussian_noise_sigma < 0:
            raise ValueError("gaussian-noise-sigma must be non-negative")
        if not 0.0 <= self.salt_pepper_fraction <= 1.0:
            raise ValueError("salt-pepper-fraction must lie in [0, 1]")
        for nod in self.nodules:
            if nod.radius < 0:
                raise ValueError("nodule radius must be non-negative")
            if not (0 <= nod.center_x <= self.width - 1 and 0 <= nod.center_y <= self.height - 1):
                raise ValueError(f"nodule center ({nod.center_x}, {nod.center_y}) outside image")
            if not 0.0 <= nod.intensity <= 1.0:
                raise ValueError("nodule intensity must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "nodules": [
                {k.replace("_", "-"): v for k, v in asdict(n).items()} for n in self.nodules
            ],
            "background-intensity": self.background_intensity,
            "gaussian-noise-sigma": self.gaussian_noise_sigma,
            "salt-pepper-fraction": self.salt_pepper_fraction,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PhantomSpec":
        nodules = []
        for item in doc.get("nodules", []):
            if isinstance(item, dict):
                nodules.append(Nodule(
                    float(item["center-x"]), float(item["center-y"]),
                    float(item["radius"]), float(item["intensity"]),
                ))
            else:
                nodules.append(Nodule(*map(float, item)))
        return cls(
            width=int(doc["width"]),
            height=int(doc["height"]),
            nodules=tuple(nodules),
            background_intensity=float(doc.get("background-intensity", 0.25)),
            gaussian_noise_sigma=float(doc.get("gaussian-noise-sigma", 0.0)),
            salt_pepper_fraction=float(doc.get("salt-pepper-fraction", 0.0)),
        )

    @classmethod
    def load(cls, path) -> "PhantomSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def generate_phantom(spec: PhantomSpec, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Render ``spec`` into an (image, ground-truth mask) pair.

    Disks include every pixel center whose squared distance to the nodule
    center is at most ``radius**2``.  Noise touches the image only; the mask
    stays exact.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:spec.height, 0:spec.width]
    image = np.full((spec.height, spec.width), spec.background_intensity, dtype=np.float64)
    mask = np.zeros((spec.height, spec.width), dtype=np.uint8)
    for nod in spec.nodules:
        disk = (xx - nod.center_x) ** 2 + (yy - nod.center_y) ** 2 <= nod.radius ** 2
        image[disk] = nod.intensity
        mask[disk] = 1
    if spec.gaussian_noise_sigma > 0:
        image = np.clip(image + rng.normal(0.0, spec.gaussian_noise_sigma, image.shape), 0.0, 1.0)
    if spec.salt_pepper_fraction > 0:
        hit = rng.random(image.shape) < spec.salt_pepper_fraction
        salt = rng.random(image.shape) < 0.5
        image = np.where(hit, np.where(salt, 1.0, 0.0), image)
    return image, mask


def random_phantom_spec(
    rng: np.random.Generator,
    width: int = 64,
    height: int = 64,
    radius_range: tuple[int, int] = (6, 12),
    nodule_intensity: float = 0.75,
    background_intensity: float = 0.25,
    gaussian_noise_sigma: float = 0.05,
    salt_pepper_fraction: float = 0.02,
) -> PhantomSpec:
    """Draw a single-nodule spec with the disk fully inside the frame."""
    lo, hi = radius_range
    radius = int(rng.integers(lo, hi + 1))
    margin = radius + 1
    if 2 * margin >= min(width, height):
        raise ValueError("image too small for the requested radius range")
    cx = int(rng.integers(margin, width - margin))
    cy = int(rng.integers(margin, height - margin))
    return PhantomSpec(
        width, height, (Nodule(cx, cy, radius, nodule_intensity),),
        background_intensity, gaussian_noise_sigma, salt_pepper_fraction,
    )


# --------------------------------------------------------------------------
# Preprocessing
# --------------------------------------------------------------------------

def median_filter(image, radius: int = 1) -> np.ndarray:
    """Median over a ``(2r+1) x (2r+1)`` window with replicate padding."""
    image = as_gray(image)
    if int(radius) != radius or radius < 1:
        raise ValueError("median filter radius must be an integer >= 1")
    radius = int(radius)
    size = 2 * radius + 1
    padded = np.pad(image, radius, mode="edge")
    windows = sliding_window_view(padded, (size, size)).reshape(*image.shape, size * size)
    mid = (size * size) // 2
    return np.partition(windows, mid, axis=-1)[..., mid].copy()


def intensity_window(image, level: float = 0.5, width: float = 1.0) -> np.ndarray:
    """Linear window/level stretch clamped to [0, 1]."""
    image = as_gray(image)
    if not width > 0:
        raise ValueError("window width must be positive")
    return np.clip((image - (level - width / 2.0)) / width, 0.0, 1.0)


def gamma_correct(image, gamma: float = 1.0) -> np.ndarray:
    image = as_gray(image)
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    return np.power(image, gamma)


def overlay_mask(image, mask) -> np.ndarray:
    """Gray image replicated to RGB with masked pixels pushed to full red."""
    image = as_gray(image)
    mask = as_mask(mask)
    _check_same_shape(image, mask)
    rgb = np.repeat(image[..., None], 3, axis=2)
    rgb[mask == 1, 0] = 1.0
    return rgb


def ensure_dir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {path}: {exc}") from exc
    if not os.access(path, os.W_OK):
        raise PermissionError(f"output directory {path} is not writable")
    return path
