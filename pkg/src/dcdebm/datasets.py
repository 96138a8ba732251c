"""Synthetic 2-D densities and an IDX image reader.

Generator constants (all samples are i.i.d.):

============  ==============================================================
swissroll     t = 1.5 pi (1 + 2u), (t cos t, t sin t) * 4 / (4.5 pi), noise 0.1
circles       radius 1 or 2 with equal weight, radial-isotropic noise 0.08
rings         radius in {0.5, 1, 1.5, 2} with equal weight, noise 0.05
moons         upper half circle (cos a, sin a) and lower (1 - cos a, 0.5 - sin a), noise 0.08
8gaussians    centres 2 (cos 2 pi k/8, sin 2 pi k/8), std 0.2
2spirals      r = a / (3 pi), a ~ U(0, 3 pi), (r cos a, r sin a) and its negation, noise 0.05
checkerboard  x1 ~ U(-4, 4), x2 uniform over the unit cells with floor(x1+4) + floor(x2+4) even
============  ==============================================================
"""

from __future__ import annotations

import gzip
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DATASETS_2D = ("swissroll", "circles", "rings", "moons", "8gaussians", "2spirals", "checkerboard")


def _polar(r, a):
    return np.stack([r * np.cos(a), r * np.sin(a)], axis=1)


def sample_2d(name: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` samples of the named toy density as an (n, 2) array."""
    if n < 0:
        raise ValueError("n must be non-negative")
    if name == "swissroll":
        t = 1.5 * np.pi * (1.0 + 2.0 * rng.uniform(size=n))
        x = _polar(t, t) * (4.0 / (4.5 * np.pi))
        return x + 0.1 * rng.standard_normal((n, 2))
    if name == "circles":
        r = rng.choice([1.0, 2.0], size=n)
        return _polar(r, rng.uniform(0, 2 * np.pi, n)) + 0.08 * rng.standard_normal((n, 2))
    if name == "rings":
        r = rng.choice([0.5, 1.0, 1.5, 2.0], size=n)
        return _polar(r, rng.uniform(0, 2 * np.pi, n)) + 0.05 * rng.standard_normal((n, 2))
    if name == "moons":
        a = rng.uniform(0, np.pi, n)
        upper = rng.uniform(size=n) < 0.5
        x = np.where(upper[:, None],
                     np.stack([np.cos(a), np.sin(a)], axis=1),
                     np.stack([1.0 - np.cos(a), 0.5 - np.sin(a)], axis=1))
        return x + 0.08 * rng.standard_normal((n, 2))
    if name == "8gaussians":
        k = rng.integers(0, 8, n)
        return _polar(np.full(n, 2.0), 2 * np.pi * k / 8) + 0.2 * rng.standard_normal((n, 2))
    if name == "2spirals":
        a = rng.uniform(0, 3 * np.pi, n)
        x = _polar(a / (3 * np.pi), a)
        sign = np.where(rng.uniform(size=n) < 0.5, 1.0, -1.0)
        return sign[:, None] * x + 0.05 * rng.standard_normal((n, 2))
    if name == "checkerboard":
        x1 = rng.uniform(-4, 4, n)
        col = np.floor(x1 + 4).astype(int)
        row = 2 * rng.integers(0, 4, n) + (col % 2)
        x2 = row - 4 + rng.uniform(size=n)
        return np.stack([x1, x2], axis=1)
    raise ValueError(f"unknown dataset {name!r}; choose from {', '.join(DATASETS_2D)}")


def write_csv(path, x) -> Path:
    """Write 2-D samples as comma-separated text with header ``x1,x2``."""
    path = Path(path)
    np.savetxt(path, np.asarray(x), delimiter=",", header="x1,x2", comments="", fmt="%.17g")
    return path


def read_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


# ---------------------------------------------------------------------------
# IDX

_IDX_DTYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
_MAX_ELEMENTS = 2 ** 31


class IdxFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ImageSet:
    """Flattened images in [-1, 1] (plus noise when preprocessed)."""

    images: np.ndarray
    labels: np.ndarray | None = None
    sigma_pre: float = 0.0
    shape: tuple = ()

    def __len__(self):
        return len(self.images)


def _open(path):
    path = Path(path)
    raw = path.read_bytes()
    return gzip.decompress(raw) if path.suffix == ".gz" else raw


def read_idx(path) -> np.ndarray:
    """Parse an IDX container into an array of its declared dtype and shape."""
    data = _open(path)
    if len(data) < 4:
        raise IdxFormatError(f"{path}: truncated header")
    if data[0] != 0 or data[1] != 0 or data[2] not in _IDX_DTYPES:
        raise IdxFormatError(f"{path}: bad magic {data[:4].hex()}")
    ndim = data[3]
    header = 4 + 4 * ndim
    if ndim == 0 or len(data) < header:
        raise IdxFormatError(f"{path}: truncated dimension header")
    dims = tuple(int.from_bytes(data[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim))
    count = 1
    for d in dims:
        count *= d
        if count > _MAX_ELEMENTS:
            raise IdxFormatError(f"{path}: dimensions {dims} overflow")
    dtype = np.dtype(_IDX_DTYPES[data[2]])
    need = header + count * dtype.itemsize
    if len(data) < need:
        raise IdxFormatError(f"{path}: truncated payload ({len(data)} < {need} bytes)")
    return np.frombuffer(data, dtype=dtype, count=count, offset=header).reshape(dims)


def write_idx(path, array, dtype_code: int = 0x08) -> Path:
    """Write ``array`` as IDX (unsigned bytes by default)."""
    array = np.asarray(array)
    out = bytearray([0, 0, dtype_code, array.ndim])
    for d in array.shape:
        out += int(d).to_bytes(4, "big")
    out += array.astype(_IDX_DTYPES[dtype_code]).tobytes()
    path = Path(path)
    payload = gzip.compress(bytes(out)) if path.suffix == ".gz" else bytes(out)
    path.write_bytes(payload)
    return path


def load_idx(path, labels_path=None, preprocess: bool = True, sigma_pre: float = 0.3,
             rng: np.random.Generator | None = None, limit: int | None = None) -> ImageSet:
    """Load an image IDX file, scale pixels to [-1, 1] and optionally add N(0, sigma_pre^2) noise."""
    raw = read_idx(path)
    if raw.ndim < 2:
        raise IdxFormatError(f"{path}: expected an image tensor, got {raw.ndim} dimension(s)")
    if limit is not None:
        raw = raw[:limit]
    shape = raw.shape[1:]
    x = raw.reshape(len(raw), -1).astype(np.float64)
    hi = 255.0 if raw.dtype == np.dtype(">u1") else max(float(np.abs(x).max()), 1.0)
    x = x / hi * 2.0 - 1.0 if raw.dtype == np.dtype(">u1") else x / hi
    labels = None
    if labels_path is not None:
        labels = read_idx(labels_path)[:len(x)].astype(np.int64)
    if preprocess and sigma_pre > 0:
        rng = rng if rng is not None else np.random.default_rng()
        x = x + sigma_pre * rng.standard_normal(x.shape)
    else:
        sigma_pre = 0.0
    return ImageSet(x, labels, sigma_pre, shape)
