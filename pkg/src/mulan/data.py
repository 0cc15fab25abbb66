"""Synthetic image datasets and the MLTN tensor container.

Every kind starts from the same blob images.  The transforms split the data
into two equally likely classes (low/high frequency, dim/bright, top/bottom
masked), which is what a z-conditioned schedule can exploit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

KINDS = ("blobs", "frequency-split", "intensity", "mask")
MAGIC = b"MLTN"
VERSION = 1
_U32_MAX = 2**32 - 1


class ContainerError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "blobs"
    H: int = 8
    W: int = 8
    C: int = 1
    n_train: int = 1024
    n_eval: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}; expected one of {KINDS}")
        if min(self.H, self.W, self.C) < 1:
            raise ValueError("image dimensions must be positive")
        if self.n_train < 1 or self.n_eval < 1:
            raise ValueError("dataset counts must be >= 1")

    @property
    def d(self) -> int:
        return self.H * self.W * self.C


@dataclass
class Dataset:
    train: np.ndarray
    eval: np.ndarray
    train_labels: np.ndarray
    eval_labels: np.ndarray


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix; ``D @ x`` transforms a length-n signal."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    D = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    D[0] /= np.sqrt(2.0)
    return D


def dct2(img: np.ndarray) -> np.ndarray:
    """2-D DCT-II over the leading (H, W) axes."""
    Dh, Dw = dct_matrix(img.shape[0]), dct_matrix(img.shape[1])
    return np.einsum("ah,hwc,bw->abc", Dh, img, Dw)


def idct2(coef: np.ndarray) -> np.ndarray:
    Dh, Dw = dct_matrix(coef.shape[0]), dct_matrix(coef.shape[1])
    return np.einsum("ah,abc,bw->hwc", Dh, coef, Dw)


def low_quadrant(H, W) -> np.ndarray:
    return (np.arange(H)[:, None] < (H + 1) // 2) & (np.arange(W)[None, :] < (W + 1) // 2)


def _normalize(img):
    lo, hi = img.min(), img.max()
    if hi - lo < 1e-12:
        return np.zeros_like(img)
    return 2.0 * (img - lo) / (hi - lo) - 1.0


def _blob(rng, H, W, C):
    yy, xx = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    img = np.zeros((H, W, C))
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0, H - 1), rng.uniform(0, W - 1)
        s = rng.uniform(0.6, 0.3 * max(H, W))
        amp = rng.uniform(0.5, 1.0) * rng.choice([-1.0, 1.0])
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        img += amp * bump[..., None] * rng.uniform(0.5, 1.0, size=C)
    return _normalize(img)


def _frequency(img, low, lowq):
    coef = dct2(img)
    if low:
        coef[~lowq] = 0.0  # keep the low quadrant only
    else:
        coef[lowq] = 0.0
    out = idct2(coef)
    peak = np.abs(out).max()
    return out / peak if peak > 1e-12 else out


def _one(rng, spec: DatasetSpec):
    img = _blob(rng, spec.H, spec.W, spec.C)
    if spec.kind == "blobs":
        return img, 0
    label = int(rng.random() < 0.5)
    if spec.kind == "frequency-split":
        # label 1 keeps the low quadrant, label 0 the high-frequency rest
        return _frequency(img, bool(label), low_quadrant(spec.H, spec.W)), label
    if spec.kind == "intensity":
        return (0.5 * img if label == 0 else 0.5 * img + 0.5), label
    out = img.copy()
    half = spec.H // 2
    if label == 0:
        out[:half] = 0.0
    else:
        out[spec.H - half :] = 0.0
    return out, label


def generate(spec: DatasetSpec) -> Dataset:
    """Deterministic train/eval split, flattened to ``(n, H*W*C)`` float32 in [-1, 1]."""
    rng = np.random.default_rng(spec.seed)
    n = spec.n_train + spec.n_eval
    imgs = np.empty((n, spec.d), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        img, labels[i] = _one(rng, spec)
        imgs[i] = np.clip(img, -1.0, 1.0).reshape(-1)
    return Dataset(imgs[: spec.n_train], imgs[spec.n_train :], labels[: spec.n_train], labels[spec.n_train :])


def low_energy_fraction(img_flat, spec: DatasetSpec) -> float:
    coef = dct2(np.asarray(img_flat, dtype=np.float64).reshape(spec.H, spec.W, spec.C))
    e = coef**2
    total = e.sum()
    return float(e[low_quadrant(spec.H, spec.W)].sum() / total) if total > 0 else 0.0


# -- container --------------------------------------------------------------


def write_container(path, tensor) -> None:
    arr = np.asarray(tensor, dtype="<f4")
    if arr.ndim == 0 or arr.size == 0:
        raise ContainerError("container needs at least one non-empty dimension")
    if arr.ndim > 0xFFFF:
        raise ContainerError("rank does not fit in u16")
    if any(n > _U32_MAX for n in arr.shape):
        raise ContainerError("dimension does not fit in u32")
    header = MAGIC + struct.pack("<HH", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(arr).tobytes())


def read_container(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise ContainerError(f"{path}: bad magic")
    version, rank = struct.unpack_from("<HH", raw, 4)
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported version {version}")
    if rank == 0:
        raise ContainerError(f"{path}: empty dims")
    end = 8 + 4 * rank
    if len(raw) < end:
        raise ContainerError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", raw, 8)
    if 0 in dims:
        raise ContainerError(f"{path}: zero-sized dimension")
    count = 1
    for n in dims:
        count *= n
        if count * 4 > len(raw):
            raise ContainerError(f"{path}: dims overflow the payload")
    if len(raw) - end != 4 * count:
        raise ContainerError(f"{path}: truncated payload (expected {4 * count} bytes, found {len(raw) - end})")
    return np.frombuffer(raw, dtype="<f4", offset=end).reshape(dims).astype(np.float32)
