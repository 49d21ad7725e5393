"""Deterministic synthetic datasets and the on-disk dataset format.

All randomness comes from numpy's PCG64 bit generator (``np.random.default_rng``),
whose streams are reproducible across platforms for a given seed.

Dataset file layout (little-endian)::

    offset  size        field
    0       4           magic b"FSQD"
    4       2           u16 format version (1)
    6       8           u64 sample count N
    14      4           u32 class count
    18      1           u8 ndim of one input
    19      4*ndim      u32 input dims
    ...     8*N*prod    f64 inputs, row-major
    ...     8*N         i64 labels
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError
from .partition import Dataset

GENERATORS = ("blobs", "rings", "shifted_blobs")

MAGIC = b"FSQD"
VERSION = 1


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a synthetic classification set.

    ``center_seed`` fixes the class geometry independently of the sample
    noise, so source and target sets can share classes but not samples.
    """

    generator: str = "blobs"
    n_samples: int = 1000
    n_classes: int = 10
    input_shape: tuple = (16,)
    noise_sigma: float = 1.0
    seed: int = 0
    domain_shift: float = 0.0
    center_scale: float = 3.0
    center_seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if self.generator not in GENERATORS:
            raise ConfigurationError(f"generator must be one of {GENERATORS}, got {self.generator!r}")
        if self.n_classes < 2:
            raise ConfigurationError("n_classes must be >= 2")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be >= 0")
        if self.n_samples < 1 or any(d < 1 for d in self.input_shape):
            raise ConfigurationError("n_samples and input dims must be positive")
        if self.generator != "shifted_blobs" and self.domain_shift:
            raise ConfigurationError("domain_shift only applies to shifted_blobs")


def _balanced_labels(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % k)


def generate(spec: SyntheticSpec) -> Dataset:
    d = int(np.prod(spec.input_shape))
    center_rng = np.random.default_rng(spec.seed if spec.center_seed is None else spec.center_seed)
    rng = np.random.default_rng([spec.seed, 1])
    labels = _balanced_labels(spec.n_samples, spec.n_classes, rng)
    noise = rng.standard_normal((spec.n_samples, d))

    if spec.generator == "rings":
        # class c lives on the sphere of radius (c + 1) * center_scale / n_classes
        direction = noise / np.maximum(np.linalg.norm(noise, axis=1, keepdims=True), 1e-12)
        radius = (labels + 1) * spec.center_scale / spec.n_classes
        jitter = rng.standard_normal(spec.n_samples) * spec.noise_sigma
        x = direction * (radius + jitter)[:, None]
    else:
        centers = center_rng.standard_normal((spec.n_classes, d)) * spec.center_scale
        if spec.generator == "shifted_blobs":
            centers = centers + spec.domain_shift * np.ones(d) / np.sqrt(d)
        x = centers[labels] + spec.noise_sigma * noise
    return Dataset(x.reshape(spec.n_samples, *spec.input_shape), labels, spec.n_classes)


def store(data: Dataset, path) -> None:
    shape = data.input_shape
    header = MAGIC + struct.pack("<HQIB", VERSION, len(data), data.class_count, len(shape))
    header += struct.pack(f"<{len(shape)}I", *shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(data.inputs, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(data.labels, dtype="<i8").tobytes())


def load(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < 19:
        raise FormatError(f"{path}: header truncated at byte offset {len(raw)} (need 19)")
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic at byte offset 0")
    version, n, k, ndim = struct.unpack_from("<HQIB", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte offset 4")
    pos = 19
    if len(raw) < pos + 4 * ndim:
        raise FormatError(f"{path}: shape record truncated at byte offset {len(raw)}")
    shape = struct.unpack_from(f"<{ndim}I", raw, pos)
    pos += 4 * ndim
    per = int(np.prod(shape)) if ndim else 1
    expected = pos + 8 * n * per + 8 * n
    if len(raw) != expected:
        raise FormatError(
            f"{path}: header declares {n} samples ({expected} bytes) but file has "
            f"{len(raw)} bytes; mismatch at byte offset {min(len(raw), expected)}"
        )
    if k < 1:
        raise FormatError(f"{path}: class count must be positive (byte offset 14)")
    x = np.frombuffer(raw, dtype="<f8", count=n * per, offset=pos).reshape(n, *shape)
    y = np.frombuffer(raw, dtype="<i8", count=n, offset=pos + 8 * n * per)
    if n and (y.min() < 0 or y.max() >= k):
        raise FormatError(f"{path}: label out of range in block at byte offset {pos + 8 * n * per}")
    return Dataset(x.astype(np.float64), y.astype(np.int64), int(k))
