"""Structural / quantitative parameter split.

A :class:`DualCopyModel` holds two copies of one network. The frozen
structural copy (``sk``) only decides which units are open for a given input;
the quantitative copy (``qk``) supplies the values that flow through the open
units. With the gates fixed the network is affine in its input, and training
``qk`` never moves the gates.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nncore
from .calibrate import Schedule
from .errors import ConfigurationError, ContractError, FormatError
from .nncore import Conv2d, Dense, ModelArch, ModelParams


@dataclass(frozen=True)
class DualCopyModel:
    arch: ModelArch
    sk: ModelParams
    qk: ModelParams
    schedule: Schedule

    def __post_init__(self):
        if len(self.schedule) != len(self.arch.param_layers):
            raise ConfigurationError(
                f"schedule covers {len(self.schedule)} layers, architecture has "
                f"{len(self.arch.param_layers)}"
            )
        for name, p in (("sk", self.sk), ("qk", self.qk)):
            if p.arch != self.arch:
                raise ConfigurationError(f"{name} parametrizes a different architecture")

    @property
    def trainable_layers(self) -> tuple:
        return nncore.resolve_trainable(self.arch, self.schedule)

    def num_trainable_scalars(self) -> int:
        """Only schedule-enabled QK tensors are trainable; SK never is."""
        return self.qk.num_scalars(self.trainable_layers)

    def num_stored_scalars(self) -> int:
        return self.sk.num_scalars() + self.qk.num_scalars()

    def with_qk(self, qk: ModelParams) -> "DualCopyModel":
        return DualCopyModel(self.arch, self.sk, qk, self.schedule)


@dataclass(frozen=True)
class ActivationMaskSet:
    """One boolean tensor per gated layer, batch-leading."""

    masks: tuple

    def __post_init__(self):
        frozen = []
        for m in self.masks:
            m = np.array(m, dtype=bool)
            m.setflags(write=False)
            frozen.append(m)
        object.__setattr__(self, "masks", tuple(frozen))

    def __len__(self):
        return len(self.masks)

    def __getitem__(self, i):
        return self.masks[i]

    def __iter__(self):
        return iter(self.masks)

    @property
    def batch_size(self) -> int:
        return self.masks[0].shape[0]

    def equal(self, other: "ActivationMaskSet") -> bool:
        return len(self) == len(other) and all(
            np.array_equal(a, b) for a, b in zip(self.masks, other.masks)
        )

    def sample(self, i: int) -> "ActivationMaskSet":
        """Masks of the i-th input only (batch of one), i.e. its activation pattern."""
        return ActivationMaskSet(tuple(m[i : i + 1] for m in self.masks))


def make_dual_copy(w_pt: ModelParams, schedule: Schedule) -> DualCopyModel:
    """Both copies start as independent deep copies of the pretrained parameters."""
    sk = ModelParams(w_pt.arch, dict(w_pt.items()))
    qk = ModelParams(w_pt.arch, dict(w_pt.items()))
    return DualCopyModel(w_pt.arch, sk, qk, schedule)


def compute_masks(model: DualCopyModel, x) -> ActivationMaskSet:
    """Gate is open iff the structural pre-activation is strictly positive."""
    _, preacts = nncore.forward(model.arch, model.sk, x)
    return ActivationMaskSet(tuple(z > 0 for z in preacts))


def _check_masks(model: DualCopyModel, masks: ActivationMaskSet, x) -> None:
    n = np.shape(x)[0] if np.ndim(x) else None
    if len(masks) != len(model.arch.gated_layers):
        raise ContractError(
            f"{len(masks)} masks for {len(model.arch.gated_layers)} gated layers"
        )
    if masks.batch_size != n:
        raise ContractError(f"masks computed for batch of {masks.batch_size}, got {n} inputs")


def gated_forward(model: DualCopyModel, masks: ActivationMaskSet, x) -> np.ndarray:
    """Logits of the QK copy with every gated layer multiplied by the fixed mask."""
    _check_masks(model, masks, x)
    logits, _, _, _ = nncore.propagate(model.arch, model.qk, x, gates=masks.masks)
    return logits


def gated_backward(model: DualCopyModel, masks: ActivationMaskSet, x, labels) -> tuple:
    """Cross-entropy loss and gradients over the schedule-enabled QK layers."""
    _check_masks(model, masks, x)
    logits, _, caches, applied = nncore.propagate(model.arch, model.qk, x, gates=masks.masks)
    loss, dlogits = nncore._loss_and_dlogits(logits, labels)
    grads = nncore.backprop(model.arch, model.qk, caches, applied, dlogits, model.trainable_layers)
    return loss, grads


def extract_affine(model: DualCopyModel, masks: ActivationMaskSet) -> tuple:
    """Exact ``(A, b)`` with ``gated_forward(x) == A @ x.ravel() + b`` under ``masks``.

    ``masks`` must describe a single region (batch of one). Built by composing
    each layer's affine map; the linear part is carried as a matrix over the
    flattened input.
    """
    arch = model.arch
    if len(masks) != len(arch.gated_layers) or masks.batch_size != 1:
        raise ContractError("extract_affine needs one mask per gated layer for a single input")
    d_in = int(np.prod(arch.input_shape))
    lin = np.eye(d_in)
    off = np.zeros(d_in)
    shape = arch.input_shape
    g = 0
    for i, layer in enumerate(arch.layers):
        out_shape = arch.output_shapes[i]
        if isinstance(layer, Dense):
            w, b = model.qk[i]
            lin, off = w @ lin, w @ off + b
        elif isinstance(layer, Conv2d):
            w, b = model.qk[i]
            # push every column of the linear part through the bias-free convolution
            cols = lin.T.reshape(d_in, *shape)
            lin_out, _ = nncore._layer_forward(layer, (w, np.zeros_like(b)), cols)
            off_out, _ = nncore._layer_forward(layer, (w, b), off.reshape(1, *shape))
            lin = lin_out.reshape(d_in, -1).T
            off = off_out.reshape(-1)
        if layer.gated:
            m = masks[g].reshape(-1).astype(lin.dtype)
            lin = lin * m[:, None]
            off = off * m
            g += 1
        shape = out_shape
    return lin, off


# ---------------------------------------------------------------------------
# Checkpoint: b"FSQ2" | u16 version | 32-byte arch fingerprint | u16 schedule
# length | schedule bitstring | u64 len + SK checkpoint | u64 len + QK checkpoint
# ---------------------------------------------------------------------------

_MAGIC = b"FSQ2"
_VERSION = 1


def dual_copy_to_bytes(model: DualCopyModel) -> bytes:
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<H", _VERSION))
    buf.write(bytes.fromhex(model.arch.fingerprint()))
    bits = model.schedule.bitstring().encode()
    buf.write(struct.pack("<H", len(bits)))
    buf.write(bits)
    for p in (model.sk, model.qk):
        blob = nncore.params_to_bytes(p)
        buf.write(struct.pack("<Q", len(blob)))
        buf.write(blob)
    return buf.getvalue()


def dual_copy_from_bytes(data: bytes, what: str = "dual-copy checkpoint") -> DualCopyModel:
    r = nncore._Reader(data, what)
    if r.take(4) != _MAGIC:
        raise FormatError(f"{what}: bad magic at byte offset 0")
    (version,) = r.unpack("<H")
    if version != _VERSION:
        raise FormatError(f"{what}: unsupported version {version}")
    fp = r.take(32).hex()
    (nbits,) = r.unpack("<H")
    try:
        schedule = Schedule.from_bitstring(r.take(nbits).decode("ascii"))
    except (UnicodeDecodeError, ConfigurationError) as exc:
        raise FormatError(f"{what}: bad schedule record: {exc}") from exc
    copies = []
    for name in ("sk", "qk"):
        (n,) = r.unpack("<Q")
        copies.append(nncore.params_from_bytes(r.take(n), f"{what} [{name}]"))
    if r.pos != len(data):
        raise FormatError(f"{what}: trailing bytes at offset {r.pos}")
    sk, qk = copies
    if sk.arch.fingerprint() != fp or qk.arch.fingerprint() != fp:
        raise FormatError(f"{what}: architecture fingerprint mismatch")
    try:
        return DualCopyModel(sk.arch, sk, qk, schedule)
    except ConfigurationError as exc:
        raise FormatError(f"{what}: {exc}") from exc


def save_dual_copy(model: DualCopyModel, path) -> None:
    Path(path).write_bytes(dual_copy_to_bytes(model))


def load_dual_copy(path) -> DualCopyModel:
    return dual_copy_from_bytes(Path(path).read_bytes(), str(path))
