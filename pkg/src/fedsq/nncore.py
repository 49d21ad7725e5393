"""Minimal feed-forward network engine on numpy.

Networks are a sequence of Dense / Conv2d / Flatten layers; a layer flagged
``gated`` is followed by a ReLU (or, in the gated path used by
:mod:`fedsq.dualcopy`, by an externally supplied binary mask). The last layer
is always a plain Dense head.

Everything is float64 and functional: parameter sets are immutable and
``sgd_step`` returns a new set.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, ContractError, FormatError, InputError, NumericError

DTYPE = np.float64


# ---------------------------------------------------------------------------
# Architecture
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int
    gated: bool = False


@dataclass(frozen=True)
class Conv2d:
    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1
    padding: int = 0
    gated: bool = False


@dataclass(frozen=True)
class Flatten:
    gated: bool = False


LayerSpec = Union[Dense, Conv2d, Flatten]
_KINDS = {"dense": Dense, "conv2d": Conv2d, "flatten": Flatten}


def _conv_out(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


@dataclass(frozen=True)
class ModelArch:
    """Layer-structured architecture. Validates shape composition on creation."""

    input_shape: tuple
    layers: tuple
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ConfigurationError("architecture has no layers")
        if any(d <= 0 for d in self.input_shape):
            raise ConfigurationError(f"input_shape must be positive, got {self.input_shape}")
        shape = self.input_shape
        shapes = []
        for i, layer in enumerate(self.layers):
            shape = self._next_shape(i, layer, shape)
            shapes.append(shape)
        object.__setattr__(self, "_shapes", tuple(shapes))
        head = self.layers[-1]
        if not isinstance(head, Dense) or head.gated or head.out_dim != self.num_classes:
            raise ConfigurationError(
                f"last layer must be an ungated Dense(*, {self.num_classes}) head, got {head}"
            )
        if not self.gated_layers:
            raise ConfigurationError("architecture needs at least one gated layer")

    @staticmethod
    def _next_shape(i: int, layer, shape: tuple) -> tuple:
        if isinstance(layer, Dense):
            if len(shape) != 1 or shape[0] != layer.in_dim:
                raise ConfigurationError(f"layer {i}: Dense expects ({layer.in_dim},), gets {shape}")
            if layer.out_dim <= 0:
                raise ConfigurationError(f"layer {i}: out_dim must be positive")
            return (layer.out_dim,)
        if isinstance(layer, Conv2d):
            if len(shape) != 3 or shape[0] != layer.in_ch:
                raise ConfigurationError(
                    f"layer {i}: Conv2d expects ({layer.in_ch}, H, W), gets {shape}"
                )
            if layer.kernel <= 0 or layer.stride <= 0 or layer.padding < 0 or layer.out_ch <= 0:
                raise ConfigurationError(f"layer {i}: bad Conv2d hyperparameters {layer}")
            oh = _conv_out(shape[1], layer.kernel, layer.stride, layer.padding)
            ow = _conv_out(shape[2], layer.kernel, layer.stride, layer.padding)
            if oh <= 0 or ow <= 0:
                raise ConfigurationError(f"layer {i}: kernel larger than padded input {shape}")
            return (layer.out_ch, oh, ow)
        if isinstance(layer, Flatten):
            if layer.gated:
                raise ConfigurationError(f"layer {i}: Flatten cannot be gated")
            return (int(np.prod(shape)),)
        raise ConfigurationError(f"layer {i}: unknown layer kind {layer!r}")

    @property
    def output_shapes(self) -> tuple:
        """Per-sample output shape of every layer."""
        return self._shapes

    @property
    def param_layers(self) -> tuple:
        """Indices of layers carrying parameters, in order (the head is last)."""
        return tuple(i for i, l in enumerate(self.layers) if not isinstance(l, Flatten))

    @property
    def gated_layers(self) -> tuple:
        return tuple(i for i, l in enumerate(self.layers) if l.gated)

    def param_shapes(self, idx: int) -> tuple:
        layer = self.layers[idx]
        if isinstance(layer, Dense):
            return (layer.out_dim, layer.in_dim), (layer.out_dim,)
        if isinstance(layer, Conv2d):
            return (layer.out_ch, layer.in_ch, layer.kernel, layer.kernel), (layer.out_ch,)
        raise ConfigurationError(f"layer {idx} has no parameters")

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [{"kind": type(l).__name__.lower(), **asdict(l)} for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelArch":
        layers = []
        for spec in d["layers"]:
            spec = dict(spec)
            kind = spec.pop("kind")
            if kind not in _KINDS:
                raise ConfigurationError(f"unknown layer kind {kind!r}")
            layers.append(_KINDS[kind](**spec))
        return cls(tuple(d["input_shape"]), tuple(layers), int(d["num_classes"]))

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def mlp(input_dim: int, hidden: Sequence[int], num_classes: int) -> ModelArch:
    """ReLU multilayer perceptron helper."""
    dims = [input_dim, *hidden]
    layers = [Dense(a, b, gated=True) for a, b in zip(dims[:-1], dims[1:])]
    layers.append(Dense(dims[-1], num_classes))
    return ModelArch((input_dim,), tuple(layers), num_classes)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def _frozen_array(a, copy: bool = True) -> np.ndarray:
    arr = np.array(a, dtype=DTYPE, copy=True) if copy else a
    arr.setflags(write=False)
    return arr


class ModelParams:
    """Immutable ``layer index -> (weights, bias)`` map over one architecture.

    Supports element-wise ``+``, ``-`` and scalar ``*`` with another set over the
    same layers, which is all aggregation needs.
    """

    _partial = False

    def __init__(self, arch: ModelArch, entries: Mapping[int, tuple], *, _copy: bool = True):
        self.arch = arch
        keys = sorted(int(k) for k in entries)
        expected = arch.param_layers
        if self._partial:
            bad = [k for k in keys if k not in expected]
        else:
            bad = [] if keys == list(expected) else sorted(set(keys) ^ set(expected))
        if bad:
            raise ContractError(f"{type(self).__name__}: layer keys {keys} do not fit {expected}")
        self._entries = {}
        for k in keys:
            w, b = entries[k]
            w_shape, b_shape = arch.param_shapes(k)
            if np.shape(w) != w_shape or np.shape(b) != b_shape:
                raise ContractError(
                    f"layer {k}: expected shapes {w_shape}/{b_shape}, "
                    f"got {np.shape(w)}/{np.shape(b)}"
                )
            self._entries[k] = (_frozen_array(w, _copy), _frozen_array(b, _copy))

    # mapping-ish access
    def __getitem__(self, idx: int) -> tuple:
        return self._entries[idx]

    def __contains__(self, idx) -> bool:
        return idx in self._entries

    def __iter__(self):
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def layers(self) -> tuple:
        return tuple(self._entries)

    def tensors(self) -> Iterable[np.ndarray]:
        for w, b in self._entries.values():
            yield w
            yield b

    def num_scalars(self, layers: Iterable[int] | None = None) -> int:
        keys = self._entries if layers is None else layers
        return sum(self._entries[k][0].size + self._entries[k][1].size for k in keys)

    def _wrap(self, entries: Mapping[int, tuple]) -> "ModelParams":
        out = type(self).__new__(type(self))
        out.arch = self.arch
        out._entries = {
            k: (_frozen_array(w, copy=False), _frozen_array(b, copy=False))
            for k, (w, b) in sorted(entries.items())
        }
        return out

    def _binary(self, other: "ModelParams", op) -> "ModelParams":
        if not isinstance(other, ModelParams):
            return NotImplemented
        if self.layers() != other.layers():
            raise ContractError(f"layer sets differ: {self.layers()} vs {other.layers()}")
        return self._wrap(
            {k: (op(w, other[k][0]), op(b, other[k][1])) for k, (w, b) in self.items()}
        )

    def __add__(self, other):
        return self._binary(other, np.add)

    def __sub__(self, other):
        return self._binary(other, np.subtract)

    def __mul__(self, c):
        if not np.isscalar(c):
            return NotImplemented
        c = DTYPE(c)
        return self._wrap({k: (w * c, b * c) for k, (w, b) in self.items()})

    __rmul__ = __mul__

    def select(self, layers: Iterable[int]) -> "GradientSet":
        """Sub-set restricted to ``layers`` (a partial set, e.g. an upload)."""
        out = GradientSet.__new__(GradientSet)
        out.arch = self.arch
        out._entries = {k: self._entries[k] for k in sorted(layers)}
        return out

    def replace(self, updates: "ModelParams | Mapping[int, tuple]") -> "ModelParams":
        """Copy of self with some layers swapped in from ``updates``."""
        entries = dict(self._entries)
        for k, (w, b) in updates.items():
            if k not in entries:
                raise ContractError(f"layer {k} not in parameter set")
            if np.shape(w) != entries[k][0].shape or np.shape(b) != entries[k][1].shape:
                raise ContractError(f"layer {k}: shape mismatch in replace")
            entries[k] = (w, b)
        return self._wrap(entries)

    def equal(self, other: "ModelParams") -> bool:
        """Bit-for-bit equality."""
        if self.layers() != other.layers():
            return False
        return all(
            np.array_equal(w, other[k][0]) and np.array_equal(b, other[k][1])
            for k, (w, b) in self.items()
        )

    def max_abs_diff(self, other: "ModelParams") -> float:
        return max(
            max(np.max(np.abs(w - other[k][0]), initial=0.0), np.max(np.abs(b - other[k][1]), initial=0.0))
            for k, (w, b) in self.items()
        )

    def digest(self) -> str:
        """SHA-256 over the little-endian payload; identical iff bit-identical."""
        h = hashlib.sha256(self.arch.fingerprint().encode())
        for k, (w, b) in self.items():
            h.update(struct.pack("<I", k))
            h.update(w.astype("<f8").tobytes())
            h.update(b.astype("<f8").tobytes())
        return h.hexdigest()

    def __repr__(self):
        return f"{type(self).__name__}(layers={self.layers()}, scalars={self.num_scalars()})"


class GradientSet(ModelParams):
    """Like ModelParams but may cover only a subset of the parameterized layers."""

    _partial = True


def init_params(arch: ModelArch, rng: np.random.Generator) -> ModelParams:
    """He-style uniform init, bound sqrt(6 / fan_in); zero biases."""
    entries = {}
    for k in arch.param_layers:
        w_shape, b_shape = arch.param_shapes(k)
        fan_in = int(np.prod(w_shape[1:]))
        bound = np.sqrt(6.0 / fan_in)
        entries[k] = (rng.uniform(-bound, bound, size=w_shape), np.zeros(b_shape))
    return ModelParams(arch, entries)


def resolve_trainable(arch: ModelArch, trainable_mask) -> tuple:
    """Turn a per-parameterized-layer boolean mask into the set of trainable layer indices.

    Accepts ``None`` (everything trainable), a sequence of booleans, or any
    object with a ``trainable`` attribute (a calibration Schedule).
    """
    layers = arch.param_layers
    if trainable_mask is None:
        return layers
    flags = getattr(trainable_mask, "trainable", trainable_mask)
    flags = tuple(bool(f) for f in flags)
    if len(flags) != len(layers):
        raise ConfigurationError(
            f"trainable mask has {len(flags)} entries, architecture has {len(layers)} "
            "parameterized layers"
        )
    return tuple(k for k, f in zip(layers, flags) if f)


# ---------------------------------------------------------------------------
# Layer kernels
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, kernel: int, stride: int, padding: int) -> tuple:
    """(N, C, H, W) -> (N*oh*ow, C*k*k) patch matrix, plus (oh, ow)."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, oh, ow = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kernel * kernel)
    return cols, oh, ow


def _col2im(dcols: np.ndarray, x_shape: tuple, kernel: int, stride: int, padding: int, oh: int, ow: int):
    n, c, h, w = x_shape
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=DTYPE)
    d = dcols.reshape(n, oh, ow, c, kernel, kernel).transpose(0, 3, 1, 2, 4, 5)
    for ki in range(kernel):
        for kj in range(kernel):
            dxp[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += d[..., ki, kj]
    if padding:
        return dxp[:, :, padding:-padding, padding:-padding]
    return dxp


def _layer_forward(layer, params, h: np.ndarray) -> tuple:
    """Returns (output, cache)."""
    if isinstance(layer, Dense):
        w, b = params
        return h @ w.T + b, h
    if isinstance(layer, Conv2d):
        w, b = params
        cols, oh, ow = _im2col(h, layer.kernel, layer.stride, layer.padding)
        out = cols @ w.reshape(layer.out_ch, -1).T + b
        out = out.reshape(h.shape[0], oh, ow, layer.out_ch).transpose(0, 3, 1, 2)
        return out, (cols, h.shape, oh, ow)
    return h.reshape(h.shape[0], -1), h.shape


def _layer_backward(layer, params, cache, dout: np.ndarray, need_input_grad: bool) -> tuple:
    """Returns ((dw, db) or None, dinput or None)."""
    if isinstance(layer, Dense):
        w, _ = params
        grads = (dout.T @ cache, dout.sum(axis=0))
        return grads, (dout @ w if need_input_grad else None)
    if isinstance(layer, Conv2d):
        w, _ = params
        cols, x_shape, oh, ow = cache
        d = dout.transpose(0, 2, 3, 1).reshape(-1, layer.out_ch)
        wmat = w.reshape(layer.out_ch, -1)
        grads = ((d.T @ cols).reshape(w.shape), d.sum(axis=0))
        dx = None
        if need_input_grad:
            dx = _col2im(d @ wmat, x_shape, layer.kernel, layer.stride, layer.padding, oh, ow)
        return grads, dx
    return None, (dout.reshape(cache) if need_input_grad else None)


# ---------------------------------------------------------------------------
# Forward / backward passes
# ---------------------------------------------------------------------------


def _check_batch(arch: ModelArch, x) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != len(arch.input_shape) + 1 or x.shape[1:] != arch.input_shape:
        raise ConfigurationError(
            f"input batch shape {x.shape} does not match (N, *{arch.input_shape})"
        )
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite value in input batch")
    return x


def _check_params(arch: ModelArch, params: ModelParams):
    if params.arch is not arch and params.arch != arch:
        raise ConfigurationError("parameter set belongs to a different architecture")


def propagate(arch: ModelArch, params: ModelParams, x, gates=None) -> tuple:
    """Shared forward engine.

    With ``gates=None`` each gated layer applies ReLU; otherwise ``gates`` is a
    sequence of binary arrays (one per gated layer) and the layer output is
    ``gate * z``. Returns ``(logits, preacts, caches, gate_masks)`` where
    ``gate_masks`` are the boolean masks actually applied.
    """
    _check_params(arch, params)
    h = _check_batch(arch, x)
    if gates is not None and len(gates) != len(arch.gated_layers):
        raise ContractError(
            f"{len(gates)} masks supplied for {len(arch.gated_layers)} gated layers"
        )
    preacts, caches, applied = [], [], []
    g = 0
    for i, layer in enumerate(arch.layers):
        with np.errstate(over="ignore", invalid="ignore"):
            z, cache = _layer_forward(layer, params[i] if i in params else None, h)
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite pre-activation at layer {i} ({type(layer).__name__})")
        caches.append(cache)
        if layer.gated:
            preacts.append(z)
            if gates is None:
                mask = z > 0
                h = np.maximum(z, 0.0)
            else:
                mask = np.asarray(gates[g])
                if mask.shape != z.shape:
                    raise ContractError(
                        f"mask for layer {i} has shape {mask.shape}, pre-activation {z.shape}"
                    )
                mask = mask.astype(bool)
                h = np.where(mask, z, 0.0)
            applied.append(mask)
            g += 1
        else:
            h = z
    return h, preacts, caches, applied


def forward(arch: ModelArch, params: ModelParams, x) -> tuple:
    """ReLU forward pass. Returns ``(logits, preacts)`` with one pre-activation per gated layer."""
    logits, preacts, _, _ = propagate(arch, params, x)
    return logits, preacts


def predict(arch: ModelArch, params: ModelParams, x) -> np.ndarray:
    return np.argmax(forward(arch, params, x)[0], axis=1)


def _check_labels(logits: np.ndarray, labels) -> np.ndarray:
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise InputError(f"{logits.shape[0]} logit rows vs label shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise InputError(f"labels must lie in [0, {logits.shape[1]})")
    return labels.astype(np.int64)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss_ce(logits, labels) -> float:
    """Mean softmax cross-entropy, max-shifted for stability."""
    logits = np.asarray(logits, dtype=DTYPE)
    labels = _check_labels(logits, labels)
    logp = _log_softmax(logits)
    return float(-logp[np.arange(len(labels)), labels].mean())


def _loss_and_dlogits(logits: np.ndarray, labels) -> tuple:
    labels = _check_labels(logits, labels)
    logp = _log_softmax(logits)
    n = len(labels)
    loss = float(-logp[np.arange(n), labels].mean())
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    return loss, d / n


def backprop(arch: ModelArch, params: ModelParams, caches, masks, dlogits, trainable: tuple) -> GradientSet:
    """Reverse pass over cached activations. Only layers in ``trainable`` get gradients."""
    grads = {}
    if not trainable:
        return GradientSet(arch, {}, _copy=False)
    lowest = min(trainable)
    gate_of = {li: m for li, m in zip(arch.gated_layers, masks)}
    d = dlogits
    for i in range(len(arch.layers) - 1, lowest - 1, -1):
        layer = arch.layers[i]
        if layer.gated:
            d = np.where(gate_of[i], d, 0.0)
        g, d = _layer_backward(layer, params[i] if i in params else None, caches[i], d, i > lowest)
        if i in trainable:
            grads[i] = g
    for i, (gw, gb) in grads.items():
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise NumericError(f"non-finite gradient at layer {i}")
    return GradientSet(arch, grads, _copy=False)


def backward(arch: ModelArch, params: ModelParams, x, labels, trainable_mask=None) -> tuple:
    """Loss and gradients of mean cross-entropy w.r.t. the trainable layers."""
    trainable = resolve_trainable(arch, trainable_mask)
    logits, _, caches, masks = propagate(arch, params, x)
    loss, dlogits = _loss_and_dlogits(logits, labels)
    return loss, backprop(arch, params, caches, masks, dlogits, trainable)


def sgd_step(params: ModelParams, grads: GradientSet, lr: float, wd: float, trainable_mask=None) -> ModelParams:
    """Plain SGD with L2 weight decay: ``p - lr * (g + wd * p)`` on trainable layers.

    Frozen layers are carried over as the very same (read-only) arrays.
    """
    if lr < 0 or wd < 0:
        raise InputError(f"lr and wd must be non-negative, got lr={lr}, wd={wd}")
    trainable = resolve_trainable(params.arch, trainable_mask)
    updated = {}
    for k in trainable:
        if k not in grads:
            raise ContractError(f"no gradient supplied for trainable layer {k}")
        (w, b), (gw, gb) = params[k], grads[k]
        if gw.shape != w.shape or gb.shape != b.shape:
            raise ContractError(f"layer {k}: gradient shape mismatch")
        updated[k] = (w - lr * (gw + wd * w), b - lr * (gb + wd * b))
    return params.replace(updated)


def accuracy(logits: np.ndarray, labels) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        return 0.0
    return float(np.mean(np.argmax(logits, axis=1) == labels))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------
#
# Layout (little-endian):
#   b"FSQP" | u16 version | 32-byte sha256 arch fingerprint | u32 len | arch JSON
#   | u32 entry count | per entry: u32 layer, then weights and bias each as
#   u8 ndim, ndim * u32 dims, prod(dims) * f64 payload.

_CKPT_MAGIC = b"FSQP"
_CKPT_VERSION = 1


def _write_tensor(buf: io.BytesIO, a: np.ndarray):
    buf.write(struct.pack("<B", a.ndim))
    buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
    buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data, self.pos, self.what = data, 0, what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.what}: truncated at byte offset {self.pos} (need {n} bytes)")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensor(self) -> np.ndarray:
        (ndim,) = self.unpack("<B")
        shape = self.unpack(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(DTYPE).reshape(shape)


def params_to_bytes(params: ModelParams) -> bytes:
    buf = io.BytesIO()
    arch_json = json.dumps(params.arch.to_dict(), sort_keys=True).encode()
    buf.write(_CKPT_MAGIC)
    buf.write(struct.pack("<H", _CKPT_VERSION))
    buf.write(bytes.fromhex(params.arch.fingerprint()))
    buf.write(struct.pack("<I", len(arch_json)))
    buf.write(arch_json)
    buf.write(struct.pack("<I", len(params)))
    for k, (w, b) in params.items():
        buf.write(struct.pack("<I", k))
        _write_tensor(buf, w)
        _write_tensor(buf, b)
    return buf.getvalue()


def params_from_bytes(data: bytes, what: str = "checkpoint") -> ModelParams:
    r = _Reader(data, what)
    if r.take(4) != _CKPT_MAGIC:
        raise FormatError(f"{what}: bad magic at byte offset 0")
    (version,) = r.unpack("<H")
    if version != _CKPT_VERSION:
        raise FormatError(f"{what}: unsupported version {version} at byte offset 4")
    fp = r.take(32).hex()
    (n,) = r.unpack("<I")
    try:
        arch = ModelArch.from_dict(json.loads(r.take(n)))
    except (ValueError, KeyError, TypeError, ConfigurationError) as exc:
        raise FormatError(f"{what}: invalid architecture record: {exc}") from exc
    if arch.fingerprint() != fp:
        raise FormatError(f"{what}: architecture fingerprint mismatch")
    (count,) = r.unpack("<I")
    entries = {}
    for _ in range(count):
        (k,) = r.unpack("<I")
        entries[k] = (r.tensor(), r.tensor())
    if r.pos != len(data):
        raise FormatError(f"{what}: {len(data) - r.pos} trailing bytes at offset {r.pos}")
    try:
        return ModelParams(arch, entries)
    except ContractError as exc:
        raise FormatError(f"{what}: {exc}") from exc


def save_params(params: ModelParams, path) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def load_params(path) -> ModelParams:
    return params_from_bytes(Path(path).read_bytes(), what=str(path))


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def minibatch_sgd(
    arch: ModelArch,
    params: ModelParams,
    x: np.ndarray,
    y: np.ndarray,
    *,
    lr: float,
    wd: float,
    batch_size: int,
    epochs: int,
    rng: np.random.Generator,
    trainable_mask=None,
    grad_fn=None,
) -> tuple:
    """Epochs of shuffled mini-batch SGD.

    ``grad_fn(params, xb, yb) -> (loss, grads)`` defaults to :func:`backward`
    under ``trainable_mask``. Returns ``(params, batch_losses)``.
    """
    if batch_size < 1 or epochs < 0:
        raise InputError(f"batch_size must be >= 1 and epochs >= 0, got {batch_size}, {epochs}")
    if grad_fn is None:
        def grad_fn(p, xb, yb):
            return backward(arch, p, xb, yb, trainable_mask)
    losses = []
    n = len(y)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            loss, grads = grad_fn(params, x[idx], y[idx])
            params = sgd_step(params, grads, lr, wd, trainable_mask)
            losses.append(loss)
    return params, losses
