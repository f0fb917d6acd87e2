"""Architectures, checkpoints and the forward pass.

A :class:`Checkpoint` is an immutable-by-convention bundle of an
:class:`Architecture`, its parameter arrays, optional pruning masks and
optional fixed-point formats.  :func:`build_graph` turns a checkpoint into an
autodiff graph; :func:`forward` is the plain inference entry point.

Checkpoint files use a small self-describing binary layout (little-endian)::

    b"CALB"  u16 version  u64 body_length
    body:
      u32 n_meta   { u16 klen, key, u32 vlen, value }*      (UTF-8, sorted by key)
      u32 n_tensor { u16 nlen, name, u8 dtype, u8 ndim, u32 dims[ndim],
                     f32 payload, u8 has_mask, [packed mask bits],
                     u8 has_quant, [u8 bitwidth, u8 integer_bits, u8 applies_to] }*
      u8 has_act_quant [u8 bitwidth, u8 integer_bits, u8 applies_to]
    u32 crc32(body)
"""

from __future__ import annotations

import hashlib
import math
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .fixedpoint import FixedPointFormat, on_grid, quantise_array

__all__ = [
    "Layer",
    "Architecture",
    "Checkpoint",
    "CheckpointError",
    "CheckpointMagicError",
    "CheckpointVersionError",
    "CheckpointChecksumError",
    "CheckpointTruncatedError",
    "lenet5",
    "parse_architecture",
    "init_checkpoint",
    "build_graph",
    "forward",
    "save",
    "load",
    "dumps",
    "loads",
]

MAGIC = b"CALB"
FORMAT_VERSION = 1
DTYPE_F32 = 1
APPLIES_WEIGHTS = 0
APPLIES_ACTIVATIONS = 1


# --------------------------------------------------------------------------
# architecture
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Layer:
    kind: str  # conv | maxpool2 | relu | flatten | dense
    out: int = 0
    kernel: int = 0
    stride: int = 1

    def __str__(self) -> str:
        if self.kind == "conv":
            return f"conv {self.out} {self.kernel} {self.stride}"
        if self.kind == "dense":
            return f"dense {self.out}"
        return self.kind


@dataclass(frozen=True)
class Architecture:
    layers: tuple[Layer, ...]
    input_shape: tuple[int, int, int]  # C, H, W
    name: str = "custom"

    def __post_init__(self):
        self.shapes()  # type-check the composition eagerly

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-sample output shape after each layer (index 0 is the input)."""
        shape: tuple[int, ...] = tuple(self.input_shape)
        out = [shape]
        for i, layer in enumerate(self.layers):
            where = f"layer {i} ({layer})"
            if layer.kind == "conv":
                if len(shape) != 3:
                    raise ValueError(f"{where}: expects C x H x W input, got {shape}")
                c, h, w = shape
                if h < layer.kernel or w < layer.kernel:
                    raise ValueError(f"{where}: spatial {h}x{w} smaller than kernel {layer.kernel}")
                ho = (h - layer.kernel) // layer.stride + 1
                wo = (w - layer.kernel) // layer.stride + 1
                shape = (layer.out, ho, wo)
            elif layer.kind == "maxpool2":
                if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                    raise ValueError(f"{where}: needs even spatial dims, got {shape}")
                shape = (shape[0], shape[1] // 2, shape[2] // 2)
            elif layer.kind == "relu":
                pass
            elif layer.kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif layer.kind == "dense":
                if len(shape) != 1:
                    raise ValueError(f"{where}: expects flat input, got {shape}")
                shape = (layer.out,)
            else:
                raise ValueError(f"{where}: unknown layer kind {layer.kind!r}")
            out.append(shape)
        return out

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes()[-1]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = self.shapes()
        params: dict[str, tuple[int, ...]] = {}
        for i, layer in enumerate(self.layers):
            in_shape = shapes[i]
            if layer.kind == "conv":
                params[f"{i}.weight"] = (layer.out, in_shape[0], layer.kernel, layer.kernel)
                params[f"{i}.bias"] = (layer.out,)
            elif layer.kind == "dense":
                params[f"{i}.weight"] = (in_shape[0], layer.out)
                params[f"{i}.bias"] = (layer.out,)
        return params

    def weight_names(self) -> list[str]:
        return [k for k in self.param_shapes() if k.endswith(".weight")]

    def n_params(self) -> int:
        return sum(math.prod(s) for s in self.param_shapes().values())

    def to_text(self) -> str:
        c, h, w = self.input_shape
        lines = [f"name {self.name}", f"input {c} {h} {w}"]
        lines += [str(layer) for layer in self.layers]
        return "\n".join(lines) + "\n"


def lenet5(input_size: int = 28) -> Architecture:
    """Caffe-style LeNet5 (20-50-500-10); 431,080 parameters on 28x28 input."""
    layers = (
        Layer("conv", 20, 5, 1),
        Layer("maxpool2"),
        Layer("conv", 50, 5, 1),
        Layer("maxpool2"),
        Layer("relu"),
        Layer("flatten"),
        Layer("dense", 500),
        Layer("relu"),
        Layer("dense", 10),
    )
    return Architecture(layers, (1, input_size, input_size), name="lenet5")


def parse_architecture(text: str) -> Architecture:
    """Parse the line-oriented architecture spec written by :meth:`Architecture.to_text`.

    Blank lines and ``#`` comments are ignored.  Example::

        name cifarnet
        input 3 32 32
        conv 64 5 1
        maxpool2
        relu
        flatten
        dense 10
    """
    name = "custom"
    input_shape = None
    layers = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, *args = line.split()
        try:
            if head == "name":
                name = args[0]
            elif head == "input":
                c, h, w = (int(a) for a in args)
                input_shape = (c, h, w)
            elif head == "conv":
                out, k = int(args[0]), int(args[1])
                stride = int(args[2]) if len(args) > 2 else 1
                layers.append(Layer("conv", out, k, stride))
            elif head == "dense":
                layers.append(Layer("dense", int(args[0])))
            elif head in ("maxpool2", "relu", "flatten") and not args:
                layers.append(Layer(head))
            else:
                raise ValueError(f"unrecognised directive {head!r}")
        except (IndexError, ValueError) as exc:
            raise ValueError(f"architecture line {lineno}: {raw.strip()!r}: {exc}") from None
    if input_shape is None:
        raise ValueError("architecture spec has no 'input C H W' line")
    if not layers:
        raise ValueError("architecture spec has no layers")
    return Architecture(tuple(layers), input_shape, name=name)


# --------------------------------------------------------------------------
# checkpoint
# --------------------------------------------------------------------------


@dataclass
class Checkpoint:
    architecture: Architecture
    params: dict[str, np.ndarray]
    masks: dict[str, np.ndarray] = field(default_factory=dict)
    weight_formats: dict[str, FixedPointFormat] = field(default_factory=dict)
    activation_format: FixedPointFormat | None = None
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        expected = self.architecture.param_shapes()
        if set(self.params) != set(expected):
            raise ValueError(f"parameter names {sorted(self.params)} != {sorted(expected)}")
        for name, shape in expected.items():
            arr = np.asarray(self.params[name], dtype=np.float32)
            if arr.shape != shape:
                raise ValueError(f"{name}: shape {arr.shape} != {shape}")
            self.params[name] = arr
        for name, m in self.masks.items():
            if name not in self.params or not name.endswith(".weight"):
                raise ValueError(f"mask for unknown weight tensor {name!r}")
            m = np.asarray(m)
            if m.shape != self.params[name].shape:
                raise ValueError(f"mask {name}: shape {m.shape} != {self.params[name].shape}")
            if not np.isin(m, (0, 1)).all():
                raise ValueError(f"mask {name} is not 0/1 valued")
            self.masks[name] = m.astype(np.float32)
        self.metadata = {str(k): str(v) for k, v in self.metadata.items()}

    def replace(self, **changes) -> Checkpoint:
        """Shallow copy with some fields swapped; arrays are deep-copied."""
        base = dict(
            params={k: v.copy() for k, v in self.params.items()},
            masks={k: v.copy() for k, v in self.masks.items()},
            weight_formats=dict(self.weight_formats),
            metadata=dict(self.metadata),
        )
        base.update(changes)
        return replace(self, **base)

    def effective_params(self) -> dict[str, np.ndarray]:
        """Parameters as the forward pass sees them: masked, then weight-quantised."""
        out = {}
        for name, value in self.params.items():
            if name in self.masks:
                value = value * self.masks[name]
            fmt = self.weight_formats.get(name)
            if fmt is not None:
                value = quantise_array(value, fmt)
            out[name] = value
        return out

    def off_grid(self) -> list[str]:
        """Names of stored tensors that violate their weight format's grid."""
        return [n for n, fmt in self.weight_formats.items() if not on_grid(self.params[n], fmt).all()]

    def fingerprint(self) -> str:
        return hashlib.sha256(dumps(self)).hexdigest()[:16]


def _glorot_bound(shape: tuple[int, ...]) -> float:
    if len(shape) == 4:
        rf = shape[2] * shape[3]
        fan_in, fan_out = shape[1] * rf, shape[0] * rf
    else:
        fan_in, fan_out = shape
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_checkpoint(architecture: Architecture, seed: int = 0) -> Checkpoint:
    """Weights uniform in +-sqrt(6/(fan_in+fan_out)), biases zero."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in architecture.param_shapes().items():
        if name.endswith(".weight"):
            bound = _glorot_bound(shape)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        else:
            params[name] = np.zeros(shape, dtype=np.float32)
    meta = {"init": "glorot_uniform", "init_constant": "6", "seed": str(seed), "epochs": "0"}
    return Checkpoint(architecture, params, metadata=meta)


# --------------------------------------------------------------------------
# forward
# --------------------------------------------------------------------------


@dataclass
class Graph:
    """Tensors produced by :func:`build_graph`."""

    inputs: ad.Tensor
    logits: ad.Tensor
    params: dict[str, ad.Tensor]
    activations: list[ad.Tensor]


def build_graph(
    checkpoint: Checkpoint,
    images,
    *,
    input_grad: bool = False,
    param_grad: bool = False,
    params: dict[str, np.ndarray] | None = None,
) -> Graph:
    """Build the autodiff graph for a batch.

    Parameter leaves hold the *effective* weights (mask and weight quantiser
    already applied), so their gradients are straight-through gradients for
    the stored master weights.  Activation quantisation sits in the graph as
    a straight-through op after every layer but the last; its gradient is
    cut where the activation saturates.
    """
    arch = checkpoint.architecture
    x = np.asarray(images)
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float32)
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(arch.input_shape):
        raise ad.ShapeError(
            "forward", f"images {x.shape} do not match architecture input (N, {', '.join(map(str, arch.input_shape))})", ("images",)
        )
    values = checkpoint.effective_params() if params is None else params
    leaves = {
        k: ad.Tensor(v.astype(x.dtype, copy=False), requires_grad=param_grad, name=k) for k, v in values.items()
    }
    inputs = ad.Tensor(x, requires_grad=input_grad, name="input")
    act_fmt = checkpoint.activation_format

    h = inputs
    activations = []
    last = len(arch.layers) - 1
    for i, layer in enumerate(arch.layers):
        if layer.kind == "conv":
            h = ad.conv2d(h, leaves[f"{i}.weight"], leaves[f"{i}.bias"], layer.stride)
        elif layer.kind == "dense":
            h = ad.dense(h, leaves[f"{i}.weight"], leaves[f"{i}.bias"])
        elif layer.kind == "maxpool2":
            h = ad.maxpool2(h)
        elif layer.kind == "relu":
            h = ad.relu(h)
        elif layer.kind == "flatten":
            h = ad.flatten(h)
            continue
        if i == last:
            break
        if act_fmt is not None:
            h = ad.straight_through(h, lambda a, f=act_fmt: quantise_array(a, f), (act_fmt.min_value, act_fmt.max_value))
        activations.append(h)
    return Graph(inputs, h, leaves, activations)


def forward(checkpoint: Checkpoint, images, record_activations: bool = False, batch_size: int = 500):
    """Logits for ``images``; with ``record_activations`` also the hidden layer outputs."""
    x = np.asarray(images)
    logits, acts = [], []
    for start in range(0, max(len(x), 1), batch_size):
        g = build_graph(checkpoint, x[start : start + batch_size])
        logits.append(g.logits.data)
        if record_activations:
            acts.append([a.data for a in g.activations])
    out = np.concatenate(logits) if logits else np.zeros((0,) + checkpoint.architecture.output_shape, np.float32)
    if not record_activations:
        return out
    per_layer = [np.concatenate([batch[j] for batch in acts]) for j in range(len(acts[0]))] if acts else []
    return out, per_layer


def predict(checkpoint: Checkpoint, images, batch_size: int = 500) -> np.ndarray:
    return forward(checkpoint, images, batch_size=batch_size).argmax(axis=1)


# --------------------------------------------------------------------------
# serialisation
# --------------------------------------------------------------------------


class CheckpointError(ValueError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


def _pack_format(fmt: FixedPointFormat, applies_to: int) -> bytes:
    return struct.pack("<BBBB", 1, fmt.bitwidth, fmt.integer_bits, applies_to)


def dumps(checkpoint: Checkpoint) -> bytes:
    body = bytearray()
    meta = dict(checkpoint.metadata)
    meta["architecture"] = checkpoint.architecture.to_text()
    body += struct.pack("<I", len(meta))
    for key in sorted(meta):
        k, v = key.encode(), meta[key].encode()
        body += struct.pack("<H", len(k)) + k + struct.pack("<I", len(v)) + v

    body += struct.pack("<I", len(checkpoint.params))
    for name, arr in checkpoint.params.items():
        n = name.encode()
        body += struct.pack("<H", len(n)) + n
        body += struct.pack("<BB", DTYPE_F32, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += np.ascontiguousarray(arr, dtype="<f4").tobytes()
        mask = checkpoint.masks.get(name)
        if mask is None:
            body += b"\x00"
        else:
            body += b"\x01" + np.packbits(mask.astype(np.uint8).ravel(), bitorder="little").tobytes()
        fmt = checkpoint.weight_formats.get(name)
        body += b"\x00" if fmt is None else _pack_format(fmt, APPLIES_WEIGHTS)
    fmt = checkpoint.activation_format
    body += b"\x00" if fmt is None else _pack_format(fmt, APPLIES_ACTIVATIONS)

    header = MAGIC + struct.pack("<HQ", FORMAT_VERSION, len(body))
    return header + bytes(body) + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError("checkpoint body ends early")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def fmt_record(self, expect: int) -> FixedPointFormat | None:
        (present,) = self.unpack("<B")
        if not present:
            return None
        bits, ibits, applies = self.unpack("<BBB")
        if applies != expect:
            raise CheckpointError(f"quantisation record applies_to={applies}, expected {expect}")
        return FixedPointFormat(bits, ibits)


def loads(data: bytes) -> Checkpoint:
    if len(data) < 4 or data[:4] != MAGIC:
        raise CheckpointMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 14:
        raise CheckpointTruncatedError("checkpoint header is incomplete")
    version, length = struct.unpack("<HQ", data[4:14])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"format version {version}, this reader handles {FORMAT_VERSION}")
    if len(data) < 14 + length + 4:
        raise CheckpointTruncatedError(f"expected {14 + length + 4} bytes, file has {len(data)}")
    body = data[14 : 14 + length]
    (crc,) = struct.unpack("<I", data[14 + length : 18 + length])
    if zlib.crc32(body) != crc:
        raise CheckpointChecksumError("CRC32 mismatch: checkpoint payload is corrupt")

    r = _Reader(body)
    (n_meta,) = r.unpack("<I")
    meta = {}
    for _ in range(n_meta):
        (klen,) = r.unpack("<H")
        key = r.take(klen).decode()
        (vlen,) = r.unpack("<I")
        meta[key] = r.take(vlen).decode()
    architecture = parse_architecture(meta.pop("architecture"))

    params, masks, wfmts = {}, {}, {}
    (n_tensor,) = r.unpack("<I")
    for _ in range(n_tensor):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        dtype, ndim = r.unpack("<BB")
        if dtype != DTYPE_F32:
            raise CheckpointError(f"{name}: unsupported dtype tag {dtype}")
        shape = r.unpack(f"<{ndim}I")
        count = math.prod(shape)
        params[name] = np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)
        (has_mask,) = r.unpack("<B")
        if has_mask:
            bits = np.frombuffer(r.take((count + 7) // 8), dtype=np.uint8)
            masks[name] = np.unpackbits(bits, count=count, bitorder="little").reshape(shape)
        fmt = r.fmt_record(APPLIES_WEIGHTS)
        if fmt is not None:
            wfmts[name] = fmt
    act = r.fmt_record(APPLIES_ACTIVATIONS)
    ckpt = Checkpoint(architecture, params, masks, wfmts, act, meta)
    if bad := ckpt.off_grid():
        raise CheckpointError(f"stored weights off their quantisation grid: {', '.join(bad)}")
    return ckpt


def save(checkpoint: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(checkpoint))
    return path


def load(path) -> Checkpoint:
    return loads(Path(path).read_bytes())


def weight_values(checkpoint: Checkpoint, names: Iterable[str] | None = None) -> np.ndarray:
    """All effective weight elements (biases excluded), pooled into one flat array."""
    eff = checkpoint.effective_params()
    names = checkpoint.architecture.weight_names() if names is None else names
    return np.concatenate([eff[n].ravel() for n in names])
