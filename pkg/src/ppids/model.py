"""Network descriptions, weights, batchnorm folding and the SINF model file.

Tensors are laid out NCHW.  Parametric layers carry a ``name``; their weights
live in a flat mapping ``"<name>.<param>" -> float64 array``:

* Conv2d: ``weight`` (F, C, k, k), ``bias`` (F,) when ``bias`` is set
* BatchNorm: ``gamma``, ``beta``, ``mean``, ``var`` (C,)
* Affine: ``scale``, ``shift`` (C,)
* Dense: ``weight`` (D, K), ``bias`` (K,)

Model file (little-endian)::

    b"SINF" | u16 version | u32 spec length | canonical spec JSON
    u32 tensor count
    per tensor: u16 name length | name | u8 rank | rank x u32 dims | float64 payload
    32-byte SHA-256 of everything before it
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ChecksumError, FormatError, MissingStats, SpecError, UnsupportedLayer

FORMAT_VERSION = 1
MAGIC = b"SINF"

CLASS_NAMES = ("backdoor", "ddos", "injection", "normal",
               "password", "ransomware", "scanning", "xss")


# --- layers -------------------------------------------------------------------


@dataclass(frozen=True)
class Conv2d:
    name: str
    out_ch: int
    kernel: int
    stride: int = 1
    pad: int = 0
    bias: bool = True
    kind = "conv2d"


@dataclass(frozen=True)
class BatchNorm:
    name: str
    eps: float = 1e-5
    kind = "batchnorm"


@dataclass(frozen=True)
class Affine:
    name: str
    kind = "affine"


@dataclass(frozen=True)
class ReLU:
    kind = "relu"


@dataclass(frozen=True)
class MaxPool:
    k: int
    stride: int | None = None
    pad: int = 0
    kind = "maxpool"

    @property
    def step(self) -> int:
        return self.stride or self.k


@dataclass(frozen=True)
class AvgPool:
    k: int
    kind = "avgpool"


@dataclass(frozen=True)
class GlobalAvgPool:
    kind = "globalavgpool"


@dataclass(frozen=True)
class Dense:
    name: str
    in_features: int
    out_features: int
    kind = "dense"


@dataclass(frozen=True)
class Residual:
    """out = branch(x) + shortcut(x); an empty shortcut is the identity."""

    branch: tuple
    shortcut: tuple = ()
    kind = "residual"


@dataclass(frozen=True)
class Bottleneck:
    """Three-convolution residual unit (1x1, 3x3, 1x1) followed by ReLU."""

    name: str
    in_ch: int
    mid_ch: int
    out_ch: int
    stride: int = 1
    norm: str = "batchnorm"
    kind = "bottleneck"

    def expand(self) -> list:
        norm = BatchNorm if self.norm == "batchnorm" else Affine
        n = self.name
        branch = (Conv2d(f"{n}.conv1", self.mid_ch, 1, bias=False), norm(f"{n}.bn1"), ReLU(),
                  Conv2d(f"{n}.conv2", self.mid_ch, 3, self.stride, 1, bias=False),
                  norm(f"{n}.bn2"), ReLU(),
                  Conv2d(f"{n}.conv3", self.out_ch, 1, bias=False), norm(f"{n}.bn3"))
        shortcut = ()
        if self.stride != 1 or self.in_ch != self.out_ch:
            shortcut = (Conv2d(f"{n}.down", self.out_ch, 1, self.stride, bias=False),
                        norm(f"{n}.down_bn"))
        return [Residual(branch, shortcut), ReLU()]


LAYER_TYPES = {cls.kind: cls for cls in (Conv2d, BatchNorm, Affine, ReLU, MaxPool, AvgPool,
                                          GlobalAvgPool, Dense, Residual, Bottleneck)}


def layer_to_dict(layer) -> dict:
    d = {"type": layer.kind}
    for f in layer.__dataclass_fields__:
        v = getattr(layer, f)
        d[f] = [layer_to_dict(x) for x in v] if isinstance(v, tuple) else v
    return d


def layer_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("type", None)
    cls = LAYER_TYPES.get(kind)
    if cls is None:
        raise UnsupportedLayer(f"unknown layer type {kind!r}")
    for f in ("branch", "shortcut"):
        if f in d:
            d[f] = tuple(layer_from_dict(x) for x in d[f])
    try:
        return cls(**d)
    except TypeError as exc:
        raise SpecError(f"bad fields for {kind}: {exc}") from None


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple            # (C, H, W)
    layers: tuple
    class_count: int = 8
    normalize: tuple | None = None  # ((mean per channel), (std per channel))

    def to_dict(self) -> dict:
        return {"input_shape": list(self.input_shape),
                "layers": [layer_to_dict(x) for x in self.layers],
                "class_count": self.class_count,
                "normalize": [list(v) for v in self.normalize] if self.normalize else None}

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> ModelSpec:
        try:
            norm = d.get("normalize")
            return cls(tuple(d["input_shape"]),
                       tuple(layer_from_dict(x) for x in d["layers"]),
                       int(d.get("class_count", 8)),
                       (tuple(norm[0]), tuple(norm[1])) if norm else None)
        except (KeyError, TypeError) as exc:
            raise SpecError(f"malformed spec: {exc}") from None

    @classmethod
    def from_text(cls, text: str) -> ModelSpec:
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise SpecError(f"spec is not JSON: {exc}") from None

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def iter_primitive(layers):
    """Depth-first walk yielding every primitive (non-container) layer."""
    for layer in layers:
        if isinstance(layer, Bottleneck):
            yield from iter_primitive(layer.expand())
        elif isinstance(layer, Residual):
            yield from iter_primitive(layer.branch)
            yield from iter_primitive(layer.shortcut)
        else:
            yield layer


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def layer_output_shape(layer, shape: tuple) -> tuple:
    """Propagate a per-item shape ((C, H, W) or (D,)) through one layer."""
    if isinstance(layer, Bottleneck):
        if len(shape) != 3 or shape[0] != layer.in_ch:
            raise SpecError(f"{layer.name}: expects {layer.in_ch} channels, got {shape}")
        for sub in layer.expand():
            shape = layer_output_shape(sub, shape)
        return shape
    if isinstance(layer, Residual):
        a = shape
        for sub in layer.branch:
            a = layer_output_shape(sub, a)
        b = shape
        for sub in layer.shortcut:
            b = layer_output_shape(sub, b)
        if a != b:
            raise SpecError(f"residual branch {a} and shortcut {b} disagree")
        return a
    if isinstance(layer, Dense):
        if len(shape) != 1 or shape[0] != layer.in_features:
            raise SpecError(f"{layer.name}: expects ({layer.in_features},), got {shape}")
        if layer.out_features < 1:
            raise SpecError(f"{layer.name}: no outputs")
        return (layer.out_features,)
    if isinstance(layer, (ReLU,)):
        return shape
    if len(shape) != 3:
        raise SpecError(f"{layer.kind} needs a (C, H, W) input, got {shape}")
    c, h, w = shape
    if isinstance(layer, Conv2d):
        if layer.kernel < 1 or layer.stride < 1 or layer.pad < 0 or layer.out_ch < 1:
            raise SpecError(f"{layer.name}: invalid geometry")
        oh, ow = (_conv_out(v, layer.kernel, layer.stride, layer.pad) for v in (h, w))
        if oh < 1 or ow < 1:
            raise SpecError(f"{layer.name}: kernel {layer.kernel} larger than input {h}x{w}")
        return (layer.out_ch, oh, ow)
    if isinstance(layer, (BatchNorm, Affine)):
        return shape
    if isinstance(layer, MaxPool):
        if layer.k < 1 or layer.step < 1 or layer.pad < 0 or 2 * layer.pad > layer.k:
            raise SpecError("maxpool: invalid geometry")
        oh, ow = (_conv_out(v, layer.k, layer.step, layer.pad) for v in (h, w))
        if oh < 1 or ow < 1:
            raise SpecError(f"maxpool window {layer.k} larger than input {h}x{w}")
        return (c, oh, ow)
    if isinstance(layer, AvgPool):
        if layer.k < 1 or h < layer.k or w < layer.k:
            raise SpecError(f"avgpool window {layer.k} invalid for input {h}x{w}")
        return (c, h // layer.k, w // layer.k)
    if isinstance(layer, GlobalAvgPool):
        return (c,)
    raise UnsupportedLayer(f"unsupported layer {layer!r}")


def shape_check(spec: ModelSpec) -> list[tuple]:
    """Validate the model spec end to end; returns (layer, input, output) shapes."""
    if len(spec.input_shape) != 3 or min(spec.input_shape) < 1:
        raise SpecError(f"input shape must be (C, H, W), got {spec.input_shape}")
    shape, trace, names = tuple(spec.input_shape), [], set()
    for layer in iter_primitive(spec.layers):
        name = getattr(layer, "name", None)
        if name is not None:
            if name in names:
                raise SpecError(f"duplicate layer name {name!r}")
            names.add(name)
    for layer in spec.layers:
        out = layer_output_shape(layer, shape)
        trace.append((layer, shape, out))
        shape = out
    if shape != (spec.class_count,):
        raise SpecError(f"network emits {shape}, expected ({spec.class_count},) logits")
    if spec.normalize is not None:
        mean, std = spec.normalize
        if len(mean) != spec.input_shape[0] or len(std) != spec.input_shape[0]:
            raise SpecError("normalisation needs one mean/std per input channel")
        if any(s <= 0 for s in std):
            raise SpecError("normalisation std must be positive")
    return trace


# --- canonical architectures ----------------------------------------------------


def make_desk_spec(class_count: int = 8) -> ModelSpec:
    """Small CNN used for encrypted runs: 32x32x3 input, `class_count` logits."""
    return ModelSpec((3, 32, 32), (
        Conv2d("conv1", 8, 3),
        ReLU(),
        MaxPool(2, 2),
        Conv2d("conv2", 16, 3),
        ReLU(),
        GlobalAvgPool(),
        Dense("fc", 16, class_count),
    ), class_count)


RESNET50_STAGES = (3, 4, 6, 3)


def make_resnet50_spec(class_count: int = 8, input_size: int = 224) -> ModelSpec:
    layers = [Conv2d("conv1", 64, 7, 2, 3, bias=False), BatchNorm("bn1"), ReLU(),
              MaxPool(3, 2, 1)]
    in_ch = 64
    for stage, (blocks, mid) in enumerate(zip(RESNET50_STAGES, (64, 128, 256, 512)), 1):
        for i in range(blocks):
            stride = 2 if (i == 0 and stage > 1) else 1
            layers.append(Bottleneck(f"layer{stage}.{i}", in_ch, mid, mid * 4, stride))
            in_ch = mid * 4
    layers += [GlobalAvgPool(), Dense("fc", in_ch, class_count)]
    return ModelSpec((3, input_size, input_size), tuple(layers), class_count)


# --- weights --------------------------------------------------------------------


def param_shapes(spec: ModelSpec) -> dict[str, tuple]:
    """Expected weight tensor shapes, derived by shape propagation."""
    shapes: dict[str, tuple] = {}

    def walk(layers, shape):
        for layer in layers:
            if isinstance(layer, Bottleneck):
                walk(layer.expand(), shape)
            elif isinstance(layer, Residual):
                walk(layer.branch, shape)
                walk(layer.shortcut, shape)
            elif isinstance(layer, Conv2d):
                shapes[f"{layer.name}.weight"] = (layer.out_ch, shape[0], layer.kernel, layer.kernel)
                if layer.bias:
                    shapes[f"{layer.name}.bias"] = (layer.out_ch,)
            elif isinstance(layer, BatchNorm):
                for p in ("gamma", "beta", "mean", "var"):
                    shapes[f"{layer.name}.{p}"] = (shape[0],)
            elif isinstance(layer, Affine):
                shapes[f"{layer.name}.scale"] = (shape[0],)
                shapes[f"{layer.name}.shift"] = (shape[0],)
            elif isinstance(layer, Dense):
                shapes[f"{layer.name}.weight"] = (layer.in_features, layer.out_features)
                shapes[f"{layer.name}.bias"] = (layer.out_features,)
            shape = layer_output_shape(layer, shape)
        return shape

    shape_check(spec)
    walk(spec.layers, tuple(spec.input_shape))
    return shapes


def check_weights(spec: ModelSpec, weights: dict[str, np.ndarray]) -> None:
    expected = param_shapes(spec)
    missing = set(expected) - set(weights)
    stats = [k for k in missing if k.rsplit(".", 1)[1] in ("mean", "var")]
    if stats:
        raise MissingStats(f"batchnorm statistics missing: {sorted(stats)[:4]}")
    if missing:
        raise SpecError(f"missing weights: {sorted(missing)[:4]}")
    for k, shp in expected.items():
        if tuple(np.shape(weights[k])) != shp:
            raise SpecError(f"{k}: shape {np.shape(weights[k])} != {shp}")


def gen_synthetic_weights(spec: ModelSpec, seed: int = 0, scale: float = 1.0) -> dict:
    """He-initialised weights; ``scale`` multiplies conv/dense weights and biases."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, shp in sorted(param_shapes(spec).items()):
        param = name.rsplit(".", 1)[1]
        if param == "weight":
            fan_in = int(np.prod(shp[1:])) if len(shp) == 4 else shp[0]
            w = rng.normal(0.0, math.sqrt(2.0 / fan_in), shp) * scale
        elif param == "bias":
            w = rng.normal(0.0, 0.1, shp) * scale
        elif param in ("gamma", "scale"):
            w = rng.uniform(0.5, 1.5, shp)
        elif param in ("beta", "shift", "mean"):
            w = rng.normal(0.0, 0.1, shp)
        elif param == "var":
            w = rng.uniform(0.5, 2.0, shp)
        else:
            raise SpecError(f"unknown parameter {name}")
        out[name] = np.asarray(w, dtype=np.float64)
    return out


def fold_batchnorm(spec: ModelSpec, weights: dict) -> tuple[ModelSpec, dict]:
    """Replace every BatchNorm by the equivalent per-channel Affine."""
    new = {k: v for k, v in weights.items()}

    def fold_one(name, eps):
        try:
            g, b = weights[f"{name}.gamma"], weights[f"{name}.beta"]
            m, v = weights[f"{name}.mean"], weights[f"{name}.var"]
        except KeyError as exc:
            raise MissingStats(f"{name}: missing {exc.args[0]}") from None
        scale = np.asarray(g, np.float64) / np.sqrt(np.asarray(v, np.float64) + eps)
        for p in ("gamma", "beta", "mean", "var"):
            new.pop(f"{name}.{p}")
        new[f"{name}.scale"] = scale
        new[f"{name}.shift"] = np.asarray(b, np.float64) - np.asarray(m, np.float64) * scale

    def walk(layers):
        out = []
        for layer in layers:
            if isinstance(layer, BatchNorm):
                fold_one(layer.name, layer.eps)
                out.append(Affine(layer.name))
            elif isinstance(layer, Bottleneck):
                if layer.norm == "batchnorm":
                    for sub in iter_primitive([layer]):
                        if isinstance(sub, BatchNorm):
                            fold_one(sub.name, sub.eps)
                out.append(replace(layer, norm="affine"))
            elif isinstance(layer, Residual):
                out.append(Residual(tuple(walk(layer.branch)), tuple(walk(layer.shortcut))))
            else:
                out.append(layer)
        return out

    return replace(spec, layers=tuple(walk(spec.layers))), new


# --- model file -----------------------------------------------------------------


@dataclass
class Model:
    spec: ModelSpec
    weights: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        spec_raw = self.spec.canonical().encode()
        parts = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(spec_raw)), spec_raw,
                 struct.pack("<I", len(self.weights))]
        for name in sorted(self.weights):
            arr = np.ascontiguousarray(self.weights[name], dtype="<f8")
            raw = name.encode()
            parts += [struct.pack("<H", len(raw)), raw,
                      struct.pack("<B" + "I" * arr.ndim, arr.ndim, *arr.shape), arr.tobytes()]
        body = b"".join(parts)
        return body + hashlib.sha256(body).digest()

    @classmethod
    def from_bytes(cls, data: bytes) -> Model:
        if len(data) < 4 + 6 + 4 + 32 or data[:4] != MAGIC:
            raise FormatError("not a SINF model file")
        body, digest = data[:-32], data[-32:]
        if hashlib.sha256(body).digest() != digest:
            raise ChecksumError("model file checksum mismatch")
        try:
            version, spec_len = struct.unpack_from("<HI", body, 4)
            if version != FORMAT_VERSION:
                raise FormatError(f"unsupported model version {version}")
            pos = 10
            spec = ModelSpec.from_text(body[pos:pos + spec_len].decode())
            pos += spec_len
            (count,) = struct.unpack_from("<I", body, pos)
            pos += 4
            weights = {}
            for _ in range(count):
                (nlen,) = struct.unpack_from("<H", body, pos)
                name = body[pos + 2:pos + 2 + nlen].decode()
                pos += 2 + nlen
                (rank,) = struct.unpack_from("<B", body, pos)
                dims = struct.unpack_from("<" + "I" * rank, body, pos + 1)
                pos += 1 + 4 * rank
                n = int(np.prod(dims, dtype=np.int64)) if rank else 1
                weights[name] = np.frombuffer(body, "<f8", n, pos).astype(np.float64).reshape(dims)
                pos += 8 * n
        except (struct.error, UnicodeDecodeError, ValueError) as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"corrupt model file: {exc}") from None
        if pos != len(body):
            raise FormatError("trailing bytes in model file")
        return cls(spec, weights)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def save_model(model: Model, path) -> None:
    Path(path).write_bytes(model.to_bytes())


def load_model(path) -> Model:
    return Model.from_bytes(Path(path).read_bytes())
