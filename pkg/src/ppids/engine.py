"""Layer-graph driver and the plaintext reference backends.

One driver walks a :class:`~ppids.model.ModelSpec` and calls a backend per
primitive layer.  The float backend, the fixed-point oracle, the dealer's
planner and the secure backend all implement the same small interface, so
the order and shape of every multiplication, truncation and comparison is
fixed in exactly one place.

Schedule shared by the fixed-point oracle and the secure engine:

* conv / dense: im2col matmul of encodings (scale b^2p), truncate by b^p,
  add the encoded bias
* affine: per-channel product (scale b^2p), truncate, add the encoded shift
* relu, maxpool: exact, no rescaling; maxpool padding uses a large negative
  public constant
* avgpool / global avgpool: sum, then exact floor division by the window size
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import model as M
from .ring import FixedPointCodec, encode, floor_div_plain, safe_bound, truncate_plain


def im2col(x: np.ndarray, k: int, stride: int = 1, pad: int = 0, fill=0):
    """(N, C, H, W) -> (N*oh*ow, C*k*k) patches, rows ordered (n, i, j)."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=fill)
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, oh, ow = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * k * k), (oh, ow)


def pool_windows(x: np.ndarray, k: int, stride: int, pad: int = 0, fill=0) -> np.ndarray:
    """(N, C, H, W) -> (N, C, oh, ow, k*k) window contents."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=fill)
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.reshape(win.shape[:4] + (k * k,))


def cols_to_nchw(y: np.ndarray, n: int, oh: int, ow: int) -> np.ndarray:
    return y.reshape(n, oh, ow, -1).transpose(0, 3, 1, 2)


def crop_to(x: np.ndarray, k: int) -> np.ndarray:
    h, w = x.shape[2] // k * k, x.shape[3] // k * k
    return x[:, :, :h, :w]


def maxpool_fill(ring) -> int:
    """Signed padding value for maxpool: below any in-range activation."""
    return -safe_bound(ring) + 1


def tournament_schedule(elements: int) -> list[int]:
    """Comparisons per round of a pairwise max over ``elements`` values."""
    out = []
    while elements > 1:
        out.append(elements // 2)
        elements = elements // 2 + elements % 2
    return out


# --- driver ---------------------------------------------------------------------


class Driver:
    """Walks layers in order; backends see ``begin(label)`` before each step."""

    def __init__(self, backend):
        self.backend = backend
        self.step = 0

    def run(self, spec: M.ModelSpec, x):
        return self.run_layers(spec.layers, x)

    def run_layers(self, layers, x):
        for layer in layers:
            x = self.run_layer(layer, x)
        return x

    def _begin(self, label: str) -> None:
        self.backend.begin(f"{self.step}:{label}")
        self.step += 1

    def run_layer(self, layer, x):
        be = self.backend
        if isinstance(layer, M.Bottleneck):
            return self.run_layers(layer.expand(), x)
        if isinstance(layer, M.Residual):
            a = self.run_layers(layer.branch, x)
            b = self.run_layers(layer.shortcut, x) if layer.shortcut else x
            self._begin("add")
            return be.add(a, b)
        self._begin(getattr(layer, "name", layer.kind))
        if isinstance(layer, M.Conv2d):
            return be.conv2d(x, layer)
        if isinstance(layer, M.Affine):
            return be.affine(x, layer)
        if isinstance(layer, M.BatchNorm):
            return be.batchnorm(x, layer)
        if isinstance(layer, M.ReLU):
            return be.relu(x)
        if isinstance(layer, M.MaxPool):
            return be.maxpool(x, layer)
        if isinstance(layer, M.AvgPool):
            return be.avgpool(x, layer)
        if isinstance(layer, M.GlobalAvgPool):
            return be.global_avgpool(x)
        if isinstance(layer, M.Dense):
            return be.dense(x, layer)
        raise M.UnsupportedLayer(f"no execution rule for {layer!r}")


def normalize_input(spec: M.ModelSpec, x) -> np.ndarray:
    """Apply the model spec's per-channel normalisation to a (N, C, H, W) float batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if spec.normalize is None:
        return x
    mean, std = (np.asarray(v, np.float64).reshape(1, -1, 1, 1) for v in spec.normalize)
    return (x - mean) / std


# --- float reference ----------------------------------------------------------------


class FloatBackend:
    def __init__(self, weights: dict):
        self.w = weights

    def begin(self, label):
        pass

    def conv2d(self, x, layer):
        w = self.w[f"{layer.name}.weight"]
        cols, (oh, ow) = im2col(x, layer.kernel, layer.stride, layer.pad)
        y = cols @ w.reshape(w.shape[0], -1).T
        if layer.bias:
            y = y + self.w[f"{layer.name}.bias"]
        return cols_to_nchw(y, x.shape[0], oh, ow)

    def affine(self, x, layer):
        s = self.w[f"{layer.name}.scale"].reshape(1, -1, 1, 1)
        return x * s + self.w[f"{layer.name}.shift"].reshape(1, -1, 1, 1)

    def batchnorm(self, x, layer):
        n = layer.name
        g, b, m, v = (self.w[f"{n}.{p}"].reshape(1, -1, 1, 1) for p in ("gamma", "beta", "mean", "var"))
        return g * (x - m) / np.sqrt(v + layer.eps) + b

    def relu(self, x):
        return np.maximum(x, 0.0)

    def maxpool(self, x, layer):
        return pool_windows(x, layer.k, layer.step, layer.pad, -np.inf).max(axis=-1)

    def avgpool(self, x, layer):
        return pool_windows(crop_to(x, layer.k), layer.k, layer.k).mean(axis=-1)

    def global_avgpool(self, x):
        return x.mean(axis=(2, 3))

    def dense(self, x, layer):
        return x @ self.w[f"{layer.name}.weight"] + self.w[f"{layer.name}.bias"]

    def add(self, a, b):
        return a + b


def infer_plain_float(spec: M.ModelSpec, weights: dict, x) -> np.ndarray:
    """Float logits of shape (N, classes)."""
    return Driver(FloatBackend(weights)).run(spec, normalize_input(spec, x))


# --- fixed-point oracle -------------------------------------------------------------


def quantize_weights(weights: dict, codec: FixedPointCodec) -> dict:
    out = {}
    for name, w in weights.items():
        try:
            out[name] = np.asarray(encode(np.asarray(w, np.float64), codec), codec.ring.dtype)
        except OverflowError as exc:
            raise OverflowError(f"weight {name}: {exc}") from None
    return out


class FixedBackend:
    """Ring arithmetic with ``truncate_plain``: the reference the secure path must equal.

    Float shadows of every pre-reduction value raise OverflowError (naming the
    layer) once a magnitude reaches the safe bound 2^(s-2).
    """

    def __init__(self, qweights: dict, codec: FixedPointCodec, check: bool = True):
        self.q, self.codec, self.ring = qweights, codec, codec.ring
        self.check = check
        self.label = "input"

    def begin(self, label):
        self.label = label

    def _f(self, a) -> np.ndarray:
        return self.ring.signed(a).astype(np.float64)

    def _guard(self, estimate) -> None:
        if self.check and estimate.size and np.max(np.abs(estimate)) >= safe_bound(self.ring):
            raise OverflowError(f"overflow in layer {self.label}: magnitude "
                                f"{np.max(np.abs(estimate)):.3g} reaches 2^{self.ring.bits - 2}")

    def _rescale_add(self, raw, bias, est):
        """truncate(raw) + bias with the float shadow ``est`` of ``raw``."""
        self._guard(est)
        y = truncate_plain(raw, self.codec)
        if bias is not None:
            self._guard(est / self.codec.scale + self._f(bias))
            y = self.ring.add(y, bias)
        return y

    def conv2d(self, x, layer):
        r = self.ring
        w = self.q[f"{layer.name}.weight"]
        cols, (oh, ow) = im2col(x, layer.kernel, layer.stride, layer.pad)
        wm = w.reshape(w.shape[0], -1).T
        est = self._f(cols) @ self._f(wm) if self.check else np.zeros(0)
        bias = self.q[f"{layer.name}.bias"] if layer.bias else None
        y = self._rescale_add(r.matmul(cols, wm), bias, est)
        return cols_to_nchw(y, x.shape[0], oh, ow)

    def affine(self, x, layer):
        r = self.ring
        s = self.q[f"{layer.name}.scale"].reshape(1, -1, 1, 1)
        t = self.q[f"{layer.name}.shift"].reshape(1, -1, 1, 1)
        s_full = np.broadcast_to(s, x.shape)
        est = self._f(x) * self._f(s_full) if self.check else np.zeros(0)
        return self._rescale_add(r.mul(x, s_full), np.broadcast_to(t, x.shape), est)

    def batchnorm(self, x, layer):
        raise M.UnsupportedLayer(f"{layer.name}: fold batchnorm before fixed-point inference")

    def relu(self, x):
        return np.where(self.ring.signed(x) >= 0, x, self.ring.dtype.type(0))

    def maxpool(self, x, layer):
        fill = maxpool_fill(self.ring)
        win = pool_windows(self.ring.signed(x), layer.k, layer.step, layer.pad, fill)
        return self.ring.from_signed(win.max(axis=-1))

    def _avg(self, win, count):
        est = self._f(win).sum(axis=-1)
        self._guard(est)
        total = np.sum(win, axis=-1, dtype=self.ring.dtype)
        return floor_div_plain(self.ring.wrap(total), count, self.ring)

    def avgpool(self, x, layer):
        return self._avg(pool_windows(crop_to(x, layer.k), layer.k, layer.k), layer.k ** 2)

    def global_avgpool(self, x):
        n, c, h, w = x.shape
        return self._avg(x.reshape(n, c, h * w), h * w)

    def dense(self, x, layer):
        w = self.q[f"{layer.name}.weight"]
        est = self._f(x) @ self._f(w) if self.check else np.zeros(0)
        return self._rescale_add(self.ring.matmul(x, w), self.q[f"{layer.name}.bias"], est)

    def add(self, a, b):
        self._guard(self._f(a) + self._f(b))
        return self.ring.add(a, b)


def encode_input(spec: M.ModelSpec, x, codec: FixedPointCodec) -> np.ndarray:
    try:
        return np.asarray(encode(normalize_input(spec, x), codec), codec.ring.dtype)
    except OverflowError as exc:
        raise OverflowError(f"overflow in layer input: {exc}") from None


def infer_plain_fixed(spec: M.ModelSpec, qweights: dict, qx, codec: FixedPointCodec,
                      check: bool = True) -> np.ndarray:
    """Ring-valued logits (N, classes) for an already encoded input batch."""
    qx = np.asarray(qx, codec.ring.dtype)
    if qx.ndim == 3:
        qx = qx[None]
    return Driver(FixedBackend(qweights, codec, check)).run(spec, qx)


def fixed_logits(spec: M.ModelSpec, weights: dict, x, codec: FixedPointCodec) -> np.ndarray:
    """Convenience: quantize, encode and run the oracle; returns ring logits."""
    return infer_plain_fixed(spec, quantize_weights(weights, codec),
                             encode_input(spec, x, codec), codec)


# --- static magnitude bounds (safe-range validation) -----------------------------


class BoundBackend:
    """Propagates (L-infinity bound in real units, per-item shape) pairs.

    ``peak`` tracks the largest pre-reduction magnitude in ring units, which
    must stay below 2^(s-2) for the secure engine to be exact.
    """

    def __init__(self, weights: dict, codec: FixedPointCodec):
        self.w, self.codec = weights, codec
        self.ulp = 1.0 / codec.scale
        self.peak, self.where, self.label = 0.0, "input", "input"

    def begin(self, label):
        self.label = label

    def _note(self, raw: float):
        if raw > self.peak:
            self.peak, self.where = raw, self.label

    def _abs(self, name):
        return np.abs(self.w[name]) + self.ulp

    def _linear(self, b, gain, bias_name):
        mac = (b + self.ulp) * gain
        self._note(mac * self.codec.scale ** 2)
        out = mac + float(self._abs(bias_name).max()) + self.ulp if bias_name else mac + self.ulp
        self._note(out * self.codec.scale)
        return out

    def conv2d(self, x, layer):
        b, shape = x
        w = self._abs(f"{layer.name}.weight")
        gain = float(w.reshape(w.shape[0], -1).sum(axis=1).max())
        out = self._linear(b, gain, f"{layer.name}.bias" if layer.bias else None)
        return out, M.layer_output_shape(layer, shape)

    def affine(self, x, layer):
        b, shape = x
        return self._linear(b, float(self._abs(f"{layer.name}.scale").max()),
                            f"{layer.name}.shift"), shape

    def batchnorm(self, x, layer):
        raise M.UnsupportedLayer(f"{layer.name}: fold batchnorm first")

    def relu(self, x):
        return x

    def maxpool(self, x, layer):
        return x[0], M.layer_output_shape(layer, x[1])

    def avgpool(self, x, layer):
        self._note(x[0] * layer.k ** 2 * self.codec.scale)
        return x[0], M.layer_output_shape(layer, x[1])

    def global_avgpool(self, x):
        b, (c, h, w) = x
        self._note(b * h * w * self.codec.scale)
        return b, (c,)

    def dense(self, x, layer):
        b, _ = x
        gain = float(self._abs(f"{layer.name}.weight").sum(axis=0).max())
        return self._linear(b, gain, f"{layer.name}.bias"), (layer.out_features,)

    def add(self, x, y):
        b = x[0] + y[0]
        self._note(b * self.codec.scale)
        return b, x[1]


def magnitude_bound(spec: M.ModelSpec, weights: dict, codec: FixedPointCodec,
                    input_bound: float = 1.0) -> tuple[float, str]:
    """Worst-case ring magnitude reached anywhere, and the layer where it peaks.

    ``input_bound`` bounds |x| of the raw (pre-normalisation) input.
    """
    if spec.normalize is not None:
        mean, std = (np.asarray(v, np.float64) for v in spec.normalize)
        input_bound = float(np.max((input_bound + np.abs(mean)) / std))
    be = BoundBackend(weights, codec)
    be._note(input_bound * codec.scale)
    Driver(be).run(spec, (input_bound, tuple(spec.input_shape)))
    return be.peak, be.where
