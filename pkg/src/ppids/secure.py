"""Layer operations on additive shares.

Each operation mirrors one rule of the fixed-point oracle in
:mod:`ppids.engine` and consumes dealer material in plan order, so the
reconstructed output is bit-identical to the oracle's.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as M
from .dealer import CorrelatedMaterial, generate_material, plan_preprocessing
from .engine import Driver, cols_to_nchw, crop_to, im2col, maxpool_fill, pool_windows
from .errors import PartyMismatch, ShapeMismatch
from .fss import sign_from_opened, sign_mask
from .rand import Rng, derive_seed
from .ring import FixedPointCodec
from .sharing import (Opener, ShareTensor, add_shares, beaver_matmul, beaver_mul, reconstruct, share,
                      sub_shares, truncate_shared)


@dataclass
class SecureSession:
    party: int
    codec: FixedPointCodec
    material: CorrelatedMaterial
    opener: Opener

    @property
    def ring(self):
        return self.codec.ring

    @property
    def rounds(self) -> int:
        return self.opener.rounds

    def take(self, kind, elements=None):
        return self.material.take(kind, elements)

    def truncate(self, x: ShareTensor, divisor: int | None = None) -> ShareTensor:
        pair = self.take("trunc", x.data.size)
        return truncate_shared(x, pair, self.opener, self.codec, divisor)

    def sign(self, x: ShareTensor) -> ShareTensor:
        """Shares of [x >= 0] as ring 0/1 values, one opening round."""
        units = self.take("cmp", x.data.size)
        units.consume()
        flat = x.data.reshape(units.shape)
        (z,) = self.opener.open([sign_mask(self.party, flat, units)])
        return x.like(sign_from_opened(self.party, units, z).reshape(x.shape))

    def mul(self, x: ShareTensor, y: ShareTensor) -> ShareTensor:
        return beaver_mul(x, y, self.take("mul"), self.opener)


def _add_bias(y: ShareTensor, bias: ShareTensor | None) -> ShareTensor:
    if bias is None:
        return y
    if bias.party != y.party:
        raise PartyMismatch("bias share belongs to the other party")
    return y.like(y.ring.add(y.data, bias.data))


def sec_conv2d(sess: SecureSession, x: ShareTensor, w: ShareTensor, bias: ShareTensor | None = None,
               stride: int = 1, pad: int = 0) -> ShareTensor:
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv input {x.shape} vs weight {w.shape}")
    f, k = w.shape[0], w.shape[2]
    cols, (oh, ow) = im2col(x.data, k, stride, pad)
    wm = w.data.reshape(f, -1).T
    y = beaver_matmul(x.like(cols), w.like(wm), sess.take("matmul"), sess.opener)
    y = _add_bias(sess.truncate(y), bias)
    return y.like(cols_to_nchw(y.data, x.shape[0], oh, ow))


def sec_dense(sess: SecureSession, x: ShareTensor, w: ShareTensor,
              bias: ShareTensor | None = None) -> ShareTensor:
    if x.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"dense input {x.shape} vs weight {w.shape}")
    y = beaver_matmul(x, w, sess.take("matmul"), sess.opener)
    return _add_bias(sess.truncate(y), bias)


def sec_relu(sess: SecureSession, x: ShareTensor) -> ShareTensor:
    """x * [x >= 0]: one comparison round plus one multiplication round."""
    return sess.mul(x, sess.sign(x))


def _sec_max_pairs(sess: SecureSession, cur: ShareTensor) -> ShareTensor:
    """Tournament max along axis 1; one comparison and one product per edge."""
    while cur.shape[1] > 1:
        half = cur.shape[1] // 2
        a = cur.like(cur.data[:, 0:2 * half:2])
        b = cur.like(cur.data[:, 1:2 * half:2])
        diff = sub_shares(a, b)
        best = add_shares(b, sess.mul(diff, sess.sign(diff)))
        rest = cur.data[:, 2 * half:]
        cur = cur.like(np.concatenate([best.data, rest], axis=1) if rest.size else best.data)
    return cur


def sec_maxpool2d(sess: SecureSession, x: ShareTensor, k: int, stride: int | None = None,
                  pad: int = 0) -> ShareTensor:
    stride = stride or k
    ring = x.ring
    fill = ring.from_signed(np.int64(maxpool_fill(ring)))[()] if x.party == 0 else 0
    win = pool_windows(x.data, k, stride, pad, fill)
    out_shape = win.shape[:4]
    best = _sec_max_pairs(sess, x.like(win.reshape(-1, k * k)))
    return best.like(best.data.reshape(out_shape))


def _sec_mean(sess: SecureSession, x: ShareTensor, summed: np.ndarray, count: int) -> ShareTensor:
    return sess.truncate(x.like(x.ring.wrap(summed)), count)


def sec_avgpool2d(sess: SecureSession, x: ShareTensor, k: int) -> ShareTensor:
    win = pool_windows(crop_to(x.data, k), k, k)
    return _sec_mean(sess, x, np.sum(win, axis=-1, dtype=x.ring.dtype), k * k)


def sec_global_avgpool(sess: SecureSession, x: ShareTensor) -> ShareTensor:
    n, c, h, w = x.shape
    return _sec_mean(sess, x, np.sum(x.data.reshape(n, c, h * w), axis=-1, dtype=x.ring.dtype), h * w)


def sec_residual_add(x: ShareTensor, y: ShareTensor) -> ShareTensor:
    return add_shares(x, y)


def sec_affine(sess: SecureSession, x: ShareTensor, scale: ShareTensor,
               shift: ShareTensor) -> ShareTensor:
    c = x.shape[1]
    if scale.data.size != c or shift.data.size != c:
        raise ShapeMismatch(f"affine of {scale.shape} over {c} channels")
    bshape = (1, c) + (1,) * (x.data.ndim - 2)
    s_full = np.broadcast_to(scale.data.reshape(bshape), x.shape)
    y = sess.truncate(sess.mul(x, x.like(s_full)))
    return y.like(y.ring.add(y.data, shift.data.reshape(bshape)))


class SecureBackend:
    """Driver backend on shares; ``weights`` maps parameter names to ShareTensors."""

    def __init__(self, sess: SecureSession, weights: dict):
        self.sess, self.w = sess, weights

    def begin(self, label):
        self.sess.material.next_layer()

    def conv2d(self, x, layer):
        bias = self.w[f"{layer.name}.bias"] if layer.bias else None
        return sec_conv2d(self.sess, x, self.w[f"{layer.name}.weight"], bias, layer.stride, layer.pad)

    def affine(self, x, layer):
        return sec_affine(self.sess, x, self.w[f"{layer.name}.scale"], self.w[f"{layer.name}.shift"])

    def batchnorm(self, x, layer):
        raise M.UnsupportedLayer(f"{layer.name}: fold batchnorm before secure inference")

    def relu(self, x):
        return sec_relu(self.sess, x)

    def maxpool(self, x, layer):
        return sec_maxpool2d(self.sess, x, layer.k, layer.step, layer.pad)

    def avgpool(self, x, layer):
        return sec_avgpool2d(self.sess, x, layer.k)

    def global_avgpool(self, x):
        return sec_global_avgpool(self.sess, x)

    def dense(self, x, layer):
        return sec_dense(self.sess, x, self.w[f"{layer.name}.weight"], self.w[f"{layer.name}.bias"])

    def add(self, a, b):
        return sec_residual_add(a, b)


def secure_forward(spec: M.ModelSpec, sess: SecureSession, weights: dict,
                   x: ShareTensor) -> ShareTensor:
    """Run this party's half of the network; returns its logit share."""
    return Driver(SecureBackend(sess, weights)).run(spec, x)


def share_weights(qweights: dict, rng: Rng, codec: FixedPointCodec) -> tuple[dict, dict]:
    """Fresh additive shares of every quantized parameter."""
    w0, w1 = {}, {}
    for name in sorted(qweights):
        w0[name], w1[name] = share(qweights[name], rng, codec.ring)
    return w0, w1


def secure_infer_local(spec: M.ModelSpec, qweights: dict, qx, codec: FixedPointCodec,
                       seed=0) -> tuple[np.ndarray, int]:
    """Two in-process parties evaluate the network on shared ``qx`` (one item).

    Returns the reconstructed ring logits and the number of opening rounds.
    """
    from .protocol.transport import run_pair

    qx = np.asarray(qx, codec.ring.dtype)
    if qx.ndim == 3:
        qx = qx[None]
    rng = Rng(derive_seed(seed, "local"))
    plan = plan_preprocessing(spec, qx.shape[1:], codec, batch=qx.shape[0])
    m0, m1 = generate_material(plan, derive_seed(seed, "dealer"))
    x0, x1 = share(qx, rng, codec.ring)
    w0, w1 = share_weights(qweights, rng, codec)

    def party(b, mat, x, w):
        def run(opener):
            sess = SecureSession(b, codec, mat, opener)
            out = secure_forward(spec, sess, w, x)
            return out, sess.rounds
        return run

    (y0, r0), (y1, _) = run_pair(party(0, m0, x0, w0), party(1, m1, x1, w1), codec.ring)
    return reconstruct(y0, y1), r0
