"""Fixed-point encoding of reals into Z_{2^s} and wrapping ring arithmetic.

A real ``z`` is represented by the ring element ``m = round(z * b**p) mod 2**s``.
Values with the top bit set are read as negatives (two's complement), so the
representable interval is ``[-2**(s-1) / b**p, (2**(s-1) - 1) / b**p]``.

All array helpers accept scalars or numpy arrays and return numpy values of
the ring dtype.  Word sizes below 64 bits (including toy rings used by the
exhaustive tests) are masked after every operation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Ring",
    "FixedPointCodec",
    "encode",
    "encode_raw",
    "decode",
    "representable_range",
    "ring_add",
    "ring_sub",
    "ring_neg",
    "ring_mul_raw",
    "truncate_plain",
    "check_safe_range",
]


def _dtype_for(bits: int) -> np.dtype:
    for dt in (np.uint8, np.uint16, np.uint32, np.uint64):
        if np.iinfo(dt).bits >= bits:
            return np.dtype(dt)
    raise ValueError(f"word size {bits} exceeds 64 bits")


@dataclass(frozen=True)
class Ring:
    """The ring Z_{2^bits} backed by the narrowest unsigned numpy dtype."""

    bits: int = 64
    dtype: np.dtype = field(init=False, repr=False, compare=False)
    _mask: int = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 1 <= self.bits <= 64:
            raise ValueError(f"unsupported word size {self.bits}")
        object.__setattr__(self, "dtype", _dtype_for(self.bits))
        object.__setattr__(self, "_mask", (1 << self.bits) - 1)

    @property
    def modulus(self) -> int:
        return 1 << self.bits

    @property
    def native(self) -> bool:
        return self.dtype.itemsize * 8 == self.bits

    @property
    def nbytes(self) -> int:
        return self.dtype.itemsize

    def wrap(self, a):
        """Reduce an array already in the ring dtype modulo 2**bits."""
        a = np.asarray(a, dtype=self.dtype)
        if self.native:
            return a
        return a & self.dtype.type(self._mask)

    def from_int(self, a):
        """Map Python/numpy integers (any sign, any size) into the ring."""
        if isinstance(a, (int, np.integer)):
            return self.dtype.type(int(a) & self._mask)
        a = np.asarray(a)
        if a.dtype == object:
            return np.array([int(v) & self._mask for v in a.ravel()],
                            dtype=self.dtype).reshape(a.shape)
        if a.dtype.kind == "u" and a.dtype.itemsize <= self.dtype.itemsize:
            return self.wrap(a.astype(self.dtype))
        # signed ints (int64 at most): two's complement reinterpretation
        a = a.astype(np.int64)
        return self.wrap(a.view(np.uint64).astype(self.dtype))

    def add(self, a, b):
        return self.wrap(np.add(a, b, dtype=self.dtype))

    def sub(self, a, b):
        return self.wrap(np.subtract(a, b, dtype=self.dtype))

    def neg(self, a):
        return self.wrap(np.subtract(self.dtype.type(0), a, dtype=self.dtype))

    def mul(self, a, b):
        return self.wrap(np.multiply(a, b, dtype=self.dtype))

    def matmul(self, a, b):
        return self.wrap(np.matmul(np.asarray(a, self.dtype), np.asarray(b, self.dtype)))

    def signed(self, a) -> np.ndarray:
        """Signed (two's complement) interpretation as int64."""
        a = np.asarray(a, dtype=self.dtype)
        if self.bits == 64:
            return a.view(np.int64)
        v = a.astype(np.int64)
        return v - ((v >> (self.bits - 1)) & 1) * (1 << self.bits)

    def from_signed(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.int64)
        return self.wrap(v.view(np.uint64).astype(self.dtype))

    def msb(self, a) -> np.ndarray:
        a = np.asarray(a, dtype=self.dtype)
        return ((a >> self.dtype.type(self.bits - 1)) & self.dtype.type(1)).astype(np.uint8)


@dataclass(frozen=True)
class FixedPointCodec:
    """Parameters of the fixed fractional precision encoding."""

    base: int = 10
    precision: int = 4
    word_size: int = 64

    def __post_init__(self):
        if self.base < 2:
            raise ValueError("base must be >= 2")
        if self.precision < 0:
            raise ValueError("precision must be >= 0")
        if self.base == 10 and self.word_size == 64 and not 1 <= self.precision <= 16:
            raise ValueError("precision must lie in [1, 16] for base 10, 64-bit words")
        if self.scale >= 1 << (self.word_size - 1):
            raise ValueError(
                f"scale {self.base}^{self.precision} does not fit in {self.word_size - 1} bits")

    @property
    def scale(self) -> int:
        return self.base ** self.precision

    @property
    def ring(self) -> Ring:
        return Ring(self.word_size)

    def with_precision(self, p: int) -> FixedPointCodec:
        return FixedPointCodec(self.base, p, self.word_size)


def _scalar_or_array(out, like):
    return out[()] if np.ndim(like) == 0 else out


def encode_raw(z, scale: int, ring: Ring):
    """Round ``z * scale`` half away from zero into the ring.

    Raises OverflowError when the scaled magnitude reaches 2**(s-1).
    """
    zf = np.asarray(z, dtype=np.float64)
    scaled = zf * float(scale)
    limit = float(1 << (ring.bits - 1))
    if not np.all(np.isfinite(scaled)):
        raise OverflowError("non-finite value cannot be encoded")
    rounded = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    if np.any(np.abs(scaled) >= limit) or np.any(np.abs(rounded) >= limit):
        worst = float(np.max(np.abs(zf)))
        raise OverflowError(
            f"|z|={worst:.6g} times scale {scale} exceeds the {ring.bits}-bit signed range")
    return _scalar_or_array(ring.from_signed(rounded.astype(np.int64)), z)


def encode(z, codec: FixedPointCodec):
    """m = round(z * b**p) mod 2**s."""
    return encode_raw(z, codec.scale, codec.ring)


def decode(m, codec: FixedPointCodec):
    out = codec.ring.signed(m).astype(np.float64) / float(codec.scale)
    return _scalar_or_array(out, m)


def decode_raw(m, scale: int, ring: Ring):
    out = ring.signed(m).astype(np.float64) / float(scale)
    return _scalar_or_array(out, m)


def representable_range(codec: FixedPointCodec) -> tuple[float, float]:
    half = 1 << (codec.word_size - 1)
    return -half / codec.scale, (half - 1) / codec.scale


def ring_add(a, b, ring: Ring = Ring(64)):
    return _scalar_or_array(ring.add(a, b), a)


def ring_sub(a, b, ring: Ring = Ring(64)):
    return _scalar_or_array(ring.sub(a, b), a)


def ring_neg(a, ring: Ring = Ring(64)):
    return _scalar_or_array(ring.neg(a), a)


def ring_mul_raw(a, b, ring: Ring = Ring(64)):
    """Product of two encodings; the result carries scale b**(2p)."""
    return _scalar_or_array(ring.mul(a, b), a)


def floor_div_plain(m, divisor: int, ring: Ring = Ring(64)):
    """Floor-divide the signed value by a positive public integer."""
    q = np.floor_divide(ring.signed(m), np.int64(divisor))
    return _scalar_or_array(ring.from_signed(q), m)


def truncate_plain(m, codec: FixedPointCodec):
    """Floor-divide the signed value by b**p (rounding toward -inf)."""
    return floor_div_plain(m, codec.scale, codec.ring)


def safe_bound(ring: Ring) -> int:
    """Magnitude bound under which secure truncation is exact."""
    return 1 << (ring.bits - 2)


def check_safe_range(m, ring: Ring, where: str = "") -> None:
    """Raise OverflowError if any signed value reaches 2**(s-2)."""
    v = ring.signed(m)
    bound = safe_bound(ring)
    if v.size and (np.any(v >= bound) or np.any(v <= -bound)):
        raise OverflowError(f"value outside the safe range 2^{ring.bits - 2}"
                            + (f" at {where}" if where else ""))
