"""Two-party additive secret sharing over Z_{2^s}.

Local linear operations need no interaction.  Multiplication consumes a
dealer triple and one opening round; truncation by ``b**p`` consumes a
:class:`TruncationPair` and is exact: the reconstructed result always equals
:func:`ppids.ring.truncate_plain` of the reconstructed input while the input
stays inside the safe range ``|x| < 2**(s-2)``.

Truncation.  Let ``d = b**p``, ``2**s = Q*d + R`` and ``K`` the smallest
multiple of ``d`` that is ``>= 2**(s-2)``.  The parties open
``z = (x + K) + r`` for a uniform dealer mask ``r``.  Writing ``y = x + K``
(an integer in ``[0, 2**s)``), ``z = qz*d + rz`` and ``r = qr*d + rr``::

    floor(y / d) = qz - qr - [rz < rr] + w*Q + w*h
    w = [z < r]                         (wrap of the opening)
    h = [(rz - rr) mod d >= d - R]      (carry from the 2**s remainder)

``w`` comes from a DCF keyed on ``r``; ``[rz < rr]`` and ``h`` come from two
DCFs on the residue domain keyed on ``rr`` and ``(rr - R) mod d``.  The single
product ``w*h`` costs a second, elementwise Beaver round.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .errors import PairReuseError, PartyMismatch, ShapeMismatch, TripleReuseError
from .fss import DcfKey, eval_dcf, gen_dcf
from .rand import Rng
from .ring import FixedPointCodec, Ring

__all__ = [
    "ShareTensor", "BeaverTriple", "TruncationPair", "Opener",
    "share", "reconstruct", "add_shares", "sub_shares", "add_public", "mul_public",
    "gen_triple", "gen_matmul_triple", "gen_truncation_pairs", "truncation_constants",
    "beaver_mul", "beaver_matmul", "truncate_shared",
]


@dataclass(frozen=True)
class ShareTensor:
    party: int
    data: np.ndarray
    ring: Ring = Ring(64)

    def __post_init__(self):
        if self.party not in (0, 1):
            raise PartyMismatch(f"party must be 0 or 1, got {self.party}")
        arr = np.array(self.data, dtype=self.ring.dtype, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def like(self, data) -> ShareTensor:
        return ShareTensor(self.party, data, self.ring)

    def reshape(self, *shape) -> ShareTensor:
        return self.like(self.data.reshape(*shape))


def share(plain, rng: Rng, ring: Ring = Ring(64)) -> tuple[ShareTensor, ShareTensor]:
    """Split ``plain`` into (uniform mask, plain - mask)."""
    plain = np.asarray(plain, dtype=ring.dtype)
    mask = rng.ring(plain.shape, ring) if plain.shape else rng.ring(1, ring)[0]
    return ShareTensor(0, mask, ring), ShareTensor(1, ring.sub(plain, mask), ring)


def reconstruct(s0: ShareTensor, s1: ShareTensor) -> np.ndarray:
    if (s0.party, s1.party) != (0, 1):
        raise PartyMismatch(f"expected shares of parties (0, 1), got ({s0.party}, {s1.party})")
    if s0.shape != s1.shape:
        raise ShapeMismatch(f"{s0.shape} vs {s1.shape}")
    return s0.ring.add(s0.data, s1.data)


def _check_pair(x: ShareTensor, y: ShareTensor) -> None:
    if x.party != y.party:
        raise PartyMismatch(f"shares of different parties ({x.party}, {y.party})")
    if x.shape != y.shape:
        raise ShapeMismatch(f"{x.shape} vs {y.shape}")


def add_shares(x: ShareTensor, y: ShareTensor) -> ShareTensor:
    _check_pair(x, y)
    return x.like(x.ring.add(x.data, y.data))


def sub_shares(x: ShareTensor, y: ShareTensor) -> ShareTensor:
    _check_pair(x, y)
    return x.like(x.ring.sub(x.data, y.data))


def _public(x: ShareTensor, k) -> np.ndarray:
    k = np.asarray(k, dtype=x.ring.dtype)
    try:
        np.broadcast_shapes(k.shape, x.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"public {k.shape} vs share {x.shape}") from exc
    return k


def add_public(x: ShareTensor, k) -> ShareTensor:
    """Add a public constant; by convention only party 0 applies it."""
    k = _public(x, k)
    if x.party != 0:
        return x
    return x.like(x.ring.add(x.data, k))


def mul_public(x: ShareTensor, k) -> ShareTensor:
    """Multiply by a public constant (an encoded real doubles the scale)."""
    return x.like(x.ring.mul(x.data, _public(x, k)))


class Opener(Protocol):
    """Masked-opening channel between the two parties.

    ``open`` sends this party's shares of masked values and returns the
    reconstructed (still masked) values.  One call is one round.
    """

    party: int
    rounds: int

    def open(self, arrays: list[np.ndarray]) -> list[np.ndarray]: ...


# --- correlated randomness ----------------------------------------------------


@dataclass
class BeaverTriple:
    """One party's share of (a, b, c) with c = a*b (elementwise or matmul)."""

    party: int
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    kind: str = "mul"
    used: bool = field(default=False, compare=False)

    def consume(self) -> None:
        if self.used:
            raise TripleReuseError("Beaver triple already consumed")
        self.used = True


def _share_arrays(values: np.ndarray, ring: Ring, rng: Rng):
    mask = rng.ring(values.shape, ring)
    return mask, ring.sub(values, mask)


def gen_triple(shape, ring: Ring, rng: Rng) -> tuple[BeaverTriple, BeaverTriple]:
    shape = tuple(shape)
    a, b = rng.ring(shape, ring), rng.ring(shape, ring)
    c = ring.mul(a, b)
    (a0, a1), (b0, b1), (c0, c1) = (_share_arrays(v, ring, rng) for v in (a, b, c))
    return BeaverTriple(0, a0, b0, c0), BeaverTriple(1, a1, b1, c1)


def gen_matmul_triple(m: int, k: int, n: int, ring: Ring,
                      rng: Rng) -> tuple[BeaverTriple, BeaverTriple]:
    a, b = rng.ring((m, k), ring), rng.ring((k, n), ring)
    c = ring.matmul(a, b)
    (a0, a1), (b0, b1), (c0, c1) = (_share_arrays(v, ring, rng) for v in (a, b, c))
    return (BeaverTriple(0, a0, b0, c0, "matmul"), BeaverTriple(1, a1, b1, c1, "matmul"))


@dataclass(frozen=True)
class TruncConstants:
    d: int
    Q: int
    R: int
    K: int
    residue_bits: int


def truncation_constants(codec: FixedPointCodec, divisor: int | None = None) -> TruncConstants:
    s, d = codec.word_size, divisor or codec.scale
    if not 1 <= d < 1 << (s - 2):
        raise ValueError(f"divisor {d} outside [1, 2^{s - 2})")
    K = -(-(1 << (s - 2)) // d) * d
    Q, R = divmod(1 << s, d)
    return TruncConstants(d, Q, R, K, max(1, (d - 1).bit_length()))


@dataclass
class TruncationPair:
    """One party's batch of truncation material for a tensor shape.

    ``r_trunc`` holds shares of ``floor(r / d)`` with ``r`` read unsigned.
    """

    party: int
    shape: tuple
    r: np.ndarray
    r_trunc: np.ndarray
    carry_flag: np.ndarray
    wrap_key: DcfKey
    low_key: DcfKey
    carry_key: DcfKey
    triple: BeaverTriple
    used: bool = field(default=False, compare=False)

    def consume(self) -> None:
        if self.used:
            raise PairReuseError("truncation pair already consumed")
        self.used = True


def gen_truncation_pairs(shape, codec: FixedPointCodec, rng: Rng,
                         divisor: int | None = None) -> tuple[TruncationPair, TruncationPair]:
    """Material for exact division by ``divisor`` (default ``b**p``)."""
    ring = codec.ring
    tc = truncation_constants(codec, divisor)
    shape = tuple(shape)
    count = int(np.prod(shape, dtype=np.int64))
    r = rng.ring(count, ring)
    r64 = r.astype(np.uint64)
    d = np.uint64(tc.d)
    qr = ring.wrap((r64 // d).astype(ring.dtype))
    rr = r64 % d
    lo = (rr + d - np.uint64(tc.R)) % d
    flag = (rr < np.uint64(tc.R)).astype(ring.dtype)

    w0, w1 = gen_dcf(r64, 1, rng, n=ring.bits, ring=ring)
    a0, a1 = gen_dcf(rr, 1, rng, n=tc.residue_bits, ring=ring)
    b0, b1 = gen_dcf(lo, 1, rng, n=tc.residue_bits, ring=ring)
    t0, t1 = gen_triple((count,), ring, rng)
    (r0, r1), (q0, q1), (f0, f1) = (_share_arrays(v, ring, rng) for v in (r, qr, flag))
    return (TruncationPair(0, shape, r0, q0, f0, w0, a0, b0, t0),
            TruncationPair(1, shape, r1, q1, f1, w1, a1, b1, t1))


# --- interactive operations ---------------------------------------------------


def _check_triple(triple: BeaverTriple, party: int, kind: str) -> None:
    if triple.party != party:
        raise PartyMismatch("triple belongs to the other party")
    if triple.kind != kind:
        raise ShapeMismatch(f"expected a {kind} triple, got {triple.kind}")


def beaver_mul(x: ShareTensor, y: ShareTensor, triple: BeaverTriple,
               opener: Opener) -> ShareTensor:
    """Elementwise product of two shared tensors (raw double-scaled)."""
    _check_pair(x, y)
    _check_triple(triple, x.party, "mul")
    ring = x.ring
    a, b, c = (t.reshape(x.shape) if t.size == x.data.size else t for t in
               (triple.a, triple.b, triple.c))
    if a.shape != x.shape:
        raise ShapeMismatch(f"triple {triple.a.shape} for operands {x.shape}")
    triple.consume()
    eps, delta = opener.open([ring.sub(x.data, a), ring.sub(y.data, b)])
    z = ring.add(ring.add(c, ring.mul(eps, b)), ring.mul(delta, a))
    if x.party == 0:
        z = ring.add(z, ring.mul(eps, delta))
    return x.like(z)


def beaver_matmul(x: ShareTensor, y: ShareTensor, triple: BeaverTriple,
                  opener: Opener) -> ShareTensor:
    """(m, k) @ (k, n) on shares."""
    if x.party != y.party:
        raise PartyMismatch("shares of different parties")
    _check_triple(triple, x.party, "matmul")
    if triple.a.shape != x.shape or triple.b.shape != y.shape:
        raise ShapeMismatch(f"triple {triple.a.shape}@{triple.b.shape} "
                            f"for operands {x.shape}@{y.shape}")
    ring = x.ring
    triple.consume()
    eps, delta = opener.open([ring.sub(x.data, triple.a), ring.sub(y.data, triple.b)])
    z = ring.add(ring.add(triple.c, ring.matmul(eps, triple.b)), ring.matmul(triple.a, delta))
    if x.party == 0:
        z = ring.add(z, ring.matmul(eps, delta))
    return x.like(z)


def truncate_shared(x: ShareTensor, pair: TruncationPair, opener: Opener,
                    codec: FixedPointCodec, divisor: int | None = None) -> ShareTensor:
    """Exact floor division of the shared value by b**p (two rounds).

    ``divisor`` replaces b**p; the pair must have been generated for it.
    """
    if pair.party != x.party:
        raise PartyMismatch("truncation pair belongs to the other party")
    if pair.r.size != x.data.size:
        raise ShapeMismatch(f"pair of {pair.r.size} elements for tensor {x.shape}")
    ring, party = x.ring, x.party
    tc = truncation_constants(codec, divisor)
    pair.consume()

    y = x.data.reshape(-1)
    if party == 0:
        y = ring.add(y, ring.dtype.type(tc.K % ring.modulus))
    (z,) = opener.open([ring.add(y, pair.r)])
    z64 = z.astype(np.uint64)
    d = np.uint64(tc.d)
    rz = z64 % d

    wrap = eval_dcf(party, pair.wrap_key, z64)
    low = eval_dcf(party, pair.low_key, rz)
    carry = ring.add(ring.sub(low, eval_dcf(party, pair.carry_key, rz)), pair.carry_flag)
    wh = beaver_mul(x.like(wrap), x.like(carry), pair.triple, opener).data

    out = ring.sub(ring.neg(pair.r_trunc), low)
    out = ring.add(out, ring.add(ring.mul(wrap, ring.dtype.type(tc.Q % ring.modulus)), wh))
    if party == 0:
        qz = ring.wrap((z64 // d).astype(ring.dtype))
        out = ring.add(out, ring.sub(qz, ring.dtype.type((tc.K // tc.d) % ring.modulus)))
    return x.like(out.reshape(x.shape))
