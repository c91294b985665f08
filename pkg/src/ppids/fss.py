"""Distributed comparison functions (DCF) over a GGM tree.

A DCF key pair for ``(alpha, beta)`` on an ``n``-bit domain satisfies, for
every ``x < 2**n``::

    eval_dcf(0, k0, x) + eval_dcf(1, k1, x) == beta * [x < alpha]  (mod 2**s)

Keys are generated and evaluated in batches: one ``DcfKey`` object holds
``N`` independent keys as stacked numpy arrays and every operation is
vectorised over the batch.

The tree PRG is fixed-key AES-128 in Matyas-Meyer-Oseas mode with a tweak
per output block: ``G_i(seed) = AES_k(seed ^ T_i) ^ seed ^ T_i`` where
``T_L``, ``T_R`` produce the two child seeds (the low bit of word 0 is the
control bit) and ``T_V`` produces both children's value words.

Serialized key layout (all integers little-endian)::

    u8 party | u8 n | u8 s | u32 N
    root seeds            N x 16 bytes
    for level 0 .. n-1:
        seed correction   N x 16 bytes
        value correction  N x w bytes      (w = bytes per ring word)
        left control cw   N x 1 byte
        right control cw  N x 1 byte
    final correction      N x w bytes
"""

from __future__ import annotations

import hashlib
import struct
import threading
from dataclasses import dataclass, field

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .errors import CompareReuseError, DomainError, FormatError
from .rand import Rng
from .ring import Ring

LAMBDA = 128

_PRG_KEY = hashlib.sha256(b"ppids/dcf/fixed-key-prg").digest()[:16]
_TWEAK_L = np.uint64(0)
_TWEAK_R = np.uint64(1)
_TWEAK_V = np.uint64(2)
_LOW_CLEAR = np.uint64(0xFFFFFFFFFFFFFFFE)
_ONE = np.uint64(1)

_local = threading.local()


def _cipher():
    enc = getattr(_local, "enc", None)
    if enc is None:
        enc = Cipher(algorithms.AES(_PRG_KEY), modes.ECB()).encryptor()
        _local.enc = enc
    return enc


def _mmo(seeds: np.ndarray, tweak) -> np.ndarray:
    """AES_k(x) ^ x for x = seeds ^ (0, tweak); seeds is (N, 2) uint64."""
    x = np.array(seeds, dtype=np.uint64, copy=True, order="C")
    x[:, 1] ^= tweak
    out = np.frombuffer(_cipher().update(x.tobytes()), dtype=np.uint64).reshape(x.shape)
    return out ^ x


def _split(block: np.ndarray):
    t = (block[:, 0] & _ONE).astype(np.uint8)
    s = block.copy()
    s[:, 0] &= _LOW_CLEAR
    return s, t


def _convert(words: np.ndarray, ring: Ring) -> np.ndarray:
    return ring.wrap(words.astype(ring.dtype))


def expand(seeds: np.ndarray, ring: Ring):
    """Both branches of the tree PRG.

    Returns ``(s_left, t_left, v_left), (s_right, t_right, v_right)``.
    """
    m = seeds.shape[0]
    tweaks = np.repeat(np.array([_TWEAK_L, _TWEAK_R, _TWEAK_V], np.uint64), m)
    blocks = _mmo(np.concatenate([seeds, seeds, seeds]), tweaks)
    s_l, t_l = _split(blocks[:m])
    s_r, t_r = _split(blocks[m:2 * m])
    v = blocks[2 * m:]
    return (s_l, t_l, _convert(v[:, 0], ring)), (s_r, t_r, _convert(v[:, 1], ring))


def _expand_side(seeds: np.ndarray, side: np.ndarray, ring: Ring):
    m = seeds.shape[0]
    tweaks = np.concatenate([side.astype(np.uint64), np.full(m, _TWEAK_V, np.uint64)])
    blocks = _mmo(np.concatenate([seeds, seeds]), tweaks)
    s, t = _split(blocks[:m])
    v = blocks[m:]
    v = np.where(side.astype(bool), v[:, 1], v[:, 0])
    return s, t, _convert(v, ring)


@dataclass
class DcfKey:
    """A batch of N keys belonging to one party."""

    party: int
    n: int
    ring: Ring
    root: np.ndarray        # (N, 2) uint64
    cw_seed: np.ndarray     # (n, N, 2) uint64
    cw_value: np.ndarray    # (n, N) ring dtype
    cw_tl: np.ndarray       # (n, N) uint8
    cw_tr: np.ndarray       # (n, N) uint8
    final: np.ndarray       # (N,) ring dtype

    def __len__(self) -> int:
        return self.root.shape[0]

    def take(self, idx) -> DcfKey:
        idx = np.asarray(idx)
        return DcfKey(self.party, self.n, self.ring, self.root[idx],
                      self.cw_seed[:, idx], self.cw_value[:, idx],
                      self.cw_tl[:, idx], self.cw_tr[:, idx], self.final[idx])

    def to_bytes(self) -> bytes:
        N = len(self)
        parts = [struct.pack("<BBBI", self.party, self.n, self.ring.bits, N),
                 self.root.astype("<u8").tobytes()]
        for i in range(self.n):
            parts += [self.cw_seed[i].astype("<u8").tobytes(),
                      self.cw_value[i].astype(self.ring.dtype.newbyteorder("<")).tobytes(),
                      self.cw_tl[i].astype(np.uint8).tobytes(),
                      self.cw_tr[i].astype(np.uint8).tobytes()]
        parts.append(self.final.astype(self.ring.dtype.newbyteorder("<")).tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int = 0) -> tuple[DcfKey, int]:
        """Parse one key batch; returns the key and the offset past it."""
        try:
            party, n, bits, N = struct.unpack_from("<BBBI", buf, offset)
        except struct.error as exc:
            raise FormatError("truncated DCF key header") from exc
        ring = Ring(bits)
        w = ring.nbytes
        need = 7 + 16 * N + n * N * (16 + w + 2) + N * w
        if len(buf) - offset < need:
            raise FormatError("truncated DCF key body")
        pos = offset + 7
        le_ring = ring.dtype.newbyteorder("<")

        def take(count, dtype):
            nonlocal pos
            dt = np.dtype(dtype)
            arr = np.frombuffer(buf, dtype=dt, count=count, offset=pos)
            pos += count * dt.itemsize
            return arr.astype(dt.newbyteorder("="))

        root = take(2 * N, "<u8").reshape(N, 2)
        cw_seed = np.empty((n, N, 2), np.uint64)
        cw_value = np.empty((n, N), ring.dtype)
        cw_tl = np.empty((n, N), np.uint8)
        cw_tr = np.empty((n, N), np.uint8)
        for i in range(n):
            cw_seed[i] = take(2 * N, "<u8").reshape(N, 2)
            cw_value[i] = take(N, le_ring)
            cw_tl[i] = take(N, np.uint8)
            cw_tr[i] = take(N, np.uint8)
        final = take(N, le_ring)
        return cls(party, n, ring, root, cw_seed, cw_value, cw_tl, cw_tr, final), pos


def _as_domain(x, n: int) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x))
    if x.dtype.kind == "i" and np.any(x < 0):
        raise DomainError("negative input")
    x = x.astype(np.uint64)
    if n < 64 and np.any(x >> np.uint64(n)):
        raise DomainError(f"input outside the {n}-bit domain")
    return x


def gen_dcf(alpha, beta, rng: Rng, n: int = 64, ring: Ring = Ring(64)) -> tuple[DcfKey, DcfKey]:
    """Key pair(s) for x -> beta * [x < alpha] on the n-bit domain.

    ``alpha`` and ``beta`` may be scalars or equal-length arrays; the result is
    a batch with one key per alpha.
    """
    if not 1 <= n <= ring.bits:
        raise ValueError(f"domain size {n} must lie in [1, {ring.bits}]")
    alpha = _as_domain(alpha, n)
    N = alpha.size
    beta = np.broadcast_to(ring.from_int(np.asarray(beta) if np.ndim(beta) else int(beta)),
                           (N,)).astype(ring.dtype)

    root0, root1 = rng.seeds(N), rng.seeds(N)
    seeds = np.concatenate([root0, root1])          # party 0 rows, then party 1
    t = np.concatenate([np.zeros(N, np.uint8), np.ones(N, np.uint8)])
    v_alpha = np.zeros(N, ring.dtype)
    cw_seed = np.empty((n, N, 2), np.uint64)
    cw_value = np.empty((n, N), ring.dtype)
    cw_tl = np.empty((n, N), np.uint8)
    cw_tr = np.empty((n, N), np.uint8)

    for i in range(n):
        a = ((alpha >> np.uint64(n - 1 - i)) & _ONE).astype(np.uint8)
        go_right = a.astype(bool)
        right_mask = (np.uint64(0) - a.astype(np.uint64))[:, None]
        (sl, tl, vl), (sr, tr, vr) = expand(seeds, ring)
        neg = t[N:].astype(bool)

        # keep the branch on alpha's path, lose the other one
        diff = sl ^ sr
        lose = sr ^ (diff & np.concatenate([right_mask, right_mask]))
        keep = lose ^ diff
        s_cw = lose[:N] ^ lose[N:]
        v_lose = np.where(np.tile(go_right, 2), vl, vr)
        v_keep = np.where(np.tile(go_right, 2), vr, vl)
        v_cw = ring.sub(ring.sub(v_lose[N:], v_lose[:N]), v_alpha)
        v_cw = np.where(go_right, ring.add(v_cw, beta), v_cw)
        v_cw = np.where(neg, ring.neg(v_cw), v_cw)
        v_alpha = ring.add(ring.add(ring.sub(v_alpha, v_keep[N:]), v_keep[:N]),
                           np.where(neg, ring.neg(v_cw), v_cw))
        t_cw_l = tl[:N] ^ tl[N:] ^ a ^ 1
        t_cw_r = tr[:N] ^ tr[N:] ^ a
        t_cw_keep = np.where(go_right, t_cw_r, t_cw_l)

        cw_seed[i], cw_value[i], cw_tl[i], cw_tr[i] = s_cw, v_cw, t_cw_l, t_cw_r

        t_mask = (np.uint64(0) - t.astype(np.uint64))[:, None]
        seeds = keep ^ (np.concatenate([s_cw, s_cw]) & t_mask)
        t = np.where(np.tile(go_right, 2), tr, tl) ^ (t & np.tile(t_cw_keep, 2))

    s0, s1, t1 = seeds[:N], seeds[N:], t[N:]
    final = ring.sub(ring.sub(_convert(s1[:, 1], ring), _convert(s0[:, 1], ring)), v_alpha)
    final = np.where(t1.astype(bool), ring.neg(final), final)

    k0 = DcfKey(0, n, ring, root0, cw_seed, cw_value, cw_tl, cw_tr, final)
    k1 = DcfKey(1, n, ring, root1, cw_seed.copy(), cw_value.copy(), cw_tl.copy(),
                cw_tr.copy(), final.copy())
    return k0, k1


def eval_dcf(party: int, key: DcfKey, x) -> np.ndarray:
    """This party's additive share of beta * [x < alpha], one x per key.

    A single-key batch is broadcast against many points.
    """
    ring, n = key.ring, key.n
    x = _as_domain(x, n)
    if len(key) == 1 and x.size != 1:
        key = key.take(np.zeros(x.size, dtype=np.intp))
    if x.size != len(key):
        raise DomainError(f"{x.size} points for {len(key)} keys")

    s = key.root
    t = np.full(len(key), party, np.uint8)
    acc = np.zeros(len(key), ring.dtype)
    for i in range(n):
        bit = ((x >> np.uint64(n - 1 - i)) & _ONE).astype(np.uint8)
        s_next, t_next, v = _expand_side(s, bit, ring)
        on = t.astype(bool)
        s_next ^= key.cw_seed[i] & (np.uint64(0) - t.astype(np.uint64))[:, None]
        t_next ^= t & np.where(bit.astype(bool), key.cw_tr[i], key.cw_tl[i])
        acc = ring.add(acc, ring.add(v, np.where(on, key.cw_value[i], ring.dtype.type(0))))
        s, t = s_next, t_next
    acc = ring.add(acc, _convert(s[:, 1], ring))
    acc = ring.add(acc, np.where(t.astype(bool), key.final, ring.dtype.type(0)))
    return ring.neg(acc) if party else acc


# --- masked comparison gadget -------------------------------------------------


@dataclass
class CompareUnits:
    """A batch of single-use sign-test units held by one party.

    Each unit carries an additive share of a uniform mask ``r``, a share of
    ``msb(r)`` and a DCF key on the low ``s-1`` bits of ``r`` whose payload is
    ``1 - 2*msb(r)``.
    """

    party: int
    shape: tuple
    r: np.ndarray
    r_msb: np.ndarray
    key: DcfKey
    used: bool = field(default=False, compare=False)

    @property
    def ring(self) -> Ring:
        return self.key.ring

    @property
    def count(self) -> int:
        return len(self.key)

    def consume(self) -> None:
        if self.used:
            raise CompareReuseError("comparison units already consumed")
        self.used = True


def gen_compare_material(shape, ring: Ring, rng: Rng) -> tuple[CompareUnits, CompareUnits]:
    """Sign-test units for a tensor of the given shape (one per element)."""
    shape = (int(shape),) if np.ndim(shape) == 0 else tuple(int(d) for d in shape)
    count = int(np.prod(shape, dtype=np.int64))
    r = rng.ring(count, ring)
    r_hi = ring.msb(r).astype(ring.dtype)
    low_mask = np.uint64((1 << (ring.bits - 1)) - 1)
    r_lo = r.astype(np.uint64) & low_mask
    payload = ring.sub(ring.dtype.type(1), ring.mul(ring.dtype.type(2), r_hi))
    k0, k1 = gen_dcf(r_lo, payload, rng, n=ring.bits - 1, ring=ring)
    r0 = rng.ring(count, ring)
    m0 = rng.ring(count, ring)
    units = []
    for party, key, rs, ms in ((0, k0, r0, m0),
                               (1, k1, ring.sub(r, r0), ring.sub(r_hi, m0))):
        units.append(CompareUnits(party, shape, rs.reshape(shape), ms.reshape(shape), key))
    return units[0], units[1]


def sign_mask(party: int, x: np.ndarray, units: CompareUnits) -> np.ndarray:
    """This party's share of ``(x + 2**(s-1)) + r``, the value to open."""
    ring = units.ring
    z = ring.add(x, units.r)
    if party == 0:
        z = ring.add(z, ring.dtype.type(1 << (ring.bits - 1)))
    return z


def sign_from_opened(party: int, units: CompareUnits, z: np.ndarray) -> np.ndarray:
    """Shares of [x >= 0] given the opened masked value ``z``.

    With y = x + 2**(s-1) = z - r, msb(y) = msb(z) xor msb(r) xor [z_lo < r_lo].
    """
    ring = units.ring
    z = np.asarray(z, ring.dtype).reshape(-1)
    low_mask = np.uint64((1 << (ring.bits - 1)) - 1)
    z_lo = z.astype(np.uint64) & low_mask
    z_hi = ring.msb(z).astype(bool)
    # shares of b = msb(r) xor [z_lo < r_lo]
    b = ring.add(units.r_msb.reshape(-1), eval_dcf(party, units.key, z_lo))
    # msb(y) = z_hi xor b = z_hi + (1 - 2 z_hi) b
    out = np.where(z_hi, ring.neg(b), b)
    if party == 0:
        out = np.where(z_hi, ring.add(out, ring.dtype.type(1)), out)
    return out.reshape(units.shape)
