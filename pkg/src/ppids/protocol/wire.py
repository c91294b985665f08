"""Binary framing and message payloads.

Frame::

    u32 big-endian length L | u8 type tag | payload (L - 1 bytes)

``L`` counts the tag byte plus the payload.

Tensor encoding (word size ``s`` is a session parameter, not encoded)::

    u8 rank | rank x u32 big-endian dims | prod(dims) little-endian s-bit words

A rank-1 tensor holding the single value 1 at s=64 therefore encodes to 13
bytes, and framed as a LOGITS_SHARE it has ``L = 14``::

    00 00 00 0e  09  01  00 00 00 01  01 00 00 00 00 00 00 00

Message payloads:

=====================  ====  =================================================
HELLO                  0x01  UTF-8 JSON session config
CONFIG_ACK             0x02  UTF-8 JSON {session, spec, model_hash}
PLAN_REQUEST           0x03  UTF-8 JSON {session, party, spec, input_shape,
                             codec, queries}
PLAN_REPLY             0x04  UTF-8 JSON plan summary
MATERIAL_CHUNK         0x05  u32 query | u32 layer | u16 items | items
INPUT_SHARE            0x06  tensor
WEIGHT_SHARE_COMMIT    0x07  u16 count | (u16 name length | name | tensor)*
OPEN_BROADCAST         0x08  u32 round id | u8 count | tensor*
LOGITS_SHARE           0x09  tensor
ABORT                  0x0a  UTF-8 JSON {code, message}
=====================  ====  =================================================

Material items start with a u8 kind: 1 Beaver triple (u8 flavour 0=mul,
1=matmul, then tensors a, b, c); 2 truncation pair (u8 rank, rank x u32 dims,
tensors r, r_trunc, carry_flag, three DCF key blobs, then the triple tensors
a, b, c); 3 comparison units (u8 rank, dims, tensors r, r_msb, one DCF key
blob).  DCF key blobs use the layout documented in :mod:`ppids.fss`.
"""

from __future__ import annotations

import enum
import json
import struct

import numpy as np

from ..errors import FormatError, FrameError
from ..fss import CompareUnits, DcfKey
from ..ring import Ring
from ..sharing import BeaverTriple, TruncationPair

MAX_FRAME = 1 << 31


class Msg(enum.IntEnum):
    HELLO = 0x01
    CONFIG_ACK = 0x02
    PLAN_REQUEST = 0x03
    PLAN_REPLY = 0x04
    MATERIAL_CHUNK = 0x05
    INPUT_SHARE = 0x06
    WEIGHT_SHARE_COMMIT = 0x07
    OPEN_BROADCAST = 0x08
    LOGITS_SHARE = 0x09
    ABORT = 0x0A


JSON_MESSAGES = {Msg.HELLO, Msg.CONFIG_ACK, Msg.PLAN_REQUEST, Msg.PLAN_REPLY, Msg.ABORT}


def frame(tag: int, payload: bytes) -> bytes:
    return struct.pack(">IB", len(payload) + 1, int(tag)) + payload


def unframe(buf: bytes) -> tuple[Msg, bytes, bytes]:
    """Split one frame off ``buf``; returns (tag, payload, remaining bytes)."""
    if len(buf) < 5:
        raise FrameError(f"frame header needs 5 bytes, got {len(buf)}")
    (length,) = struct.unpack_from(">I", buf)
    if length < 1 or length > MAX_FRAME:
        raise FrameError(f"invalid frame length {length}")
    if len(buf) < 4 + length:
        raise FrameError(f"truncated frame: {len(buf) - 4} of {length} bytes")
    try:
        tag = Msg(buf[4])
    except ValueError:
        raise FrameError(f"unknown message tag 0x{buf[4]:02x}") from None
    return tag, bytes(buf[5:4 + length]), bytes(buf[4 + length:])


def parse_header(header: bytes) -> int:
    (length,) = struct.unpack(">I", header)
    if length < 1 or length > MAX_FRAME:
        raise FrameError(f"invalid frame length {length}")
    return length


# --- tensors ------------------------------------------------------------------


def encode_tensor(arr, ring: Ring) -> bytes:
    arr = np.asarray(arr, dtype=ring.dtype)
    if arr.ndim > 255:
        raise FrameError("tensor rank exceeds 255")
    head = struct.pack(">B" + "I" * arr.ndim, arr.ndim, *arr.shape)
    return head + arr.astype(ring.dtype.newbyteorder("<")).tobytes()


def decode_tensor(buf: bytes, offset: int, ring: Ring) -> tuple[np.ndarray, int]:
    try:
        (rank,) = struct.unpack_from(">B", buf, offset)
        dims = struct.unpack_from(">" + "I" * rank, buf, offset + 1)
    except struct.error:
        raise FrameError("truncated tensor header") from None
    pos = offset + 1 + 4 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    nbytes = count * ring.nbytes
    if len(buf) - pos < nbytes:
        raise FrameError("truncated tensor payload")
    le = ring.dtype.newbyteorder("<")
    arr = np.frombuffer(buf, dtype=le, count=count, offset=pos).astype(ring.dtype)
    return ring.wrap(arr.reshape(dims)), pos + nbytes


def encode_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def decode_json(payload: bytes):
    try:
        return json.loads(payload.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FrameError(f"bad JSON payload: {exc}") from None


def encode_open(round_id: int, arrays, ring: Ring) -> bytes:
    return struct.pack(">IB", round_id, len(arrays)) + b"".join(
        encode_tensor(a, ring) for a in arrays)


def decode_open(payload: bytes, ring: Ring) -> tuple[int, list[np.ndarray]]:
    try:
        round_id, count = struct.unpack_from(">IB", payload)
    except struct.error:
        raise FrameError("truncated open header") from None
    pos, out = 5, []
    for _ in range(count):
        arr, pos = decode_tensor(payload, pos, ring)
        out.append(arr)
    return round_id, out


def encode_named(tensors: dict[str, np.ndarray], ring: Ring) -> bytes:
    parts = [struct.pack(">H", len(tensors))]
    for name in sorted(tensors):
        raw = name.encode()
        parts += [struct.pack(">H", len(raw)), raw, encode_tensor(tensors[name], ring)]
    return b"".join(parts)


def decode_named(payload: bytes, ring: Ring) -> dict[str, np.ndarray]:
    try:
        (count,) = struct.unpack_from(">H", payload)
        pos, out = 2, {}
        for _ in range(count):
            (n,) = struct.unpack_from(">H", payload, pos)
            name = payload[pos + 2:pos + 2 + n].decode()
            out[name], pos = decode_tensor(payload, pos + 2 + n, ring)
    except (struct.error, UnicodeDecodeError):
        raise FrameError("truncated named tensor list") from None
    return out


# --- correlated material --------------------------------------------------------

KIND_TRIPLE, KIND_TRUNC, KIND_CMP = 1, 2, 3


def _dims(shape) -> bytes:
    return struct.pack(">B" + "I" * len(shape), len(shape), *shape)


def _read_dims(buf, pos):
    (rank,) = struct.unpack_from(">B", buf, pos)
    dims = struct.unpack_from(">" + "I" * rank, buf, pos + 1)
    return tuple(dims), pos + 1 + 4 * rank


def encode_item(item, ring: Ring) -> bytes:
    if isinstance(item, BeaverTriple):
        flav = 1 if item.kind == "matmul" else 0
        return bytes([KIND_TRIPLE, flav]) + b"".join(
            encode_tensor(v, ring) for v in (item.a, item.b, item.c))
    if isinstance(item, TruncationPair):
        t = item.triple
        return (bytes([KIND_TRUNC]) + _dims(item.shape)
                + b"".join(encode_tensor(v, ring) for v in (item.r, item.r_trunc, item.carry_flag))
                + item.wrap_key.to_bytes() + item.low_key.to_bytes() + item.carry_key.to_bytes()
                + b"".join(encode_tensor(v, ring) for v in (t.a, t.b, t.c)))
    if isinstance(item, CompareUnits):
        return (bytes([KIND_CMP]) + _dims(item.shape)
                + encode_tensor(item.r, ring) + encode_tensor(item.r_msb, ring)
                + item.key.to_bytes())
    raise TypeError(f"cannot encode {type(item).__name__}")


def decode_item(buf: bytes, pos: int, party: int, ring: Ring):
    kind = buf[pos]
    pos += 1
    if kind == KIND_TRIPLE:
        flav = buf[pos]
        vals = []
        pos += 1
        for _ in range(3):
            v, pos = decode_tensor(buf, pos, ring)
            vals.append(v)
        return BeaverTriple(party, *vals, kind="matmul" if flav else "mul"), pos
    if kind == KIND_TRUNC:
        shape, pos = _read_dims(buf, pos)
        vals = []
        for _ in range(3):
            v, pos = decode_tensor(buf, pos, ring)
            vals.append(v)
        keys = []
        for _ in range(3):
            k, pos = DcfKey.from_bytes(buf, pos)
            keys.append(k)
        tv = []
        for _ in range(3):
            v, pos = decode_tensor(buf, pos, ring)
            tv.append(v)
        return TruncationPair(party, shape, *vals, *keys, BeaverTriple(party, *tv)), pos
    if kind == KIND_CMP:
        shape, pos = _read_dims(buf, pos)
        r, pos = decode_tensor(buf, pos, ring)
        m, pos = decode_tensor(buf, pos, ring)
        key, pos = DcfKey.from_bytes(buf, pos)
        return CompareUnits(party, shape, r, m, key), pos
    raise FormatError(f"unknown material kind {kind}")


def encode_chunk(query: int, layer: int, items, ring: Ring) -> bytes:
    return struct.pack(">IIH", query, layer, len(items)) + b"".join(
        encode_item(it, ring) for it in items)


def decode_chunk(payload: bytes, party: int, ring: Ring):
    try:
        query, layer, count = struct.unpack_from(">IIH", payload)
    except struct.error:
        raise FrameError("truncated material chunk") from None
    pos, items = 10, []
    for _ in range(count):
        item, pos = decode_item(payload, pos, party, ring)
        items.append(item)
    return query, layer, items
