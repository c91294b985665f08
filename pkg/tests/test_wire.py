import numpy as np
import pytest
from hypothesis import given, strategies as st

from ppids.dealer import PlanBackend, PreprocessingPlan, generate_material
from ppids.engine import Driver
from ppids import model as M
from ppids.errors import FrameError
from ppids.protocol import wire
from ppids.protocol.wire import Msg
from ppids.ring import FixedPointCodec, Ring

R64 = Ring(64)


def test_logits_golden_frame():
    payload = wire.encode_tensor(np.array([1], np.uint64), R64)
    assert len(payload) == 13
    data = wire.frame(Msg.LOGITS_SHARE, payload)
    assert data.hex(" ") == "00 00 00 0e 09 01 00 00 00 01 01 00 00 00 00 00 00 00"
    tag, body, rest = wire.unframe(data)
    assert tag is Msg.LOGITS_SHARE and body == payload and rest == b""


def test_other_golden_vectors():
    t = np.array([[1, 2], [3, 2 ** 64 - 1]], np.uint64)
    assert wire.encode_tensor(t, R64).hex() == (
        "02" "00000002" "00000002" "0100000000000000" "0200000000000000"
        "0300000000000000" "ffffffffffffffff")
    assert wire.frame(Msg.ABORT, b"{}").hex() == "000000030a7b7d"
    assert wire.encode_tensor(np.array([5], np.uint16), Ring(16)).hex() == "01000000010500"
    assert wire.encode_open(7, [np.array([1], np.uint64)], R64)[:5].hex() == "0000000701"


def test_unframe_errors():
    good = wire.frame(Msg.HELLO, b"abc")
    for bad in (good[:3], good[:-1], b"\x00\x00\x00\x00\x01", b"\x00\x00\x00\x01\x7f"):
        with pytest.raises(FrameError):
            wire.unframe(bad)
    tag, _, rest = wire.unframe(good + good)
    assert rest == good
    with pytest.raises(FrameError):
        wire.parse_header(b"\xff\xff\xff\xff")


def test_tensor_truncation():
    data = wire.encode_tensor(np.arange(6, dtype=np.uint64).reshape(2, 3), R64)
    with pytest.raises(FrameError):
        wire.decode_tensor(data[:-1], 0, R64)
    with pytest.raises(FrameError):
        wire.decode_tensor(data[:3], 0, R64)


@given(st.lists(st.integers(0, 2 ** 64 - 1), min_size=1, max_size=30), st.integers(1, 3))
def test_tensor_roundtrip(values, rank):
    arr = np.array(values, np.uint64)
    shape = (len(values),) + (1,) * (rank - 1)
    got, end = wire.decode_tensor(wire.encode_tensor(arr.reshape(shape), R64), 0, R64)
    assert got.shape == shape and np.array_equal(got.ravel(), arr)


def test_json_named_open_roundtrip():
    obj = {"b": 1, "a": [1, 2], "s": "x"}
    assert wire.decode_json(wire.encode_json(obj)) == obj
    with pytest.raises(FrameError):
        wire.decode_json(b"\xff")
    named = {"w": np.arange(4, dtype=np.uint64).reshape(2, 2), "b": np.array([9], np.uint64)}
    back = wire.decode_named(wire.encode_named(named, R64), R64)
    assert sorted(back) == ["b", "w"] and all(np.array_equal(back[k], named[k]) for k in named)
    rid, arrays = wire.decode_open(wire.encode_open(3, list(named.values()), R64), R64)
    assert rid == 3 and np.array_equal(arrays[0], named["w"])
    with pytest.raises(FrameError):
        wire.decode_named(wire.encode_named(named, R64)[:9], R64)


def test_material_chunk_roundtrip():
    codec = FixedPointCodec()
    layers = [M.Dense("d", 4, 3), M.ReLU()]
    be = PlanBackend(codec)
    Driver(be).run_layers(layers, (4,))
    mats = generate_material(PreprocessingPlan((4,), codec, be.layers), 5)
    for party, mat in enumerate(mats):
        for li, items in enumerate(mat.layers):
            payload = wire.encode_chunk(0, li, items, R64)
            q, layer, back = wire.decode_chunk(payload, party, R64)
            assert (q, layer) == (0, li)
            assert [wire.encode_item(i, R64) for i in back] == [wire.encode_item(i, R64) for i in items]
    with pytest.raises(FrameError):
        wire.decode_chunk(b"\x00\x00", 0, R64)
