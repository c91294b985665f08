
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ppids import iot
from ppids.errors import FormatError, ParseError, TooFewRows
from ppids.model import CLASS_NAMES


def table(rows, seed=0):
    return iot.gen_synthetic_stream(seed, rows)


@pytest.mark.parametrize("rows,count", [(224, 1), (230, 7), (300, 77)])
def test_window_count(rows, count):
    images, labels = iot.encode_windows(table(rows))
    assert images.shape == (count, 224, 224, 3) and labels.shape == (count,)


def test_window_layout_and_centering():
    t = table(230)
    images, labels = iot.encode_windows(t)
    assert set(np.unique(images)) <= {0, 1}
    assert (images[..., 0] == images[..., 1]).all() and (images[..., 1] == images[..., 2]).all()
    assert not images[:, :, :103].any() and not images[:, :, 120:].any()
    assert images.shape[2] - 120 == 104
    plane = iot.impute_miss3(t.readings)
    # oldest row on top, newest on the last row; label from the newest row
    assert np.array_equal(images[3, 0, 103:120, 0], plane[3])
    assert np.array_equal(images[3, -1, 103:120, 0], plane[3 + 223])
    assert labels[3] == t.labels[3 + 223]


def test_desk_scale_windows():
    images, _ = iot.encode_windows(table(40), 32, 32)
    assert images.shape == (9, 32, 32, 3)
    assert not images[:, :, :7].any() and not images[:, :, 24:].any()


def test_encode_errors():
    with pytest.raises(TooFewRows):
        iot.encode_windows(table(100))
    with pytest.raises(ValueError):
        iot.encode_windows(table(224), width=16)
    with pytest.raises(ValueError):
        iot.encode_windows(table(224), strategy="mean")


@settings(max_examples=20, deadline=None)
@given(st.integers(32, 120), st.integers(17, 40))
def test_window_count_formula(rows, width):
    images, _ = iot.encode_windows(table(rows, seed=rows), 32, width)
    assert len(images) == rows - 32 + 1
    left = (width - 17) // 2
    assert not images[:, :, :left].any() and not images[:, :, left + 17:].any()


def test_miss3():
    assert not iot.impute_miss3(np.full(17, 3.0)).any()
    assert iot.impute_miss3(np.full(17, np.nan)).all()
    row = np.arange(17, dtype=float)
    row[[0, 5, 16]] = np.nan
    assert np.flatnonzero(iot.impute_miss3(row)).tolist() == [0, 5, 16]


def test_partition_whole_chunks():
    t = table(1500)
    t.timestamps = np.arange(1500.0)
    train, test = iot.partition_sequences(t, seed=3)
    assert (len(train), len(test)) == (1000, 500)
    for part in (train, test):
        starts = part.timestamps[::500]
        assert np.all(starts % 500 == 0)
        for k, s in enumerate(starts):      # each chunk contiguous and in original order
            assert np.array_equal(part.timestamps[500 * k:500 * (k + 1)], np.arange(s, s + 500))
        assert np.all(np.diff(starts) > 0)
    assert iot.partition_sequences(t, seed=3)[0].timestamps.tolist() == train.timestamps.tolist()


def test_partition_edge_cases():
    with pytest.raises(TooFewRows):
        iot.partition_sequences(table(400))
    with pytest.raises(ValueError):
        iot.partition_sequences(table(1000), seq_len=100, height=224)
    with pytest.warns(UserWarning):
        train, test = iot.partition_sequences(table(1200))
    assert len(train) + len(test) == 1000


def test_csv_roundtrip(tmp_path):
    t = table(300, seed=5)
    path = tmp_path / "s.csv"
    iot.save_csv(t, path)
    back = iot.load_csv(path)
    assert np.array_equal(back.timestamps, t.timestamps)
    assert np.array_equal(np.isnan(back.readings), np.isnan(t.readings))
    assert np.array_equal(np.nan_to_num(back.readings), np.nan_to_num(t.readings))
    assert np.array_equal(back.labels, t.labels)


def test_csv_parse_errors(tmp_path):
    path = tmp_path / "bad.csv"
    iot.save_csv(table(5), path)
    lines = path.read_text().splitlines()
    lines[3] = lines[3].replace(",", ",x", 1)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError) as info:
        iot.load_csv(path)
    assert info.value.line == 4
    lines = path.read_text().splitlines()
    lines[2] = lines[2].rsplit(",", 1)[0] + ",toaster"
    path.write_text("\n".join(lines[:3]) + "\n")
    with pytest.raises(ParseError) as info:
        iot.load_csv(path)
    assert info.value.line == 3
    path.write_text("a,b\n")
    with pytest.raises(ParseError):
        iot.load_csv(path)


def test_generator():
    a, b = table(2000, seed=9), table(2000, seed=9)
    assert np.array_equal(a.labels, b.labels)
    assert np.array_equal(np.isnan(a.readings), np.isnan(b.readings))
    assert not np.array_equal(a.labels, table(2000, seed=10).labels)
    t = iot.gen_synthetic_stream(1, 20000)
    freq = np.bincount(t.labels, minlength=8) / len(t)
    want = np.array([iot.DEFAULT_PROFILE[c] for c in CLASS_NAMES])
    assert np.abs(freq - want).max() < 0.03
    assert set(t.labels.tolist()) == set(range(8))
    only = iot.gen_synthetic_stream(0, 500, {"xss": 1.0})
    assert set(only.labels.tolist()) == {CLASS_NAMES.index("xss")}
    with pytest.raises(ValueError):
        iot.gen_synthetic_stream(0, 10, {"worm": 1.0})


def test_classes_differ_in_encoding_space():
    t = iot.gen_synthetic_stream(2, 20000)
    miss = iot.impute_miss3(t.readings)
    means = np.stack([miss[t.labels == c].mean(axis=0) for c in range(8)])
    for i in range(8):
        for j in range(i):
            assert np.abs(means[i] - means[j]).max() > 0.5


def test_simg_roundtrip(tmp_path):
    images, labels = iot.encode_windows(table(240), 32, 32)
    path = tmp_path / "t.simg"
    iot.save_tensors(images, labels, path)
    back, lab = iot.load_tensors(path)
    assert np.array_equal(back, images) and np.array_equal(lab, labels)
    x = iot.to_model_input(back)
    assert x.shape == (209, 3, 32, 32) and x.dtype == np.float64


def test_simg_errors(tmp_path):
    images, labels = iot.encode_windows(table(224), 32, 32)
    path = tmp_path / "t.simg"
    with pytest.raises(FormatError):
        iot.save_tensors(images * 2, labels, path)
    with pytest.raises(FormatError):
        iot.save_tensors(images, labels[:-1], path)
    iot.save_tensors(images, labels, path)
    raw = path.read_bytes()
    for bad in (b"XIMG" + raw[4:], raw[:10], raw[:40], raw + b"\x00"):
        path.write_bytes(bad)
        with pytest.raises(FormatError):
            iot.load_tensors(path)
