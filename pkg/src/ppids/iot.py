"""Sensor streams to window images.

Rows are readings of 17 subsensors (NaN = missing) with a class label.  The
stream is cut into fixed-length sequences that go wholly to train or test,
then a stride-1 window of ``height`` rows becomes one image: oldest row on
top, the 17 indicator columns centred in ``width`` zero columns, the same
plane written to all three channels.

SIMG tensor file (little-endian)::

    b"SIMG" | u16 version | u32 n | u32 height | u32 width | u32 channels
    packed bits of the n*h*w*c {0,1} values (numpy packbits, big bit order)
    u8 class count | (u8 length | utf-8 name)* | n x u8 label index
"""

from __future__ import annotations

import csv
import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ParseError, TooFewRows
from .model import CLASS_NAMES

SENSORS = 17
SENSOR_NAMES = tuple(f"s{i:02d}" for i in range(1, SENSORS + 1))
SIMG_MAGIC = b"SIMG"
SIMG_VERSION = 1


@dataclass
class SensorTable:
    timestamps: np.ndarray      # (n,) float seconds
    readings: np.ndarray        # (n, 17) float, NaN where missing
    labels: np.ndarray          # (n,) int index into CLASS_NAMES

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        self.readings = np.asarray(self.readings, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.timestamps)
        if self.readings.shape != (n, SENSORS) or self.labels.shape != (n,):
            raise ValueError(f"inconsistent table: {self.readings.shape}, {self.labels.shape}")
        if n and (self.labels.min() < 0 or self.labels.max() >= len(CLASS_NAMES)):
            raise ValueError("label index outside the 8-class set")

    def __len__(self) -> int:
        return len(self.timestamps)

    def slice(self, start: int, stop: int) -> SensorTable:
        return SensorTable(self.timestamps[start:stop], self.readings[start:stop],
                           self.labels[start:stop])

    @classmethod
    def concat(cls, parts) -> SensorTable:
        parts = list(parts)
        if not parts:
            return cls(np.zeros(0), np.zeros((0, SENSORS)), np.zeros(0, np.int64))
        return cls(np.concatenate([p.timestamps for p in parts]),
                   np.concatenate([p.readings for p in parts]),
                   np.concatenate([p.labels for p in parts]))


# --- csv -------------------------------------------------------------------------


def save_csv(table: SensorTable, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("timestamp",) + SENSOR_NAMES + ("label",))
        for t, row, lab in zip(table.timestamps, table.readings, table.labels):
            w.writerow([repr(float(t))] + ["" if math.isnan(v) else repr(float(v)) for v in row]
                       + [CLASS_NAMES[lab]])


def load_csv(path) -> SensorTable:
    """Header row required; an empty cell is a missing reading."""
    index = {name: i for i, name in enumerate(CLASS_NAMES)}
    ts, rows, labels = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError("empty file", 1)
        if len(header) != SENSORS + 2 or header[0] != "timestamp" or header[-1] != "label":
            raise ParseError(f"expected timestamp, {SENSORS} sensor columns and label", 1)
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != SENSORS + 2:
                raise ParseError(f"expected {SENSORS + 2} fields, got {len(rec)}", lineno)
            try:
                ts.append(float(rec[0]))
                rows.append([float(v) if v.strip() else math.nan for v in rec[1:-1]])
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
            lab = rec[-1].strip().lower()
            if lab not in index:
                raise ParseError(f"unknown label {rec[-1]!r}", lineno)
            labels.append(index[lab])
    return SensorTable(np.array(ts), np.array(rows).reshape(-1, SENSORS), np.array(labels))


# --- synthetic stream -----------------------------------------------------------------

DEFAULT_PROFILE = {"normal": 0.6, "backdoor": 0.06, "ddos": 0.06, "injection": 0.06,
                   "password": 0.06, "ransomware": 0.06, "scanning": 0.05, "xss": 0.05}


def class_missingness(label: int) -> np.ndarray:
    """Per-sensor probability of a missing reading for one class.

    Each class silences its own block of sensors, so classes differ visibly
    in miss3 encoding space.
    """
    p = np.full(SENSORS, 0.1)
    block = [(label * 2 + j) % SENSORS for j in range(3)]
    p[block] = 0.9
    return p


def gen_synthetic_stream(seed: int = 0, rows: int = 1000, attack_profile: dict | None = None,
                         run_length: tuple[int, int] = (20, 80)) -> SensorTable:
    """Seeded stream of labelled readings built from runs of one class each."""
    profile = dict(DEFAULT_PROFILE if attack_profile is None else attack_profile)
    unknown = set(profile) - set(CLASS_NAMES)
    if unknown:
        raise ValueError(f"unknown classes in profile: {sorted(unknown)}")
    weights = np.array([profile.get(c, 0.0) for c in CLASS_NAMES], dtype=np.float64)
    if weights.sum() <= 0:
        raise ValueError("attack profile has no mass")
    weights /= weights.sum()
    rng = np.random.default_rng(seed)
    labels = np.empty(rows, dtype=np.int64)
    pos = 0
    # runs are assigned greedily toward the requested proportions
    emitted = np.zeros(len(CLASS_NAMES))
    while pos < rows:
        deficit = weights * (pos + 1) - emitted
        deficit = np.clip(deficit, 0, None) + 1e-9 * weights
        cls = int(rng.choice(len(CLASS_NAMES), p=deficit / deficit.sum()))
        n = min(int(rng.integers(run_length[0], run_length[1] + 1)), rows - pos)
        labels[pos:pos + n] = cls
        emitted[cls] += n
        pos += n
    miss = np.stack([class_missingness(c) for c in range(len(CLASS_NAMES))])[labels]
    readings = rng.normal(20.0, 5.0, (rows, SENSORS))
    readings[rng.random((rows, SENSORS)) < miss] = np.nan
    stamps = np.cumsum(rng.uniform(0.5, 1.5, rows))
    return SensorTable(stamps, readings, labels)


# --- partitioning and encoding -----------------------------------------------------------


def partition_sequences(table: SensorTable, seq_len: int = 500, train_frac: float = 2 / 3,
                        seed: int = 0, height: int | None = None) -> tuple[SensorTable, SensorTable]:
    """Split into whole ``seq_len`` chunks, each assigned to train or test.

    A trailing chunk shorter than ``seq_len`` is dropped with a warning.
    """
    if height is not None and seq_len < height:
        raise ValueError(f"sequence length {seq_len} shorter than window height {height}")
    if not 0.0 <= train_frac <= 1.0:
        raise ValueError("train_frac must lie in [0, 1]")
    chunks = len(table) // seq_len
    if chunks == 0:
        raise TooFewRows(f"{len(table)} rows do not fill one {seq_len}-row sequence")
    tail = len(table) - chunks * seq_len
    if tail:
        warnings.warn(f"dropping {tail} trailing rows (shorter than {seq_len})", stacklevel=2)
    n_train = int(round(chunks * train_frac))
    pick = np.random.default_rng(seed).permutation(chunks)[:n_train]
    is_train = np.zeros(chunks, dtype=bool)
    is_train[pick] = True
    parts = [table.slice(i * seq_len, (i + 1) * seq_len) for i in range(chunks)]
    return (SensorTable.concat(p for p, t in zip(parts, is_train) if t),
            SensorTable.concat(p for p, t in zip(parts, is_train) if not t))


def impute_miss3(row) -> np.ndarray:
    """Present reading -> 0, missing -> 1 (works on (17,) or (n, 17))."""
    return np.isnan(np.asarray(row, dtype=np.float64)).astype(np.uint8)


def column_offset(width: int) -> int:
    if width < SENSORS:
        raise ValueError(f"width {width} cannot hold {SENSORS} sensor columns")
    return (width - SENSORS) // 2


def encode_windows(table: SensorTable, height: int = 224, width: int = 224,
                   strategy: str = "miss3") -> tuple[np.ndarray, np.ndarray]:
    """Stride-1 windows as (count, height, width, 3) uint8 images plus labels.

    A window's label is the label of its last (most recent) row.
    """
    if strategy != "miss3":
        raise ValueError(f"unsupported imputation strategy {strategy!r}")
    n = len(table)
    if n < height:
        raise TooFewRows(f"{n} rows, window height {height}")
    left = column_offset(width)
    plane = impute_miss3(table.readings)
    count = n - height + 1
    win = np.lib.stride_tricks.sliding_window_view(plane, height, axis=0)  # (count, 17, height)
    images = np.zeros((count, height, width, 3), dtype=np.uint8)
    images[:, :, left:left + SENSORS, :] = win.transpose(0, 2, 1)[..., None]
    return images, table.labels[height - 1:].copy()


def to_model_input(images: np.ndarray) -> np.ndarray:
    """(n, H, W, C) images -> (n, C, H, W) float batch."""
    return np.ascontiguousarray(np.asarray(images).transpose(0, 3, 1, 2), dtype=np.float64)


# --- SIMG ---------------------------------------------------------------------------------


def save_tensors(images: np.ndarray, labels, path) -> None:
    images = np.asarray(images)
    if images.ndim != 4:
        raise FormatError("images must be (n, height, width, channels)")
    if images.size and not np.isin(images, (0, 1)).all():
        raise FormatError("SIMG stores {0,1} images only")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (images.shape[0],):
        raise FormatError("one label per image required")
    names = b"".join(struct.pack("<B", len(c)) + c.encode() for c in CLASS_NAMES)
    blob = b"".join([
        SIMG_MAGIC, struct.pack("<HIIII", SIMG_VERSION, *images.shape),
        np.packbits(images.astype(np.uint8).ravel()).tobytes(),
        struct.pack("<B", len(CLASS_NAMES)), names, labels.astype(np.uint8).tobytes(),
    ])
    Path(path).write_bytes(blob)


def load_tensors(path) -> tuple[np.ndarray, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != SIMG_MAGIC:
        raise FormatError("not a SIMG file")
    try:
        version, n, h, w, c = struct.unpack_from("<HIIII", data, 4)
        if version != SIMG_VERSION:
            raise FormatError(f"unsupported SIMG version {version}")
        pos = 22
        total = n * h * w * c
        nbytes = (total + 7) // 8
        if len(data) < pos + nbytes:
            raise FormatError("truncated image payload")
        bits = np.unpackbits(np.frombuffer(data, np.uint8, nbytes, pos), count=total)
        images = bits.reshape(n, h, w, c)
        pos += nbytes
        (k,) = struct.unpack_from("<B", data, pos)
        pos += 1
        names = []
        for _ in range(k):
            (ln,) = struct.unpack_from("<B", data, pos)
            names.append(data[pos + 1:pos + 1 + ln].decode())
            pos += 1 + ln
        if len(data) != pos + n:
            raise FormatError("label appendix length mismatch")
        raw = np.frombuffer(data, np.uint8, n, pos).astype(np.int64)
    except struct.error:
        raise FormatError("truncated SIMG header") from None
    remap = np.array([CLASS_NAMES.index(x) if x in CLASS_NAMES else -1 for x in names])
    if n and (raw.max() >= len(names) or (remap[raw] < 0).any()):
        raise FormatError("label outside the class table")
    return images, remap[raw] if n else raw
