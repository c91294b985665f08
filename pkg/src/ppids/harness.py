"""Experiment drivers: precision sweep, matching, confusion/binary metrics, timing."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .engine import encode_input, infer_plain_fixed, infer_plain_float, quantize_weights
from .errors import OverflowAbort
from .model import CLASS_NAMES
from .rand import derive_seed
from .ring import FixedPointCodec

NORMAL = CLASS_NAMES.index("normal")
SWEEP_SCHEMA = "# ppids-sweep v1"
BENCH_SCHEMA = "# ppids-bench v1"
METRICS_SCHEMA = "# ppids-metrics v1"
FAILURE_MODES = ("ok", "quantization-mismatch", "overflow")


def _prepared(model):
    """(spec, weights) with batchnorm folded; accepts a Model or a pair."""
    spec, weights = (model.spec, model.weights) if isinstance(model, M.Model) else model
    return M.fold_batchnorm(spec, weights)


# --- matching and confusion -------------------------------------------------------------


def matching_rate(pred_a, pred_b) -> float:
    a, b = np.asarray(pred_a), np.asarray(pred_b)
    if a.shape != b.shape:
        raise ValueError(f"prediction vectors differ in length: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("no predictions to compare")
    return float(np.mean(a == b))


@dataclass
class ConfusionMatrix:
    counts: np.ndarray               # rows: true label, columns: predicted
    classes: tuple = CLASS_NAMES

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else float("nan")

    def format(self) -> str:
        head = "true\\pred " + " ".join(f"{c[:4]:>5}" for c in self.classes)
        rows = [f"{c:>9} " + " ".join(f"{v:5d}" for v in r) for c, r in zip(self.classes, self.counts)]
        return "\n".join([head] + rows)


def confusion(pred, truth, classes: int = 8) -> ConfusionMatrix:
    pred, truth = np.asarray(pred, np.int64), np.asarray(truth, np.int64)
    if pred.shape != truth.shape:
        raise ValueError("pred and truth differ in length")
    if pred.size and (min(pred.min(), truth.min()) < 0 or max(pred.max(), truth.max()) >= classes):
        raise ValueError(f"labels must lie in [0, {classes})")
    cm = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(cm, (truth, pred), 1)
    names = CLASS_NAMES if classes == len(CLASS_NAMES) else tuple(str(i) for i in range(classes))
    return ConfusionMatrix(cm, names)


@dataclass(frozen=True)
class BinaryMetrics:
    """Normal vs. any attack; a rate is None when its denominator is empty."""

    accuracy: float | None
    tpr: float | None
    fpr: float | None
    tp: int
    fn: int
    fp: int
    tn: int

    def as_row(self) -> dict:
        fmt = lambda v: "n/a" if v is None else f"{100 * v:.1f}%"  # noqa: E731
        return {"accuracy": fmt(self.accuracy), "tpr": fmt(self.tpr), "fpr": fmt(self.fpr)}


def binary_metrics(cm, normal: int = NORMAL) -> BinaryMetrics:
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    attack = np.ones(counts.shape[0], dtype=bool)
    attack[normal] = False
    tp = int(counts[np.ix_(attack, attack)].sum())
    fn = int(counts[attack, normal].sum())
    fp = int(counts[normal, attack].sum())
    tn = int(counts[normal, normal])
    total = tp + fn + fp + tn
    return BinaryMetrics((tp + tn) / total if total else None,
                         tp / (tp + fn) if tp + fn else None,
                         fp / (fp + tn) if fp + tn else None, tp, fn, fp, tn)


# --- precision sweep ----------------------------------------------------------------------


@dataclass
class SweepRow:
    precision: int
    matched: int
    total: int
    predictions: list | None
    mode: str
    detail: str = ""


@dataclass
class SweepReport:
    rows: list = field(default_factory=list)
    reference: list = field(default_factory=list)
    encrypted: bool = False

    def row(self, p: int) -> SweepRow:
        return next(r for r in self.rows if r.precision == p)

    def band(self) -> list[int]:
        """Precisions with every item matching the float reference."""
        return [r.precision for r in self.rows if r.mode == "ok"]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(SWEEP_SCHEMA + "\n")
            w = csv.writer(fh)
            w.writerow(["precision", "matched", "total", "mode", "predictions", "detail"])
            for r in self.rows:
                preds = "" if r.predictions is None else " ".join(map(str, r.predictions))
                w.writerow([r.precision, r.matched, r.total, r.mode, preds, r.detail])


def _classify(p, preds, ref, detail="") -> SweepRow:
    matched = int(np.sum(np.asarray(preds) == ref))
    mode = "ok" if matched == len(ref) else "quantization-mismatch"
    return SweepRow(p, matched, len(ref), [int(v) for v in preds], mode, detail)


def sweep_precision(model, data, p_range=range(1, 17), encrypted: bool = False,
                    sample: int | None = None, base: int = 10, word_size: int = 64,
                    seed: int = 0) -> SweepReport:
    """For each precision compare fixed-point (or encrypted) argmax with float.

    Overflow anywhere (weights, input or any layer) marks the row ``overflow``.
    """
    spec, weights = _prepared(model)
    x = np.asarray(data, dtype=np.float64)
    if encrypted and sample is not None:
        x = x[:sample]
    ref = infer_plain_float(spec, weights, x).argmax(axis=1)
    report = SweepReport(reference=[int(v) for v in ref], encrypted=encrypted)
    for p in p_range:
        try:
            codec = FixedPointCodec(base, p, word_size)
        except ValueError as exc:
            report.rows.append(SweepRow(p, 0, len(ref), None, "overflow", str(exc)))
            continue
        try:
            if encrypted:
                preds = _encrypted_predictions(spec, weights, x, codec, seed)
            else:
                q = quantize_weights(weights, codec)
                logits = infer_plain_fixed(spec, q, encode_input(spec, x, codec), codec)
                preds = codec.ring.signed(logits).argmax(axis=1)
        except (OverflowError, OverflowAbort) as exc:
            report.rows.append(SweepRow(p, 0, len(ref), None, "overflow", str(exc)))
            continue
        report.rows.append(_classify(p, preds, ref))
    return report


def _encrypted_predictions(spec, weights, x, codec, seed):
    from .protocol.session import LocalDeployment, SessionConfig

    dep = LocalDeployment(M.Model(spec, weights), codec, dealer_seed=seed, server_seed=seed)
    cfg = SessionConfig(codec.base, codec.precision, codec.word_size,
                        input_bound=float(np.max(np.abs(x))) if x.size else 1.0)
    return dep.run_client(x, cfg, seed=seed).predictions


# --- engineered sweep fixtures --------------------------------------------------------------


def engineered_model(seed: int = 0, scale: float = 1e3) -> M.Model:
    """Desk network with weights multiplied by ``scale`` (drives early overflow)."""
    spec = M.make_desk_spec()
    return M.Model(spec, M.gen_synthetic_weights(spec, seed, scale))


def near_tie_inputs(model, count: int, rel_gap: float = 1e-3, seed: int = 0,
                    pool: int = 64) -> np.ndarray:
    """Inputs whose two largest float logits differ by about ``rel_gap`` of the largest.

    Built by blending two random inputs with different float predictions and
    bisecting the blend weight toward the decision boundary.
    """
    spec, weights = _prepared(model)
    rng = np.random.default_rng(seed)
    X = rng.random((pool,) + tuple(spec.input_shape))
    pred = infer_plain_float(spec, weights, X).argmax(axis=1)
    first = pred[0]
    others = np.flatnonzero(pred != first)
    sames = np.flatnonzero(pred == first)
    if others.size == 0:
        raise ValueError("input pool has a single predicted class; cannot build ties")

    def rel(x):
        logits = infer_plain_float(spec, weights, x[None])[0]
        top = np.sort(logits)
        return logits.argmax(), (top[-1] - top[-2]) / max(np.abs(logits).max(), 1e-300)

    out = []
    for i in range(count):
        xa, xb = X[sames[i % sames.size]], X[others[i % others.size]]
        if i >= others.size:      # vary the pairing once the pool repeats
            xb = X[others[(i * 7 + 3) % others.size]]
        lo, hi = 0.0, 1.0
        for _ in range(60):
            mid = (lo + hi) / 2
            cls, gap = rel((1 - mid) * xa + mid * xb)
            if cls != first:
                hi = mid
            elif gap > rel_gap:
                lo = mid
            else:
                break
        out.append((1 - mid) * xa + mid * xb)
    return np.stack(out)


# --- timing ----------------------------------------------------------------------------------


@dataclass
class BenchRow:
    config: str
    items: int
    duration: float           # mean seconds per item
    matching: float           # vs. float plaintext predictions
    phases: dict = field(default_factory=dict)


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)

    def row(self, config: str) -> BenchRow:
        return next(r for r in self.rows if r.config == config)

    def to_csv(self, path) -> None:
        from .protocol.session import PHASES

        with open(path, "w", newline="") as fh:
            fh.write(BENCH_SCHEMA + "\n")
            w = csv.writer(fh)
            w.writerow(["config", "items", "duration_s", "matching", *PHASES])
            for r in self.rows:
                w.writerow([r.config, r.items, f"{r.duration:.6f}", f"{r.matching:.4f}",
                            *(f"{r.phases.get(p, 0.0):.6f}" for p in PHASES)])


def bench(model, data, transports=("local", "tcp"), codec: FixedPointCodec = FixedPointCodec(),
          seed: int = 0, warmup: bool = True) -> BenchReport:
    """Per-item mean duration for plaintext and each encrypted transport.

    Items are run one session each, the transports interleaved with their
    order alternating, after one untimed warm-up item, so that drift and
    first-use costs do not land on whichever configuration happens to run first.
    """
    from .protocol.session import (PHASES, LocalDeployment, SessionConfig, run_client, run_dealer,
                                   run_server)

    spec, weights = _prepared(model)
    x = np.asarray(data, dtype=np.float64)
    folded = M.Model(spec, weights)
    report = BenchReport()
    for kind in transports:
        if kind not in ("local", "tcp"):
            raise ValueError(f"unknown transport {kind!r}")

    t0 = time.perf_counter()
    ref = np.concatenate([infer_plain_float(spec, weights, item[None]).argmax(axis=1) for item in x])
    report.rows.append(BenchRow("plaintext-cpu", len(x), (time.perf_counter() - t0) / len(x), 1.0))

    cfg = SessionConfig(codec.base, codec.precision, codec.word_size,
                        input_bound=float(np.max(np.abs(x))) if x.size else 1.0)
    services = []
    runners = {}
    try:
        if "local" in transports:
            dep = LocalDeployment(folded, codec, dealer_seed=seed, server_seed=seed)
            runners["local"] = lambda item, s: dep.run_client(item, cfg, seed=s)
        if "tcp" in transports:
            dealer = run_dealer(seed=seed, block=False)
            services.append(dealer)
            server = run_server(folded, dealer=dealer.address, codec=codec, seed=seed, block=False)
            services.append(server)
            runners["tcp"] = lambda item, s: run_client(item, server.address, dealer.address, cfg, seed=s)
        if warmup and len(x) and runners:
            next(iter(runners.values()))(x[:1], seed)
        results = {k: [] for k in transports}
        for i in range(len(x)):
            order = list(transports) if i % 2 == 0 else list(reversed(transports))
            for kind in order:
                results[kind].append(runners[kind](x[i:i + 1], derive_seed(seed, "bench", i)))
    finally:
        for svc in reversed(services):
            svc.stop()

    for kind in transports:
        reps = results[kind]
        timings = [t for r in reps for t in r.timings]
        preds = np.concatenate([r.predictions for r in reps]) if reps else np.zeros(0, np.int64)
        n = max(len(timings), 1)
        totals = {p: sum(t[p] for t in timings) / n for p in PHASES}
        duration = float(np.mean([sum(t.values()) for t in timings])) if timings else 0.0
        report.rows.append(BenchRow(f"encrypted-{kind}", len(x), duration,
                                    matching_rate(preds, ref) if len(x) else 1.0, totals))
    return report
