"""Command line entry point: ``ppids <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import harness as H
from . import iot
from . import model as M
from .engine import fixed_logits, infer_plain_float
from .errors import PpidsError
from .model import CLASS_NAMES
from .ring import FixedPointCodec


def _seed(text: str | None):
    """Hex string -> bytes, a plain integer -> int, None stays None."""
    if text is None:
        return None
    try:
        return int(text)
    except ValueError:
        return bytes.fromhex(text)


def load_inputs(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Model inputs (n, C, H, W) and labels if the file has them.

    ``.simg`` tensor files, ``.npy`` float arrays and ``.npz`` with ``x``
    (and optionally ``y``) are accepted.
    """
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path).astype(np.float64), None
    if path.suffix == ".npz":
        with np.load(path) as z:
            return z["x"].astype(np.float64), (z["y"].astype(np.int64) if "y" in z else None)
    images, labels = iot.load_tensors(path)
    return iot.to_model_input(images), labels


def read_labels(path) -> np.ndarray:
    """One label per line, as an index or a class name; SIMG files give their labels."""
    path = Path(path)
    if path.suffix in (".simg", ".npz"):
        labels = load_inputs(path)[1]
        if labels is None:
            raise PpidsError(f"{path} carries no labels")
        return labels
    out = []
    for line in path.read_text().split():
        out.append(int(line) if line.lstrip("-").isdigit() else CLASS_NAMES.index(line.lower()))
    return np.array(out, dtype=np.int64)


def _write_labels(preds, out) -> None:
    text = "".join(f"{int(p)}\n" for p in preds)
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _codec(args) -> FixedPointCodec:
    return FixedPointCodec(args.base, args.precision, args.word_size)


def _add_codec(p, precision=4):
    p.add_argument("--precision", type=int, default=precision)
    p.add_argument("--base", type=int, default=10)
    p.add_argument("--word-size", type=int, default=64)


# --- subcommands -----------------------------------------------------------------------------


def cmd_dealer(args):
    from .protocol.session import run_dealer

    svc = run_dealer(args.listen, _seed(args.seed), block=False)
    print(f"dealer listening on {svc.address}", flush=True)
    _wait(svc)


def cmd_gen_model(args):
    spec = M.make_desk_spec() if args.arch == "desk" else M.make_resnet50_spec(input_size=args.input_size)
    model = M.Model(spec, M.gen_synthetic_weights(spec, args.seed, args.scale))
    M.save_model(model, args.out)
    print(f"{args.arch} model {model.digest()[:16]} -> {args.out}")


def cmd_gen_stream(args):
    table = iot.gen_synthetic_stream(args.seed, args.rows)
    iot.save_csv(table, args.out)
    print(f"{len(table)} rows -> {args.out}")


def cmd_gen_inputs(args):
    spec = M.load_model(args.model).spec
    rng = np.random.default_rng(args.seed)
    x = rng.random((args.count,) + tuple(spec.input_shape))
    if args.near_ties:
        x = np.concatenate([H.near_tie_inputs(M.load_model(args.model), args.near_ties,
                                              seed=args.seed), x])
    np.save(args.out, x)
    print(f"{len(x)} inputs {x.shape[1:]} -> {args.out}")


def cmd_infer_plain(args):
    model = M.load_model(args.model)
    x, _ = load_inputs(args.data)
    spec, weights = M.fold_batchnorm(model.spec, model.weights)
    if args.fixed:
        codec = _codec(args)
        logits = codec.ring.signed(fixed_logits(spec, weights, x, codec))
    else:
        logits = infer_plain_float(spec, weights, x)
    _write_labels(logits.argmax(axis=1), args.out)


def cmd_encode_data(args):
    table = iot.load_csv(args.input)
    images, labels = iot.encode_windows(table, args.height, args.width, args.strategy)
    iot.save_tensors(images, labels, args.out)
    print(f"{len(images)} windows {images.shape[1:]} -> {args.out}")


def cmd_serve(args):
    from .protocol.session import run_server

    svc = run_server(args.model, args.listen, args.dealer, args.quota, _codec(args),
                     _seed(args.seed), block=False)
    print(f"server listening on {svc.address}", flush=True)
    _wait(svc)


def cmd_client(args):
    from .protocol.session import SessionConfig, run_client

    x, _ = load_inputs(args.data)
    if args.limit:
        x = x[:args.limit]
    cfg = SessionConfig(args.base, args.precision, args.word_size, token=args.token,
                        input_bound=float(np.max(np.abs(x))) if x.size else 1.0)
    rep = run_client(x, args.server, args.dealer, cfg, _seed(args.seed))
    if args.report:
        rep.to_csv(args.report)
    _write_labels(rep.predictions, args.out)


def cmd_sweep(args):
    x, _ = load_inputs(args.data)
    rep = H.sweep_precision(M.load_model(args.model), x, range(args.pmin, args.pmax + 1),
                            encrypted=args.encrypted, sample=args.sample, base=args.base,
                            word_size=args.word_size)
    rep.to_csv(args.out)
    for r in rep.rows:
        print(f"p={r.precision:2d} {r.matched}/{r.total} {r.mode}")


def cmd_metrics(args):
    pred, truth = read_labels(args.pred), read_labels(args.truth)
    cm = H.confusion(pred, truth)
    out = {"matching": H.matching_rate(pred, truth), "total": cm.total}
    if args.confusion:
        print(cm.format())
        out["confusion"] = cm.counts.tolist()
    if args.binary:
        b = H.binary_metrics(cm)
        print(" ".join(f"{k}={v}" for k, v in b.as_row().items()))
        out["binary"] = {"accuracy": b.accuracy, "tpr": b.tpr, "fpr": b.fpr}
    if args.out:
        Path(args.out).write_text(H.METRICS_SCHEMA + "\n" + json.dumps(out, indent=1) + "\n")


def cmd_bench(args):
    x, _ = load_inputs(args.data)
    if args.limit:
        x = x[:args.limit]
    rep = H.bench(M.load_model(args.model), x, tuple(t for t in args.transports.split(",") if t),
                  _codec(args))
    if args.out:
        rep.to_csv(args.out)
    for r in rep.rows:
        print(f"{r.config:16s} {r.duration:10.4f} s/item  matching {100 * r.matching:.1f}%")


def _wait(svc):
    try:
        svc._thread.join()
    except KeyboardInterrupt:
        svc.stop()


# --- parser ------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ppids", description="Private CNN inference for IoT intrusion detection")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dealer", help="run the correlated-randomness dealer")
    p.add_argument("--listen", default="127.0.0.1:7000")
    p.add_argument("--seed", help="hex or integer seed (default: fresh)")
    p.set_defaults(fn=cmd_dealer)

    p = sub.add_parser("gen-model", help="write a model with synthetic weights")
    p.add_argument("--arch", choices=("desk", "resnet50"), default="desk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--input-size", type=int, default=224, help="resnet50 only")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_model)

    p = sub.add_parser("gen-stream", help="write a synthetic labelled sensor CSV")
    p.add_argument("--rows", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_stream)

    p = sub.add_parser("gen-inputs", help="write random model inputs as .npy")
    p.add_argument("--model", required=True)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--near-ties", type=int, default=0, help="prepend this many near-tie inputs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_inputs)

    p = sub.add_parser("infer-plain", help="plaintext inference, one prediction per line")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--fixed", action="store_true", help="fixed-point oracle instead of float")
    _add_codec(p)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_infer_plain)

    p = sub.add_parser("encode-data", help="sensor CSV -> SIMG window images")
    p.add_argument("--input", required=True)
    p.add_argument("--height", type=int, default=224)
    p.add_argument("--width", type=int, default=224)
    p.add_argument("--strategy", default="miss3")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_encode_data)

    p = sub.add_parser("serve", help="run the model server")
    p.add_argument("--model", required=True)
    p.add_argument("--listen", default="127.0.0.1:7001")
    p.add_argument("--dealer", default="127.0.0.1:7000")
    p.add_argument("--quota", type=int)
    p.add_argument("--seed")
    _add_codec(p)
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("client", help="encrypted inference against a running server")
    p.add_argument("--data", required=True)
    p.add_argument("--server", default="127.0.0.1:7001")
    p.add_argument("--dealer", default="127.0.0.1:7000")
    p.add_argument("--token", default="anonymous")
    p.add_argument("--limit", type=int, help="first K items only")
    p.add_argument("--seed")
    p.add_argument("--report", help="per-item timing CSV")
    p.add_argument("--out", help="predictions file (default stdout)")
    _add_codec(p)
    p.set_defaults(fn=cmd_client)

    p = sub.add_parser("sweep-precision", help="matching vs. fixed fractional precision")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--pmin", type=int, default=1)
    p.add_argument("--pmax", type=int, default=16)
    p.add_argument("--encrypted", action="store_true")
    p.add_argument("--sample", type=int)
    p.add_argument("--base", type=int, default=10)
    p.add_argument("--word-size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("metrics", help="matching, confusion matrix and binary metrics")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--confusion", action="store_true")
    p.add_argument("--binary", action="store_true")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_metrics)

    p = sub.add_parser("bench", help="per-item duration: plaintext, local and TCP encrypted")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--transports", default="local,tcp")
    p.add_argument("--limit", type=int)
    p.add_argument("--out")
    _add_codec(p)
    p.set_defaults(fn=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except (PpidsError, OSError, ValueError) as exc:
        print(f"ppids {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0
