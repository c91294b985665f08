"""Three-party sessions: dealer, model server (party 1) and client (party 0).

Message flow for one session::

    client -> server   HELLO {session, token, codec, input_shape, model_hash, queries, ...}
    server -> client   CONFIG_ACK {session, spec, model_hash}
    server -> client   WEIGHT_SHARE_COMMIT (the client's uniform weight shares)
    per query q, each party -> dealer   PLAN_REQUEST {session, party, spec, input_shape, codec, query}
                 dealer -> party        PLAN_REPLY, then one MATERIAL_CHUNK per layer
    client -> server   INPUT_SHARE (x - r; the client keeps r)
    both ways          OPEN_BROADCAST, one per round
    server -> client   LOGITS_SHARE

The server reads an INPUT_SHARE only after its own material for that query
has fully arrived, so the offline phase always precedes data flow.
"""

from __future__ import annotations

import csv
import os
import socketserver
import threading
import time
from collections import Counter, OrderedDict
from dataclasses import dataclass, field

import numpy as np

from ..dealer import CorrelatedMaterial, generate_layer, item_matches, plan_preprocessing
from ..engine import encode_input, magnitude_bound, quantize_weights
from ..errors import (ConfigMismatch, DealerUnavailable, FrameError, OverflowAbort, PpidsError,
                      ProtocolAbort, QuotaExceeded, SpecError)
from ..model import Model, ModelSpec, check_weights, fold_batchnorm, load_model
from ..rand import Rng, derive_seed
from ..ring import FixedPointCodec, decode, safe_bound
from ..secure import SecureSession, secure_forward, share_weights
from ..sharing import ShareTensor, reconstruct
from .transport import Link, LinkOpener, SocketLink, TappedLink, parse_address, queue_link_pair
from .wire import (Msg, decode_chunk, decode_json, decode_named, decode_tensor, encode_chunk,
                   encode_named, encode_tensor)

PHASES = ("preprocessing", "upload", "online", "reveal")
PLAN_FIELDS = {"session": str, "party": int, "spec": str, "input_shape": list,
               "codec": dict, "query": int}
CODEC_FIELDS = ("base", "precision", "word_size")
CSV_SCHEMA = "# ppids-client-report v1"


def codec_to_dict(codec: FixedPointCodec) -> dict:
    return {"base": codec.base, "precision": codec.precision, "word_size": codec.word_size}


def codec_from_dict(d) -> FixedPointCodec:
    if not isinstance(d, dict) or set(d) != set(CODEC_FIELDS):
        raise ConfigMismatch(f"codec must have exactly {CODEC_FIELDS}")
    if not all(isinstance(d[k], int) and not isinstance(d[k], bool) for k in CODEC_FIELDS):
        raise ConfigMismatch("codec fields must be integers")
    try:
        return FixedPointCodec(d["base"], d["precision"], d["word_size"])
    except ValueError as exc:
        raise ConfigMismatch(str(exc)) from None


@dataclass
class SessionConfig:
    """What the client proposes in HELLO."""

    base: int = 10
    precision: int = 4
    word_size: int = 64
    model_hash: str = ""
    input_shape: tuple | None = None
    token: str = "anonymous"
    queries: int = 1
    input_bound: float = 1.0
    transport: str = "local"
    session: str = ""

    @property
    def codec(self) -> FixedPointCodec:
        return FixedPointCodec(self.base, self.precision, self.word_size)

    def hello(self) -> dict:
        return {"session": self.session, "token": self.token, "codec": codec_to_dict(self.codec),
                "model_hash": self.model_hash, "queries": self.queries,
                "input_shape": list(self.input_shape) if self.input_shape else None,
                "input_bound": self.input_bound, "transport": self.transport}

    @classmethod
    def from_hello(cls, d: dict) -> SessionConfig:
        try:
            codec = codec_from_dict(d["codec"])
            shape = d.get("input_shape")
            cfg = cls(codec.base, codec.precision, codec.word_size, str(d.get("model_hash") or ""),
                      tuple(int(v) for v in shape) if shape else None, str(d["token"]),
                      int(d["queries"]), float(d.get("input_bound", 1.0)),
                      str(d.get("transport", "local")), str(d["session"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigMismatch(f"malformed HELLO: {exc}") from None
        if cfg.queries < 0 or not cfg.session:
            raise ConfigMismatch("HELLO needs a session id and a non-negative query count")
        return cfg


# --- dealer ---------------------------------------------------------------------------


def validate_plan_request(req) -> dict:
    """Strict schema: shapes, architecture and codec only; nothing data-bearing."""
    if not isinstance(req, dict) or set(req) != set(PLAN_FIELDS):
        raise ConfigMismatch(f"PLAN_REQUEST must have exactly the fields {sorted(PLAN_FIELDS)}")
    for k, t in PLAN_FIELDS.items():
        if not isinstance(req[k], t) or isinstance(req[k], bool):
            raise ConfigMismatch(f"PLAN_REQUEST field {k} must be {t.__name__}")
    if req["party"] not in (0, 1) or req["query"] < 0:
        raise ConfigMismatch("bad party or query index")
    if not all(isinstance(v, int) and v > 0 for v in req["input_shape"]):
        raise ConfigMismatch("input_shape must list positive integers")
    return req


class DealerService:
    """Serves correlated randomness; each connection is one party of one session.

    Material for (session, query) is derived from the dealer seed, generated
    once for both parties; the half not yet collected is cached briefly and
    regenerated deterministically if evicted.
    """

    def __init__(self, seed=None, cache_size: int = 4):
        self.seed = os.urandom(16) if seed is None else seed
        self.cache_size = cache_size
        self._cache: OrderedDict = OrderedDict()
        self._locks: dict = {}
        self._lock = threading.Lock()
        self._plans: dict = {}

    def _plan(self, req):
        key = (req["spec"], tuple(req["input_shape"]), tuple(sorted(req["codec"].items())))
        with self._lock:
            plan = self._plans.get(key)
        if plan is None:
            spec = ModelSpec.from_text(req["spec"])
            plan = plan_preprocessing(spec, tuple(req["input_shape"]), codec_from_dict(req["codec"]))
            with self._lock:
                self._plans[key] = plan
        return plan

    def query_seed(self, session: str, query: int) -> bytes:
        return derive_seed(self.seed, "session", session, "query", query)

    def _chunks(self, req, plan) -> list[bytes]:
        party = req["party"]
        key = (req["session"], req["query"], req["spec"], tuple(req["input_shape"]),
               tuple(sorted(req["codec"].items())))
        with self._lock:
            klock = self._locks.setdefault(key, threading.Lock())
        with klock:
            with self._lock:
                entry = self._cache.get(key)
                if entry is not None and party in entry:
                    chunks = entry.pop(party)
                    if not entry:
                        del self._cache[key]
                        self._locks.pop(key, None)
                    return chunks
            seed = self.query_seed(req["session"], req["query"])
            ring = plan.codec.ring
            halves = ([], [])
            for i in range(len(plan.layers)):
                items = generate_layer(plan, i, seed)
                for b in (0, 1):
                    halves[b].append(encode_chunk(req["query"], i, items[b], ring))
            with self._lock:
                self._cache[key] = {1 - party: halves[1 - party]}
                while len(self._cache) > self.cache_size:
                    old, _ = self._cache.popitem(last=False)
                    self._locks.pop(old, None)
            return halves[party]

    def handle(self, link: Link) -> None:
        try:
            while True:
                try:
                    _, payload = link.expect(Msg.PLAN_REQUEST)
                except (ConnectionError, TimeoutError):
                    return
                req = validate_plan_request(decode_json(payload))
                plan = self._plan(req)
                chunks = self._chunks(req, plan)
                link.send_json(Msg.PLAN_REPLY, {"session": req["session"], "query": req["query"],
                                                "party": req["party"], **plan.summary()})
                for c in chunks:
                    link.send(Msg.MATERIAL_CHUNK, c)
        except ProtocolAbort as exc:
            link.abort(exc)
        except (SpecError, FrameError) as exc:
            link.abort(ProtocolAbort(str(exc), code="BadRequest"))
        finally:
            link.close()


def fetch_material(link: Link, session: str, party: int, spec: ModelSpec,
                   codec: FixedPointCodec, query: int) -> CorrelatedMaterial:
    """Request one query's material and check it against a locally computed plan."""
    shape = list(spec.input_shape)
    link.send_json(Msg.PLAN_REQUEST, {"session": session, "party": party, "spec": spec.canonical(),
                                      "input_shape": shape, "codec": codec_to_dict(codec),
                                      "query": query})
    _, payload = link.expect(Msg.PLAN_REPLY)
    info = decode_json(payload)
    plan = plan_preprocessing(spec, shape, codec)
    if info.get("session") != session or info.get("query") != query \
            or info.get("layers") != len(plan.layers):
        raise FrameError("dealer reply does not match the request")
    layers = []
    for i, lp in enumerate(plan.layers):
        _, payload = link.expect(Msg.MATERIAL_CHUNK)
        q, li, items = decode_chunk(payload, party, codec.ring)
        if (q, li) != (query, i) or len(items) != len(lp.needs) or \
                not all(item_matches(it, n) for it, n in zip(items, lp.needs)):
            raise FrameError(f"material chunk {q}/{li} does not match plan layer {i}")
        layers.append(items)
    return CorrelatedMaterial(party, layers, session)


def _connect(dealer) -> Link:
    """``dealer`` is a "host:port" string or a zero-argument link factory."""
    if dealer is None:
        raise DealerUnavailable("no dealer configured")
    try:
        return SocketLink.connect(dealer) if isinstance(dealer, str) else dealer()
    except DealerUnavailable:
        raise
    except OSError as exc:
        raise DealerUnavailable(f"cannot reach dealer: {exc}") from None


# --- model server (party 1) ---------------------------------------------------------------


class ModelServer:
    """Holds the model; serves sessions, each one a sequence of queries."""

    def __init__(self, model: Model, codec: FixedPointCodec = FixedPointCodec(),
                 quota: int | None = None, dealer=None, seed=None):
        spec, weights = fold_batchnorm(model.spec, model.weights)
        check_weights(spec, weights)
        self.spec, self.weights = spec, weights
        self.model_hash = model.digest()
        self.codec, self.quota, self.dealer = codec, quota, dealer
        self.seed = os.urandom(16) if seed is None else seed
        self.usage: Counter = Counter()
        self.events: list = []
        self.errors: list = []
        self._lock = threading.Lock()

    def _event(self, session, name, query=None):
        with self._lock:
            self.events.append((session, name, query, time.perf_counter()))

    def _check_config(self, cfg: SessionConfig) -> dict:
        if cfg.codec != self.codec:
            raise ConfigMismatch(f"client proposes {codec_to_dict(cfg.codec)}, "
                                 f"server runs {codec_to_dict(self.codec)}")
        if cfg.model_hash and cfg.model_hash != self.model_hash:
            raise ConfigMismatch("model hash differs from the served model")
        if cfg.input_shape and tuple(cfg.input_shape) != tuple(self.spec.input_shape):
            raise ConfigMismatch(f"input shape {cfg.input_shape} != {self.spec.input_shape}")
        peak, where = magnitude_bound(self.spec, self.weights, self.codec, cfg.input_bound)
        if peak >= safe_bound(self.codec.ring):
            raise OverflowAbort(f"magnitude bound {peak:.3g} at {where} reaches "
                                f"2^{self.codec.word_size - 2} at precision {self.codec.precision}")
        try:
            return quantize_weights(self.weights, self.codec)
        except OverflowError as exc:
            raise OverflowAbort(str(exc)) from None

    def handle(self, link: Link) -> None:
        try:
            self._session(link)
        except ProtocolAbort as exc:
            self.errors.append(exc)
            link.abort(exc)
        except (ConnectionError, TimeoutError, PpidsError) as exc:
            self.errors.append(exc)
            if isinstance(exc, PpidsError):
                link.abort(ProtocolAbort(str(exc), code=type(exc).__name__))
        finally:
            link.close()

    def _session(self, link: Link) -> None:
        _, payload = link.expect(Msg.HELLO)
        cfg = SessionConfig.from_hello(decode_json(payload))
        sid, ring = cfg.session, self.codec.ring
        self._event(sid, "hello")
        qweights = self._check_config(cfg)
        link.send_json(Msg.CONFIG_ACK, {"session": sid, "spec": self.spec.canonical(),
                                        "model_hash": self.model_hash})
        w_client, w_server = share_weights(qweights, Rng(derive_seed(self.seed, "weights", sid)),
                                           self.codec)
        link.send(Msg.WEIGHT_SHARE_COMMIT, encode_named({k: v.data for k, v in w_client.items()}, ring))
        del w_client
        dealer = _connect(self.dealer)
        try:
            for q in range(cfg.queries):
                with self._lock:
                    used = self.usage[cfg.token]
                    if self.quota is not None and used >= self.quota:
                        raise QuotaExceeded(f"token {cfg.token!r} has used its {self.quota} queries")
                    self.usage[cfg.token] = used + 1
                material = fetch_material(dealer, sid, 1, self.spec, self.codec, q)
                self._event(sid, "material", q)
                _, payload = link.expect(Msg.INPUT_SHARE)
                self._event(sid, "input", q)
                x, _ = decode_tensor(payload, 0, ring)
                if x.shape != (1,) + tuple(self.spec.input_shape):
                    raise FrameError(f"input share shape {x.shape}")
                opener = LinkOpener(1, link, ring)
                sess = SecureSession(1, self.codec, material, opener)
                y = secure_forward(self.spec, sess, w_server, ShareTensor(1, x, ring))
                link.send(Msg.LOGITS_SHARE, encode_tensor(y.data, ring))
                self._event(sid, "logits", q)
        finally:
            dealer.close()


# --- client (party 0) -----------------------------------------------------------------------


@dataclass
class ClientReport:
    session: str
    codec: FixedPointCodec
    logits: np.ndarray                      # (n, classes) ring values
    predictions: np.ndarray                 # (n,)
    timings: list = field(default_factory=list)   # per query {phase: seconds}
    rounds: list = field(default_factory=list)

    @property
    def decoded(self) -> np.ndarray:
        return decode(self.logits, self.codec)

    def phase_totals(self) -> dict:
        return {p: float(sum(t[p] for t in self.timings)) for p in PHASES}

    def mean_duration(self) -> float:
        if not self.timings:
            return 0.0
        return float(np.mean([sum(t.values()) for t in self.timings]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(CSV_SCHEMA + "\n")
            w = csv.writer(fh)
            w.writerow(["item", "prediction", *PHASES, "rounds"])
            for i, (p, t, r) in enumerate(zip(self.predictions, self.timings, self.rounds)):
                w.writerow([i, int(p), *(f"{t[k]:.6f}" for k in PHASES), r])


def client_session(link: Link, dealer, inputs, config: SessionConfig = SessionConfig(),
                   seed=None) -> ClientReport:
    """Party 0: share inputs, run the rounds, reconstruct and argmax the logits."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim == 3:
        inputs = inputs[None]
    codec, ring = config.codec, config.codec.ring
    rng = Rng(derive_seed(seed, "client") if seed is not None else None)
    cfg = SessionConfig(**{**config.__dict__})
    cfg.queries = len(inputs)
    cfg.input_shape = tuple(inputs.shape[1:])
    if not cfg.session:
        cfg.session = rng.bytes(8).hex()
    try:
        link.send_json(Msg.HELLO, cfg.hello())
        _, payload = link.expect(Msg.CONFIG_ACK)
        ack = decode_json(payload)
        spec = ModelSpec.from_text(ack["spec"])
        if ack.get("session") != cfg.session:
            raise FrameError("server acknowledged a different session")
        _, payload = link.expect(Msg.WEIGHT_SHARE_COMMIT)
        weights = {k: ShareTensor(0, v, ring) for k, v in decode_named(payload, ring).items()}
        logits, timings, rounds = [], [], []
        dealer_link = _connect(dealer)
        try:
            for q, item in enumerate(inputs):
                t0 = time.perf_counter()
                material = fetch_material(dealer_link, cfg.session, 0, spec, codec, q)
                t1 = time.perf_counter()
                qx = encode_input(spec, item, codec)
                mine = rng.ring(qx.shape, ring)
                link.send(Msg.INPUT_SHARE, encode_tensor(ring.sub(qx, mine), ring))
                t2 = time.perf_counter()
                opener = LinkOpener(0, link, ring)
                sess = SecureSession(0, codec, material, opener)
                y0 = secure_forward(spec, sess, weights, ShareTensor(0, mine, ring))
                t3 = time.perf_counter()
                _, payload = link.expect(Msg.LOGITS_SHARE)
                y1, _ = decode_tensor(payload, 0, ring)
                out = reconstruct(y0, ShareTensor(1, y1, ring))
                logits.append(out[0])
                t4 = time.perf_counter()
                timings.append(dict(zip(PHASES, (t1 - t0, t2 - t1, t3 - t2, t4 - t3))))
                rounds.append(sess.rounds)
        finally:
            dealer_link.close()
    except DealerUnavailable as exc:
        link.abort(exc)
        raise
    finally:
        link.close()
    logits = np.array(logits, dtype=ring.dtype).reshape(len(inputs), -1)
    preds = np.argmax(ring.signed(logits), axis=1) if len(inputs) else np.zeros(0, np.int64)
    return ClientReport(cfg.session, codec, logits, preds, timings, rounds)


# --- deployments ----------------------------------------------------------------------------


def _spawn(fn, *args) -> threading.Thread:
    t = threading.Thread(target=fn, args=args, daemon=True)
    t.start()
    return t


class LocalDeployment:
    """Dealer and server as threads, connected to the client by in-process queues."""

    kind = "local"

    def __init__(self, model: Model, codec: FixedPointCodec = FixedPointCodec(),
                 quota: int | None = None, dealer_seed=None, server_seed=None,
                 dealer_available: bool = True, tap: list | None = None):
        self.dealer = DealerService(dealer_seed)
        self.dealer_available = dealer_available
        self.tap = tap
        self.server = ModelServer(model, codec, quota, self._dealer_link, server_seed)
        self._threads: list = []

    def _wrap(self, link, label):
        if self.tap is None:
            return link
        return TappedLink(link, self.tap, label)

    def _dealer_link(self, label="dealer") -> Link:
        if not self.dealer_available:
            raise DealerUnavailable("dealer is not running")
        a, b = queue_link_pair()
        self._threads.append(_spawn(self.dealer.handle, self._wrap(b, label)))
        return a

    def run_client(self, inputs, config: SessionConfig = SessionConfig(), seed=None) -> ClientReport:
        a, b = queue_link_pair()
        t = _spawn(self.server.handle, b)
        try:
            return client_session(self._wrap(a, "client"), lambda: self._dealer_link("dealer-client"),
                                  inputs, config, seed)
        finally:
            t.join(timeout=30)


class TcpService:
    """Threaded TCP listener calling ``handler(link)`` per connection."""

    def __init__(self, handler, address: str = "127.0.0.1:0"):
        host, port = parse_address(address)

        class _Handler(socketserver.BaseRequestHandler):
            def handle(self):
                handler(SocketLink(self.request))

        class _Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self.server = _Server((host, port), _Handler)
        self._thread = None

    @property
    def address(self) -> str:
        host, port = self.server.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> TcpService:
        self._thread = _spawn(self.server.serve_forever)
        return self

    def serve_forever(self) -> None:
        self.server.serve_forever()

    def stop(self) -> None:
        self.server.shutdown()
        self.server.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def run_dealer(listen: str = "127.0.0.1:0", seed=None, block: bool = True) -> TcpService:
    svc = TcpService(DealerService(seed).handle, listen)
    if block:
        svc.serve_forever()
    return svc.start()


def run_server(model, listen: str = "127.0.0.1:0", dealer: str | None = None,
               quota: int | None = None, codec: FixedPointCodec = FixedPointCodec(),
               seed=None, block: bool = True) -> TcpService:
    """``model`` is a Model or a path to a model file."""
    if not isinstance(model, Model):
        model = load_model(model)
    server = ModelServer(model, codec, quota, dealer, seed)
    svc = TcpService(server.handle, listen)
    svc.model_server = server
    if block:
        svc.serve_forever()
    return svc.start()


def run_client(inputs, server: str, dealer: str, config: SessionConfig = SessionConfig(),
               seed=None) -> ClientReport:
    cfg = SessionConfig(**{**config.__dict__, "transport": "tcp"})
    try:
        link = SocketLink.connect(server)
    except OSError as exc:
        raise ConnectionError(f"cannot reach server {server}: {exc}") from None
    return client_session(link, dealer, inputs, cfg, seed)
