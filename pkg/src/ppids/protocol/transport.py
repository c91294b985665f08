"""Ordered, reliable message links: an in-process queue pair and TCP."""

from __future__ import annotations

import os
import queue
import socket
import threading
import time

import numpy as np

from ..errors import FrameError, ProtocolAbort, abort_from_code
from ..ring import Ring
from .wire import Msg, decode_json, decode_open, encode_json, encode_open, frame, parse_header, unframe


def default_timeout() -> float:
    return float(os.environ.get("PPIDS_TIMEOUT", "120"))


class Link:
    """Bidirectional message link carrying framed bytes."""

    kind = "abstract"

    def send_frame(self, data: bytes) -> None:
        raise NotImplementedError

    def recv_frame(self) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def send(self, tag: Msg, payload: bytes = b"") -> None:
        self.send_frame(frame(tag, payload))

    def send_json(self, tag: Msg, obj) -> None:
        self.send(tag, encode_json(obj))

    def recv(self) -> tuple[Msg, bytes]:
        tag, payload, rest = unframe(self.recv_frame())
        if rest:
            raise FrameError("trailing bytes after frame")
        return tag, payload

    def expect(self, *tags: Msg) -> tuple[Msg, bytes]:
        """Receive one message; an ABORT from the peer is raised as an exception."""
        tag, payload = self.recv()
        if tag == Msg.ABORT:
            info = decode_json(payload)
            exc = abort_from_code(info.get("code", "Abort"), info.get("message", ""))
            exc.remote = True
            raise exc
        if tags and tag not in tags:
            raise FrameError(f"expected {[t.name for t in tags]}, got {tag.name}")
        return tag, payload

    def abort(self, exc: ProtocolAbort) -> None:
        """Tell the peer why this side stops; aborts received from it are not echoed."""
        if getattr(exc, "remote", False):
            return
        try:
            self.send_json(Msg.ABORT, {"code": exc.code, "message": exc.detail})
        except OSError:
            pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


_CLOSED = object()


class QueueLink(Link):
    kind = "local"

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, timeout: float | None = None):
        self._in, self._out = inbox, outbox
        self.timeout = default_timeout() if timeout is None else timeout

    def send_frame(self, data: bytes) -> None:
        self._out.put(bytes(data))

    def recv_frame(self) -> bytes:
        try:
            data = self._in.get(timeout=self.timeout)
        except queue.Empty:
            raise TimeoutError("no message within timeout") from None
        if data is _CLOSED:
            raise ConnectionError("peer closed the link")
        return data

    def close(self) -> None:
        self._out.put(_CLOSED)


def queue_link_pair(timeout: float | None = None) -> tuple[QueueLink, QueueLink]:
    a, b = queue.Queue(), queue.Queue()
    return QueueLink(a, b, timeout), QueueLink(b, a, timeout)


class SocketLink(Link):
    kind = "tcp"

    def __init__(self, sock: socket.socket, timeout: float | None = None):
        self.sock = sock
        sock.settimeout(default_timeout() if timeout is None else timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    @classmethod
    def connect(cls, address: str, timeout: float | None = None) -> SocketLink:
        host, port = parse_address(address)
        sock = socket.create_connection((host, port),
                                        timeout=default_timeout() if timeout is None else timeout)
        return cls(sock, timeout)

    def _read_exact(self, n: int) -> bytes:
        buf = bytearray(n)
        view, got = memoryview(buf), 0
        while got < n:
            k = self.sock.recv_into(view[got:], n - got)
            if k == 0:
                raise ConnectionError("peer closed the connection")
            got += k
        return bytes(buf)

    def send_frame(self, data: bytes) -> None:
        self.sock.sendall(data)

    def recv_frame(self) -> bytes:
        header = self._read_exact(4)
        return header + self._read_exact(parse_header(header))

    def close(self, linger: float = 2.0) -> None:
        """Half-close, then drain until the peer closes so queued frames survive."""
        try:
            self.sock.shutdown(socket.SHUT_WR)
            self.sock.settimeout(linger)
            deadline = time.monotonic() + linger
            while self.sock.recv(1 << 16) and time.monotonic() < deadline:
                pass
        except OSError:
            pass
        self.sock.close()


def parse_address(address: str) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address must be host:port, got {address!r}")
    return host or "127.0.0.1", int(port)


class TappedLink(Link):
    """Wraps a link and records every frame as (direction, tag, payload)."""

    def __init__(self, inner: Link, log: list, label: str = ""):
        self.inner, self.log, self.label = inner, log, label
        self.kind = inner.kind
        self._lock = threading.Lock()

    def send_frame(self, data: bytes) -> None:
        tag, payload, _ = unframe(data)
        with self._lock:
            self.log.append((self.label, "out", tag, payload))
        self.inner.send_frame(data)

    def recv_frame(self) -> bytes:
        data = self.inner.recv_frame()
        tag, payload, _ = unframe(data)
        with self._lock:
            self.log.append((self.label, "in", tag, payload))
        return data

    def close(self) -> None:
        self.inner.close()


class LinkOpener:
    """Masked openings over a link; party 0 sends first, party 1 receives first."""

    def __init__(self, party: int, link: Link, ring: Ring):
        self.party, self.link, self.ring = party, link, ring
        self.rounds = 0

    def open(self, arrays: list[np.ndarray]) -> list[np.ndarray]:
        round_id = self.rounds
        mine = [np.asarray(a, dtype=self.ring.dtype) for a in arrays]
        payload = encode_open(round_id, mine, self.ring)
        if self.party == 0:
            self.link.send(Msg.OPEN_BROADCAST, payload)
            theirs = self._receive(round_id)
        else:
            theirs = self._receive(round_id)
            self.link.send(Msg.OPEN_BROADCAST, payload)
        if len(theirs) != len(mine) or any(a.shape != b.shape for a, b in zip(mine, theirs)):
            raise FrameError(f"round {round_id}: peer opened mismatched tensors")
        self.rounds += 1
        return [self.ring.add(a, b) for a, b in zip(mine, theirs)]

    def _receive(self, round_id: int) -> list[np.ndarray]:
        _, payload = self.link.expect(Msg.OPEN_BROADCAST)
        rid, arrays = decode_open(payload, self.ring)
        if rid != round_id:
            raise FrameError(f"expected round {round_id}, peer sent {rid}")
        return arrays


def run_pair(fn0, fn1, ring: Ring = Ring(64), timeout: float | None = None):
    """Run two party functions concurrently over an in-process link.

    ``fn_b(opener)`` is called with party b's opener; returns both results.
    Exceptions in either party are re-raised.
    """
    l0, l1 = queue_link_pair(timeout)
    openers = (LinkOpener(0, l0, ring), LinkOpener(1, l1, ring))
    results, errors = [None, None], [None, None]

    def work(b, fn):
        try:
            results[b] = fn(openers[b])
        except BaseException as exc:  # noqa: BLE001 - surfaced below
            errors[b] = exc
            (l0, l1)[b].close()

    threads = [threading.Thread(target=work, args=(b, f), daemon=True)
               for b, f in enumerate((fn0, fn1))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for err in errors:
        if err is not None and not isinstance(err, ConnectionError):
            raise err
    for err in errors:
        if err is not None:
            raise err
    return results[0], results[1]
