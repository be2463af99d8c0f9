"""Channels between the coordinator and one worker.

Both transports move the same encoded bytes: the in-process channel hands the
frame body to a local :class:`~fedcausal.federation.runtime.Worker`, the socket
channel writes ``4-byte big-endian length + JSON body`` frames over TCP.
"""

import logging
import socket
import struct
from collections import deque

from .messages import PROTOCOL_VERSION, Message, ProtocolError, decode, encode

log = logging.getLogger(__name__)

MAX_FRAME = 1 << 30


class WorkerTimeout(ProtocolError):
    def __init__(self, source_id, what="reply"):
        self.source_id = source_id
        super().__init__(f"source {source_id}: no {what} before the timeout")


def send_frame(sock, body):
    sock.sendall(struct.pack(">I", len(body)) + body)


def _recv_exact(sock, n):
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            raise ConnectionError("peer closed the connection")
        buf.extend(chunk)
    return bytes(buf)


def recv_frame(sock):
    (n,) = struct.unpack(">I", _recv_exact(sock, 4))
    if n > MAX_FRAME:
        raise ProtocolError(f"frame of {n} bytes exceeds the limit")
    return _recv_exact(sock, n)


class Channel:
    """Coordinator-side endpoint. ``trace`` keeps every frame body in both directions."""

    def __init__(self, source_id, keep_trace=False):
        self.source_id = source_id
        self.keep_trace = keep_trace
        self.trace = []

    def _log(self, direction, body):
        if self.keep_trace:
            self.trace.append((direction, body))

    def send(self, msg):
        raise NotImplementedError

    def recv(self, timeout=None):
        raise NotImplementedError

    def request(self, msg, timeout=None):
        self.send(msg)
        return self.recv(timeout)

    def close(self):
        pass


class InProcChannel(Channel):
    def __init__(self, worker, keep_trace=False):
        super().__init__(worker.source_id, keep_trace)
        self.worker = worker
        self._pending = deque()
        reply = self.request(Message("HELLO", {"source_id": worker.source_id, "version": PROTOCOL_VERSION}))
        # the in-process worker is its own coordinator on HELLO; keep trace parity with sockets
        if reply.kind != "WELCOME":
            raise ProtocolError(f"handshake failed for source {worker.source_id}")

    def send(self, msg):
        body = encode(msg)
        self._log("out", body)
        if msg.kind == "HELLO":
            out = Message("WELCOME", {"source_id": msg["source_id"], "version": PROTOCOL_VERSION})
        else:
            out = self.worker.handle(decode(body))
        if out is not None:
            rb = encode(out)
            self._log("in", rb)
            self._pending.append(rb)

    def recv(self, timeout=None):
        if not self._pending:
            raise WorkerTimeout(self.source_id)
        return decode(self._pending.popleft())


class SocketChannel(Channel):
    def __init__(self, source_id, sock, keep_trace=False):
        super().__init__(source_id, keep_trace)
        self.sock = sock

    def send(self, msg):
        body = encode(msg)
        self._log("out", body)
        send_frame(self.sock, body)

    def recv(self, timeout=None):
        self.sock.settimeout(timeout)
        try:
            body = recv_frame(self.sock)
        except socket.timeout:
            raise WorkerTimeout(self.source_id) from None
        except (ConnectionError, OSError) as exc:
            raise ProtocolError(f"source {self.source_id}: connection lost ({exc})") from None
        self._log("in", body)
        return decode(body)

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


def listen(host="127.0.0.1", port=0):
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, port))
    srv.listen()
    return srv


def accept_workers(srv, expected_ids, timeout=30.0, keep_trace=False):
    """Accept one connection per expected source id; refuse duplicates and version mismatches."""
    expected = set(expected_ids)
    channels = {}
    srv.settimeout(timeout)
    while len(channels) < len(expected):
        try:
            conn, _ = srv.accept()
        except socket.timeout:
            missing = sorted(expected - set(channels))
            raise WorkerTimeout(missing[0] if missing else None, "connection") from None
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        conn.settimeout(timeout)
        try:
            hello = decode(recv_frame(conn))
        except (ProtocolError, ConnectionError, OSError, struct.error):
            conn.close()
            continue
        sid = hello.get("source_id")
        reason = None
        if hello.kind != "HELLO":
            reason = "expected HELLO"
        elif hello.get("version") != PROTOCOL_VERSION:
            reason = f"protocol version {hello.get('version')} != {PROTOCOL_VERSION}"
        elif sid in channels:
            reason = f"source {sid} already connected"
        elif sid not in expected:
            reason = f"unexpected source {sid}"
        if reason:
            log.warning("refusing worker: %s", reason)
            send_frame(conn, encode(Message("REFUSE", {"reason": reason})))
            conn.close()
            continue
        ch = SocketChannel(sid, conn, keep_trace)
        ch._log("in", encode(hello))
        ch.send(Message("WELCOME", {"source_id": sid, "version": PROTOCOL_VERSION}))
        channels[sid] = ch
    return channels


def connect(host, port, source_id, timeout=30.0, version=PROTOCOL_VERSION, retries=50):
    """Worker side: open a connection and perform the HELLO handshake."""
    import time

    last = None
    for _ in range(retries):
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
            break
        except OSError as exc:
            last = exc
            time.sleep(0.1)
    else:
        raise ProtocolError(f"cannot reach coordinator at {host}:{port} ({last})")
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    send_frame(sock, encode(Message("HELLO", {"source_id": source_id, "version": version})))
    reply = decode(recv_frame(sock))
    if reply.kind == "REFUSE":
        sock.close()
        raise ProtocolError(f"coordinator refused source {source_id}: {reply['reason']}")
    if reply.kind != "WELCOME":
        sock.close()
        raise ProtocolError(f"unexpected handshake reply {reply.kind}")
    sock.settimeout(None)
    return sock
