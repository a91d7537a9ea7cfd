"""Split-inference server (runs M_S) and edge client (runs M_C) over stream sockets."""

from __future__ import annotations

import logging
import socket
import socketserver
import threading

import numpy as np

from splitlab.defenses import DefenseConfig, apply_wire_defense
from splitlab.wire.capture import CaptureWriter
from splitlab.wire.protocol import (
    E_INTERNAL,
    E_SHAPE,
    E_UNEXPECTED,
    ERROR,
    INFER_REQUEST,
    INFER_RESPONSE,
    DecodeError,
    RemoteError,
    TruncatedFrame,
    decode_frame,
    encode_error,
    encode_tensor,
    parse_prefix,
)

log = logging.getLogger(__name__)


def _recv_exact(sock, n: int) -> bytes:
    chunks = []
    while n > 0:
        chunk = sock.recv(min(n, 1 << 20))
        if not chunk:
            raise EOFError("connection closed")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_frame(sock) -> bytes | None:
    """Read one frame off a stream; None on a clean close between frames.

    Header defects raise :class:`DecodeError` as soon as they are visible.
    """
    first = sock.recv(6)
    if not first:
        return None
    buf = first
    while True:
        if len(buf) < 6:
            buf += _recv_exact(sock, 6 - len(buf))
        try:
            length = parse_prefix(buf)
            break
        except TruncatedFrame:
            need = 8 if len(buf) < 8 else 8 + 4 * buf[7]
            buf += _recv_exact(sock, need - len(buf))
    return buf + _recv_exact(sock, length - len(buf))


def _drain(sock, wait: float = 0.05):
    """Discard bytes already in flight after a malformed frame."""
    old = sock.gettimeout()
    sock.settimeout(wait)
    try:
        while sock.recv(65536):
            pass
    except (socket.timeout, BlockingIOError, OSError):
        pass
    finally:
        sock.settimeout(old)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        srv: SplitServer = self.server
        sock = self.request
        while True:
            try:
                frame = read_frame(sock)
            except DecodeError as exc:
                log.info("malformed frame from %s: %s", self.client_address, exc)
                _drain(sock)
                sock.sendall(encode_error(exc.code))
                continue
            except (EOFError, ConnectionError, OSError):
                return
            if frame is None:
                return
            sock.sendall(srv.respond(frame))


class SplitServer(socketserver.ThreadingTCPServer):
    """Serves M_S; in capture mode every received request frame is appended first.

    Connections are handled concurrently; requests on one connection are
    handled in order.
    """

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address, model, h_shape=None, capture=None):
        super().__init__(tuple(address), _Handler)
        self.model = model
        self.h_shape = None if h_shape is None else tuple(h_shape)
        self.capture = CaptureWriter(capture) if capture else None
        self.served = 0
        self._count_lock = threading.Lock()
        self._thread = None

    @property
    def address(self):
        return self.server_address[:2]

    def respond(self, frame: bytes) -> bytes:
        try:
            msg = decode_frame(frame)
        except DecodeError as exc:
            return encode_error(exc.code)
        if msg.msg_type != INFER_REQUEST:
            return encode_error(E_UNEXPECTED)
        if self.capture is not None:
            self.capture.append(frame)
        h = msg.tensor
        if self.h_shape is not None:
            if h.shape == self.h_shape:
                h = h[None]
            if h.shape[1:] != self.h_shape:
                return encode_error(E_SHAPE)
        try:
            logits = np.asarray(self.model(h), dtype=np.float32)
        except Exception as exc:  # model shape errors and the like
            log.warning("server model failed: %s", exc)
            return encode_error(E_SHAPE if isinstance(exc, ValueError) else E_INTERNAL)
        with self._count_lock:
            self.served += 1
        return encode_tensor(logits, INFER_RESPONSE)

    def start(self) -> "SplitServer":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self.shutdown()
        self.server_close()
        if self._thread is not None:
            self._thread.join()


def run_server(model, address=("127.0.0.1", 0), h_shape=None, capture=None, block: bool = True) -> SplitServer:
    """Start serving; with ``block`` run until interrupted, else return the running server."""
    srv = SplitServer(address, model, h_shape, capture)
    if not block:
        return srv.start()
    try:
        srv.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        srv.server_close()
    return srv


class SplitClient:
    def __init__(self, address, timeout: float = 30.0):
        self.sock = socket.create_connection(tuple(address), timeout=timeout)

    def exchange(self, frame: bytes):
        """Send raw bytes and decode the reply frame."""
        self.sock.sendall(frame)
        reply = read_frame(self.sock)
        if reply is None:
            raise ConnectionError("server closed the connection")
        return decode_frame(reply)

    def infer(self, h: np.ndarray) -> np.ndarray:
        msg = self.exchange(encode_tensor(np.asarray(h, dtype=np.float32), INFER_REQUEST))
        if msg.msg_type == ERROR:
            raise RemoteError(msg.error_code)
        if msg.msg_type != INFER_RESPONSE:
            raise ConnectionError(f"unexpected reply type {msg.msg_type}")
        return msg.tensor

    def close(self):
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def client_representation(client_model, images, defense: DefenseConfig | None = None, seed=0) -> np.ndarray:
    """h = M_C(x), then the wire-boundary defense, as transmitted."""
    h = client_model(np.asarray(images, dtype=np.float32))
    return np.asarray(apply_wire_defense(h, defense, seed=seed), dtype=np.float32)


def run_client(client_model, images, address, defense: DefenseConfig | None = None, seed=0) -> np.ndarray:
    """Send the whole batch as one request; return the server's logits."""
    h = client_representation(client_model, images, defense, seed)
    with SplitClient(address) as c:
        return c.infer(h)
