"""Pluggable point-to-point channels carrying encoded frames.

Two implementations: an in-process queue pair for tests/simulation and a
TCP byte stream framed by the header's payload length. Both can inject a
fixed per-message delay to model network latency.
"""

import queue
import socket
import time

from .errors import TransportError
from .wire import HEADER_SIZE, decode_frame, decode_header, encode_frame

_CLOSED = object()


class InProcTransport:
    """One endpoint of an in-process channel; frames still round-trip the codec."""

    def __init__(self, send_q, recv_q, latency=0.0):
        self._send_q = send_q
        self._recv_q = recv_q
        self.latency = latency
        self._closed = False

    def send(self, frame):
        if self._closed:
            raise TransportError("send on closed transport")
        if self.latency:
            time.sleep(self.latency)
        self._send_q.put(encode_frame(frame))

    def recv(self, timeout=None):
        try:
            raw = self._recv_q.get(timeout=timeout)
        except queue.Empty:
            raise TransportError("recv timed out") from None
        if raw is _CLOSED:
            raise TransportError("channel closed by peer")
        return decode_frame(raw)

    def close(self):
        if not self._closed:
            self._closed = True
            self._send_q.put(_CLOSED)


def inproc_pair(latency=0.0):
    """Two connected in-process endpoints."""
    a_to_b = queue.Queue()
    b_to_a = queue.Queue()
    return (
        InProcTransport(a_to_b, b_to_a, latency),
        InProcTransport(b_to_a, a_to_b, latency),
    )


class SocketTransport:
    """Length-prefixed frames over a connected stream socket."""

    def __init__(self, sock, latency=0.0):
        self._sock = sock
        self.latency = latency

    def send(self, frame):
        if self.latency:
            time.sleep(self.latency)
        try:
            self._sock.sendall(encode_frame(frame))
        except OSError as exc:
            raise TransportError(f"send failed: {exc}") from exc

    def _read_exact(self, n, what):
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self._sock.recv(n - len(buf))
            except socket.timeout:
                raise TransportError("recv timed out") from None
            except OSError as exc:
                raise TransportError(f"recv failed: {exc}") from exc
            if not chunk:
                raise TransportError(f"channel closed while reading {what}")
            buf.extend(chunk)
        return bytes(buf)

    def recv(self, timeout=None):
        self._sock.settimeout(timeout)
        header = self._read_exact(HEADER_SIZE, "frame header")
        _, _, _, payload_len = decode_header(header)
        payload = self._read_exact(payload_len, "frame payload") if payload_len else b""
        return decode_frame(header + payload)

    def close(self):
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


def listen(host="127.0.0.1", port=0):
    """Bound, listening server socket (port 0 = ephemeral)."""
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, port))
    srv.listen()
    return srv


def accept(server_sock, latency=0.0, timeout=None):
    server_sock.settimeout(timeout)
    try:
        conn, _ = server_sock.accept()
    except socket.timeout:
        raise TransportError("accept timed out") from None
    return SocketTransport(conn, latency)


def connect(host, port, latency=0.0, timeout=5.0):
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as exc:
        raise TransportError(f"connect to {host}:{port} failed: {exc}") from exc
    sock.settimeout(None)
    return SocketTransport(sock, latency)
