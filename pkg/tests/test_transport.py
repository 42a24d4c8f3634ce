"""In-process and socket transports carrying wire frames."""

import threading
import time

import numpy as np
import pytest

from stip import transport as tp
from stip.errors import TransportError
from stip.wire import Frame, MsgType, encode_matrix


def frame(payload=b"hello", epoch=1):
    return Frame(msg_type=MsgType.ACK, epoch=epoch, session_id=9, payload=payload)


def test_inproc_round_trip():
    a, b = tp.inproc_pair()
    a.send(frame(b"ping"))
    got = b.recv()
    assert got.payload == b"ping"
    b.send(frame(b"pong"))
    assert a.recv().payload == b"pong"
    a.close()
    b.close()


def test_inproc_preserves_order():
    a, b = tp.inproc_pair()
    for i in range(5):
        a.send(frame(str(i).encode()))
    got = [b.recv().payload for _ in range(5)]
    assert got == [b"0", b"1", b"2", b"3", b"4"]


def test_inproc_latency_injection():
    a, b = tp.inproc_pair(latency=0.02)
    t0 = time.perf_counter()
    a.send(frame())
    b.recv()
    assert time.perf_counter() - t0 >= 0.02


def test_inproc_recv_timeout():
    a, b = tp.inproc_pair()
    with pytest.raises(TransportError):
        b.recv(timeout=0.05)
    a.close()


def test_inproc_closed_peer_raises():
    a, b = tp.inproc_pair()
    a.close()
    with pytest.raises(TransportError):
        b.recv(timeout=0.5)


def test_socket_round_trip():
    srv = tp.listen("127.0.0.1", 0)
    port = srv.getsockname()[1]
    result = {}

    def serve():
        link = tp.accept(srv)
        result["got"] = link.recv()
        link.send(frame(b"reply"))
        link.close()

    t = threading.Thread(target=serve)
    t.start()
    client = tp.connect("127.0.0.1", port)
    payload = encode_matrix(np.random.default_rng(1).normal(size=(4, 3)).astype(np.float32))
    client.send(frame(payload))
    reply = client.recv()
    t.join()
    srv.close()
    client.close()
    assert result["got"].payload == payload
    assert reply.payload == b"reply"


def test_socket_large_payload_exact():
    srv = tp.listen("127.0.0.1", 0)
    port = srv.getsockname()[1]
    blob = bytes(range(256)) * 4096  # 1 MiB
    result = {}

    def serve():
        link = tp.accept(srv)
        result["got"] = link.recv()
        link.close()

    t = threading.Thread(target=serve)
    t.start()
    client = tp.connect("127.0.0.1", port)
    client.send(frame(blob))
    t.join()
    srv.close()
    client.close()
    assert result["got"].payload == blob


def test_socket_peer_close_raises():
    srv = tp.listen("127.0.0.1", 0)
    port = srv.getsockname()[1]

    def serve():
        link = tp.accept(srv)
        link.close()

    t = threading.Thread(target=serve)
    t.start()
    client = tp.connect("127.0.0.1", port)
    t.join()
    with pytest.raises(TransportError):
        client.recv(timeout=1.0)
    srv.close()
    client.close()


def test_transports_deliver_identical_frames():
    frames = [
        frame(bytes([i]) * (i + 1), epoch=i) for i in range(4)
    ]
    a, b = tp.inproc_pair()
    for f in frames:
        a.send(f)
    via_inproc = [b.recv() for _ in frames]
    a.close()
    b.close()

    srv = tp.listen("127.0.0.1", 0)
    port = srv.getsockname()[1]
    received = []

    def serve():
        link = tp.accept(srv)
        for _ in frames:
            received.append(link.recv())
        link.close()

    t = threading.Thread(target=serve)
    t.start()
    client = tp.connect("127.0.0.1", port)
    for f in frames:
        client.send(f)
    t.join()
    srv.close()
    client.close()
    assert via_inproc == received == frames
