"""Measurements: permutation strategies, transform cost, traffic, throughput."""

import csv
import statistics
import threading
import time

import numpy as np

from . import wire
from .model import gen_model, greedy_decode_step
from .numerics import gen_permutation, to_matrix
from .protocol import DataOwnerParty, DeveloperParty, ServerParty, _expect_ack
from .transform import gen_permutation_set, para_trans
from .transport import inproc_pair


def _median_time(fn, reps):
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def bench_permutation(d=1024, reps=30, seed=0):
    """Index-based column permutation vs explicit permutation-matrix product."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(d, d)).astype(np.float32)
    p = gen_permutation(d, seed + 1)
    pm = to_matrix(p)
    idx = p.indices
    index_s = _median_time(lambda: x[:, idx], reps)
    matmul_s = _median_time(lambda: x @ pm, reps)
    return {
        "d": d,
        "reps": reps,
        "index_median_s": index_s,
        "matmul_median_s": matmul_s,
        "index_faster": index_s < matmul_s,
    }


def bench_transform(cfg, seed=0):
    """Wall time of one full parameter transformation."""
    params = gen_model(cfg, seed)
    pset = gen_permutation_set(cfg, seed + 1)
    t0 = time.perf_counter()
    para_trans(params, pset)
    return {"transform_s": time.perf_counter() - t0}


def bench_traffic(n, d, s):
    """Per-message byte counts, both computed from the format and measured."""
    overhead = wire.HEADER_SIZE + wire.MATRIX_PREFIX_SIZE
    x = np.zeros((n, d), dtype=np.float32)
    o = np.zeros((n, s), dtype=np.float32)
    req = len(wire.encode_frame(wire.make_infer_request(x, 1, 0)))
    resp = len(wire.encode_frame(wire.make_infer_response(o, 1, 0)))
    return {
        "n": n,
        "d": d,
        "s": s,
        "frame_overhead_bytes": overhead,
        "request_bytes_computed": 4 * n * d + overhead,
        "request_bytes_measured": req,
        "response_bytes_computed": 4 * n * s + overhead,
        "response_bytes_measured": resp,
    }


class _TimedServer(ServerParty):
    """Records how long each inference actually spends in the model."""

    def __init__(self):
        super().__init__()
        self.serve_seconds = []

    def serve(self, frame):
        t0 = time.perf_counter()
        out = super().serve(frame)
        self.serve_seconds.append(time.perf_counter() - t0)
        return out


def bench_generation(params, prompt_ids, max_tokens, latency=0.0, seed=0):
    """Token throughput with a device/communication/cloud latency split."""
    p1 = DeveloperParty(params, session_seed=seed)
    p2 = _TimedServer()
    p3 = DataOwnerParty(params.embedding, session_seed=seed + 1)
    p1_link, srv_a = inproc_pair(latency)
    p3_link, srv_b = inproc_pair(latency)
    threads = [
        threading.Thread(target=p2.serve_loop, args=(t,), daemon=True)
        for t in (srv_a, srv_b)
    ]
    for t in threads:
        t.start()
    to_p2, to_p3 = p1.initialize(seed)
    p1_link.send(to_p2)
    _expect_ack(p1_link.recv(timeout=30.0))
    _expect_ack(p3.handle_deploy_keys(to_p3))

    ids = [int(t) for t in prompt_ids]
    device_s = 0.0
    total_t0 = time.perf_counter()
    for _ in range(max_tokens):
        t0 = time.perf_counter()
        req = p3.infer_request(ids)
        device_s += time.perf_counter() - t0
        p3_link.send(req)
        resp = p3_link.recv(timeout=30.0)
        t0 = time.perf_counter()
        o = p3.recover(resp)
        nxt = greedy_decode_step(o)
        device_s += time.perf_counter() - t0
        ids.append(nxt)
    total_s = time.perf_counter() - total_t0
    p1_link.close()
    p3_link.close()
    for t in threads:
        t.join(timeout=5.0)
    cloud_s = sum(p2.serve_seconds)
    comm_s = max(total_s - device_s - cloud_s, 0.0)
    n = max(max_tokens, 1)
    return {
        "tokens": max_tokens,
        "total_s": total_s,
        "tokens_per_s": max_tokens / total_s if total_s > 0 else float("inf"),
        "device_ms_per_token": 1e3 * device_s / n,
        "cloud_ms_per_token": 1e3 * cloud_s / n,
        "communication_ms_per_token": 1e3 * comm_s / n,
        "injected_latency_ms": 1e3 * latency,
    }


def write_csv(path, rows):
    """Flat dict rows -> CSV with the union of keys as columns."""
    if not rows:
        with open(path, "w", newline="", encoding="utf-8") as f:
            f.write("")
        return
    cols = []
    for row in rows:
        for k in row:
            if k not in cols:
                cols.append(k)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)
