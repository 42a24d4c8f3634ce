"""Three-party protocol: developer (P1), server (P2), and data owner (P3).

P1 owns the original parameters and the full permutation set, deploys the
transformed model to P2 and the shared {π, π_c} half to P3, and can re-key.
P2 runs the transformed model unchanged on permuted embeddings. P3 embeds
on-device, permutes columns with π, and un-permutes responses with π_c.
Knowledge stays partitioned: P2 never holds key material, P3 never holds a
per-layer permutation, P1 never sees inference traffic.
"""

import json
import secrets
import threading
import time

import numpy as np

from . import container, wire
from .errors import (
    AbortedGenerationError,
    CodecError,
    NotInitializedError,
    ProtocolError,
    StaleEpochError,
    TransportError,
)
from .model import (
    MaskKind,
    MOE_TOP_K,
    embed,
    greedy_decode_step,
    make_mask,
    model_forward,
)
from .numerics import apply_col_perm
from .transform import gen_permutation_set, para_trans, recover_output
from .transport import accept, connect, inproc_pair, listen

RECV_TIMEOUT = 30.0


def _rand_session_id(seed=None):
    if seed is None:
        return secrets.randbits(64)
    return int(np.random.default_rng(seed).integers(0, 2**63, dtype=np.uint64))


class Transcript:
    """Audit log of protocol messages: one JSON record per frame."""

    def __init__(self):
        self.entries = []
        self._lock = threading.Lock()

    def log(self, direction, frame):
        dims = None
        if frame.msg_type in (wire.MsgType.INFER_REQUEST, wire.MsgType.INFER_RESPONSE):
            m = wire.decode_matrix(frame.payload)
            dims = [int(m.shape[0]), int(m.shape[1])]
        entry = {
            "ts": time.time(),
            "direction": direction,
            "msg_type": frame.msg_type.name,
            "epoch": frame.epoch,
            "dims": dims,
        }
        with self._lock:
            self.entries.append(entry)

    def inference_count(self):
        return sum(
            e["msg_type"] in ("INFER_REQUEST", "INFER_RESPONSE") for e in self.entries
        )

    def to_jsonl(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for e in self.entries:
                f.write(json.dumps(e) + "\n")


class DeveloperParty:
    """P1: key generation, parameter transformation, deployment, re-keying."""

    role = "Developer"

    def __init__(self, params, session_seed=None):
        self.params = params
        self.pset = None
        self.epoch = 0
        self.session_id = _rand_session_id(session_seed)

    def initialize(self, seed, identity=False):
        """Generate Π, transform, and emit (deploy_to_p2, deploy_to_p3)."""
        self.pset = gen_permutation_set(self.params.config, seed, identity=identity)
        self.epoch += 1
        return self._deploy_messages()

    def rekey(self, seed, identity=False):
        """Fresh Π at epoch+1; old-epoch traffic must be rejected afterwards."""
        if self.pset is None:
            raise NotInitializedError("rekey before initialize")
        return self.initialize(seed, identity=identity)

    def _deploy_messages(self):
        transformed = para_trans(self.params, self.pset, epoch=self.epoch)
        to_p2 = wire.make_deploy_model(
            container.encode_model(transformed.params), self.epoch, self.session_id
        )
        to_p3 = wire.make_deploy_keys(
            container.encode_keys(self.pset, self.epoch, shared_only=True),
            self.epoch,
            self.session_id,
        )
        return to_p2, to_p3

    def rekey_notice(self):
        """Advisory epoch-bump frame announcing that the previous epoch retired."""
        return wire.make_rekey(self.epoch, self.epoch - 1, self.session_id)

    def handle(self, frame):
        """P1 never participates in inference traffic."""
        raise ProtocolError(f"developer cannot accept {frame.msg_type.name}")

    def state_bytes(self):
        out = container.encode_model(self.params)
        if self.pset is not None:
            out += container.encode_keys(self.pset, self.epoch)
        return out


class ServerParty:
    """P2: runs the transformed model verbatim; knows no permutation."""

    role = "Server"

    def __init__(self):
        self.model = None
        self.epoch = None
        self.active = False
        self._lock = threading.RLock()

    def handle_deploy(self, frame):
        if frame.msg_type is not wire.MsgType.DEPLOY_MODEL:
            raise ProtocolError(f"expected DEPLOY_MODEL, got {frame.msg_type.name}")
        with self._lock:
            if self.epoch is not None and self.active and frame.epoch <= self.epoch:
                raise StaleEpochError(
                    f"deploy epoch {frame.epoch} does not advance {self.epoch}"
                )
            self.model = container.decode_model(frame.payload)
            self.epoch = frame.epoch
            self.active = True
            return wire.make_ack(self.epoch, frame.session_id)

    def handle_rekey(self, frame):
        """Epoch-bump notice: retire the current model until a new one arrives."""
        retiring = wire.decode_rekey_payload(frame.payload)
        with self._lock:
            if self.epoch is not None and retiring == self.epoch:
                self.active = False
            return wire.make_ack(frame.epoch, frame.session_id)

    def serve(self, frame):
        """InferRequest -> InferResponse at the current epoch."""
        if frame.msg_type is not wire.MsgType.INFER_REQUEST:
            raise ProtocolError(f"expected INFER_REQUEST, got {frame.msg_type.name}")
        with self._lock:
            if self.model is None:
                raise NotInitializedError("no model deployed")
            if not self.active or frame.epoch != self.epoch:
                raise StaleEpochError(
                    f"request epoch {frame.epoch}, current epoch {self.epoch}"
                )
            model = self.model
            epoch = self.epoch
        cfg = model.config
        if cfg.mask_kind is MaskKind.CUSTOM:
            raise ProtocolError("custom masks cannot travel over this protocol")
        x = wire.decode_matrix(frame.payload)
        mask = make_mask(cfg.mask_kind, n=x.shape[0])
        o = model_forward(x, model, mask, MOE_TOP_K)
        return wire.make_infer_response(o, epoch, frame.session_id)

    def handle(self, frame):
        if frame.msg_type is wire.MsgType.DEPLOY_MODEL:
            return self.handle_deploy(frame)
        if frame.msg_type is wire.MsgType.REKEY:
            return self.handle_rekey(frame)
        if frame.msg_type is wire.MsgType.INFER_REQUEST:
            return self.serve(frame)
        raise ProtocolError(f"server cannot handle {frame.msg_type.name}")

    def serve_loop(self, transport, timeout=RECV_TIMEOUT):
        """Answer frames until the peer closes; protocol faults become Error frames."""
        while True:
            try:
                frame = transport.recv(timeout=timeout)
            except TransportError:
                return
            try:
                reply = self.handle(frame)
            except StaleEpochError as exc:
                reply = wire.make_error(
                    wire.ErrorCode.STALE_EPOCH, str(exc), frame.epoch, frame.session_id
                )
            except CodecError as exc:
                reply = wire.make_error(
                    wire.ErrorCode.MALFORMED, str(exc), frame.epoch, frame.session_id
                )
            except ProtocolError as exc:
                reply = wire.make_error(
                    wire.ErrorCode.UNSUPPORTED, str(exc), frame.epoch, frame.session_id
                )
            transport.send(reply)

    def state_bytes(self):
        if self.model is None:
            return b""
        return container.encode_model(self.model)


class DataOwnerParty:
    """P3: on-device embedding, column permutation, and output recovery."""

    role = "DataOwner"

    def __init__(self, embedding_table, session_seed=None):
        self.embedding = embedding_table
        self.pi = None
        self.pi_c = None
        self.epoch = None
        self.session_id = _rand_session_id(session_seed)

    def handle_deploy_keys(self, frame):
        if frame.msg_type is not wire.MsgType.DEPLOY_KEYS:
            raise ProtocolError(f"expected DEPLOY_KEYS, got {frame.msg_type.name}")
        pset, epoch = container.decode_keys(frame.payload)
        if pset.per_layer:
            raise ProtocolError(
                "data owner must only receive the shared half of the key set"
            )
        if epoch != frame.epoch:
            raise ProtocolError(
                f"keys payload epoch {epoch} != frame epoch {frame.epoch}"
            )
        self.pi = pset.pi
        self.pi_c = pset.pi_c
        self.epoch = epoch
        return wire.make_ack(self.epoch, frame.session_id)

    def infer_request(self, token_ids):
        """Embed on-device, permute columns by π, frame the request."""
        if self.pi is None:
            raise NotInitializedError("no shared keys deployed")
        x = embed(token_ids, self.embedding)
        return wire.make_infer_request(
            apply_col_perm(x, self.pi), self.epoch, self.session_id
        )

    def recover(self, frame):
        """o = o′ π_cᵀ."""
        if self.pi_c is None:
            raise NotInitializedError("no shared keys deployed")
        if frame.msg_type is wire.MsgType.ERROR:
            code, detail = wire.decode_error_payload(frame.payload)
            if code == wire.ErrorCode.STALE_EPOCH:
                raise StaleEpochError(detail)
            raise ProtocolError(f"server error {code}: {detail}")
        if frame.msg_type is not wire.MsgType.INFER_RESPONSE:
            raise ProtocolError(f"expected INFER_RESPONSE, got {frame.msg_type.name}")
        if frame.epoch != self.epoch:
            raise StaleEpochError(
                f"response epoch {frame.epoch}, session epoch {self.epoch}"
            )
        return recover_output(wire.decode_matrix(frame.payload), self.pi_c)

    def generate(
        self,
        prompt_ids,
        max_tokens,
        transport,
        transcript=None,
        timeout=RECV_TIMEOUT,
    ):
        """Autoregressive loop: one request/response round per generated token."""
        ids = [int(t) for t in prompt_ids]
        out = []
        for _ in range(max_tokens):
            req = self.infer_request(ids)
            try:
                transport.send(req)
                if transcript is not None:
                    transcript.log("P3->P2", req)
                resp = transport.recv(timeout=timeout)
            except TransportError as exc:
                raise AbortedGenerationError(str(exc), out) from exc
            if transcript is not None:
                transcript.log("P2->P3", resp)
            o = self.recover(resp)
            nxt = greedy_decode_step(o)
            ids.append(nxt)
            out.append(nxt)
        return out

    def state_bytes(self):
        out = self.embedding.table.astype("<f4").tobytes()
        if self.pi is not None:
            out += self.pi.indices.astype("<u4").tobytes()
            out += self.pi_c.indices.astype("<u4").tobytes()
        return out


def _expect_ack(frame):
    if frame.msg_type is wire.MsgType.ERROR:
        code, detail = wire.decode_error_payload(frame.payload)
        raise ProtocolError(f"deployment rejected ({code}): {detail}")
    if frame.msg_type is not wire.MsgType.ACK:
        raise ProtocolError(f"expected ACK, got {frame.msg_type.name}")


class _ServerHost:
    """Runs a ServerParty behind either transport and hands out client links."""

    def __init__(self, p2, transport_kind, latency, timeout, host="127.0.0.1"):
        self.p2 = p2
        self.kind = transport_kind
        self.latency = latency
        self.timeout = timeout
        self._threads = []
        self._persistent = {}
        if self.kind == "inproc":
            self._stop = None
        else:
            self.srv = listen(host, 0)
            self.host, self.port = self.srv.getsockname()[:2]
            self._stop = threading.Event()
            t = threading.Thread(target=self._acceptor, daemon=True)
            t.start()
            self._threads.append(t)

    def _acceptor(self):
        while not self._stop.is_set():
            try:
                conn = accept(self.srv, self.latency, timeout=0.2)
            except TransportError:
                continue
            t = threading.Thread(
                target=self._serve_conn, args=(conn,), daemon=True
            )
            t.start()
            self._threads.append(t)
        self.srv.close()

    def _serve_conn(self, conn):
        self.p2.serve_loop(conn, timeout=self.timeout)
        conn.close()

    def client_link(self, name):
        """A connected client endpoint; in-process links persist per name."""
        if self.kind == "inproc":
            if name not in self._persistent:
                near, far = inproc_pair(self.latency)
                t = threading.Thread(target=self._serve_conn, args=(far,), daemon=True)
                t.start()
                self._threads.append(t)
                self._persistent[name] = near
            return self._persistent[name]
        return connect(self.host, self.port, self.latency)

    def release(self, link):
        if self.kind != "inproc":
            link.close()

    def shutdown(self):
        for link in self._persistent.values():
            link.close()
        if self._stop is not None:
            self._stop.set()
        for t in self._threads:
            t.join(timeout=self.timeout)


def run_simulation(
    params,
    prompts,
    max_tokens,
    transport_kind="inproc",
    latency=0.0,
    seed=0,
    rekey_between=False,
    host="127.0.0.1",
    timeout=RECV_TIMEOUT,
):
    """Full protocol run: deploy, then greedy generation for each prompt.

    The server answers only through the chosen transport on its own threads.
    Returns (list of token streams, Transcript).
    """
    if transport_kind not in ("inproc", "socket"):
        raise ProtocolError(f"unknown transport kind {transport_kind!r}")
    p1 = DeveloperParty(params, session_seed=seed)
    p2 = ServerParty()
    p3 = DataOwnerParty(params.embedding, session_seed=seed + 1)
    transcript = Transcript()
    hub = _ServerHost(p2, transport_kind, latency, timeout, host)

    def _deploy(to_p2, to_p3):
        link = hub.client_link("p1")
        try:
            link.send(to_p2)
            transcript.log("P1->P2", to_p2)
            _expect_ack(link.recv(timeout=timeout))
        finally:
            hub.release(link)
        transcript.log("P1->P3", to_p3)
        _expect_ack(p3.handle_deploy_keys(to_p3))

    streams = []
    try:
        _deploy(*p1.initialize(seed))
        p3_link = hub.client_link("p3")
        try:
            for i, prompt in enumerate(prompts):
                if rekey_between and i == max(1, len(prompts) // 2) and i > 0:
                    _deploy(*p1.rekey(seed + 1000 + i))
                streams.append(
                    p3.generate(
                        prompt, max_tokens, p3_link, transcript, timeout=timeout
                    )
                )
        finally:
            hub.release(p3_link)
    finally:
        hub.shutdown()
    return streams, transcript
