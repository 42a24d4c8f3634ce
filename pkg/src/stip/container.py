"""Serialization: binary model container, JSON mirror, and permutation-key files.

Model container (little-endian): magic "STIP", version u16, config block
(n_layers u32, d_model u32, d_ff u32, vocab_size u32, attn_scale f32,
norm_kind u8, norm_placement u8, ffn_kind u8, mask_kind u8, n_experts u32),
then tensors until EOF as (name_len u16, name, rank u8, dims u32 each,
payload f32 row-major).

Keys file: magic "STPK", version u16, epoch u64, count u32, then per
permutation (role u8, layer u16, dim u32, indices u32 each). Role tags:
0=pi, 1=pi_c, 2=pi1, 3=pi2, 4=pi3 (one per expert in order for mixture
layers), 5=pi_v, 6=pi_t.

-inf mask sentinels are stored as the most-negative finite float32 and
restored on read.
"""

import json
import struct

import numpy as np

from .errors import CodecError, InvalidDimensionError
from .model import (
    EmbeddingTable,
    FfnKind,
    FfnWeights,
    LayerWeights,
    MaskKind,
    ModelConfig,
    ModelParams,
    NormKind,
    NormPlacement,
)
from .numerics import DTYPE, NEG_INF, Permutation
from .transform import LayerPerms, PermutationSet

MODEL_MAGIC = b"STIP"
KEYS_MAGIC = b"STPK"
FORMAT_VERSION = 1

_HEAD = struct.Struct("<4sH")
_CONFIG = struct.Struct("<IIIIfBBBBI")
_NAME_LEN = struct.Struct("<H")
_RANK = struct.Struct("<B")
_KEYS_HEAD = struct.Struct("<4sHQI")
_KEY_ENTRY = struct.Struct("<BHI")

_F32_MIN = float(np.finfo(np.float32).min)

_NORM_CODES = {NormKind.LAYERNORM: 0, NormKind.RMSNORM: 1}
_PLACEMENT_CODES = {NormPlacement.POST: 0, NormPlacement.PRE: 1}
_FFN_CODES = {FfnKind.RELU: 0, FfnKind.GELU: 1, FfnKind.SWIGLU: 2}
_MASK_CODES = {MaskKind.NONE: 0, MaskKind.CAUSAL: 1, MaskKind.CUSTOM: 2}

ROLE_PI = 0
ROLE_PI_C = 1
ROLE_PI1 = 2
ROLE_PI2 = 3
ROLE_PI3 = 4
ROLE_PI_V = 5
ROLE_PI_T = 6


def _decode_enum(codes, raw, what):
    for enum_val, code in codes.items():
        if code == raw:
            return enum_val
    raise CodecError(f"unknown {what} code {raw}")


def _sanitize(arr):
    """Replace -inf with the finite float32 sentinel for storage."""
    a = np.ascontiguousarray(arr, dtype=DTYPE)
    if np.any(np.isneginf(a)):
        a = np.where(np.isneginf(a), np.float32(_F32_MIN), a)
    return a


def _restore(arr):
    """Undo _sanitize: the float32 minimum reads back as -inf."""
    return np.where(arr == np.float32(_F32_MIN), np.float32(NEG_INF), arr)


def _tensor_map(params):
    """Deterministic name -> array mapping for a model."""
    out = {"embedding": params.embedding.table}
    for i, w in enumerate(params.layers):
        p = f"layers.{i}"
        out[f"{p}.W_q"] = w.w_q
        out[f"{p}.W_k"] = w.w_k
        out[f"{p}.W_v"] = w.w_v
        out[f"{p}.W_o"] = w.w_o
        out[f"{p}.gamma_1"] = w.gamma_1
        out[f"{p}.gamma_2"] = w.gamma_2
        if w.beta_1 is not None:
            out[f"{p}.beta_1"] = w.beta_1
        if w.beta_2 is not None:
            out[f"{p}.beta_2"] = w.beta_2
        if w.w_g is not None:
            out[f"{p}.W_g"] = w.w_g
        if w.ffn is not None:
            out[f"{p}.W_1"] = w.ffn.w1
            out[f"{p}.W_2"] = w.ffn.w2
            if w.ffn.w3 is not None:
                out[f"{p}.W_3"] = w.ffn.w3
        for j, fw in enumerate(w.experts):
            ep = f"{p}.experts.{j}"
            out[f"{ep}.W_1"] = fw.w1
            out[f"{ep}.W_2"] = fw.w2
            if fw.w3 is not None:
                out[f"{ep}.W_3"] = fw.w3
    out["W_c"] = params.w_c
    return out


def _take(tensors, name):
    if name not in tensors:
        raise CodecError(f"model file is missing tensor {name!r}")
    return tensors.pop(name)


def _assemble_model(cfg, tensors):
    tensors = dict(tensors)
    use_beta = cfg.norm_kind is NormKind.LAYERNORM
    has_w3 = cfg.ffn_kind is FfnKind.SWIGLU
    embedding = _take(tensors, "embedding")
    layers = []
    for i in range(cfg.n_layers):
        p = f"layers.{i}"

        def ffn_at(prefix):
            return FfnWeights(
                w1=_take(tensors, f"{prefix}.W_1"),
                w2=_take(tensors, f"{prefix}.W_2"),
                w3=_take(tensors, f"{prefix}.W_3") if has_w3 else None,
            )

        ffn = None
        experts = ()
        w_g = None
        if cfg.is_moe:
            w_g = _take(tensors, f"{p}.W_g")
            experts = tuple(ffn_at(f"{p}.experts.{j}") for j in range(cfg.n_experts))
        else:
            ffn = ffn_at(p)
        layers.append(
            LayerWeights(
                w_q=_take(tensors, f"{p}.W_q"),
                w_k=_take(tensors, f"{p}.W_k"),
                w_v=_take(tensors, f"{p}.W_v"),
                w_o=_take(tensors, f"{p}.W_o"),
                ffn=ffn,
                gamma_1=_take(tensors, f"{p}.gamma_1"),
                gamma_2=_take(tensors, f"{p}.gamma_2"),
                beta_1=_take(tensors, f"{p}.beta_1") if use_beta else None,
                beta_2=_take(tensors, f"{p}.beta_2") if use_beta else None,
                w_g=w_g,
                experts=experts,
            )
        )
    w_c = _take(tensors, "W_c")
    if tensors:
        raise CodecError(f"unexpected tensors in model file: {sorted(tensors)}")
    params = ModelParams(cfg, EmbeddingTable(embedding), layers, w_c)
    _check_shapes(params)
    return params


def _check_shapes(params):
    cfg = params.config
    d, m, s = cfg.d_model, cfg.d_ff, cfg.vocab_size
    checks = [(params.embedding.table, (s, d), "embedding"), (params.w_c, (d, s), "W_c")]
    for i, w in enumerate(params.layers):
        for nm, t, shape in (
            ("W_q", w.w_q, (d, d)),
            ("W_k", w.w_k, (d, d)),
            ("W_v", w.w_v, (d, d)),
            ("W_o", w.w_o, (d, d)),
            ("gamma_1", w.gamma_1, (d,)),
            ("gamma_2", w.gamma_2, (d,)),
        ):
            checks.append((t, shape, f"layers.{i}.{nm}"))
        if w.w_g is not None:
            checks.append((w.w_g, (d, cfg.n_experts), f"layers.{i}.W_g"))
        for fw in (w.ffn, *w.experts):
            if fw is None:
                continue
            checks.append((fw.w1, (d, m), f"layers.{i} W_1"))
            checks.append((fw.w2, (m, d), f"layers.{i} W_2"))
            if fw.w3 is not None:
                checks.append((fw.w3, (d, m), f"layers.{i} W_3"))
    for tensor, shape, name in checks:
        if tuple(tensor.shape) != shape:
            raise CodecError(f"{name} has shape {tuple(tensor.shape)}, expected {shape}")


def config_to_bytes(cfg):
    return _CONFIG.pack(
        cfg.n_layers,
        cfg.d_model,
        cfg.d_ff,
        cfg.vocab_size,
        np.float32(cfg.attn_scale),
        _NORM_CODES[cfg.norm_kind],
        _PLACEMENT_CODES[cfg.norm_placement],
        _FFN_CODES[cfg.ffn_kind],
        _MASK_CODES[cfg.mask_kind],
        cfg.n_experts,
    )


def config_from_bytes(raw):
    L, d, m, s, k, norm, placement, ffn, mask, e = _CONFIG.unpack(raw)
    return ModelConfig(
        n_layers=L,
        d_model=d,
        d_ff=m,
        vocab_size=s,
        attn_scale=float(k),
        norm_kind=_decode_enum(_NORM_CODES, norm, "norm_kind"),
        norm_placement=_decode_enum(_PLACEMENT_CODES, placement, "norm_placement"),
        ffn_kind=_decode_enum(_FFN_CODES, ffn, "ffn_kind"),
        n_experts=e,
        mask_kind=_decode_enum(_MASK_CODES, mask, "mask_kind"),
    )


def encode_model(params):
    """Model -> container bytes."""
    parts = [_HEAD.pack(MODEL_MAGIC, FORMAT_VERSION), config_to_bytes(params.config)]
    for name, tensor in _tensor_map(params).items():
        data = _sanitize(tensor)
        nm = name.encode("utf-8")
        parts.append(_NAME_LEN.pack(len(nm)))
        parts.append(nm)
        parts.append(_RANK.pack(data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(data.tobytes(order="C"))
    return b"".join(parts)


class _Reader:
    def __init__(self, raw):
        self.raw = raw
        self.off = 0

    def take(self, n, what):
        if self.off + n > len(self.raw):
            raise CodecError(f"truncated file while reading {what}")
        out = self.raw[self.off : self.off + n]
        self.off += n
        return out

    def done(self):
        return self.off == len(self.raw)


def decode_model(raw):
    """Container bytes -> model; bad magic/version/truncation raise CodecError."""
    r = _Reader(raw)
    magic, version = _HEAD.unpack(r.take(_HEAD.size, "header"))
    if magic != MODEL_MAGIC:
        raise CodecError(f"bad model magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CodecError(f"unsupported model format version {version}")
    cfg = config_from_bytes(r.take(_CONFIG.size, "config"))
    tensors = {}
    while not r.done():
        (name_len,) = _NAME_LEN.unpack(r.take(_NAME_LEN.size, "tensor name length"))
        name = r.take(name_len, "tensor name").decode("utf-8")
        (rank,) = _RANK.unpack(r.take(_RANK.size, "tensor rank"))
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, "tensor dims"))
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = r.take(4 * count, f"tensor {name!r} payload")
        arr = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(DTYPE)
        if name in tensors:
            raise CodecError(f"duplicate tensor {name!r}")
        tensors[name] = _restore(arr)
    return _assemble_model(cfg, tensors)


def save_model(params, path):
    with open(path, "wb") as f:
        f.write(encode_model(params))


def load_model(path):
    with open(path, "rb") as f:
        return decode_model(f.read())


def model_to_json(params):
    """JSON mirror with the same config field names and tensor names."""
    cfg = params.config
    tensors = {}
    for name, tensor in _tensor_map(params).items():
        data = _sanitize(tensor)
        tensors[name] = {
            "dims": list(data.shape),
            "data": [float(v) for v in data.reshape(-1)],
        }
    return {
        "format": MODEL_MAGIC.decode(),
        "version": FORMAT_VERSION,
        "config": {
            "n_layers": cfg.n_layers,
            "d_model": cfg.d_model,
            "d_ff": cfg.d_ff,
            "vocab_size": cfg.vocab_size,
            "attn_scale": cfg.attn_scale,
            "norm_kind": cfg.norm_kind.value,
            "norm_placement": cfg.norm_placement.value,
            "ffn_kind": cfg.ffn_kind.value,
            "mask_kind": cfg.mask_kind.value,
            "n_experts": cfg.n_experts,
        },
        "tensors": tensors,
    }


def model_from_json(doc):
    try:
        if doc["format"] != MODEL_MAGIC.decode():
            raise CodecError(f"bad format tag {doc['format']!r}")
        if doc["version"] != FORMAT_VERSION:
            raise CodecError(f"unsupported version {doc['version']}")
        c = doc["config"]
        cfg = ModelConfig(
            n_layers=c["n_layers"],
            d_model=c["d_model"],
            d_ff=c["d_ff"],
            vocab_size=c["vocab_size"],
            attn_scale=c["attn_scale"],
            norm_kind=NormKind(c["norm_kind"]),
            norm_placement=NormPlacement(c["norm_placement"]),
            ffn_kind=FfnKind(c["ffn_kind"]),
            n_experts=c["n_experts"],
            mask_kind=MaskKind(c["mask_kind"]),
        )
        tensors = {
            name: _restore(
                np.asarray(t["data"], dtype=DTYPE).reshape(t["dims"])
            )
            for name, t in doc["tensors"].items()
        }
    except (KeyError, TypeError, ValueError) as exc:
        raise CodecError(f"malformed JSON model: {exc}") from exc
    return _assemble_model(cfg, tensors)


def save_model_json(params, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(model_to_json(params), f)


def load_model_json(path):
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise CodecError(f"{path}: not valid JSON: {exc}") from exc
    return model_from_json(doc)


def _key_entries(pset, shared_only):
    entries = [(ROLE_PI, 0, pset.pi), (ROLE_PI_C, 0, pset.pi_c)]
    if not shared_only:
        for i, lp in enumerate(pset.per_layer):
            entries.append((ROLE_PI1, i, lp.pi1))
            entries.append((ROLE_PI2, i, lp.pi2))
            entries.extend((ROLE_PI3, i, p3) for p3 in lp.pi3s)
        if pset.pi_v is not None:
            entries.append((ROLE_PI_V, 0, pset.pi_v))
        if pset.pi_t is not None:
            entries.append((ROLE_PI_T, 0, pset.pi_t))
    return entries


def encode_keys(pset, epoch, shared_only=False):
    """Permutation set (or just its shared half) -> keys-file bytes."""
    entries = _key_entries(pset, shared_only)
    parts = [_KEYS_HEAD.pack(KEYS_MAGIC, FORMAT_VERSION, epoch, len(entries))]
    for role, layer, perm in entries:
        parts.append(_KEY_ENTRY.pack(role, layer, perm.dim))
        parts.append(perm.indices.astype("<u4").tobytes())
    return b"".join(parts)


def decode_keys(raw):
    """Keys-file bytes -> (PermutationSet, epoch); per_layer is empty for shared files."""
    r = _Reader(raw)
    magic, version, epoch, count = _KEYS_HEAD.unpack(r.take(_KEYS_HEAD.size, "keys header"))
    if magic != KEYS_MAGIC:
        raise CodecError(f"bad keys magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CodecError(f"unsupported keys version {version}")
    pi = pi_c = pi_v = pi_t = None
    triples = {}
    for _ in range(count):
        role, layer, dim = _KEY_ENTRY.unpack(r.take(_KEY_ENTRY.size, "key entry"))
        try:
            perm = Permutation(
                np.frombuffer(r.take(4 * dim, "key indices"), dtype="<u4").astype(np.int64)
            )
        except InvalidDimensionError as exc:
            raise CodecError(f"corrupt permutation entry: {exc}") from exc
        if role == ROLE_PI:
            pi = perm
        elif role == ROLE_PI_C:
            pi_c = perm
        elif role == ROLE_PI_V:
            pi_v = perm
        elif role == ROLE_PI_T:
            pi_t = perm
        elif role in (ROLE_PI1, ROLE_PI2, ROLE_PI3):
            slot = triples.setdefault(layer, {"pi1": None, "pi2": None, "pi3s": []})
            if role == ROLE_PI1:
                slot["pi1"] = perm
            elif role == ROLE_PI2:
                slot["pi2"] = perm
            else:
                slot["pi3s"].append(perm)
        else:
            raise CodecError(f"unknown key role {role}")
    if not r.done():
        raise CodecError("trailing bytes after last key entry")
    if pi is None or pi_c is None:
        raise CodecError("keys file lacks the shared permutations")
    per_layer = []
    for i in sorted(triples):
        slot = triples[i]
        if slot["pi1"] is None or slot["pi2"] is None or not slot["pi3s"]:
            raise CodecError(f"incomplete permutation triple for layer {i}")
        per_layer.append(
            LayerPerms(pi1=slot["pi1"], pi2=slot["pi2"], pi3s=tuple(slot["pi3s"]))
        )
    if per_layer and sorted(triples) != list(range(len(per_layer))):
        raise CodecError("non-contiguous layer indices in keys file")
    pset = PermutationSet(
        pi=pi, pi_c=pi_c, per_layer=tuple(per_layer), pi_v=pi_v, pi_t=pi_t
    )
    return pset, epoch


def save_keys(pset, epoch, path, shared_only=False):
    with open(path, "wb") as f:
        f.write(encode_keys(pset, epoch, shared_only))


def load_keys(path):
    with open(path, "rb") as f:
        return decode_keys(f.read())
