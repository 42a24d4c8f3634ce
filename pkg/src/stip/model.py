"""Desk-scale single-head Transformer inference engine.

Covers post/pre-norm placement, LayerNorm/RMSNorm, ReLU/GeLU/SwiGLU feedforward,
top-k mixture-of-experts routing, and none/causal/custom attention masks. All
forward passes are pure functions over immutable weights.
"""

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import (
    InvalidConfigError,
    InvalidDimensionError,
    MissingWeightError,
    UnknownTokenError,
)
from .numerics import (
    DTYPE,
    NEG_INF,
    as_matrix,
    gelu,
    layernorm,
    matmul,
    relu,
    rmsnorm,
    sigmoid,
    softmax_rows,
)

MOE_TOP_K = 2  # reference routing width


class NormKind(str, Enum):
    LAYERNORM = "layernorm"
    RMSNORM = "rmsnorm"


class NormPlacement(str, Enum):
    POST = "post"
    PRE = "pre"


class FfnKind(str, Enum):
    RELU = "relu"
    GELU = "gelu"
    SWIGLU = "swiglu"


class MaskKind(str, Enum):
    NONE = "none"
    CAUSAL = "causal"
    CUSTOM = "custom"


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    d_ff: int
    vocab_size: int
    attn_scale: float
    norm_kind: NormKind = NormKind.LAYERNORM
    norm_placement: NormPlacement = NormPlacement.POST
    ffn_kind: FfnKind = FfnKind.RELU
    n_experts: int = 0
    mask_kind: MaskKind = MaskKind.CAUSAL

    def __post_init__(self):
        if self.n_layers < 1:
            raise InvalidConfigError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.d_model < 2:
            raise InvalidConfigError(f"d_model must be >= 2, got {self.d_model}")
        if self.d_ff < 1:
            raise InvalidConfigError(f"d_ff must be >= 1, got {self.d_ff}")
        if self.vocab_size < 2:
            raise InvalidConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.attn_scale <= 0:
            raise InvalidConfigError(f"attn_scale must be > 0, got {self.attn_scale}")
        if self.n_experts != 0 and self.n_experts < 2:
            raise InvalidConfigError(
                f"n_experts must be 0 (dense) or >= 2, got {self.n_experts}"
            )

    @property
    def is_moe(self):
        return self.n_experts >= 2


@dataclass
class FfnWeights:
    """One feedforward block: W_1 (d x m), W_2 (m x d), optional gate-path W_3."""

    w1: np.ndarray
    w2: np.ndarray
    w3: np.ndarray | None = None


@dataclass
class LayerWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    ffn: FfnWeights | None
    gamma_1: np.ndarray
    gamma_2: np.ndarray
    beta_1: np.ndarray | None = None
    beta_2: np.ndarray | None = None
    w_g: np.ndarray | None = None
    experts: tuple = ()


@dataclass
class EmbeddingTable:
    table: np.ndarray

    @property
    def vocab_size(self):
        return int(self.table.shape[0])

    @property
    def d_model(self):
        return int(self.table.shape[1])


@dataclass
class ModelParams:
    config: ModelConfig
    embedding: EmbeddingTable
    layers: list
    w_c: np.ndarray


@dataclass
class Mask:
    kind: MaskKind
    values: np.ndarray | None = None  # n x n of {0, -inf}, custom only

    def __post_init__(self):
        if self.kind is MaskKind.CUSTOM:
            if self.values is None:
                raise InvalidConfigError("custom mask requires explicit values")
            v = as_matrix(self.values)
            if v.shape[0] != v.shape[1]:
                raise InvalidDimensionError(f"mask must be square, got {v.shape}")
            legal = (v == 0) | np.isneginf(v)
            if not np.all(legal):
                raise InvalidConfigError("custom mask entries must be 0 or -inf")
            self.values = v
        elif self.values is not None:
            raise InvalidConfigError(f"{self.kind.value} mask carries no values")


def causal_mask_values(n):
    """n x n matrix with 0 on/below the diagonal and -inf strictly above."""
    m = np.zeros((n, n), dtype=DTYPE)
    m[np.triu_indices(n, k=1)] = NEG_INF
    return m


def make_mask(kind, n=None, values=None, seed=None, block_prob=0.3):
    """Build a Mask; custom kind takes explicit values or a seed to draw random ones."""
    kind = MaskKind(kind)
    if kind is MaskKind.CUSTOM and values is None:
        if seed is None or n is None:
            raise InvalidConfigError("random custom mask needs n and seed")
        values = random_custom_mask(n, seed, block_prob).values
    return Mask(kind, values if kind is MaskKind.CUSTOM else None)


def random_custom_mask(n, seed, block_prob=0.3):
    """Random sparse mask; the diagonal stays open so no row is fully blocked."""
    rng = np.random.default_rng(seed)
    blocked = rng.random((n, n)) < block_prob
    np.fill_diagonal(blocked, False)
    values = np.where(blocked, NEG_INF, 0.0).astype(DTYPE)
    return Mask(MaskKind.CUSTOM, values)


def mask_values_for(mask, n):
    """The additive n x n mask matrix, or None when kind is none."""
    if mask.kind is MaskKind.NONE:
        return None
    if mask.kind is MaskKind.CAUSAL:
        return causal_mask_values(n)
    if mask.values.shape[0] != n:
        raise InvalidDimensionError(
            f"custom mask is {mask.values.shape[0]}x{mask.values.shape[0]}, need {n}"
        )
    return mask.values


def embed(token_ids, table):
    """Row j of the output is the embedding of token_ids[j]."""
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 1:
        raise InvalidDimensionError("token ids must be a flat sequence")
    if ids.size and (ids.min() < 0 or ids.max() >= table.vocab_size):
        raise UnknownTokenError(
            f"token id out of range 0..{table.vocab_size - 1}"
        )
    return table.table[ids, :]


def attention(x, w, mask, scale):
    """SoftMax(QKᵀ/√k + M)·V·W_o with Q=xW_q, K=xW_k, V=xW_v."""
    x = as_matrix(x)
    n = x.shape[0]
    q = matmul(x, w.w_q)
    k = matmul(x, w.w_k)
    v = matmul(x, w.w_v)
    scores = matmul(q, k.T) / np.float32(math.sqrt(scale))
    mv = mask_values_for(mask, n)
    if mv is not None:
        scores = scores + mv
    return matmul(matmul(softmax_rows(scores), v), w.w_o)


def ffn_forward(v, fw, kind):
    """Feedforward block: act(vW_1)W_2, or the SwiGLU gate (vW_1 ∘ σ(vW_1) ∘ vW_3)W_2."""
    kind = FfnKind(kind)
    if kind is FfnKind.SWIGLU:
        if fw.w3 is None:
            raise MissingWeightError("swiglu requires W_3")
        a = matmul(v, fw.w1)
        return matmul(a * sigmoid(a) * matmul(v, fw.w3), fw.w2)
    act = relu if kind is FfnKind.RELU else gelu
    return matmul(act(matmul(v, fw.w1)), fw.w2)


def router_selection(v, w_g, top_k):
    """Top-k expert routing: (indices n x k, renormalized weights n x k, probs n x e).

    Selection is by logit with ties broken toward the lower expert index; the
    softmax weights of the selected experts are renormalized to sum to 1.
    Logits accumulate in float64 so the ranking is stable under summation-order
    changes (column-permuted inputs sum the same terms in a different order).
    """
    logits = np.matmul(as_matrix(v).astype(np.float64), w_g.astype(np.float64))
    e = logits.shape[1]
    if not 1 <= top_k <= e:
        raise InvalidConfigError(f"top_k {top_k} out of range 1..{e}")
    probs = softmax_rows(logits.astype(DTYPE))
    order = np.argsort(-logits, axis=1, kind="stable")
    sel = order[:, :top_k]
    sel_w = np.take_along_axis(probs, sel, axis=1)
    sel_w = sel_w / np.sum(sel_w, axis=1, keepdims=True, dtype=np.float64)
    return sel, sel_w.astype(DTYPE), probs


def moe_ffn(v, w, kind, top_k=MOE_TOP_K):
    """Mixture-of-experts feedforward: weighted sum of top-k expert outputs."""
    if len(w.experts) < 2:
        raise InvalidConfigError("moe_ffn needs at least 2 experts")
    if w.w_g is None:
        raise MissingWeightError("moe_ffn requires router weights W_g")
    v = as_matrix(v)
    sel, sel_w, _ = router_selection(v, w.w_g, top_k)
    outs = np.stack([ffn_forward(v, fw, kind) for fw in w.experts])
    n = v.shape[0]
    rows = np.arange(n)
    acc = np.zeros((n, outs.shape[2]), dtype=np.float64)
    for r in range(sel.shape[1]):
        acc += sel_w[:, r, None].astype(np.float64) * outs[sel[:, r], rows, :]
    return acc.astype(DTYPE)


def _norm(x, gamma, beta, cfg):
    if cfg.norm_kind is NormKind.RMSNORM:
        return rmsnorm(x, gamma)
    return layernorm(x, gamma, beta)


def _ffn_dispatch(v, w, cfg, top_k):
    if cfg.is_moe:
        return moe_ffn(v, w, cfg.ffn_kind, top_k)
    if w.ffn is None:
        raise MissingWeightError("dense layer is missing its feedforward weights")
    return ffn_forward(v, w.ffn, cfg.ffn_kind)


def layer_forward(x, w, cfg, mask, top_k=MOE_TOP_K, trace=None):
    """One Transformer layer in the configured placement.

    post: v = norm(attn(x) + x), y = norm(ffn(v) + v)
    pre:  v = attn(norm(x)) + x, y = ffn(norm(v)) + v
    """
    x = as_matrix(x)
    if x.shape[1] != cfg.d_model:
        raise InvalidDimensionError(f"input cols {x.shape[1]} != d_model {cfg.d_model}")
    post = cfg.norm_placement is NormPlacement.POST
    attn_in = x if post else _norm(x, w.gamma_1, w.beta_1, cfg)
    u = attention(attn_in, w, mask, cfg.attn_scale)
    if post:
        v = _norm(u + x, w.gamma_1, w.beta_1, cfg)
        ffn_in = v
    else:
        v = u + x
        ffn_in = _norm(v, w.gamma_2, w.beta_2, cfg)
    z = _ffn_dispatch(ffn_in, w, cfg, top_k)
    y = _norm(z + v, w.gamma_2, w.beta_2, cfg) if post else z + v
    if trace is not None:
        trace.update(
            {
                "Q": matmul(attn_in, w.w_q),
                "K": matmul(attn_in, w.w_k),
                "V": matmul(attn_in, w.w_v),
                "u": u,
                "v": v,
                "z": z,
                "y": y,
            }
        )
    return y


def model_forward(x, params, mask, top_k=MOE_TOP_K, trace=None):
    """All layers then the softmax classifier; rows of the output sum to 1."""
    cfg = params.config
    y = as_matrix(x)
    for i, w in enumerate(params.layers):
        layer_trace = {} if trace is not None else None
        y = layer_forward(y, w, cfg, mask, top_k, layer_trace)
        if trace is not None:
            trace.append(layer_trace)
    return softmax_rows(matmul(y, params.w_c))


def greedy_decode_step(o):
    """Argmax of the last output row; ties resolve to the lowest index."""
    o = as_matrix(o)
    if o.size == 0:
        raise InvalidDimensionError("empty classifier output")
    return int(np.argmax(o[-1]))


def greedy_generate(params, prompt_ids, max_tokens, top_k=MOE_TOP_K):
    """Local greedy decoding loop, re-embedding the full sequence each round."""
    cfg = params.config
    if cfg.mask_kind is MaskKind.CUSTOM:
        raise InvalidConfigError(
            "generation needs a none/causal mask; custom masks have fixed size"
        )
    ids = [int(t) for t in prompt_ids]
    out = []
    for _ in range(max_tokens):
        x = embed(ids, params.embedding)
        mask = make_mask(cfg.mask_kind, n=len(ids))
        o = model_forward(x, params, mask, top_k)
        nxt = greedy_decode_step(o)
        ids.append(nxt)
        out.append(nxt)
    return out


def _gauss(rng, shape, scale):
    return rng.normal(0.0, scale, size=shape).astype(DTYPE)


def gen_ffn_weights(rng, cfg):
    scale = 1.0 / math.sqrt(cfg.d_model)
    w3 = None
    if cfg.ffn_kind is FfnKind.SWIGLU:
        w3 = _gauss(rng, (cfg.d_model, cfg.d_ff), scale)
    return FfnWeights(
        w1=_gauss(rng, (cfg.d_model, cfg.d_ff), scale),
        w2=_gauss(rng, (cfg.d_ff, cfg.d_model), scale),
        w3=w3,
    )


def gen_model(cfg, seed):
    """Random desk model: Gaussian weights at scale 1/√d, near-identity norms."""
    rng = np.random.default_rng(seed)
    d = cfg.d_model
    scale = 1.0 / math.sqrt(d)
    layers = []
    for _ in range(cfg.n_layers):
        use_beta = cfg.norm_kind is NormKind.LAYERNORM
        ffn = None
        experts = ()
        w_g = None
        if cfg.is_moe:
            experts = tuple(gen_ffn_weights(rng, cfg) for _ in range(cfg.n_experts))
            w_g = _gauss(rng, (d, cfg.n_experts), scale)
        else:
            ffn = gen_ffn_weights(rng, cfg)
        layers.append(
            LayerWeights(
                w_q=_gauss(rng, (d, d), scale),
                w_k=_gauss(rng, (d, d), scale),
                w_v=_gauss(rng, (d, d), scale),
                w_o=_gauss(rng, (d, d), scale),
                ffn=ffn,
                gamma_1=(1.0 + 0.1 * rng.normal(size=d)).astype(DTYPE),
                gamma_2=(1.0 + 0.1 * rng.normal(size=d)).astype(DTYPE),
                beta_1=(0.1 * rng.normal(size=d)).astype(DTYPE) if use_beta else None,
                beta_2=(0.1 * rng.normal(size=d)).astype(DTYPE) if use_beta else None,
                w_g=w_g,
                experts=experts,
            )
        )
    return ModelParams(
        config=cfg,
        embedding=EmbeddingTable(_gauss(rng, (cfg.vocab_size, d), scale)),
        layers=layers,
        w_c=_gauss(rng, (d, cfg.vocab_size), scale),
    )
