"""Permutation-set generation, parameter transformation, and equivalence checks.

The key material is a semi-symmetric set: {π (features), π_c (classes)} is the
half shared with the data owner; the per-layer triples {π_{i,1}, π_{i,2}, π_{i,3}}
stay private to the model developer. Transformed parameters compute the same
function as the originals on column-permuted inputs, up to a column permutation
of the outputs.
"""

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import InvalidDimensionError
from .model import (
    FfnWeights,
    LayerWeights,
    MaskKind,
    ModelParams,
    MOE_TOP_K,
    make_mask,
    model_forward,
    random_custom_mask,
)
from .numerics import (
    Permutation,
    apply_col_perm,
    apply_row_perm,
    apply_vec_perm,
    gen_permutation,
    identity_perm,
    inverse_perm,
)

_EPOCH_COUNTER = itertools.count(1)


@dataclass
class LayerPerms:
    """Private permutations of one layer: π_{i,1}, π_{i,2} (dim d), π_{i,3}s (dim m).

    Dense layers hold a single π_{i,3}; mixture layers hold one per expert.
    """

    pi1: Permutation
    pi2: Permutation
    pi3s: tuple

    @property
    def pi3(self):
        return self.pi3s[0]


@dataclass
class PermutationSet:
    pi: Permutation
    pi_c: Permutation
    per_layer: tuple
    pi_v: Permutation | None = None
    pi_t: Permutation | None = None

    def shared_part(self):
        """The half deployed to the data owner."""
        return {"pi": self.pi, "pi_c": self.pi_c}

    def private_part(self):
        """The per-layer half that never leaves the developer."""
        return tuple(self.per_layer)

    def count(self):
        n = 2 + sum(2 + len(lp.pi3s) for lp in self.per_layer)
        n += (self.pi_v is not None) + (self.pi_t is not None)
        return n

    def all_perms(self):
        out = [self.pi, self.pi_c]
        for lp in self.per_layer:
            out.extend([lp.pi1, lp.pi2, *lp.pi3s])
        if self.pi_v is not None:
            out.append(self.pi_v)
        if self.pi_t is not None:
            out.append(self.pi_t)
        return out


@dataclass
class TransformedModel:
    """Transformed parameters θ′; structurally identical to ModelParams."""

    params: ModelParams
    epoch: int


def gen_permutation_set(cfg, seed, identity=False):
    """Independent uniform permutations for every slot; deterministic per seed."""
    if identity:
        mk = lambda dim: identity_perm(dim)
    else:
        rng = np.random.default_rng(seed)
        mk = lambda dim: Permutation(rng.permutation(dim))
    pi = mk(cfg.d_model)
    pi_c = mk(cfg.vocab_size)
    n_inner = cfg.n_experts if cfg.is_moe else 1
    per_layer = tuple(
        LayerPerms(
            pi1=mk(cfg.d_model),
            pi2=mk(cfg.d_model),
            pi3s=tuple(mk(cfg.d_ff) for _ in range(n_inner)),
        )
        for _ in range(cfg.n_layers)
    )
    return PermutationSet(pi=pi, pi_c=pi_c, per_layer=per_layer)


def _two_sided(w, left, right):
    """leftᵀ · w · right via index movement."""
    return apply_col_perm(apply_row_perm(w, left), right)


def _transform_ffn(fw, pi, pi3):
    w3 = None if fw.w3 is None else _two_sided(fw.w3, pi, pi3)
    return FfnWeights(
        w1=_two_sided(fw.w1, pi, pi3),
        w2=_two_sided(fw.w2, pi3, pi),
        w3=w3,
    )


def transform_layer(w, pi, layer_perms, cfg):
    """W_q′=πᵀW_qπ₁, W_k′=πᵀW_kπ₁, W_v′=πᵀW_vπ₂, W_o′=π₂ᵀW_oπ, FFN via π₃, γ′=γπ, β′=βπ.

    Mixture layers additionally get W_g′ = πᵀW_g (router logits are invariant)
    and each expert transformed with its own π₃.
    """
    lp = layer_perms
    if pi.dim != cfg.d_model or lp.pi1.dim != cfg.d_model or lp.pi2.dim != cfg.d_model:
        raise InvalidDimensionError("feature permutation dims do not match d_model")
    if any(p3.dim != cfg.d_ff for p3 in lp.pi3s):
        raise InvalidDimensionError("inner permutation dims do not match d_ff")
    ffn = None
    experts = ()
    w_g = None
    if cfg.is_moe:
        if len(lp.pi3s) != cfg.n_experts:
            raise InvalidDimensionError(
                f"need {cfg.n_experts} inner permutations, got {len(lp.pi3s)}"
            )
        experts = tuple(
            _transform_ffn(fw, pi, p3) for fw, p3 in zip(w.experts, lp.pi3s)
        )
        w_g = apply_row_perm(w.w_g, pi)
    else:
        ffn = _transform_ffn(w.ffn, pi, lp.pi3)
    return LayerWeights(
        w_q=_two_sided(w.w_q, pi, lp.pi1),
        w_k=_two_sided(w.w_k, pi, lp.pi1),
        w_v=_two_sided(w.w_v, pi, lp.pi2),
        w_o=_two_sided(w.w_o, lp.pi2, pi),
        ffn=ffn,
        gamma_1=apply_vec_perm(w.gamma_1, pi),
        gamma_2=apply_vec_perm(w.gamma_2, pi),
        beta_1=None if w.beta_1 is None else apply_vec_perm(w.beta_1, pi),
        beta_2=None if w.beta_2 is None else apply_vec_perm(w.beta_2, pi),
        w_g=w_g,
        experts=experts,
    )


def transform_classifier(w_c, pi, pi_c):
    """W_c′ = πᵀ W_c π_c."""
    if w_c.shape[0] != pi.dim or w_c.shape[1] != pi_c.dim:
        raise InvalidDimensionError(
            f"classifier {w_c.shape} vs perms ({pi.dim}, {pi_c.dim})"
        )
    return _two_sided(w_c, pi, pi_c)


def transform_projection(w, pi_v, pi_t):
    """Cross-space projection: W′ = π_vᵀ W π_t, so (xπ_v)W′ = (xW)π_t."""
    if w.shape[0] != pi_v.dim or w.shape[1] != pi_t.dim:
        raise InvalidDimensionError(
            f"projection {w.shape} vs perms ({pi_v.dim}, {pi_t.dim})"
        )
    return _two_sided(w, pi_v, pi_t)


def para_trans(params, pset, epoch=None):
    """Transform every layer and the classifier; the embedding table stays as is."""
    cfg = params.config
    if pset.pi.dim != cfg.d_model or pset.pi_c.dim != cfg.vocab_size:
        raise InvalidDimensionError("shared permutation dims do not match config")
    if len(pset.per_layer) != cfg.n_layers:
        raise InvalidDimensionError(
            f"set has {len(pset.per_layer)} layer triples, model has {cfg.n_layers}"
        )
    layers = [
        transform_layer(w, pset.pi, lp, cfg)
        for w, lp in zip(params.layers, pset.per_layer)
    ]
    transformed = ModelParams(
        config=cfg,
        embedding=params.embedding,
        layers=layers,
        w_c=transform_classifier(params.w_c, pset.pi, pset.pi_c),
    )
    return TransformedModel(transformed, next(_EPOCH_COUNTER) if epoch is None else epoch)


def inverse_set(pset):
    """The permutation set that undoes this one slot-by-slot."""
    return PermutationSet(
        pi=inverse_perm(pset.pi),
        pi_c=inverse_perm(pset.pi_c),
        per_layer=tuple(
            LayerPerms(
                pi1=inverse_perm(lp.pi1),
                pi2=inverse_perm(lp.pi2),
                pi3s=tuple(inverse_perm(p) for p in lp.pi3s),
            )
            for lp in pset.per_layer
        ),
        pi_v=None if pset.pi_v is None else inverse_perm(pset.pi_v),
        pi_t=None if pset.pi_t is None else inverse_perm(pset.pi_t),
    )


def recover_output(o_perm, pi_c):
    """o = o′ π_cᵀ — undo the class permutation on a served output."""
    return apply_col_perm(o_perm, inverse_perm(pi_c))


def verify_equivalence(params, pset, trials, tol, n=16, seed=0, top_k=MOE_TOP_K):
    """Both inference paths on random inputs: report max |Δ| and argmax agreement."""
    if trials < 1:
        raise InvalidDimensionError(f"trials must be >= 1, got {trials}")
    cfg = params.config
    transformed = para_trans(params, pset)
    rng = np.random.default_rng(seed)
    max_diff = 0.0
    matches = 0
    total = 0
    for t in range(trials):
        x = rng.normal(size=(n, cfg.d_model)).astype(np.float32)
        if cfg.mask_kind is MaskKind.CUSTOM:
            mask = random_custom_mask(n, seed=int(rng.integers(2**31)))
        else:
            mask = make_mask(cfg.mask_kind, n=n)
        o = model_forward(x, params, mask, top_k)
        o_perm = model_forward(
            apply_col_perm(x, pset.pi), transformed.params, mask, top_k
        )
        rec = recover_output(o_perm, pset.pi_c)
        max_diff = max(max_diff, float(np.max(np.abs(rec - o))))
        matches += int(np.sum(np.argmax(rec, axis=1) == np.argmax(o, axis=1)))
        total += n
    rate = matches / total
    return {
        "max_abs_diff": max_diff,
        "argmax_match_rate": rate,
        "trials": trials,
        "rows_per_trial": n,
        "tolerance": tol,
        "passed": bool(max_diff <= tol and rate == 1.0),
    }
