"""Shared fixtures and config factories."""

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from stip.model import FfnKind, MaskKind, ModelConfig, NormKind, NormPlacement

settings.register_profile(
    "suite",
    max_examples=25,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")


def make_config(
    n_layers=2,
    d_model=8,
    d_ff=16,
    vocab_size=12,
    attn_scale=None,
    norm_kind=NormKind.LAYERNORM,
    norm_placement=NormPlacement.POST,
    ffn_kind=FfnKind.RELU,
    n_experts=0,
    mask_kind=MaskKind.CAUSAL,
):
    return ModelConfig(
        n_layers=n_layers,
        d_model=d_model,
        d_ff=d_ff,
        vocab_size=vocab_size,
        attn_scale=float(d_model) if attn_scale is None else attn_scale,
        norm_kind=norm_kind,
        norm_placement=norm_placement,
        ffn_kind=ffn_kind,
        n_experts=n_experts,
        mask_kind=mask_kind,
    )


VARIANT_CONFIGS = {
    "post_ln_relu": dict(
        norm_kind=NormKind.LAYERNORM, norm_placement=NormPlacement.POST, ffn_kind=FfnKind.RELU
    ),
    "pre_ln_gelu": dict(
        norm_kind=NormKind.LAYERNORM, norm_placement=NormPlacement.PRE, ffn_kind=FfnKind.GELU
    ),
    "rms_swiglu": dict(
        norm_kind=NormKind.RMSNORM, norm_placement=NormPlacement.PRE, ffn_kind=FfnKind.SWIGLU
    ),
    "moe": dict(
        norm_kind=NormKind.LAYERNORM,
        norm_placement=NormPlacement.POST,
        ffn_kind=FfnKind.RELU,
        n_experts=4,
    ),
}


@pytest.fixture
def rng():
    return np.random.default_rng(0)
