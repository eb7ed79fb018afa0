"""One hybrid block: attention pass, state recurrence, augmented pass, FFN.

The query augmentation needs per-token states, the state's write values
need attention outputs, and attention needs the queries. The cycle is cut
with two passes sharing one set of weights:

    pass 1   plain causal attention on the normalized input
    state    recurrence driven by the fused pass-1 heads (plus pass-1
             middle heads when middles are on)
    pass 2   attention again with state-augmented queries, then state
             readouts, middle heads, and the hybrid projection
    output   h + attn_out + ffn(h + attn_out)

Pass-1 middle heads see a zero state readout (no state exists yet), which
keeps the forward a finite DAG without stale-state tricks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import AttnHeadParams, augment_queries, causal_head, init_attn_head, project_qkv
from .fusion import (CombineMode, FusionConfig, HybridProjection, MiddleHeadParams,
                     MiddleMode, combine_f, concat_heads, hybrid_attention_out,
                     init_middle_head, middle_head)
from .numerics import Array, Rng, ShapeError, init_glorot
from .state import HeadState, StateParams, init_state_params, recurrence_stack

LN_EPS = 1e-5


@dataclass
class LayerParams:
    heads: list[AttnHeadParams]
    state: list[StateParams]
    middle: list[MiddleHeadParams] | None
    proj: HybridProjection
    ffn_in: Array
    ffn_out: Array
    ln1_scale: Array
    ln1_shift: Array
    ln2_scale: Array
    ln2_shift: Array
    fusion: FusionConfig = field(default_factory=FusionConfig)

    @property
    def n_heads(self) -> int:
        return len(self.heads)

    @property
    def d_model(self) -> int:
        return self.heads[0].d_model


def init_layer_params(d_model: int, n_heads: int, d_ffn: int,
                      fusion: FusionConfig, rng: Rng) -> LayerParams:
    if d_model % n_heads != 0:
        raise ShapeError(f"d_model={d_model} not divisible by n_heads={n_heads}")
    d_k = d_model // n_heads
    heads = [init_attn_head(d_model, d_k, rng) for _ in range(n_heads)]
    state = [init_state_params(d_model, d_k, rng) for _ in range(n_heads)]
    middle = None
    if fusion.middle_mode != MiddleMode.OFF:
        middle = [init_middle_head(d_k, fusion.middle_mode, rng) for _ in range(n_heads)]
    proj = HybridProjection(w_attn=init_glorot(fusion.d_cat(d_model), d_model, rng))
    return LayerParams(
        heads=heads,
        state=state,
        middle=middle,
        proj=proj,
        ffn_in=init_glorot(d_model, d_ffn, rng),
        ffn_out=init_glorot(d_ffn, d_model, rng),
        ln1_scale=np.ones(d_model),
        ln1_shift=np.zeros(d_model),
        ln2_scale=np.ones(d_model),
        ln2_shift=np.zeros(d_model),
        fusion=fusion,
    )


def ffn(h_pre, p: LayerParams):
    """Position-wise feed-forward: out_proj(relu^2(in_proj(norm(h))))."""
    normed = ad.layer_norm_rows(h_pre, p.ln2_scale, p.ln2_shift, LN_EPS)
    return ad.relu_squared(normed @ p.ffn_in) @ p.ffn_out


def layer_forward(h_prev, p: LayerParams):
    """Run the block on [n, d_model] (or [batch, n, d_model]) hidden rows.

    Returns the new hidden rows and the final per-head states.
    """
    x = ad.layer_norm_rows(h_prev, p.ln1_scale, p.ln1_shift, LN_EPS)
    middles_on = p.fusion.middle_mode != MiddleMode.OFF

    base_heads = []  # (q, k, v, attn) per head, pass 1
    for hp in p.heads:
        q, k, v = project_qkv(x, hp)
        base_heads.append((q, k, v, causal_head(q, k, v)))

    # value source for the state: fused pass-1 heads, width d_model
    fused_groups = [[a for (_, _, _, a) in base_heads]]
    if middles_on:
        zero_read = np.zeros_like(ad.val(base_heads[0][3]))
        fused_groups.append([
            middle_head(a, zero_read, mp, p.fusion.middle_mode)
            for (_, _, _, a), mp in zip(base_heads, p.middle)
        ])
    fused = combine_f(fused_groups, FusionConfig(CombineMode.SUM, MiddleMode.OFF))

    per_head_stacks = [recurrence_stack(x, fused, sp) for sp in p.state]

    attn_heads = []
    read_heads = []
    for (q0, k, v, _), hp, sp, stack in zip(base_heads, p.heads, p.state,
                                            per_head_stacks):
        q = augment_queries(x, stack, hp)
        attn_heads.append(causal_head(q, k, v))
        # state_readout per position, with the key projection hoisted
        read_heads.append(ad.mul(sp.alpha, ad.time_vecmat(x @ sp.w_hat_k, stack)))

    middles = None
    gammas = None
    if middles_on:
        middles = [middle_head(a, r, mp, p.fusion.middle_mode)
                   for a, r, mp in zip(attn_heads, read_heads, p.middle)]
        gammas = [mp.gamma_mid for mp in p.middle]

    attn_out = hybrid_attention_out(attn_heads, read_heads, middles, p.proj,
                                    gammas, p.fusion)
    h_pre = h_prev + attn_out
    h = h_pre + ffn(h_pre, p)
    final_states = [HeadState(np.array(ad.val(stack)[..., -1, :, :]))
                    for stack in per_head_stacks]
    return h, final_states
