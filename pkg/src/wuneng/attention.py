"""Causal multi-head attention plus the state-augmented query path.

Sequences are row-token matrices: position t is row t. Each head owns its
own projections, so nothing here splits or merges heads; fusion does that.
All functions accept plain arrays or autodiff Vars and may carry a leading
batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import sqrt

import numpy as np

from . import autodiff as ad
from .numerics import Array, Rng, ShapeError, init_glorot


@dataclass
class AttnHeadParams:
    """One attention head: QKV projections, query-augmentation map, blend scalar.

    ``lam`` starts at 0 so a fresh head is pure attention; the state only
    enters the queries once training moves it.
    """

    w_q: Array
    w_k: Array
    w_v: Array
    w_q_state: Array
    lam: Array  # shape (1,)

    @property
    def d_model(self) -> int:
        return ad.val(self.w_q).shape[0]

    @property
    def d_k(self) -> int:
        return ad.val(self.w_q).shape[1]


def init_attn_head(d_model: int, d_k: int, rng: Rng) -> AttnHeadParams:
    return AttnHeadParams(
        w_q=init_glorot(d_model, d_k, rng),
        w_k=init_glorot(d_model, d_k, rng),
        w_v=init_glorot(d_model, d_k, rng),
        w_q_state=init_glorot(d_k, d_k, rng),
        lam=np.zeros(1),
    )


def _check_width(x, d_model: int, name: str) -> None:
    width = ad.val(x).shape[-1]
    if width != d_model:
        raise ShapeError(f"{name} has width {width}, expected d_model={d_model}")


def project_qkv(x, p: AttnHeadParams):
    """Per-head projections Q = xW_q, K = xW_k, V = xW_v."""
    _check_width(x, p.d_model, "input")
    return x @ p.w_q, x @ p.w_k, x @ p.w_v


def scaled_logits(q, k):
    """Pre-softmax attention scores q k^T / sqrt(d_k)."""
    d_k = ad.val(q).shape[-1]
    return ad.mul(q @ ad.transpose_last2(k), 1.0 / sqrt(d_k))


def causal_head(q, k, v):
    """Causal scaled-dot-product attention for one head."""
    n_q = ad.val(q).shape[-2]
    n_k = ad.val(k).shape[-2]
    if n_q != n_k or ad.val(q).shape[-1] != ad.val(k).shape[-1]:
        raise ShapeError(
            f"q/k shapes disagree: {ad.val(q).shape} vs {ad.val(k).shape}")
    weights = ad.softmax_causal(scaled_logits(q, k), causal=True)
    return weights @ v


def augment_queries(x, s_seq, p: AttnHeadParams):
    """Blend a per-token state readout into the queries.

    For position t the state built from tokens <= t is queried along the
    token's own key direction and mapped into query space:

        Q[t] = x[t] W_q + lam * (x[t] W_k @ S_t) W_q_state

    ``s_seq`` is either a per-token list of states or the stacked states
    [..., n, d_k, d_k] from the recurrence scan. With ``lam`` at 0 or all
    states zero this is exactly the plain query.
    """
    _check_width(x, p.d_model, "input")
    n = ad.val(x).shape[-2]
    q_base = x @ p.w_q
    keys = x @ p.w_k
    if isinstance(s_seq, (list, tuple)):
        if len(s_seq) != n:
            raise ShapeError(f"state sequence has {len(s_seq)} entries for {n} tokens")
        mats = [getattr(s, "s", s) for s in s_seq]
        if any(ad.is_var(m) for m in mats):
            taps = ad.stack_rows([ad.vecmat(ad.select_time(keys, t), mats[t])
                                  for t in range(n)])
        else:
            taps = ad.time_vecmat(keys, np.stack(mats, axis=-3))
    else:
        if ad.val(s_seq).shape[-3] != n:
            raise ShapeError(f"state stack has {ad.val(s_seq).shape[-3]} entries "
                             f"for {n} tokens")
        taps = ad.time_vecmat(keys, s_seq)
    return q_base + ad.mul(p.lam, taps @ p.w_q_state)
