"""Delta-rule state heads: gated decay, directed erase, rank-1 write.

Each head keeps a square matrix S that is rewritten token by token:

    S_t = S_{t-1} (diag(w_t) - kh_t^T (a_t * kh_t)) + v_t^T k_t

where all per-token vectors are rows derived from the input:

    w_t  = exp(-softplus(x_t W_decay + b))   decay gate in (0, 1]
    a_t  = sigmoid(x_t W_icl + b)            erase strength in (0, 1)
    kh_t = unit(x_t W_kappa)                 erase direction (zero stays zero)
    k_t  = x_t W_repl                        write key
    v_t  = fused_t W_sv                      write value, from the fused
                                             attention output of the token

The erase term projects out the kh direction before the write lands, so
with w = 1 and a = 1 the state's response along kh comes only from the new
(v, k) pair. Sequential over t by definition; heads and batch items are
independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .numerics import Array, NumericOverflow, Rng, ShapeError, init_glorot


@dataclass
class HeadState:
    """Square per-head memory, d_k x d_k (optionally batched in front)."""

    s: Array


@dataclass
class StateParams:
    """Projections for the per-token recurrence inputs plus the readout tap.

    ``w_hat_k`` and ``alpha`` drive the state readout consumed by fusion;
    ``alpha`` starts at 0 so a fresh model ignores its states entirely.
    """

    w_decay: Array
    b_decay: Array
    w_icl: Array
    b_icl: Array
    w_kappa: Array
    w_repl: Array
    w_sv: Array
    w_hat_k: Array
    alpha: Array  # shape (1,)

    @property
    def d_model(self) -> int:
        return ad.val(self.w_decay).shape[0]

    @property
    def d_k(self) -> int:
        return ad.val(self.w_decay).shape[1]


def init_state_params(d_model: int, d_k: int, rng: Rng) -> StateParams:
    return StateParams(
        w_decay=init_glorot(d_model, d_k, rng),
        b_decay=np.zeros(d_k),
        w_icl=init_glorot(d_model, d_k, rng),
        b_icl=np.zeros(d_k),
        w_kappa=init_glorot(d_model, d_k, rng),
        w_repl=init_glorot(d_model, d_k, rng),
        w_sv=init_glorot(d_model, d_k, rng),
        w_hat_k=init_glorot(d_model, d_k, rng),
        alpha=np.zeros(1),
    )


@dataclass
class TokenStateInputs:
    """Per-token recurrence quantities. ``kappa_hat`` is unit length or zero."""

    w: Array
    kappa_hat: Array
    k: Array
    v: Array
    a: Array


def _gate_maps(x, attn_fused, p: StateParams):
    """The five affine maps, vectorized over however many rows x carries."""
    w = ad.exp(-ad.softplus(x @ p.w_decay + p.b_decay))
    a = ad.sigmoid(x @ p.w_icl + p.b_icl)
    kappa_hat = ad.l2_normalize_rows(x @ p.w_kappa)
    k = x @ p.w_repl
    v = attn_fused @ p.w_sv
    return w, a, kappa_hat, k, v


def token_state_inputs(x_t, attn_fused_t, p: StateParams) -> TokenStateInputs:
    """Recurrence inputs for a single token row."""
    w, a, kappa_hat, k, v = _gate_maps(x_t, attn_fused_t, p)
    return TokenStateInputs(w=w, kappa_hat=kappa_hat, k=k, v=v, a=a)


def delta_rule_step(s_prev, in_t: TokenStateInputs, token_index=None):
    """Apply one decay-erase-write update; returns the new HeadState."""
    s = getattr(s_prev, "s", s_prev)
    out = ad.delta_step(s, in_t.w, in_t.a, in_t.kappa_hat, in_t.k, in_t.v)
    if not np.all(np.isfinite(ad.val(out))):
        where = "" if token_index is None else f" at token {token_index}"
        raise NumericOverflow(f"state update produced non-finite values{where}")
    return HeadState(s=out)


def _check_lengths(x, attn_fused):
    n = ad.val(x).shape[-2]
    if ad.val(attn_fused).shape[-2] != n:
        raise ShapeError(
            f"sequence lengths differ: x has {n}, attn_fused has "
            f"{ad.val(attn_fused).shape[-2]}")
    return n


def _initial_state(x, d_k: int, s0):
    if s0 is None:
        return np.zeros(ad.val(x).shape[:-2] + (d_k, d_k))
    return getattr(s0, "s", s0)


def run_recurrence(x, attn_fused, p: StateParams, s0=None):
    """Fold the update over a sequence; entry t is the state after token t.

    ``x`` and ``attn_fused`` are [n, d_model] (or batched [b, n, d_model])
    and must agree on n. The zero matrix is the default starting state.
    """
    n = _check_lengths(x, attn_fused)
    s = _initial_state(x, p.d_k, s0)
    w, a, kappa_hat, k, v = _gate_maps(x, attn_fused, p)
    states = []
    for t in range(n):
        step = TokenStateInputs(
            w=ad.select_time(w, t),
            kappa_hat=ad.select_time(kappa_hat, t),
            k=ad.select_time(k, t),
            v=ad.select_time(v, t),
            a=ad.select_time(a, t),
        )
        state = delta_rule_step(s, step, token_index=t)
        states.append(state)
        s = state.s
    return states


def recurrence_stack(x, attn_fused, p: StateParams, s0=None):
    """Same recurrence as :func:`run_recurrence`, fused into one scan.

    Returns the post-update states stacked on a time axis, [..., n, d, d];
    bit-identical to the fold, and what the layer consumes internally.
    """
    n = _check_lengths(x, attn_fused)
    s = _initial_state(x, p.d_k, s0)
    w, a, kappa_hat, k, v = _gate_maps(x, attn_fused, p)
    stack = ad.delta_scan(w, a, kappa_hat, k, v, s)
    values = ad.val(stack)
    if not np.all(np.isfinite(values)):
        bad = np.where(~np.isfinite(values).reshape(values.shape[:-2] + (-1,))
                       .all(axis=-1))[-1]
        tok = int(bad.min()) if bad.size else n - 1
        raise NumericOverflow(f"state scan produced non-finite values at token {tok}")
    return stack


def state_readout(s_t, x_t, w_hat_k, alpha):
    """Query the state along an input-derived key: ``alpha * (x W_hat_k) S``."""
    s = getattr(s_t, "s", s_t)
    key = x_t @ w_hat_k
    return ad.mul(alpha, ad.vecmat(key, s))
