"""Head fusion: the combine rule, middle heads, and the hybrid output.

Head groups (standard attention, state readouts, middle heads) merge in one
of two ways: ``concat_project`` concatenates every group and lets a learned
projection sort it out; ``sum`` adds the groups after per-head concatenation
so the projection stays d_model wide.

Middle heads bridge an attention head and its state readout. Three wirings:

    concat    m = sig((a + beta * r) W_mid)
    additive  m = sig(a W_mid + beta * r W_state_add)
    gated     g = sigmoid([a ; r] W_gate)
              m = sig((g * a + (1 - g) * beta * r) W_mid)

``beta`` and ``gamma_mid`` start at 0: a fresh middle head neither sees the
state nor perturbs the attention path.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from .numerics import Array, Rng, ShapeError, init_glorot


class CombineMode(str, Enum):
    CONCAT_PROJECT = "concat_project"
    SUM = "sum"


class MiddleMode(str, Enum):
    OFF = "off"
    CONCAT = "concat"
    ADDITIVE = "additive"
    GATED = "gated"


@dataclass(frozen=True)
class FusionConfig:
    combine_mode: CombineMode = CombineMode.CONCAT_PROJECT
    middle_mode: MiddleMode = MiddleMode.OFF

    @property
    def n_groups(self) -> int:
        """Attention and state readouts always; middles as a third group
        only in concat middle mode (elsewhere they ride inside group 1)."""
        return 3 if self.middle_mode == MiddleMode.CONCAT else 2

    def d_cat(self, d_model: int) -> int:
        if self.combine_mode == CombineMode.CONCAT_PROJECT:
            return d_model * self.n_groups
        return d_model


@dataclass
class MiddleHeadParams:
    """One middle head. ``w_state_add`` exists only in additive mode and
    ``w_gate`` only in gated mode, so checkpoints carry no dead weights."""

    w_mid: Array
    beta: Array       # shape (1,)
    gamma_mid: Array  # shape (1,)
    w_state_add: Array | None = None
    w_gate: Array | None = None


def init_middle_head(d_k: int, mode: MiddleMode, rng: Rng) -> MiddleHeadParams:
    if mode == MiddleMode.OFF:
        raise ValueError("no middle-head parameters in mode 'off'")
    return MiddleHeadParams(
        w_mid=init_glorot(d_k, d_k, rng),
        beta=np.zeros(1),
        gamma_mid=np.zeros(1),
        w_state_add=init_glorot(d_k, d_k, rng) if mode == MiddleMode.ADDITIVE else None,
        w_gate=init_glorot(2 * d_k, d_k, rng) if mode == MiddleMode.GATED else None,
    )


@dataclass
class HybridProjection:
    """Final mixing matrix, d_cat x d_model."""

    w_attn: Array


def concat_heads(per_head):
    """Concatenate per-head rows into one d_model-wide group."""
    return ad.concat_last(list(per_head))


def combine_f(groups, cfg: FusionConfig):
    """Merge head groups into the pre-projection matrix.

    Every group is a list of per-head [n, d_k] blocks; all groups must have
    the same head count and widths.
    """
    if not groups:
        raise ShapeError("combine_f needs at least one group")
    n_heads = len(groups[0])
    for i, group in enumerate(groups):
        if len(group) != n_heads:
            raise ShapeError(
                f"group {i} has {len(group)} heads, expected {n_heads}")
        widths = {ad.val(h).shape[-1] for h in group}
        if len(widths) != 1:
            raise ShapeError(f"group {i} mixes head widths {sorted(widths)}")
    rows = [concat_heads(g) for g in groups]
    if cfg.combine_mode == CombineMode.CONCAT_PROJECT:
        return ad.concat_last(rows)
    out = rows[0]
    for r in rows[1:]:
        out = out + r
    return out


def middle_head(a_h_t, state_read_t, p: MiddleHeadParams, mode: MiddleMode,
                gate_override=None):
    """Bridge one head's attention output with its state readout.

    ``gate_override`` substitutes the gate activation directly (testing the
    gated limits); it is ignored outside gated mode.
    """
    if mode == MiddleMode.OFF:
        raise ValueError("middle_head called with mode 'off'")
    scaled_read = ad.mul(p.beta, state_read_t)
    if mode == MiddleMode.CONCAT:
        return ad.sigmoid((a_h_t + scaled_read) @ p.w_mid)
    if mode == MiddleMode.ADDITIVE:
        return ad.sigmoid(a_h_t @ p.w_mid + scaled_read @ p.w_state_add)
    if mode == MiddleMode.GATED:
        if gate_override is None:
            gate = ad.sigmoid(ad.concat_last([a_h_t, state_read_t]) @ p.w_gate)
        else:
            gate = gate_override
        blend = gate * a_h_t + (1.0 - gate) * scaled_read
        return ad.sigmoid(blend @ p.w_mid)
    raise ValueError(f"unknown middle mode: {mode!r}")


def hybrid_attention_out(a_heads, state_reads, middles, proj: HybridProjection,
                         gammas, cfg: FusionConfig):
    """Assemble the layer's attention output.

    Group 1 is attention (plus ``gamma * middle`` when middles are present),
    group 2 the already-scaled state readouts, group 3 the raw middles in
    concat middle mode. The combined matrix then goes through ``w_attn``.
    """
    if middles is None:
        group1 = list(a_heads)
    else:
        group1 = [a + ad.mul(g, m) for a, g, m in zip(a_heads, gammas, middles)]
    groups = [group1, list(state_reads)]
    if cfg.middle_mode == MiddleMode.CONCAT:
        groups.append(list(middles))
    combined = combine_f(groups, cfg)
    width = ad.val(combined).shape[-1]
    expected = ad.val(proj.w_attn).shape[0]
    if width != expected:
        raise ShapeError(
            f"combined width {width} does not match projection rows {expected}")
    return combined @ proj.w_attn
