"""Analytic gradients for the whole model, checked against finite differences.

``analytic_grads`` runs the reverse-mode tape; ``finite_diff`` perturbs every
scalar parameter one at a time with a central difference and never touches
the tape, so the two routes share nothing past the forward formulas.

The suite covers every combine-mode x middle-mode pairing on a tiny model.
Zero-initialized leaves (blend scalars, unembedding, biases) are bumped to
seeded nonzero values first; otherwise the state path contributes nothing
and its gradients would be checked only against themselves at zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .fusion import CombineMode, MiddleMode
from .model import ModelConfig, ModelParams, detach, init_params, lift, model_forward, named_params
from .numerics import NumericOverflow, Rng


@dataclass
class GradRecord:
    name: str
    max_rel: float
    max_abs: float
    analytic_norm: float
    numeric_norm: float
    passed: bool


@dataclass
class GradReport:
    records: list[GradRecord]
    rel_tol: float
    abs_tol: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.records)

    def worst(self) -> GradRecord:
        return max(self.records, key=lambda r: r.max_rel)

    def render(self) -> str:
        lines = [f"{'tensor':<34} {'max_rel':>12} {'max_abs':>12} "
                 f"{'|analytic|':>12} {'|numeric|':>12}  ok"]
        for r in self.records:
            lines.append(
                f"{r.name:<34} {r.max_rel:>12.3e} {r.max_abs:>12.3e} "
                f"{r.analytic_norm:>12.3e} {r.numeric_norm:>12.3e}  "
                f"{'yes' if r.passed else 'NO'}")
        status = "PASS" if self.passed else "FAIL"
        lines.append(f"{status}: {len(self.records)} tensors, "
                     f"rel_tol={self.rel_tol:g}, abs_tol={self.abs_tol:g}")
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps({
            "passed": self.passed,
            "rel_tol": self.rel_tol,
            "abs_tol": self.abs_tol,
            "records": [vars(r) for r in self.records],
        })


def analytic_grads(loss_fn, params: ModelParams) -> dict[str, np.ndarray]:
    """Reverse-mode gradient of ``loss_fn(params)`` for every leaf."""
    lifted = lift(detach(params))
    loss = loss_fn(lifted)
    if not isinstance(loss, ad.Var):
        raise TypeError("loss_fn must build an autodiff graph over the params")
    ad.backward(loss)
    grads = {}
    for name, leaf in named_params(lifted):
        g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
        if not np.all(np.isfinite(g)):
            raise NumericOverflow(f"non-finite gradient for {name}")
        grads[name] = g
    return grads


def finite_diff(loss_fn, params: ModelParams, h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences (f(x+h) - f(x-h)) / 2h per scalar parameter."""
    if h <= 0:
        raise ValueError("finite_diff needs h > 0")
    work = detach(params)
    grads = {}
    for name, arr in named_params(work):
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(ad.val(loss_fn(work)))
            flat[i] = orig - h
            down = float(ad.val(loss_fn(work)))
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads[name] = g
    return grads


def compare(analytic: dict, numeric: dict, rel_tol: float = 1e-4,
            abs_tol: float = 1e-7) -> GradReport:
    """Per-tensor worst-case comparison; an entry passes on either tolerance."""
    if set(analytic) != set(numeric):
        only_a = sorted(set(analytic) - set(numeric))
        only_n = sorted(set(numeric) - set(analytic))
        raise ValueError(f"parameter sets differ: analytic-only={only_a}, "
                         f"numeric-only={only_n}")
    records = []
    for name in analytic:
        a, n = analytic[name], numeric[name]
        abs_err = np.abs(a - n)
        rel_err = abs_err / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-12)
        ok = np.all((rel_err <= rel_tol) | (abs_err <= abs_tol))
        records.append(GradRecord(
            name=name,
            max_rel=float(rel_err.max()) if rel_err.size else 0.0,
            max_abs=float(abs_err.max()) if abs_err.size else 0.0,
            analytic_norm=float(np.linalg.norm(a)),
            numeric_norm=float(np.linalg.norm(n)),
            passed=bool(ok),
        ))
    return GradReport(records=records, rel_tol=rel_tol, abs_tol=abs_tol)


def randomize_zero_leaves(params: ModelParams, rng: Rng, low: float = 0.05,
                          high: float = 0.5) -> ModelParams:
    """Replace all-zero leaves with small seeded uniforms (sign-alternating)."""
    def bump(arr):
        a = np.array(ad.val(arr))
        if np.all(a == 0.0):
            flat = rng.uniforms(a.size) * (high - low) + low
            signs = np.array([1.0 if rng.next_u64() & 1 else -1.0
                              for _ in range(a.size)])
            return (flat * signs).reshape(a.shape)
        return a

    from .model import map_leaves
    return map_leaves(params, bump)


def model_loss_fn(tokens, targets, mask):
    """Masked cross-entropy closure over a fixed batch."""
    def loss_fn(params):
        logits = model_forward(tokens, params)
        return ad.masked_cross_entropy(logits, targets, mask)
    return loss_fn


ALL_MODE_COMBOS = tuple(
    (combine, middle)
    for combine in (CombineMode.CONCAT_PROJECT, CombineMode.SUM)
    for middle in (MiddleMode.OFF, MiddleMode.CONCAT, MiddleMode.ADDITIVE,
                   MiddleMode.GATED)
)


def check_model(cfg: ModelConfig, rel_tol: float = 1e-4, abs_tol: float = 1e-7,
                h: float = 1e-5, n_tokens: int = 5, data_seed: int = 1234) -> GradReport:
    """Gradcheck one configuration on a seeded batch."""
    params = randomize_zero_leaves(init_params(cfg), Rng(cfg.seed ^ 0xA5A5A5A5))
    rng = Rng(data_seed)
    tokens = np.array([rng.randint(cfg.vocab_size) for _ in range(n_tokens)])
    targets = np.array([rng.randint(cfg.vocab_size) for _ in range(n_tokens)])
    mask = np.ones(n_tokens)
    loss_fn = model_loss_fn(tokens, targets, mask)
    analytic = analytic_grads(loss_fn, params)
    numeric = finite_diff(loss_fn, params, h=h)
    return compare(analytic, numeric, rel_tol=rel_tol, abs_tol=abs_tol)


def run_suite(d_model: int = 8, n_heads: int = 2, n_layers: int = 2,
              vocab_size: int = 11, seed: int = 7, rel_tol: float = 1e-4,
              abs_tol: float = 1e-7):
    """Gradcheck every fusion x middle combination; yields (cfg, report)."""
    for combine, middle in ALL_MODE_COMBOS:
        cfg = ModelConfig(vocab_size=vocab_size, d_model=d_model, n_heads=n_heads,
                          n_layers=n_layers, combine_mode=combine,
                          middle_mode=middle, seed=seed)
        yield cfg, check_model(cfg, rel_tol=rel_tol, abs_tol=abs_tol)
