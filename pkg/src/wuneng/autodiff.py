"""Minimal reverse-mode autodiff over float64 numpy arrays.

A :class:`Var` wraps a value plus the closure that propagates an incoming
cotangent to its parents. Every op below has two faces: called with plain
arrays it returns a plain array (no graph, no overhead), called with at
least one Var it records a node. Model code is written once against these
ops and works in both worlds.

Only what the model needs is implemented: matmul and friends for rank <= 3,
row-wise nonlinearities, causal softmax, layer norm, per-token slicing and
stacking for the state recurrence, an embedding gather, and a fused
masked-cross-entropy head. Gradients are validated end to end against
central finite differences in the gradcheck suite.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nx


class Var:
    """Node in the reverse-mode tape."""

    __slots__ = ("value", "grad", "parents", "vjp")
    __array_ufunc__ = None  # keep numpy from consuming us in mixed expressions

    def __init__(self, value, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return mul(self, -1.0)


def is_var(x) -> bool:
    return isinstance(x, Var)

def val(x):
    """Underlying array of a Var, or the input unchanged."""
    return x.value if isinstance(x, Var) else x


def _any_var(*xs) -> bool:
    return any(isinstance(x, Var) for x in xs)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _node(out_value, inputs, grad_fns):
    """Build a Var whose parents are the Var-typed inputs.

    ``grad_fns`` aligns with ``inputs``; each takes the output cotangent and
    returns the cotangent for that input. Entries for plain-array inputs are
    skipped entirely.
    """
    parents = []
    fns = []
    for x, fn in zip(inputs, grad_fns):
        if isinstance(x, Var):
            parents.append(x)
            fns.append(fn)

    def vjp(g):
        return [fn(g) for fn in fns]

    return Var(out_value, tuple(parents), vjp)


def backward(root: Var) -> None:
    """Accumulate gradients of a scalar ``root`` into every reachable Var."""
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.value.shape}")
    topo = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))

    for node in topo:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(topo):
        if node.vjp is None or node.grad is None:
            continue
        for parent, g in zip(node.parents, node.vjp(node.grad)):
            parent.grad = g if parent.grad is None else parent.grad + g


def zero_grads(leaves) -> None:
    for leaf in leaves:
        leaf.grad = None


# ---------------------------------------------------------------------------
# elementwise and linear ops
# ---------------------------------------------------------------------------

def add(a, b):
    if not _any_var(a, b):
        return np.asarray(a, dtype=np.float64) + np.asarray(b, dtype=np.float64)
    av, bv = val(a), val(b)
    return _node(av + bv, (a, b), (
        lambda g: _unbroadcast(g, np.shape(av)),
        lambda g: _unbroadcast(g, np.shape(bv)),
    ))


def sub(a, b):
    if not _any_var(a, b):
        return np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    av, bv = val(a), val(b)
    return _node(av - bv, (a, b), (
        lambda g: _unbroadcast(g, np.shape(av)),
        lambda g: _unbroadcast(-g, np.shape(bv)),
    ))


def mul(a, b):
    if not _any_var(a, b):
        return np.asarray(a, dtype=np.float64) * np.asarray(b, dtype=np.float64)
    av, bv = val(a), val(b)
    return _node(av * bv, (a, b), (
        lambda g: _unbroadcast(g * bv, np.shape(av)),
        lambda g: _unbroadcast(g * av, np.shape(bv)),
    ))


def _swap_last2(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a, b):
    if not _any_var(a, b):
        return nx.matmul(a, b)
    av = np.asarray(val(a), dtype=np.float64)
    bv = np.asarray(val(b), dtype=np.float64)
    out = nx.matmul(av, bv)

    if av.ndim == 1 and bv.ndim >= 2:
        grad_a = lambda g: _unbroadcast(nx.matmul(bv, g) if bv.ndim == 2
                                        else np.einsum("...kn,...n->...k", bv, g), av.shape)
        grad_b = lambda g: _unbroadcast(np.einsum("k,...n->...kn", av, g), bv.shape)
    elif bv.ndim == 1 and av.ndim >= 2:
        grad_a = lambda g: _unbroadcast(np.einsum("...m,n->...mn", g, bv), av.shape)
        grad_b = lambda g: _unbroadcast(np.einsum("...mk,...m->...k", av, g), bv.shape)
    else:
        grad_a = lambda g: _unbroadcast(np.matmul(g, _swap_last2(bv)), av.shape)
        grad_b = lambda g: _unbroadcast(np.matmul(_swap_last2(av), g), bv.shape)
    return _node(out, (a, b), (grad_a, grad_b))


def transpose_last2(x):
    if not is_var(x):
        return _swap_last2(np.asarray(x, dtype=np.float64))
    return _node(_swap_last2(x.value), (x,), (lambda g: _swap_last2(g),))


def reshape(x, shape):
    if not is_var(x):
        return np.reshape(np.asarray(x, dtype=np.float64), shape)
    old = x.value.shape
    return _node(x.value.reshape(shape), (x,), (lambda g: g.reshape(old),))


def vecmat(u, s):
    """Row vector(s) times square matrix(es): ``...i, ...ij -> ...j``."""
    def fwd(uv, sv):
        return (uv[..., None, :] @ sv)[..., 0, :]

    if not _any_var(u, s):
        return fwd(np.asarray(val(u), float), np.asarray(val(s), float))
    uv = np.asarray(val(u), float)
    sv = np.asarray(val(s), float)
    return _node(fwd(uv, sv), (u, s), (
        lambda g: _unbroadcast(
            (g[..., None, :] @ _swap_last2(sv))[..., 0, :], uv.shape),
        lambda g: _unbroadcast(uv[..., :, None] * g[..., None, :], sv.shape),
    ))


def outer(u, v):
    """Column-times-row outer product on the last axis: ``...i, ...j -> ...ij``."""
    def fwd(uv, vv):
        return uv[..., :, None] * vv[..., None, :]

    if not _any_var(u, v):
        return fwd(np.asarray(val(u), float), np.asarray(val(v), float))
    uv = np.asarray(val(u), float)
    vv = np.asarray(val(v), float)
    return _node(fwd(uv, vv), (u, v), (
        lambda g: _unbroadcast((g * vv[..., None, :]).sum(axis=-1), uv.shape),
        lambda g: _unbroadcast((g * uv[..., :, None]).sum(axis=-2), vv.shape),
    ))


def concat_last(parts):
    if not _any_var(*parts):
        return np.concatenate([np.asarray(p, float) for p in parts], axis=-1)
    values = [val(p) for p in parts]
    widths = [v.shape[-1] for v in values]
    offsets = np.cumsum([0] + widths)

    def grad_for(i):
        return lambda g: g[..., offsets[i]:offsets[i + 1]]

    return _node(np.concatenate(values, axis=-1), tuple(parts),
                 tuple(grad_for(i) for i in range(len(parts))))


def stack_rows(items):
    """Stack equal-shape slices along a new second-to-last axis."""
    if not _any_var(*items):
        return np.stack([np.asarray(p, float) for p in items], axis=-2)
    values = [val(p) for p in items]

    def grad_for(i):
        return lambda g: np.take(g, i, axis=-2)

    return _node(np.stack(values, axis=-2), tuple(items),
                 tuple(grad_for(i) for i in range(len(items))))


def select_time(x, t: int):
    """Slice position ``t`` off the second-to-last axis: ``x[..., t, :]``."""
    if not is_var(x):
        return np.asarray(x, float)[..., t, :]

    def grad(g):
        gx = np.zeros_like(x.value)
        gx[..., t, :] = g
        return gx

    return _node(x.value[..., t, :], (x,), (grad,))


def diag_embed(w):
    if not is_var(w):
        wv = np.asarray(w, float)
        out = np.zeros(wv.shape + (wv.shape[-1],))
        idx = np.arange(wv.shape[-1])
        out[..., idx, idx] = wv
        return out
    wv = w.value
    out = np.zeros(wv.shape + (wv.shape[-1],))
    idx = np.arange(wv.shape[-1])
    out[..., idx, idx] = wv
    return _node(out, (w,), (lambda g: np.diagonal(g, axis1=-2, axis2=-1).copy(),))


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def sigmoid(x):
    if not is_var(x):
        return nx.sigmoid(np.asarray(x, float))
    out = nx.sigmoid(x.value)
    return _node(out, (x,), (lambda g: g * out * (1.0 - out),))


def exp(x):
    if not is_var(x):
        return np.exp(np.asarray(x, float))
    out = np.exp(x.value)
    return _node(out, (x,), (lambda g: g * out,))


def softplus(x):
    if not is_var(x):
        return nx.softplus(np.asarray(x, float))
    return _node(nx.softplus(x.value), (x,), (lambda g: g * nx.sigmoid(x.value),))


def relu_squared(x):
    if not is_var(x):
        return nx.relu_squared(np.asarray(x, float))
    # subgradient at the kink is 0
    return _node(nx.relu_squared(x.value), (x,),
                 (lambda g: g * 2.0 * np.maximum(x.value, 0.0),))


def l2_normalize_rows(x, eps: float = 0.0):
    """Unit-normalize the last axis; all-zero rows stay zero."""
    def fwd(xv):
        norm = np.linalg.norm(xv, axis=-1, keepdims=True)
        safe = np.where(norm > eps, norm, 1.0)
        return np.where(norm > eps, xv / safe, 0.0), norm, safe

    if not is_var(x):
        return fwd(np.asarray(x, float))[0]
    out, norm, safe = fwd(x.value)

    def grad(g):
        dot = np.sum(g * out, axis=-1, keepdims=True)
        gx = (g - out * dot) / safe
        return np.where(norm > eps, gx, 0.0)

    return _node(out, (x,), (grad,))


def softmax_causal(scores, causal: bool = True):
    if not is_var(scores):
        return nx.softmax_masked_rows(np.asarray(scores, float), causal=causal)
    out = nx.softmax_masked_rows(scores.value, causal=causal)

    def grad(g):
        inner = np.sum(g * out, axis=-1, keepdims=True)
        return out * (g - inner)

    return _node(out, (scores,), (grad,))


def layer_norm_rows(x, scale, shift, eps: float):
    """Layer norm over the last axis with learnable scale and shift."""
    if not _any_var(x, scale, shift):
        return nx.layer_norm(np.asarray(x, float), np.asarray(scale, float),
                             np.asarray(shift, float), eps)
    xv, scv, shv = val(x), val(scale), val(shift)
    mean = np.mean(xv, axis=-1, keepdims=True)
    centered = xv - mean
    var = np.mean(centered**2, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = scv * xhat + shv

    def grad_x(g):
        gh = g * scv
        m1 = np.mean(gh, axis=-1, keepdims=True)
        m2 = np.mean(gh * xhat, axis=-1, keepdims=True)
        return inv * (gh - m1 - xhat * m2)

    return _node(out, (x, scale, shift), (
        grad_x,
        lambda g: _unbroadcast(g * xhat, np.shape(scv)),
        lambda g: _unbroadcast(g, np.shape(shv)),
    ))


# ---------------------------------------------------------------------------
# fused delta-rule step and scan
# ---------------------------------------------------------------------------

def _delta_transition(wv, av, khv):
    """The decay-erase matrix diag(w) - kh^T (a*kh), trailing axes (d, d)."""
    t = -(khv[..., :, None] * (av * khv)[..., None, :])
    idx = np.arange(wv.shape[-1])
    t[..., idx, idx] += wv
    return t


def _delta_core(sv, t, kv, vv):
    return np.matmul(sv, t) + vv[..., :, None] * kv[..., None, :]


def _delta_grads(g, sv, wv, av, khv, kv, vv, t):
    """Cotangents of one delta update w.r.t. all six inputs."""
    ds = np.matmul(g, _swap_last2(t))
    dt = np.matmul(_swap_last2(sv), g)
    dw = np.diagonal(dt, axis1=-2, axis2=-1).copy()
    dp = -(dt * khv[..., :, None]).sum(axis=-2)
    dkh = -(dt * (av * khv)[..., None, :]).sum(axis=-1) + dp * av
    da = dp * khv
    dk = (g * vv[..., :, None]).sum(axis=-2)
    dv = (g * kv[..., None, :]).sum(axis=-1)
    return ds, dw, da, dkh, dk, dv


def delta_step(s_prev, w, a, kappa_hat, k, v):
    """One state update: ``S = S_prev (diag(w) - kh^T (a*kh)) + v^T k``.

    Vectors live on the last axis; the state carries two trailing axes.
    """
    sv, wv, av = val(s_prev), val(w), val(a)
    khv, kv, vv = val(kappa_hat), val(k), val(v)
    t = _delta_transition(np.asarray(wv, float), np.asarray(av, float),
                          np.asarray(khv, float))
    out = _delta_core(np.asarray(sv, float), t, np.asarray(kv, float),
                      np.asarray(vv, float))
    if not _any_var(s_prev, w, a, kappa_hat, k, v):
        return out

    def make(idx):
        return lambda g: _unbroadcast(
            _delta_grads(g, sv, wv, av, khv, kv, vv, t)[idx],
            np.shape((sv, wv, av, khv, kv, vv)[idx]))

    return _node(out, (s_prev, w, a, kappa_hat, k, v),
                 tuple(make(i) for i in range(6)))


def delta_scan(w, a, kappa_hat, k, v, s0):
    """Run the delta recurrence over a whole sequence in one node.

    Inputs carry time on the second-to-last axis, [..., n, d]; the result
    stacks the post-update states as [..., n, d, d]. The backward pass is
    ordinary backprop-through-time over the saved states.
    """
    wv, av = np.asarray(val(w), float), np.asarray(val(a), float)
    khv, kv = np.asarray(val(kappa_hat), float), np.asarray(val(k), float)
    vv, s0v = np.asarray(val(v), float), np.asarray(val(s0), float)
    n = wv.shape[-2]
    states = np.empty(wv.shape[:-1] + (wv.shape[-1], wv.shape[-1]))
    transitions = []
    s = s0v
    for t in range(n):
        trans = _delta_transition(wv[..., t, :], av[..., t, :], khv[..., t, :])
        s = _delta_core(s, trans, kv[..., t, :], vv[..., t, :])
        states[..., t, :, :] = s
        transitions.append(trans)
    if not _any_var(w, a, kappa_hat, k, v, s0):
        return states

    def backward_scan(g):
        dw, da = np.zeros_like(wv), np.zeros_like(av)
        dkh, dk, dv = np.zeros_like(khv), np.zeros_like(kv), np.zeros_like(vv)
        carry = np.zeros_like(s0v)
        for t in range(n - 1, -1, -1):
            g_t = g[..., t, :, :] + carry
            s_prev = states[..., t - 1, :, :] if t > 0 else s0v
            w_t, a_t, kh_t = wv[..., t, :], av[..., t, :], khv[..., t, :]
            ds, dw_t, da_t, dkh_t, dk_t, dv_t = _delta_grads(
                g_t, s_prev, w_t, a_t, kh_t, kv[..., t, :], vv[..., t, :],
                transitions[t])
            dw[..., t, :] = dw_t
            da[..., t, :] = da_t
            dkh[..., t, :] = dkh_t
            dk[..., t, :] = dk_t
            dv[..., t, :] = dv_t
            carry = ds
        return dw, da, dkh, dk, dv, carry

    cache = {"for": None, "grads": None}

    def shared(idx):
        def grad(g):
            if cache["for"] is not g:
                cache["for"] = g
                cache["grads"] = backward_scan(g)
            return cache["grads"][idx]
        return grad

    return _node(states, (w, a, kappa_hat, k, v, s0),
                 tuple(shared(i) for i in range(6)))


def time_vecmat(u, stack):
    """Per-position row-times-matrix: ``...ti, ...tij -> ...tj``."""
    def fwd(uv, sv):
        return np.matmul(uv[..., None, :], sv)[..., 0, :]

    if not _any_var(u, stack):
        return fwd(np.asarray(val(u), float), np.asarray(val(stack), float))
    uv = np.asarray(val(u), float)
    sv = np.asarray(val(stack), float)
    return _node(fwd(uv, sv), (u, stack), (
        lambda g: _unbroadcast(
            np.matmul(g[..., None, :], _swap_last2(sv))[..., 0, :], uv.shape),
        lambda g: _unbroadcast(uv[..., :, None] * g[..., None, :], sv.shape),
    ))


# ---------------------------------------------------------------------------
# heads and losses
# ---------------------------------------------------------------------------

def embedding_lookup(table, ids):
    ids = np.asarray(ids)
    if not is_var(table):
        return np.asarray(table, float)[ids]

    def grad(g):
        gt = np.zeros_like(table.value)
        np.add.at(gt, ids, g)
        return gt

    return _node(table.value[ids], (table,), (grad,))


def masked_cross_entropy(logits, targets, mask):
    """Mean next-token NLL over mask-selected positions.

    ``logits``: [..., n, vocab]; ``targets``: int ids [..., n]; ``mask``:
    {0,1} per position. Positions with mask 0 contribute exactly nothing.
    """
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=np.float64)
    denom = mask.sum()
    if denom <= 0:
        raise ValueError("masked_cross_entropy needs at least one unmasked position")

    def fwd(z):
        zmax = np.max(z, axis=-1, keepdims=True)
        lse = zmax[..., 0] + np.log(np.sum(np.exp(z - zmax), axis=-1))
        picked = np.take_along_axis(z, targets[..., None], axis=-1)[..., 0]
        nll = lse - picked
        return np.sum(nll * mask) / denom

    if not is_var(logits):
        return fwd(np.asarray(logits, float))
    zv = logits.value
    loss = fwd(zv)

    def grad(g):
        zmax = np.max(zv, axis=-1, keepdims=True)
        ez = np.exp(zv - zmax)
        probs = ez / np.sum(ez, axis=-1, keepdims=True)
        dz = probs.copy()
        np.put_along_axis(
            dz, targets[..., None],
            np.take_along_axis(dz, targets[..., None], axis=-1) - 1.0, axis=-1)
        return dz * (mask[..., None] * (float(g) / denom))

    return _node(np.asarray(loss), (logits,), (grad,))


def sum_all(x):
    if not is_var(x):
        return np.sum(np.asarray(x, float))
    shape = x.value.shape
    return _node(np.asarray(np.sum(x.value)), (x,),
                 (lambda g: np.broadcast_to(g, shape).copy(),))
