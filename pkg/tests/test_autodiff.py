"""Finite-difference checks for every autodiff op, plus tape mechanics."""

import numpy as np
import pytest

from wuneng import autodiff as ad
from wuneng.numerics import Rng, init_glorot

RNG = np.random.default_rng(20240405)


def fd_grad(fn, args, which, h=1e-6):
    """Central-difference gradient of sum(fn(*args) * probe) wrt args[which]."""
    probe = RNG.standard_normal(np.shape(fn(*args)))

    def loss(mod_args):
        return float(np.sum(fn(*mod_args) * probe))

    base = [np.array(a, dtype=float) for a in args]
    g = np.zeros_like(base[which])
    flat, gflat = base[which].reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss(base)
        flat[i] = orig - h
        down = loss(base)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return g, probe


def analytic_grad(fn, args, which, probe):
    vars_ = [ad.Var(np.array(a, dtype=float)) for a in args]
    out = fn(*vars_)
    ad.backward(ad.sum_all(ad.mul(out, probe)))
    grad = vars_[which].grad
    return np.zeros_like(vars_[which].value) if grad is None else grad


def check_op(fn, args, rel=2e-6, abs_tol=1e-8):
    for which in range(len(args)):
        numeric, probe = fd_grad(fn, args, which)
        analytic = analytic_grad(fn, args, which, probe)
        err = np.abs(analytic - numeric)
        ok = (err <= abs_tol) | (err <= rel * np.maximum(np.abs(analytic),
                                                         np.abs(numeric)))
        assert np.all(ok), (fn.__name__, which, err.max())


def test_add_sub_mul_broadcast():
    a = RNG.standard_normal((3, 4))
    b = RNG.standard_normal(4)
    s = RNG.standard_normal(1)
    check_op(ad.add, [a, b])
    check_op(ad.sub, [a, b])
    check_op(ad.mul, [a, b])
    check_op(ad.mul, [s, a])


def test_matmul_shapes():
    check_op(ad.matmul, [RNG.standard_normal((3, 4)), RNG.standard_normal((4, 2))])
    check_op(ad.matmul, [RNG.standard_normal((2, 3, 4)), RNG.standard_normal((4, 2))])
    check_op(ad.matmul, [RNG.standard_normal((2, 3, 4)),
                         RNG.standard_normal((2, 4, 2))])
    check_op(ad.matmul, [RNG.standard_normal(4), RNG.standard_normal((4, 2))])
    check_op(ad.matmul, [RNG.standard_normal((3, 4)), RNG.standard_normal(4)])


def test_elementwise_nonlinearities():
    x = RNG.standard_normal((2, 5)) * 2.0
    check_op(ad.sigmoid, [x])
    check_op(ad.exp, [x * 0.3])
    check_op(ad.softplus, [x])
    check_op(ad.relu_squared, [x + 0.05])  # keep clear of the kink


def test_l2_normalize_rows():
    x = RNG.standard_normal((3, 4)) + 0.1
    check_op(ad.l2_normalize_rows, [x])


def test_l2_normalize_zero_row_stays_zero():
    x = np.zeros((2, 3))
    x[1] = [3.0, 0.0, 4.0]
    out = ad.l2_normalize_rows(x)
    assert np.array_equal(out[0], np.zeros(3))
    assert np.allclose(np.linalg.norm(out[1]), 1.0, atol=1e-12)
    v = ad.Var(x)
    ad.backward(ad.sum_all(ad.mul(ad.l2_normalize_rows(v), RNG.standard_normal((2, 3)))))
    assert np.array_equal(v.grad[0], np.zeros(3))


def test_softmax_causal_and_full():
    x = RNG.standard_normal((4, 4)) * 2.0
    check_op(lambda s: ad.softmax_causal(s, causal=True), [x])
    check_op(lambda s: ad.softmax_causal(s, causal=False), [x])


def test_layer_norm_rows():
    x = RNG.standard_normal((3, 6))
    scale = RNG.standard_normal(6)
    shift = RNG.standard_normal(6)
    check_op(lambda a, b, c: ad.layer_norm_rows(a, b, c, 1e-5), [x, scale, shift])


def test_structural_ops():
    x = RNG.standard_normal((2, 3, 4))
    check_op(ad.transpose_last2, [x])
    check_op(lambda v: ad.reshape(v, (6, 4)), [x])
    check_op(lambda v: ad.select_time(v, 1), [x])
    check_op(ad.diag_embed, [RNG.standard_normal((2, 4))])
    check_op(lambda a, b: ad.concat_last([a, b]),
             [RNG.standard_normal((2, 3)), RNG.standard_normal((2, 2))])
    check_op(lambda a, b: ad.stack_rows([a, b]),
             [RNG.standard_normal((2, 4)), RNG.standard_normal((2, 4))])


def test_vecmat_outer_time_vecmat():
    check_op(ad.vecmat, [RNG.standard_normal((2, 4)),
                         RNG.standard_normal((2, 4, 4))])
    check_op(ad.outer, [RNG.standard_normal((2, 3)), RNG.standard_normal((2, 3))])
    check_op(ad.time_vecmat, [RNG.standard_normal((2, 5, 3)),
                              RNG.standard_normal((2, 5, 3, 3))])


def test_delta_step_all_inputs():
    s = RNG.standard_normal((4, 4))
    w = RNG.uniform(0.4, 0.95, 4)
    a = RNG.uniform(0.2, 0.8, 4)
    kh = RNG.standard_normal(4)
    kh /= np.linalg.norm(kh)
    k = RNG.standard_normal(4)
    v = RNG.standard_normal(4)
    check_op(ad.delta_step, [s, w, a, kh, k, v])


def test_delta_scan_matches_step_fold():
    n, d = 5, 3
    w = RNG.uniform(0.4, 0.95, (n, d))
    a = RNG.uniform(0.2, 0.8, (n, d))
    kh = RNG.standard_normal((n, d))
    kh /= np.linalg.norm(kh, axis=-1, keepdims=True)
    k = RNG.standard_normal((n, d))
    v = RNG.standard_normal((n, d))
    s0 = np.zeros((d, d))
    stacked = ad.delta_scan(w, a, kh, k, v, s0)
    s = s0
    for t in range(n):
        s = ad.delta_step(s, w[t], a[t], kh[t], k[t], v[t])
        assert np.array_equal(stacked[t], s)
    check_op(ad.delta_scan, [w, a, kh, k, v, s0])


def test_embedding_lookup_grad():
    table = RNG.standard_normal((7, 3))
    ids = np.array([[0, 2, 2], [5, 0, 6]])
    probe = RNG.standard_normal((2, 3, 3))
    var = ad.Var(table.copy())
    ad.backward(ad.sum_all(ad.mul(ad.embedding_lookup(var, ids), probe)))
    expected = np.zeros_like(table)
    for b in range(2):
        for t in range(3):
            expected[ids[b, t]] += probe[b, t]
    assert np.allclose(var.grad, expected, atol=1e-12)


def test_masked_cross_entropy_grad_and_value():
    logits = RNG.standard_normal((2, 4, 5))
    targets = RNG.integers(0, 5, (2, 4))
    mask = np.array([[1, 0, 1, 1], [0, 1, 1, 0]])

    def fn(z):
        return ad.masked_cross_entropy(z, targets, mask)

    h = 1e-6
    numeric = np.zeros_like(logits)
    work = logits.copy()
    flat, gflat = work.reshape(-1), numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(fn(work))
        flat[i] = orig - h
        down = float(fn(work))
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    var = ad.Var(logits.copy())
    loss = fn(var)
    ad.backward(loss)
    assert np.allclose(var.grad, numeric, atol=1e-8)
    # masked positions contribute no gradient
    assert np.array_equal(var.grad[0, 1], np.zeros(5))
    with pytest.raises(ValueError):
        ad.masked_cross_entropy(logits, targets, np.zeros_like(mask))


def test_shared_subexpression_accumulates():
    x = ad.Var(np.array([3.0]))
    y = ad.add(ad.mul(x, x), x)  # x^2 + x
    ad.backward(y)
    assert np.allclose(x.grad, [7.0])


def test_backward_requires_scalar():
    x = ad.Var(np.ones(3))
    with pytest.raises(ValueError):
        ad.backward(ad.mul(x, 2.0))


def test_plain_inputs_stay_plain():
    a = np.ones((2, 2))
    for out in (ad.matmul(a, a), ad.sigmoid(a), ad.softmax_causal(a),
                ad.delta_step(a, a[0], a[0], a[0], a[0], a[0])):
        assert isinstance(out, np.ndarray)


def test_mixed_ndarray_var_dispatch():
    a = np.ones((2, 2))
    v = ad.Var(np.full((2, 2), 2.0))
    assert isinstance(a @ v, ad.Var)
    assert isinstance(a + v, ad.Var)
    assert isinstance(a * v, ad.Var)
    assert np.array_equal((a @ v).value, np.full((2, 2), 4.0))
