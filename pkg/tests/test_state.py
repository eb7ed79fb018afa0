import math

import numpy as np
import pytest

from wuneng.numerics import NumericOverflow, Rng, ShapeError, init_glorot
from wuneng.state import (HeadState, StateParams, TokenStateInputs,
                          delta_rule_step, init_state_params, recurrence_stack,
                          run_recurrence, state_readout, token_state_inputs)

from oracles import delta_step_scripted, naive_matmul


def params(d_model=4, d_k=2, seed=0):
    return init_state_params(d_model, d_k, Rng(seed))


def test_token_inputs_zero_input_gates():
    p = params()
    ins = token_state_inputs(np.zeros(4), np.zeros(4), p)
    assert np.allclose(ins.w, math.exp(-math.log(2.0)), atol=1e-15)  # 0.5
    assert np.allclose(ins.a, 0.5, atol=1e-15)
    assert np.array_equal(ins.kappa_hat, np.zeros(2))
    assert np.array_equal(ins.k, np.zeros(2))
    assert np.array_equal(ins.v, np.zeros(2))


def test_token_inputs_zero_raw_kappa_stays_zero():
    p = params(seed=1)
    ins = token_state_inputs(np.zeros(4), np.ones(4), p)
    assert np.array_equal(ins.kappa_hat, np.zeros(2))


def test_token_inputs_match_affine_composition():
    p = params(seed=2)
    rng = Rng(3)
    x = init_glorot(1, 4, rng)[0]
    fused = init_glorot(1, 4, rng)[0]
    ins = token_state_inputs(x, fused, p)

    def row(mat, vec, bias=None):
        out = naive_matmul(vec[None, :], mat)[0]
        return out if bias is None else out + bias

    soft = np.log1p(np.exp(row(p.w_decay, x, p.b_decay)))
    assert np.allclose(ins.w, np.exp(-soft), atol=1e-12)
    assert np.allclose(ins.a, 1.0 / (1.0 + np.exp(-row(p.w_icl, x, p.b_icl))),
                       atol=1e-12)
    raw = row(p.w_kappa, x)
    assert np.allclose(ins.kappa_hat, raw / np.linalg.norm(raw), atol=1e-12)
    assert np.allclose(ins.k, row(p.w_repl, x), atol=1e-12)
    assert np.allclose(ins.v, row(p.w_sv, fused), atol=1e-12)


def test_gate_ranges_on_random_tokens():
    p = params(seed=4)
    rng = Rng(5)
    n = 10_000
    x = init_glorot(n, 4, rng) * 4.0
    fused = init_glorot(n, 4, rng)
    for i in range(0, n, 500):
        ins = token_state_inputs(x[i], fused[i], p)
        assert np.all(ins.w > 0.0) and np.all(ins.w <= 1.0)
        assert np.all(ins.a > 0.0) and np.all(ins.a < 1.0)
        norm = np.linalg.norm(ins.kappa_hat)
        assert abs(norm - 1.0) < 1e-12 or norm == 0.0


def test_delta_step_pure_write():
    s = init_glorot(2, 2, Rng(6))
    ins = TokenStateInputs(w=np.ones(2), kappa_hat=np.array([1.0, 0.0]),
                           k=np.array([3.0, 4.0]), v=np.array([1.0, 2.0]),
                           a=np.zeros(2))
    out = delta_rule_step(HeadState(s), ins)
    assert np.allclose(out.s, s + np.outer([1.0, 2.0], [3.0, 4.0]), atol=1e-14)


def test_delta_step_from_zero_state():
    ins = TokenStateInputs(w=np.full(2, 0.5), kappa_hat=np.zeros(2),
                           k=np.array([1.0, -1.0]), v=np.array([2.0, 0.5]),
                           a=np.full(2, 0.5))
    out = delta_rule_step(HeadState(np.zeros((2, 2))), ins)
    assert np.allclose(out.s, np.outer([2.0, 0.5], [1.0, -1.0]), atol=1e-15)


def test_delta_step_scripted_2x2_case():
    s_prev = np.array([[1.0, 2.0], [3.0, 4.0]])
    w = np.array([1.0, 1.0])
    a = np.array([1.0, 1.0])
    kappa = np.array([1.0, 0.0])
    v = np.array([1.0, 2.0])
    k = np.array([3.0, 4.0])
    got = delta_rule_step(
        HeadState(s_prev),
        TokenStateInputs(w=w, kappa_hat=kappa, k=k, v=v, a=a)).s
    expect = delta_step_scripted(s_prev, w, a, kappa, k, v)
    assert np.allclose(got, expect, atol=1e-14)
    assert np.allclose(got, np.array([[3.0, 6.0], [6.0, 12.0]]), atol=1e-14)


def test_delta_step_matches_scripted_on_random_cases():
    rng = Rng(7)
    for _ in range(25):
        d = 3
        s = init_glorot(d, d, rng) * 2.0
        w = rng.uniforms(d) * 0.7 + 0.3
        a = rng.uniforms(d) * 0.8 + 0.1
        kappa = init_glorot(1, d, rng)[0]
        kappa /= np.linalg.norm(kappa)
        k = init_glorot(1, d, rng)[0]
        v = init_glorot(1, d, rng)[0]
        got = delta_rule_step(HeadState(s), TokenStateInputs(
            w=w, kappa_hat=kappa, k=k, v=v, a=a)).s
        assert np.allclose(got, delta_step_scripted(s, w, a, kappa, k, v),
                           atol=1e-12)


def test_erase_then_write_identity():
    rng = Rng(8)
    for _ in range(100):
        d = 4
        s = init_glorot(d, d, rng) * 3.0
        kappa = init_glorot(1, d, rng)[0]
        kappa /= np.linalg.norm(kappa)
        k = init_glorot(1, d, rng)[0]
        v = init_glorot(1, d, rng)[0]
        out = delta_rule_step(HeadState(s), TokenStateInputs(
            w=np.ones(d), kappa_hat=kappa, k=k, v=v, a=np.ones(d))).s
        response = out @ kappa
        expect = v * float(np.dot(k, kappa))
        assert np.max(np.abs(response - expect)) < 1e-10


def test_delta_step_nonfinite_raises_with_token():
    ins = TokenStateInputs(w=np.ones(2), kappa_hat=np.zeros(2),
                           k=np.array([1e308, 1e308]), v=np.array([1e308, 0.0]),
                           a=np.zeros(2))
    with np.errstate(over="ignore"), pytest.raises(NumericOverflow) as exc:
        delta_rule_step(HeadState(np.zeros((2, 2))), ins, token_index=5)
    assert "token 5" in str(exc.value)


def test_boundedness_under_pure_decay():
    rng = Rng(9)
    s = init_glorot(3, 3, rng)
    prev = HeadState(s.copy())
    for step in range(5):
        w = rng.uniforms(3) * 0.6 + 0.4
        kappa = init_glorot(1, 3, rng)[0]
        kappa /= np.linalg.norm(kappa)
        nxt = delta_rule_step(prev, TokenStateInputs(
            w=w, kappa_hat=kappa, k=init_glorot(1, 3, rng)[0],
            v=np.zeros(3), a=np.zeros(3)))
        assert np.linalg.norm(nxt.s) <= np.linalg.norm(prev.s) + 1e-12
        prev = nxt


def test_run_recurrence_single_token():
    p = params(seed=10)
    rng = Rng(11)
    x = init_glorot(1, 4, rng)
    fused = init_glorot(1, 4, rng)
    states = run_recurrence(x, fused, p)
    direct = delta_rule_step(HeadState(np.zeros((2, 2))),
                             token_state_inputs(x[0], fused[0], p))
    assert len(states) == 1
    assert np.allclose(states[0].s, direct.s, atol=1e-14)


def test_run_recurrence_zero_input_fixpoint():
    p = params(seed=12)
    states = run_recurrence(np.zeros((5, 4)), np.zeros((5, 4)), p)
    for st in states:
        assert np.array_equal(st.s, np.zeros((2, 2)))


def test_run_recurrence_matches_token_fold():
    p = params(seed=13)
    rng = Rng(14)
    x = init_glorot(4, 4, rng)
    fused = init_glorot(4, 4, rng)
    states = run_recurrence(x, fused, p)
    s = HeadState(np.zeros((2, 2)))
    for t in range(4):
        s = delta_rule_step(s, token_state_inputs(x[t], fused[t], p))
        assert np.allclose(states[t].s, s.s, atol=1e-12)


def test_run_recurrence_causality():
    p = params(seed=15)
    rng = Rng(16)
    x = init_glorot(6, 4, rng)
    fused = init_glorot(6, 4, rng)
    states = run_recurrence(x, fused, p)
    x2 = x.copy()
    x2[4] += 10.0
    states2 = run_recurrence(x2, fused, p)
    for t in range(4):
        assert np.array_equal(states[t].s, states2[t].s)
    assert not np.array_equal(states[4].s, states2[4].s)


def test_run_recurrence_length_check():
    p = params(seed=17)
    with pytest.raises(ShapeError):
        run_recurrence(np.zeros((3, 4)), np.zeros((2, 4)), p)


def test_recurrence_stack_equals_fold():
    p = params(seed=18)
    rng = Rng(19)
    x = init_glorot(5, 4, rng)
    fused = init_glorot(5, 4, rng)
    stack = recurrence_stack(x, fused, p)
    states = run_recurrence(x, fused, p)
    for t in range(5):
        assert np.array_equal(stack[t], states[t].s)


def test_recurrence_stack_batched_matches_per_sequence():
    p = params(seed=20)
    rng = Rng(21)
    x = np.stack([init_glorot(4, 4, rng) for _ in range(3)])
    fused = np.stack([init_glorot(4, 4, rng) for _ in range(3)])
    stacked = recurrence_stack(x, fused, p)
    for b in range(3):
        single = recurrence_stack(x[b], fused[b], p)
        assert np.allclose(stacked[b], single, atol=1e-14)


def test_state_readout_alpha_zero():
    p = params(seed=22)
    out = state_readout(HeadState(np.ones((2, 2))), np.ones(4), p.w_hat_k,
                        np.zeros(1))
    assert np.array_equal(out, np.zeros(2))


def test_state_readout_identity_state():
    p = params(seed=23)
    x = init_glorot(1, 4, Rng(24))[0]
    out = state_readout(HeadState(np.eye(2)), x, p.w_hat_k, np.ones(1))
    assert np.allclose(out, naive_matmul(x[None, :], p.w_hat_k)[0], atol=1e-12)


def test_state_readout_matches_matmul_oracle():
    p = params(seed=25)
    rng = Rng(26)
    x = init_glorot(1, 4, rng)[0]
    s = init_glorot(2, 2, rng)
    alpha = np.array([0.37])
    out = state_readout(HeadState(s), x, p.w_hat_k, alpha)
    key = naive_matmul(x[None, :], p.w_hat_k)
    assert np.allclose(out, 0.37 * naive_matmul(key, s)[0], atol=1e-12)
