import math

import numpy as np
import pytest

from ctxlm import numeric as nm, rlm
from ctxlm.corpus import Sentence
from ctxlm.numeric import Tape, Variable
from ctxlm.rlm import LstmState, init_rlm_parameters, lstm_step, output_distribution


def zero_params(vocab_size=4, d_emb=3, d_h=2):
    rng = np.random.Generator(np.random.PCG64(0))
    params = init_rlm_parameters(vocab_size, d_emb, d_h, rng, np.float64)
    for p in params.values():
        p.value[...] = 0.0
    return params


def rand_params(vocab_size=6, d_emb=3, d_h=4, seed=3):
    rng = np.random.Generator(np.random.PCG64(seed))
    return init_rlm_parameters(vocab_size, d_emb, d_h, rng, np.float64)


def row(*vals):
    return Variable(np.array([list(vals)], dtype=np.float64))


def test_lstm_step_zero_parameters():
    params = zero_params()
    state = rlm.zero_state(1, 2, np.float64)
    out = lstm_step(row(1.0, -2.0, 0.5), state, params)
    assert np.all(out.h.value == 0.0)
    assert np.all(out.c.value == 0.0)


def test_lstm_step_scalar_hand_formula():
    params = zero_params(d_emb=1, d_h=1)
    w = {"W_i": 0.5, "U_i": -0.3, "b_i": 0.1, "W_o": 0.2, "U_o": 0.4, "b_o": -0.2,
         "W_f": -0.7, "U_f": 0.6, "b_f": 0.3, "W_c": 1.1, "U_c": -0.9, "b_c": 0.05}
    for name, val in w.items():
        params[name].value[...] = val
    x, h0, c0 = 0.7, -0.2, 0.4
    state = LstmState(row(h0), row(c0))
    out = lstm_step(row(x), state, params)

    sig = lambda z: 1.0 / (1.0 + math.exp(-z))
    i = sig(w["W_i"] * x + w["U_i"] * h0 + w["b_i"])
    o = sig(w["W_o"] * x + w["U_o"] * h0 + w["b_o"])
    f = sig(w["W_f"] * x + w["U_f"] * h0 + w["b_f"])
    c1 = f * c0 + i * math.tanh(w["W_c"] * x + w["U_c"] * h0 + w["b_c"])
    h1 = o * math.tanh(c1)
    assert out.c.value[0, 0] == pytest.approx(c1, abs=1e-12)
    assert out.h.value[0, 0] == pytest.approx(h1, abs=1e-12)


def test_lstm_step_saturated_gates_retain_memory():
    params = rand_params(d_emb=3, d_h=4)
    params["b_f"].value[...] = 20.0
    params["b_i"].value[...] = -20.0
    c0 = np.array([[0.3, -0.8, 0.1, 0.5]])
    state = LstmState(Variable(np.zeros((1, 4))), Variable(c0.copy()))
    out = lstm_step(row(0.2, -0.1, 0.4), state, params)
    assert np.max(np.abs(out.c.value - c0)) < 1e-8


def test_lstm_step_shape_mismatch():
    params = zero_params(d_emb=3, d_h=2)
    state = rlm.zero_state(1, 2, np.float64)
    with pytest.raises(ValueError):
        lstm_step(row(1.0, 2.0), state, params)  # d_emb is 3


def test_output_distribution_uniform_when_zero():
    params = zero_params(vocab_size=4)
    dist = output_distribution(np.zeros(2), params)
    assert np.allclose(dist, 0.25, atol=1e-15)


def test_output_distribution_concentrates_on_large_bias():
    params = zero_params(vocab_size=4)
    params["b_out"].value[2] = 50.0
    dist = output_distribution(np.zeros(2), params)
    assert dist[2] > 0.999999


def test_output_distribution_matches_recomputation():
    params = rand_params()
    h = np.random.default_rng(5).standard_normal(4)
    dist = output_distribution(h, params)
    logits = params["W_out"].value.T @ h + params["b_out"].value
    expect = np.exp(logits - logits.max())
    expect /= expect.sum()
    assert np.max(np.abs(dist - expect)) < 1e-12
    assert abs(dist.sum() - 1.0) < 1e-12


def test_sentence_nll_uniform_model():
    V = 10
    params = zero_params(vocab_size=V)
    s = Sentence((2, 3, 2, 1))  # three content tokens + EOS
    nll = rlm.sentence_nll(s, params)
    assert float(nll.value) == pytest.approx(4 * math.log(V), abs=1e-12)


def test_sentence_nll_nonnegative_and_distributions_normalized():
    params = rand_params()
    s = Sentence((2, 4, 1))
    trace = {}
    nll = rlm.sentence_nll(s, params, trace=trace)
    assert float(nll.value) >= 0.0
    for h in trace["h"]:
        assert abs(output_distribution(h, params).sum() - 1.0) < 1e-12
    assert all(v > 0 for v in trace["nll"])


def test_sentence_nll_gradients_match_finite_differences():
    params = rand_params(vocab_size=5, d_emb=2, d_h=3)
    s = Sentence((2, 3, 1))
    tape = Tape()
    nll = rlm.sentence_nll(s, params, tape=tape)
    tape.backward(nll)
    for name, p in params.items():
        got = p.grad_buffer().copy().ravel()
        shape = p.value.shape

        def f(theta, p=p):
            saved = p.value
            p.value = theta.reshape(shape)
            out = float(rlm.sentence_nll(s, params).value)
            p.value = saved
            return out

        fd = nm.finite_difference_gradient(f, p.value.ravel().copy())
        mask = (np.abs(got) + np.abs(fd)) >= 1e-5
        assert nm.relative_error(got[mask], fd[mask]).max(initial=0.0) < 1e-4, name
        assert np.max(np.abs(got[~mask] - fd[~mask]), initial=0.0) < 1e-8, name
        p.zero_grad()


def test_parameter_count():
    V, d_emb, d_h = 6, 3, 4
    params = init_rlm_parameters(V, d_emb, d_h,
                                 np.random.Generator(np.random.PCG64(0)), np.float64)
    expect = (V + 1) * d_emb  # embedding incl. begin-of-sentence row
    expect += 4 * (d_emb * d_h + d_h * d_h + d_h)
    expect += d_h * V + V
    assert rlm.parameter_count(params) == expect


def test_precision_modes():
    rng = np.random.Generator(np.random.PCG64(0))
    params32 = init_rlm_parameters(4, 2, 2, rng, np.float32)
    assert all(p.dtype == np.float32 for p in params32.values())
    s = Sentence((2, 1))
    out = rlm.sentence_nll(s, params32)
    assert out.value.dtype == np.float32
