"""Recurrent heads: LSTM cells, stacks, residual arcs, encoder/decoder."""

import numpy as np
import pytest

from hierpath.errors import DimensionError
from hierpath.recurrent import (BiLstmLayer, LstmCell, ResidualArc, RnnStack,
                                Seq2Seq, orthogonal_init, residual_output,
                                rnn_forward)
from hierpath.tensor import Tensor, finite_diff_grad

from conftest import rel_err

rng = np.random.default_rng(7)


# -- orthogonal init ---------------------------------------------------------


def test_orthogonal_square():
    q = orthogonal_init(4, 4, np.random.default_rng(0))
    assert np.max(np.abs(q.T @ q - np.eye(4))) < 1e-6


def test_orthogonal_tall():
    q = orthogonal_init(6, 3, np.random.default_rng(0))
    assert np.max(np.abs(q.T @ q - np.eye(3))) < 1e-6


def test_orthogonal_wide():
    q = orthogonal_init(3, 6, np.random.default_rng(0))
    assert np.max(np.abs(q @ q.T - np.eye(3))) < 1e-6


def test_orthogonal_deterministic():
    a = orthogonal_init(5, 5, np.random.default_rng(42))
    b = orthogonal_init(5, 5, np.random.default_rng(42))
    assert np.array_equal(a, b)


def test_orthogonal_many_shapes():
    local = np.random.default_rng(11)
    for _ in range(100):
        r, c = int(local.integers(1, 12)), int(local.integers(1, 12))
        q = orthogonal_init(r, c, np.random.default_rng(local.integers(1 << 30)))
        small = min(r, c)
        gram = q.T @ q if r >= c else q @ q.T
        assert np.max(np.abs(gram - np.eye(small))) < 1e-6


# -- LSTM cell ---------------------------------------------------------------


def naive_lstm_step(params, x, h, c):
    def sig(v):
        return 1.0 / (1.0 + np.exp(-v))

    def gate(name):
        return x @ params[f"{name}_wx"].data + h @ params[f"{name}_wh"].data \
            + params[f"{name}_b"].data

    i, f = sig(gate("input")), sig(gate("forget"))
    o, g = sig(gate("output")), np.tanh(gate("candidate"))
    c_next = f * c + i * g
    return o * np.tanh(c_next), c_next


def test_lstm_step_matches_naive():
    cell = LstmCell(3, 4, np.random.default_rng(0))
    x = Tensor(rng.standard_normal((2, 3)))
    h, c = cell.initial_state(2)
    h2, c2 = cell.step(x, h, c)
    nh, nc = naive_lstm_step(cell.params, x.data, h.data, c.data)
    assert rel_err(h2.data, nh) < 1e-12
    assert rel_err(c2.data, nc) < 1e-12


def test_lstm_forget_bias_is_one():
    cell = LstmCell(3, 4, np.random.default_rng(0))
    assert np.array_equal(cell.params["forget_b"].data, np.ones(4))
    assert np.array_equal(cell.params["input_b"].data, np.zeros(4))


def test_lstm_rejects_wrong_input_size():
    cell = LstmCell(3, 4, np.random.default_rng(0))
    h, c = cell.initial_state(1)
    with pytest.raises(DimensionError):
        cell.step(Tensor(np.zeros((1, 5))), h, c)


def test_lstm_states_stay_finite_over_100_steps():
    cell = LstmCell(3, 4, np.random.default_rng(0))
    h, c = cell.initial_state(1)
    for t in range(100):
        x = Tensor(np.sin(np.arange(3, dtype=float) + t).reshape(1, 3))
        h, c = cell.step(x, h, c)
    assert np.all(np.isfinite(h.data)) and np.all(np.isfinite(c.data))
    assert np.max(np.abs(h.data)) <= 1.0  # tanh(.)*sigmoid(.) is bounded


# -- stacks ------------------------------------------------------------------


def test_bilstm_concatenates_directions():
    layer = BiLstmLayer(3, 4, np.random.default_rng(0))
    inputs = [Tensor(rng.standard_normal((2, 3))) for _ in range(3)]
    outputs, final = layer.forward(inputs)
    assert all(o.shape == (2, 8) for o in outputs)
    assert final.shape == (2, 8)


def test_rnn_stack_output_dimension():
    stack = RnnStack(5, 4, 2, 7, np.random.default_rng(0))
    inputs = [Tensor(rng.standard_normal((3, 5))) for _ in range(4)]
    outputs, final = rnn_forward(inputs, stack)
    assert len(outputs) == 4
    assert all(o.shape == (3, 7) for o in outputs)


def test_rnn_stack_deterministic():
    inputs = [rng.standard_normal((2, 5)) for _ in range(3)]
    outs = []
    for _ in range(2):
        stack = RnnStack(5, 4, 1, 6, np.random.default_rng(9))
        seq, _ = stack.forward([Tensor(x) for x in inputs])
        outs.append(np.stack([o.data for o in seq]))
    assert np.array_equal(outs[0], outs[1])


def test_rnn_stack_needs_input():
    stack = RnnStack(5, 4, 1, 6, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        stack.forward([])


def test_rnn_stack_gradcheck():
    stack = RnnStack(3, 2, 1, 4, np.random.default_rng(1))
    xs = [rng.standard_normal((1, 3)) for _ in range(2)]

    def loss():
        seq, _ = stack.forward([Tensor(x) for x in xs])
        total = seq[0].sum()
        for o in seq[1:]:
            total = total + (o * o).sum()
        return total

    loss().backward()
    params = stack.parameters()
    for name in ("layer0.fwd.input_wx", "layer0.bwd.candidate_wh", "proj.w"):
        p = params[name]
        grad = p.grad.copy()
        saved = p.data.copy()

        def f(v, p=p, saved=saved):
            p.data = v.data
            out = float(loss().data)
            p.data = saved
            return out

        fd = finite_diff_grad(f, Tensor(saved), 1e-5)
        assert rel_err(grad, fd) < 1e-4, name


# -- residual arcs -----------------------------------------------------------


def test_residual_zero_params_is_aligned_features():
    arc = ResidualArc(6, 4, np.random.default_rng(0))
    u = Tensor(rng.standard_normal((2, 6)))
    o = Tensor(rng.standard_normal((2, 4)))
    out = residual_output(u, o, arc)
    assert np.array_equal(out.data, u.data @ arc.align.data)


def test_residual_zero_features_is_z_branch():
    arc = ResidualArc(6, 4, np.random.default_rng(0))
    arc.z_w.data = rng.standard_normal((4, 4))
    arc.z_b.data = rng.standard_normal(4)
    o = Tensor(rng.standard_normal((2, 4)))
    out = residual_output(Tensor(np.zeros((2, 6))), o, arc)
    assert rel_err(out.data, o.data @ arc.z_w.data + arc.z_b.data) < 1e-12


def test_residual_is_sum_of_branches():
    arc = ResidualArc(6, 4, np.random.default_rng(0))
    arc.z_w.data = rng.standard_normal((4, 4))
    u = Tensor(rng.standard_normal((2, 6)))
    o = Tensor(rng.standard_normal((2, 4)))
    out = residual_output(u, o, arc)
    expect = (u.data @ arc.align.data) + (o.data @ arc.z_w.data + arc.z_b.data)
    assert rel_err(out.data, expect) < 1e-12


def test_residual_align_not_trainable():
    arc = ResidualArc(6, 4, np.random.default_rng(0))
    assert not arc.align.requires_grad
    assert set(arc.parameters()) == {"z.w", "z.b"}


def test_residual_dimension_checks():
    arc = ResidualArc(6, 4, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        arc.apply(Tensor(np.zeros((1, 5))), Tensor(np.zeros((1, 4))))
    with pytest.raises(DimensionError):
        arc.apply(Tensor(np.zeros((1, 6))), Tensor(np.zeros((1, 3))))


# -- seq2seq -----------------------------------------------------------------


def test_s2s_encode_shape():
    s2s = Seq2Seq(5, 4, 1, 6, np.random.default_rng(0))
    us = [Tensor(rng.standard_normal((3, 5))) for _ in range(2)]
    h0 = s2s.encode(us)
    assert h0.shape == (3, 4)


def test_s2s_single_step_decode():
    s2s = Seq2Seq(5, 4, 1, 6, np.random.default_rng(0))
    us = [Tensor(rng.standard_normal((1, 5)))]
    outs = s2s.decode(s2s.encode(us), 1)
    assert len(outs) == 1 and outs[0].shape == (1, 6)


def test_s2s_decode_deterministic():
    s2s = Seq2Seq(5, 4, 1, 6, np.random.default_rng(0))
    us = [Tensor(rng.standard_normal((2, 5))) for _ in range(3)]
    a = [o.data for o in s2s.decode(s2s.encode(us), 3)]
    b = [o.data for o in s2s.decode(s2s.encode(us), 3)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_s2s_teacher_forcing_changes_later_steps_only():
    s2s = Seq2Seq(5, 4, 1, 6, np.random.default_rng(0))
    us = [Tensor(rng.standard_normal((1, 5))) for _ in range(2)]
    h0 = s2s.encode(us)
    teacher = [Tensor(np.eye(6)[2:3]), Tensor(np.eye(6)[4:5])]
    forced = s2s.decode(h0, 3, teacher=teacher)
    free = s2s.decode(h0, 3)
    assert np.array_equal(forced[0].data, free[0].data)  # step 1 shares input
    assert not np.array_equal(forced[1].data, free[1].data)


def test_s2s_full_gradcheck():
    s2s = Seq2Seq(3, 2, 1, 4, np.random.default_rng(5))
    us_data = [rng.standard_normal((1, 3)) for _ in range(2)]
    teacher = [Tensor(np.eye(4)[1:2])]

    def loss():
        h0 = s2s.encode([Tensor(x) for x in us_data])
        outs = s2s.decode(h0, 2, teacher=teacher)
        total = (outs[0] * outs[0]).sum()
        for o in outs[1:]:
            total = total + (o * o).sum()
        return total

    loss().backward()
    params = s2s.parameters()
    for name in ("enc.layer0.fwd.input_wx", "reduce.w", "dec.forget_wh",
                 "dec.proj.w"):
        p = params[name]
        grad = p.grad.copy()
        saved = p.data.copy()

        def f(v, p=p, saved=saved):
            p.data = v.data
            out = float(loss().data)
            p.data = saved
            return out

        fd = finite_diff_grad(f, Tensor(saved), 1e-5)
        assert rel_err(grad, fd) < 1e-4, name
