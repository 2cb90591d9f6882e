"""Autodiff engine: forward ops, gradients vs finite differences, Adam."""
import numpy as np
import pytest

from branchdiff.autodiff import ParameterStore, Tape, adam_step, backward, forward_dense
from branchdiff.errors import NumericError, ShapeError, StateError
from branchdiff.rng import substream
from helpers import (autodiff_grads, fd_grads, make_random_net, max_rel_err,
                     net_loss_tape, net_loss_value)


def test_forward_dense_identity():
    store = ParameterStore()
    store.add("lin.W", np.eye(4))
    store.add("lin.b", np.zeros(4))
    x = substream(1).standard_normal((6, 4)).astype(np.float32)
    tape = Tape(store)
    out = forward_dense(tape, "lin", tape.input(x))
    np.testing.assert_array_equal(out.value, x)


def test_forward_dense_scalar_case():
    store = ParameterStore()
    store.add("lin.W", [[3.0]])
    store.add("lin.b", [1.0])
    tape = Tape(store)
    out = forward_dense(tape, "lin", tape.input([[2.0]]))
    assert out.value[0, 0] == 7.0


def test_forward_dense_matches_triple_loop():
    rng = substream(2, "dense")
    store = ParameterStore()
    w = rng.standard_normal((4, 3))
    b = rng.standard_normal(3)
    x = rng.standard_normal((5, 4)).astype(np.float32)
    store.add("lin.W", w)
    store.add("lin.b", b)
    tape = Tape(store)
    out = forward_dense(tape, "lin", tape.input(x)).value

    # naive triple-loop oracle
    expect = np.zeros((5, 3))
    w32 = w.astype(np.float32)
    b32 = b.astype(np.float32)
    for i in range(5):
        for j in range(3):
            acc = 0.0
            for k in range(4):
                acc += float(x[i, k]) * float(w32[k, j])
            expect[i, j] = acc + float(b32[j])
    np.testing.assert_allclose(out, expect, rtol=1e-6)


def test_backward_least_squares_analytic():
    # loss = ||x W - y||^2, d loss / d W = 2 x^T (x W - y)
    rng = substream(3, "lsq")
    store = ParameterStore(dtype=np.float64)
    w = rng.standard_normal((3, 2))
    store.add("lin.W", w)
    store.add("lin.b", np.zeros(2))
    x = rng.standard_normal((10, 3))
    y = rng.standard_normal((10, 2))
    tape = Tape(store)
    pred = forward_dense(tape, "lin", tape.input(x))
    resid = tape.add(pred, -y)
    tape.sum_squares(resid)
    backward(tape)
    expect = 2.0 * x.T @ (x @ w - y)
    np.testing.assert_allclose(store["lin.W"].grad, expect, rtol=1e-9)
    np.testing.assert_allclose(store["lin.b"].grad, 2.0 * (x @ w - y).sum(axis=0), rtol=1e-9)


def test_gradients_match_central_differences_f64():
    rng = substream(4, "fd")
    for trial in range(5):
        n_layers = int(rng.integers(1, 4))
        widths = [int(rng.integers(1, 9)) for _ in range(n_layers + 1)]
        store, names = make_random_net(rng, np.float64, n_layers, widths)
        x = rng.standard_normal((4, widths[0]))
        got = autodiff_grads(store, names, x)
        oracle = fd_grads(store, lambda: net_loss_value(store, names, x))
        for name in store.names():
            assert max_rel_err(got[name], oracle[name]) < 1e-4, f"trial {trial} {name}"


def test_gradients_float32_sanity():
    # float32 forward noise limits central differences to ~sqrt(eps32)
    rng = substream(5, "fd32")
    store, names = make_random_net(rng, np.float32, 2, [4, 6, 3])
    x = rng.standard_normal((4, 4)).astype(np.float32)
    got = autodiff_grads(store, names, x)
    oracle = fd_grads(store, lambda: net_loss_value(store, names, x), h=1e-2)
    for name in store.names():
        assert max_rel_err(got[name].astype(np.float64), oracle[name]) < 5e-3


def test_primitive_gradients_vs_fd():
    rng = substream(6, "prims")
    store = ParameterStore(dtype=np.float64)
    store.add("a", rng.standard_normal((5, 3)))
    store.add("table", rng.standard_normal((4, 2)))
    store.add("w", rng.standard_normal((5, 4)))
    idx = np.array([0, 3, 1, 1, 2])
    scale = rng.standard_normal(5)

    def run(record: bool):
        tape = Tape(store, record=record)
        a = tape.param("a")
        emb = tape.gather(tape.param("table"), idx)
        joined = tape.concat([a, emb, tape.param("w")], axis=1)  # (5, 9)
        part = tape.slice_cols(joined, 2, 7)
        scaled = tape.scale_rows(tape.silu(part), scale)
        loss = tape.sum_squares(scaled)
        return tape, loss

    store.zero_grads()
    tape, _ = run(record=True)
    backward(tape)
    got = {n: store[n].grad.copy() for n in store.names()}
    oracle = fd_grads(store, lambda: float(run(record=False)[1].value))
    for name in store.names():
        assert max_rel_err(got[name], oracle[name]) < 1e-6


def test_grad_accumulates_across_tapes():
    store = ParameterStore(dtype=np.float64)
    store.add("lin.W", np.ones((2, 2)))
    store.add("lin.b", np.zeros(2))
    x = np.ones((3, 2))
    for _ in range(2):
        tape = Tape(store)
        loss = tape.sum_squares(forward_dense(tape, "lin", tape.input(x)))
        backward(tape)
    once = ParameterStore(dtype=np.float64)
    once.add("lin.W", np.ones((2, 2)))
    once.add("lin.b", np.zeros(2))
    once_tape = Tape(once)
    once_tape.sum_squares(forward_dense(once_tape, "lin", once_tape.input(x)))
    backward(once_tape)
    np.testing.assert_allclose(store["lin.W"].grad, 2.0 * once["lin.W"].grad)


def test_double_backward_raises():
    store = ParameterStore()
    store.add("lin.W", np.ones((2, 2)))
    store.add("lin.b", np.zeros(2))
    tape = Tape(store)
    tape.sum_squares(forward_dense(tape, "lin", tape.input(np.ones((1, 2)))))
    backward(tape)
    with pytest.raises(StateError):
        backward(tape)


def test_backward_without_forward_raises():
    with pytest.raises(StateError):
        backward(Tape(ParameterStore()))
    with pytest.raises(StateError):
        backward(Tape(ParameterStore(), record=False))


def test_shape_errors():
    store = ParameterStore()
    store.add("w", np.ones((3, 2)))
    tape = Tape(store)
    with pytest.raises(ShapeError):
        tape.matmul(tape.input(np.ones((2, 2))), tape.param("w"))
    with pytest.raises(ShapeError):
        tape.add_bias(tape.input(np.ones((2, 2))), tape.param("w"))


def test_frozen_entries_bit_identical_through_training():
    rng = substream(7, "frozen")
    store, names = make_random_net(rng, np.float32, 2, [3, 4, 2])
    store.freeze([f"{names[0]}.W", f"{names[0]}.b"])
    before = {n: store[n].value.tobytes() for n in store.names()}
    x = rng.standard_normal((6, 3)).astype(np.float32)
    for _ in range(5):
        tape, loss = net_loss_tape(store, names, x)
        backward(tape)
        # grads were computed for frozen entries too
        assert store[f"{names[0]}.W"].touched
        adam_step(store, lr=0.05)
    assert store[f"{names[0]}.W"].value.tobytes() == before[f"{names[0]}.W"]
    assert store[f"{names[0]}.b"].value.tobytes() == before[f"{names[0]}.b"]
    assert store[f"{names[1]}.W"].value.tobytes() != before[f"{names[1]}.W"]
    assert store[f"{names[0]}.W"].step == 0 and store[f"{names[1]}.W"].step == 5


def test_adam_first_step_is_signed_lr():
    store = ParameterStore(dtype=np.float64)
    p = store.add("theta", np.array([1.0, -2.0]))
    p.grad[...] = np.array([0.3, -0.7])
    p.touched = True
    adam_step(store, lr=0.01)
    np.testing.assert_allclose(p.value, [1.0 - 0.01, -2.0 + 0.01], atol=1e-7)


def test_adam_zero_grads_leave_values_unchanged():
    store = ParameterStore()
    p = store.add("theta", np.array([1.0, 2.0]))
    before = p.value.tobytes()
    adam_step(store)  # nothing touched
    p.touched = True  # touched but zero grad: zero moments give a zero update
    adam_step(store)
    assert p.value.tobytes() == before


def test_adam_nan_grad_aborts_without_mutation():
    store = ParameterStore()
    p = store.add("theta", np.array([1.0, 2.0]))
    q = store.add("other", np.array([3.0]))
    p.grad[...] = np.array([np.nan, 0.0])
    p.touched = True
    q.grad[...] = np.array([1.0])
    q.touched = True
    before_p, before_q = p.value.tobytes(), q.value.tobytes()
    with pytest.raises(NumericError):
        adam_step(store)
    assert p.value.tobytes() == before_p and q.value.tobytes() == before_q
    assert p.step == 0 and q.step == 0


def test_training_is_bit_deterministic():
    def run():
        rng = substream(42, "det")
        store, names = make_random_net(rng, np.float32, 3, [4, 8, 8, 2])
        x = rng.standard_normal((16, 4)).astype(np.float32)
        for _ in range(20):
            tape, _ = net_loss_tape(store, names, x)
            backward(tape, 1.0 / 16)
            adam_step(store, lr=1e-3)
        return store.value_bytes()

    assert run() == run()


def test_clone_is_independent():
    store = ParameterStore()
    p = store.add("theta", np.array([1.0]))
    twin = store.clone()
    p.value[...] = 9.0
    assert twin["theta"].value[0] == 1.0
