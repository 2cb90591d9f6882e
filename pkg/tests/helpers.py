"""Shared test utilities: random dense nets and a finite-difference oracle."""
from __future__ import annotations

import numpy as np

from branchdiff.autodiff import ParameterStore, Tape, backward, forward_dense


def make_random_net(rng: np.random.Generator, dtype, n_layers: int, widths: list[int]):
    """Random dense net with SiLU between layers; returns (store, layer_names)."""
    store = ParameterStore(dtype=dtype)
    names = []
    for i in range(n_layers):
        fan_in, fan_out = widths[i], widths[i + 1]
        name = f"layer{i}"
        store.add(f"{name}.W", rng.uniform(-1, 1, (fan_in, fan_out)) / np.sqrt(fan_in))
        store.add(f"{name}.b", rng.uniform(-0.1, 0.1, fan_out))
        names.append(name)
    return store, names


def net_loss_tape(store, names, x):
    """Forward pass: dense/SiLU stack ending in sum of squares; returns (tape, loss)."""
    tape = Tape(store)
    h = tape.input(x)
    for i, name in enumerate(names):
        h = forward_dense(tape, name, h)
        if i < len(names) - 1:
            h = tape.silu(h)
    return tape, tape.sum_squares(h)


def net_loss_value(store, names, x) -> float:
    tape = Tape(store, record=False)
    h = tape.input(x)
    for i, name in enumerate(names):
        h = forward_dense(tape, name, h)
        if i < len(names) - 1:
            h = tape.silu(h)
    return float(tape.sum_squares(h).value)


def autodiff_grads(store, names, x) -> dict[str, np.ndarray]:
    store.zero_grads()
    tape, _ = net_loss_tape(store, names, x)
    backward(tape)
    return {n: store[n].grad.copy() for n in store.names()}


def fd_grads(store, eval_loss, h: float = 1e-4) -> dict[str, np.ndarray]:
    """Central finite differences d loss / d theta for every coordinate."""
    out = {}
    for name, p in store.items():
        flat = p.value.reshape(-1)
        g = np.zeros(flat.size, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = eval_loss()
            flat[i] = orig - h
            lm = eval_loss()
            flat[i] = orig
            g[i] = (lp - lm) / (2.0 * h)
        out[name] = g.reshape(p.value.shape)
    return out


def max_rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = np.maximum(np.abs(a) + np.abs(b), 1e-8)
    return float(np.max(np.abs(a - b) / scale))
