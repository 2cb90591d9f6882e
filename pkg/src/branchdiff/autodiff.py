"""Minimal reverse-mode autodiff over dense numpy arrays.

Just enough machinery for the denoiser networks: matmul, bias add, SiLU,
concatenation/slicing, embedding-row gather, per-row scaling and a squared-sum
reduction. Values are stored in a configurable dtype (float32 by default);
matrix products and reductions accumulate in float64 before casting back, so
results are reproducible bit-for-bit on a given machine.

A Tape records one forward pass and is spent after backward(). Gradients
accumulate into the owning ParameterStore, so several tapes (e.g. one per
task group in a training step) can contribute to a single optimizer step.
"""
from __future__ import annotations

from typing import Callable, Iterable, Iterator

import numpy as np

from .errors import NumericError, ShapeError, StateError


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Param:
    """A named flat parameter: value, gradient slot, Adam moments, freeze flag."""

    __slots__ = ("value", "grad", "m", "v", "step", "frozen", "touched")

    def __init__(self, value: np.ndarray, frozen: bool = False):
        self.value = value
        self.grad = np.zeros_like(value)
        self.m = np.zeros_like(value)
        self.v = np.zeros_like(value)
        self.step = 0
        self.frozen = frozen
        self.touched = False


class ParameterStore:
    """Named parameter arrays with gradient and optimizer state."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Param] = {}

    def add(self, name: str, value: np.ndarray, frozen: bool = False) -> Param:
        if name in self._params:
            raise StateError(f"parameter {name!r} already exists")
        p = Param(np.array(value, dtype=self.dtype), frozen=frozen)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        try:
            return self._params[name]
        except KeyError:
            raise StateError(f"unknown parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Param]]:
        return iter(self._params.items())

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0
            p.touched = False

    def freeze(self, names: Iterable[str] | None = None) -> None:
        """Freeze the given parameters (all of them when names is None)."""
        for name in self.names() if names is None else names:
            self[name].frozen = True

    def unfreeze(self, names: Iterable[str] | None = None) -> None:
        for name in self.names() if names is None else names:
            self[name].frozen = False

    def num_values(self) -> int:
        return sum(p.value.size for p in self._params.values())

    def trainable_size(self) -> int:
        return sum(p.value.size for p in self._params.values() if not p.frozen)

    def value_bytes(self) -> dict[str, bytes]:
        """Snapshot of raw value bytes, for bitwise comparisons."""
        return {name: p.value.tobytes() for name, p in self._params.items()}

    def clone(self) -> "ParameterStore":
        out = ParameterStore(self.dtype)
        for name, p in self._params.items():
            q = out.add(name, p.value.copy(), frozen=p.frozen)
            q.m = p.m.copy()
            q.v = p.v.copy()
            q.step = p.step
        return out


class Var:
    """A node on the tape: a value and (if recording) a gradient slot."""

    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = value
        self.grad: np.ndarray | None = None

    def _bump(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


class Tape:
    """Recorded forward pass over a ParameterStore.

    With record=False the same primitives run value-only (used for sampling,
    where no gradients are needed but one forward implementation must serve
    both paths).
    """

    def __init__(self, store: ParameterStore, record: bool = True):
        self.store = store
        self.record = record
        self._ops: list[tuple[Var, Callable[[np.ndarray], None]]] = []
        self._leaves: list[tuple[str, Var]] = []
        self._spent = False

    # ---- leaves ------------------------------------------------------------

    def param(self, name: str) -> Var:
        p = self.store[name]
        var = Var(p.value)
        if self.record:
            self._leaves.append((name, var))
        return var

    def input(self, array: np.ndarray) -> Var:
        """Constant leaf; no gradient flows into it."""
        return Var(np.asarray(array, dtype=self.store.dtype))

    # ---- primitives ----------------------------------------------------------

    def _push(self, out: Var, back: Callable[[np.ndarray], None]) -> Var:
        if self.record:
            self._ops.append((out, back))
        return out

    def matmul(self, a: Var, b: Var) -> Var:
        if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
            raise ShapeError(f"matmul mismatch: {a.value.shape} @ {b.value.shape}")
        a64 = a.value.astype(np.float64)
        b64 = b.value.astype(np.float64)
        out = Var((a64 @ b64).astype(self.store.dtype))

        def back(g: np.ndarray) -> None:
            g64 = g.astype(np.float64)
            a._bump((g64 @ b64.T).astype(self.store.dtype))
            b._bump((a64.T @ g64).astype(self.store.dtype))

        return self._push(out, back)

    def add_bias(self, x: Var, b: Var) -> Var:
        if b.value.ndim != 1 or x.value.shape[-1] != b.value.shape[0]:
            raise ShapeError(f"bias mismatch: {x.value.shape} + {b.value.shape}")
        out = Var(x.value + b.value)

        def back(g: np.ndarray) -> None:
            x._bump(g)
            b._bump(g.astype(np.float64).sum(axis=0).astype(self.store.dtype))

        return self._push(out, back)

    def silu(self, x: Var) -> Var:
        """SiLU activation x * sigmoid(x)."""
        sig = _sigmoid(x.value)
        out = Var(x.value * sig)

        def back(g: np.ndarray) -> None:
            x._bump(g * (sig * (1.0 + x.value * (1.0 - sig))))

        return self._push(out, back)

    def concat(self, parts: list[Var], axis: int = 1) -> Var:
        out = Var(np.concatenate([p.value for p in parts], axis=axis))
        offsets = np.cumsum([0] + [p.value.shape[axis] for p in parts])

        def back(g: np.ndarray) -> None:
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p._bump(g[tuple(idx)])

        return self._push(out, back)

    def slice_cols(self, x: Var, lo: int, hi: int) -> Var:
        out = Var(x.value[:, lo:hi].copy())

        def back(g: np.ndarray) -> None:
            full = np.zeros_like(x.value)
            full[:, lo:hi] = g
            x._bump(full)

        return self._push(out, back)

    def gather(self, table: Var, idx: np.ndarray) -> Var:
        """Row lookup into an embedding table; grads scatter-add back."""
        idx = np.asarray(idx, dtype=np.int64)
        out = Var(table.value[idx])

        def back(g: np.ndarray) -> None:
            full = np.zeros_like(table.value, dtype=np.float64)
            np.add.at(full, idx, g.astype(np.float64))
            table._bump(full.astype(self.store.dtype))

        return self._push(out, back)

    def scale_rows(self, x: Var, scale: np.ndarray) -> Var:
        """Multiply each row by a constant per-row factor."""
        s = np.asarray(scale, dtype=self.store.dtype).reshape(-1, 1)
        if s.shape[0] != x.value.shape[0]:
            raise ShapeError(f"scale_rows: {s.shape[0]} factors for {x.value.shape[0]} rows")
        out = Var(x.value * s)

        def back(g: np.ndarray) -> None:
            x._bump(g * s)

        return self._push(out, back)

    def add(self, a: Var, b: Var | np.ndarray) -> Var:
        bval = b.value if isinstance(b, Var) else np.asarray(b, dtype=self.store.dtype)
        if bval.shape != a.value.shape:
            raise ShapeError(f"add mismatch: {a.value.shape} + {bval.shape}")
        out = Var(a.value + bval)

        def back(g: np.ndarray) -> None:
            a._bump(g)
            if isinstance(b, Var):
                b._bump(g)

        return self._push(out, back)

    def sum_squares(self, x: Var) -> Var:
        """Scalar sum of squared entries, accumulated in float64."""
        out = Var(np.float64(np.sum(x.value.astype(np.float64) ** 2)))

        def back(g: np.ndarray) -> None:
            x._bump((2.0 * g) * x.value)

        return self._push(out, back)


def forward_dense(tape: Tape, layer_name: str, x: Var) -> Var:
    """Affine layer input @ W + b with parameters {layer_name}.W / {layer_name}.b."""
    w = tape.param(f"{layer_name}.W")
    b = tape.param(f"{layer_name}.b")
    return tape.add_bias(tape.matmul(x, w), b)


def backward(tape: Tape, loss_grad: float | np.ndarray = 1.0) -> None:
    """Run the tape in reverse, accumulating parameter grads into the store.

    loss_grad seeds the gradient of the last recorded output. The tape is
    spent afterwards; a second backward raises StateError.
    """
    if tape._spent:
        raise StateError("tape already consumed by backward")
    if not tape.record or not tape._ops:
        raise StateError("backward without a recorded forward pass")
    tape._spent = True
    head = tape._ops[-1][0]
    seed = np.asarray(loss_grad, dtype=np.float64 if head.value.ndim == 0 else tape.store.dtype)
    head._bump(np.broadcast_to(seed, head.value.shape).copy() if head.value.ndim else seed)
    for out, back in reversed(tape._ops):
        if out.grad is not None:
            back(out.grad)
    for name, leaf in tape._leaves:
        if leaf.grad is not None:
            p = tape.store[name]
            p.grad += leaf.grad
            p.touched = True
    tape._ops.clear()
    tape._leaves.clear()


def adam_step(store: ParameterStore, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps_opt: float = 1e-8) -> None:
    """One Adam update over every unfrozen parameter touched since the last step.

    Frozen parameters keep their values, moments and step counters bit-identical
    even when gradients were computed for them. All grads are zeroed at the end.
    NaN/inf in any participating gradient aborts before mutating anything.
    """
    live = [p for _, p in store.items() if p.touched and not p.frozen]
    for p in live:
        if not np.all(np.isfinite(p.grad)):
            raise NumericError("non-finite gradient; optimizer step aborted")
    for p in live:
        p.step += 1
        g = p.grad
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * (g * g)
        m_hat = p.m / (1.0 - beta1**p.step)
        v_hat = p.v / (1.0 - beta2**p.step)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps_opt)
    store.zero_grads()
