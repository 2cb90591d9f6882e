"""Score networks: the multi-task (branched) denoiser and a label-guided baseline.

Both are dense SiLU stacks over [x_t, time features]: a 3-layer shared trunk
followed by 2-layer heads. The branched model has one head per branch task and
routes each input through exactly one of them; the label-guided model has a
single head and is conditioned by a trainable 16-wide label embedding instead.

Time is encoded as [sin(2 pi (t/T) z), cos(2 pi (t/T) z)] with z a vector of
32 Gaussian draws that are fixed at model creation. The draws live in the
parameter store (so checkpoints carry them) but are frozen and never enter
the tape; time features are plain inputs.
"""
from __future__ import annotations

import numpy as np

from .autodiff import ParameterStore, Tape, Var, forward_dense
from .errors import DomainError, ShapeError, UnknownClassError

TIME_FREQS = 32
LABEL_EMBED_DIM = 16
TRUNK_WIDTH = 128


class TimeEmbedding:
    """Fixed random sinusoidal features of normalized time."""

    def __init__(self, z: np.ndarray, horizon: float):
        self.z = np.asarray(z, dtype=np.float64)
        self.horizon = float(horizon)

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        angle = 2.0 * np.pi * (t / self.horizon)
        phase = angle[..., None] * self.z
        return np.concatenate([np.sin(phase), np.cos(phase)], axis=-1)

    @property
    def width(self) -> int:
        return 2 * len(self.z)


def _init_dense(store: ParameterStore, name: str, fan_in: int, fan_out: int,
                rng: np.random.Generator) -> None:
    bound = 1.0 / np.sqrt(fan_in)
    store.add(f"{name}.W", rng.uniform(-bound, bound, (fan_in, fan_out)))
    store.add(f"{name}.b", np.zeros(fan_out))


def _as_batch(x: np.ndarray, dim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float32)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise ShapeError(f"expected (n, {dim}) inputs, got {x.shape}")
    return x, single


class MultiTaskDenoiser:
    """Shared trunk + one score head per branch task."""

    kind = "branched"

    def __init__(self, dim: int, task_count: int, horizon: float,
                 rng: np.random.Generator, width: int = TRUNK_WIDTH,
                 dtype=np.float32):
        if dim < 1 or task_count < 1:
            raise DomainError("dim and task_count must be positive")
        self.dim = int(dim)
        self.width = int(width)
        self.store = ParameterStore(dtype=dtype)
        self.store.add("time.z", rng.standard_normal(TIME_FREQS))
        self.store["time.z"].frozen = True
        self.time_embedding = TimeEmbedding(self.store["time.z"].value, horizon)

        w, d = self.width, self.dim
        _init_dense(self.store, "trunk.1", d + self.time_embedding.width, w, rng)
        _init_dense(self.store, "trunk.2", w, w, rng)
        _init_dense(self.store, "trunk.3", w, w, rng)
        self.task_count = 0
        for _ in range(task_count):
            self.add_head(rng)

    @property
    def horizon(self) -> float:
        return self.time_embedding.horizon

    def head_names(self, task: int) -> list[str]:
        return [f"head.{task}.{layer}.{kind}" for layer in (1, 2) for kind in ("W", "b")]

    def trunk_names(self) -> list[str]:
        return [f"trunk.{layer}.{kind}" for layer in (1, 2, 3) for kind in ("W", "b")]

    def add_head(self, rng: np.random.Generator | None = None) -> int:
        """Allocate a fresh head; returns its task index."""
        if rng is None:
            rng = np.random.default_rng(0)
        task = self.task_count
        _init_dense(self.store, f"head.{task}.1", self.width, self.width, rng)
        _init_dense(self.store, f"head.{task}.2", self.width, self.dim, rng)
        self.task_count += 1
        return task

    def clone_head(self, src_task: int, dst_task: int) -> None:
        """Bytewise copy of src head values into dst head."""
        self._check_task(src_task)
        self._check_task(dst_task)
        for src, dst in zip(self.head_names(src_task), self.head_names(dst_task)):
            a, b = self.store[src], self.store[dst]
            if a.value.shape != b.value.shape:
                raise ShapeError(f"{src} {a.value.shape} vs {dst} {b.value.shape}")
            b.value = a.value.copy()

    def freeze_all(self) -> None:
        self.store.freeze()

    def unfreeze_head(self, task: int) -> None:
        self._check_task(task)
        self.store.unfreeze(self.head_names(task))

    def _check_task(self, task: int) -> None:
        if not 0 <= task < self.task_count:
            raise DomainError(f"task {task} out of range [0, {self.task_count})")

    def score_on_tape(self, tape: Tape, x_t: np.ndarray, t, task: int) -> Var:
        """Score of the selected task; x_t and t are constants on the tape."""
        self._check_task(task)
        x_t = np.asarray(x_t, dtype=np.float32)
        emb = np.broadcast_to(self.time_embedding(t), (x_t.shape[0], self.time_embedding.width))
        v = tape.input(np.concatenate([x_t, emb.astype(np.float32)], axis=1))
        for layer in (1, 2, 3):
            v = tape.silu(forward_dense(tape, f"trunk.{layer}", v))
        v = tape.silu(forward_dense(tape, f"head.{task}.1", v))
        return forward_dense(tape, f"head.{task}.2", v)

    def score(self, x: np.ndarray, t, task: int) -> np.ndarray:
        x, single = _as_batch(x, self.dim)
        out = self.score_on_tape(Tape(self.store, record=False), x, t, task).value
        return out[0] if single else out


class LabelGuidedDenoiser:
    """Single-head baseline conditioned on a trainable per-class embedding.

    The hidden width is picked so the trainable parameter count matches a
    branched model of the given task count on the same data dim (the linear
    baseline of "similar capacity").
    """

    kind = "label-guided"

    def __init__(self, dim: int, classes, horizon: float, rng: np.random.Generator,
                 width: int | None = None, match_task_count: int | None = None,
                 dtype=np.float32):
        self.classes = tuple(classes)
        if len(set(self.classes)) != len(self.classes) or not self.classes:
            raise DomainError("classes must be nonempty and unique")
        self.dim = int(dim)
        if width is None:
            tasks = match_task_count or 2 * len(self.classes) - 1
            width = fit_label_guided_width(self.dim, len(self.classes), tasks)
        self.width = int(width)

        self.store = ParameterStore(dtype=dtype)
        self.store.add("time.z", rng.standard_normal(TIME_FREQS))
        self.store["time.z"].frozen = True
        self.time_embedding = TimeEmbedding(self.store["time.z"].value, horizon)

        w, d = self.width, self.dim
        fan_in = d + self.time_embedding.width + LABEL_EMBED_DIM
        _init_dense(self.store, "trunk.1", fan_in, w, rng)
        _init_dense(self.store, "trunk.2", w, w, rng)
        _init_dense(self.store, "trunk.3", w, w, rng)
        _init_dense(self.store, "head.1", w, w, rng)
        _init_dense(self.store, "head.2", w, d, rng)
        # zero init: before training, every label produces the same score
        self.store.add("label_table", np.zeros((len(self.classes), LABEL_EMBED_DIM)))

    @property
    def horizon(self) -> float:
        return self.time_embedding.horizon

    def label_index(self, label: str) -> int:
        try:
            return self.classes.index(label)
        except ValueError:
            raise UnknownClassError(f"unknown label {label!r}") from None

    def score_on_tape(self, tape: Tape, x_t: np.ndarray, t, label_idx: np.ndarray) -> Var:
        x_t = np.asarray(x_t, dtype=np.float32)
        n = x_t.shape[0]
        emb = np.broadcast_to(self.time_embedding(t), (n, self.time_embedding.width))
        base = tape.input(np.concatenate([x_t, emb.astype(np.float32)], axis=1))
        rows = tape.gather(tape.param("label_table"), np.broadcast_to(label_idx, (n,)))
        v = tape.concat([base, rows], axis=1)
        for layer in (1, 2, 3):
            v = tape.silu(forward_dense(tape, f"trunk.{layer}", v))
        v = tape.silu(forward_dense(tape, "head.1", v))
        return forward_dense(tape, "head.2", v)

    def score(self, x: np.ndarray, t, label: str) -> np.ndarray:
        x, single = _as_batch(x, self.dim)
        idx = np.full(x.shape[0], self.label_index(label), dtype=np.int64)
        out = self.score_on_tape(Tape(self.store, record=False), x, t, idx).value
        return out[0] if single else out

    def add_label(self, label: str) -> int:
        """Grow the label table by one zero row; returns the new label index.

        Every other parameter is shared across labels, so nothing else changes.
        """
        label = str(label)
        if label in self.classes:
            raise DomainError(f"label {label!r} already present")
        p = self.store["label_table"]
        pad = np.zeros((1, LABEL_EMBED_DIM), dtype=p.value.dtype)
        p.value = np.concatenate([p.value, pad])
        for attr in ("grad", "m", "v"):
            old = getattr(p, attr)
            setattr(p, attr, np.concatenate([old, np.zeros((1, LABEL_EMBED_DIM),
                                                           dtype=old.dtype)]))
        self.classes = self.classes + (label,)
        return len(self.classes) - 1


def branched_param_count(dim: int, task_count: int, width: int = TRUNK_WIDTH) -> int:
    """Trainable values of a MultiTaskDenoiser (excludes the frozen time draws)."""
    emb = 2 * TIME_FREQS
    trunk = (dim + emb) * width + width + 2 * (width * width + width)
    head = width * width + width + width * dim + dim
    return trunk + task_count * head


def label_guided_param_count(dim: int, n_classes: int, width: int) -> int:
    emb = 2 * TIME_FREQS
    fan_in = dim + emb + LABEL_EMBED_DIM
    total = fan_in * width + width + 2 * (width * width + width)
    total += width * width + width + width * dim + dim
    return total + n_classes * LABEL_EMBED_DIM


def fit_label_guided_width(dim: int, n_classes: int, task_count: int,
                           branch_width: int = TRUNK_WIDTH) -> int:
    """Smallest-error integer width matching the branched parameter count."""
    target = branched_param_count(dim, task_count, branch_width)
    best, best_err = 1, abs(label_guided_param_count(dim, n_classes, 1) - target)
    for w in range(2, 4096):
        err = abs(label_guided_param_count(dim, n_classes, w) - target)
        if err < best_err:
            best, best_err = w, err
        if label_guided_param_count(dim, n_classes, w) > 2 * target:
            break
    return best


def trainable_param_count(model) -> int:
    return model.store.trainable_size()
