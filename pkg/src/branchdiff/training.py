"""Score-matching training, task-routed over a branch hierarchy.

Each example gets an independent diffusion time, and (label, time) picks the
branch whose head is responsible for it. One optimizer step consumes the whole
batch: per-task tapes accumulate gradients scaled by 1/batch, so the update
equals training on the plain batch-mean loss

    mean over rows of || std(t) * s(x_t, t) + eps ||^2

which is the sigma^2-weighted denoising objective (residuals stay O(1) at
every noise level instead of blowing up near t = 0). weighting="uniform"
drops the std factor and regresses the score residual directly.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tape, adam_step, backward
from .data import TabularDataset
from .diffusion import DiffusionProcess, perturb
from .errors import DataError, DomainError, NumericError
from .hierarchy import BranchHierarchy, attach_class, branch_lookup
from .rng import substream


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    lr: float = 1e-3
    seed: int = 0
    t_floor: float = 1e-4
    t_max: float | None = None  # exclusive; extension passes the attach time
    weighting: str = "sigma2"

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise DomainError("epochs, batch_size and lr must be positive")
        if self.weighting not in ("sigma2", "uniform"):
            raise DomainError(f"unknown loss weighting {self.weighting!r}")


@dataclass(frozen=True)
class LossRecord:
    epoch: int
    step: int
    loss: float
    task_losses: dict = field(default_factory=dict)
    task_counts: dict = field(default_factory=dict)
    seconds: float = 0.0  # cumulative wall time since train() started


def _row_tasks(model, hierarchy: BranchHierarchy | None, labels, t: np.ndarray) -> np.ndarray:
    """Task key per row: branch index for branched models, label index otherwise."""
    if model.kind == "branched":
        if hierarchy is None:
            raise DomainError("branched training needs a hierarchy")
        return np.array([branch_lookup(hierarchy, lab, ti)
                         for lab, ti in zip(labels, t)], dtype=np.int64)
    return np.array([model.label_index(lab) for lab in labels], dtype=np.int64)


def train_step(model, process: DiffusionProcess, batch_x: np.ndarray, batch_labels,
               rng: np.random.Generator, config: TrainConfig,
               hierarchy: BranchHierarchy | None = None):
    """One optimizer step over a labeled batch.

    Returns (loss, task_losses, task_counts); the loss is the batch mean,
    task_losses are per-task means. Non-finite losses abort before any
    parameter moves.
    """
    batch_x = np.asarray(batch_x, dtype=np.float32)
    n = batch_x.shape[0]
    if n < 1:
        raise DataError("empty batch")
    t = process.draw_times(rng, n, t_floor=config.t_floor, t_max=config.t_max)
    pert = perturb(process, batch_x, t, rng)
    std = np.asarray(pert.std, dtype=np.float64)
    tasks = _row_tasks(model, hierarchy, batch_labels, t)

    total = 0.0
    task_losses: dict = {}
    task_counts: dict = {}
    for task in np.unique(tasks):
        rows = np.flatnonzero(tasks == task)
        tape = Tape(model.store)
        if model.kind == "branched":
            s = model.score_on_tape(tape, pert.x_t[rows], t[rows], int(task))
        else:
            s = model.score_on_tape(tape, pert.x_t[rows], t[rows],
                                    np.full(rows.size, task, dtype=np.int64))
        if config.weighting == "sigma2":
            resid = tape.add(tape.scale_rows(s, std[rows]), pert.eps[rows])
        else:  # uniform weight on the score residual s + eps/std
            resid = tape.add(s, (pert.eps[rows] / std[rows, None]).astype(np.float32))
        sq = tape.sum_squares(resid)
        group_sum = float(sq.value)
        if not np.isfinite(group_sum):
            raise NumericError(f"non-finite loss on task {task}")
        backward(tape, 1.0 / n)
        total += group_sum
        key = int(task) if model.kind == "branched" else model.classes[int(task)]
        task_losses[key] = group_sum / rows.size
        task_counts[key] = int(rows.size)
    adam_step(model.store, lr=config.lr)
    return total / n, task_losses, task_counts


def train(model, process: DiffusionProcess, dataset: TabularDataset,
          config: TrainConfig, hierarchy: BranchHierarchy | None = None) -> list[LossRecord]:
    """Epoch loop with reshuffling; returns one record per optimizer step."""
    if len(dataset) < 1:
        raise DataError("empty dataset")
    feats = dataset.features
    labels = dataset.labels
    rng = substream(config.seed, "train")
    records: list[LossRecord] = []
    started = time.perf_counter()
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        for lo in range(0, len(dataset), config.batch_size):
            rows = order[lo:lo + config.batch_size]
            loss, tl, tc = train_step(model, process, feats[rows],
                                      [labels[int(i)] for i in rows],
                                      rng, config, hierarchy)
            step += 1
            records.append(LossRecord(epoch, step, loss, tl, tc,
                                      time.perf_counter() - started))
    return records


def extend(model, hierarchy: BranchHierarchy, process: DiffusionProcess,
           new_class: str, sibling_class: str, attach_time: float,
           new_data: TabularDataset, config: TrainConfig):
    """Graft a class onto a trained model without touching what it knows.

    All existing parameters are frozen; a fresh head, initialized from the
    sibling's leaf head, is fine-tuned on the new data at times below the
    attach point (above it the grafted class rides the frozen shared branches).
    Returns (extended hierarchy, fine-tune records).
    """
    if set(new_data.classes) != {str(new_class)}:
        raise DataError(f"extension data must be labeled {new_class!r} only, "
                        f"got {new_data.classes}")
    new_h, _ = attach_class(hierarchy, new_class, sibling_class, attach_time)
    sibling_leaf = new_h.lookup(sibling_class, 0.0).task_index
    model.freeze_all()
    new_task = model.add_head(substream(config.seed, "extend-init"))
    if new_task != new_h.task_count - 1:
        raise DomainError(f"model has {new_task} heads but the extended tree "
                          f"names {new_h.task_count} tasks")
    model.clone_head(sibling_leaf, new_task)
    model.unfreeze_head(new_task)
    cfg = replace(config, t_max=attach_time)
    records = train(model, process, new_data, cfg, hierarchy=new_h)
    return new_h, records


def extend_label_guided(model, process: DiffusionProcess, new_data: TabularDataset,
                        config: TrainConfig) -> list[LossRecord]:
    """Baseline extension: add unseen labels and fine-tune everything.

    Nothing is frozen because the single shared head serves every label; this
    is the catastrophic-forgetting comparison point, not a recommended path.
    """
    for c in new_data.classes:
        if c not in model.classes:
            model.add_label(c)
    return train(model, process, new_data, config)


def loss_records_to_csv(records, with_seconds: bool = True) -> str:
    """One CSV row per (step, task). Dropping seconds makes output run-stable."""
    header = "epoch,step,task,loss" + (",seconds" if with_seconds else "")
    lines = [header]
    for r in records:
        for task in sorted(r.task_losses, key=str):
            row = f"{r.epoch},{r.step},{task},{r.task_losses[task]:.8g}"
            if with_seconds:
                row += f",{r.seconds:.3f}"
            lines.append(row)
    return "\n".join(lines) + "\n"
