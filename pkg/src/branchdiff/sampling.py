"""Reverse diffusion over a branch hierarchy.

The run from T to 0 is split into config.steps uniform cells. A cell is owned
by the branch that covers its lower endpoint, so heads switch exactly when a
chain crosses a branch point, and the cached multi-class sampler (which walks
branches in descending start order, reusing each parent's end state for all
its children) visits the same (task, time) sequence as per-class sampling.

Each cell applies one Euler-Maruyama predictor step of the reverse SDE

    x' = x * (1 + beta(t) dt / 2) + beta(t) dt * s(x, t) + sqrt(beta(t) dt) z

followed by one Langevin corrector step at the cell's lower time with step
size 2 * (snr * ||z|| / ||s||)^2, the norms taken as batch means so the step
stays finite when individual chains settle onto a mode. The last corrector
(at t = 0) adds no noise, which reads out the denoised state. Discrete-time
models use ancestral sampling instead; both share the branch routing.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .diffusion import DdpmSchedule, DiffusionProcess, VpSde, perturb, prior_sample
from .errors import DataError, DomainError, NumericError, ShapeError, StateError
from .hierarchy import Branch, BranchHierarchy, branch_lookup
from .rng import substream


@dataclass(frozen=True)
class SampleConfig:
    steps: int = 1000
    snr: float = 0.16
    seed: int = 0
    batch_size: int = 128

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise DomainError("steps must be >= 1")
        if self.snr <= 0:
            raise DomainError("snr must be positive")


@dataclass
class SampleBatch:
    """Sampled states plus the bookkeeping needed to reproduce or resume them."""

    features: np.ndarray
    classes: list[str]
    t: float = 0.0  # timestamp: 0 for finished samples, > 0 for intermediates
    seed: int = 0

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 2:
            raise ShapeError(f"sample features must be (n, d), got {self.features.shape}")
        if len(self.classes) != self.features.shape[0]:
            raise DataError("class labels do not match sample rows")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def to_csv(self) -> str:
        names = [f"feature_{j}" for j in range(self.dim)]
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(names + ["class", "t", "seed"])
        for row, label in zip(self.features, self.classes):
            writer.writerow([repr(float(v)) for v in row]
                            + [label, repr(float(self.t)), self.seed])
        return out.getvalue()

    @staticmethod
    def from_csv(text: str) -> "SampleBatch":
        try:
            rows = list(csv.reader(io.StringIO(text)))
        except csv.Error as exc:
            raise DataError(f"bad sample CSV: {exc}") from exc
        rows = [r for r in rows if r]
        if not rows:
            raise DataError("empty sample CSV")
        header = rows[0]
        if header[-3:] != ["class", "t", "seed"]:
            raise DataError("sample CSV must end with class,t,seed columns")
        dim = len(header) - 3
        if header[:dim] != [f"feature_{j}" for j in range(dim)]:
            raise DataError("sample CSV feature columns are misnamed")
        feats, labels, ts, seeds = [], [], set(), set()
        for k, row in enumerate(rows[1:], start=1):
            if len(row) != len(header):
                raise DataError(f"sample CSV row {k} has {len(row)} cells")
            try:
                feats.append([float(v) for v in row[:dim]])
                ts.add(float(row[dim + 1]))
                seeds.add(int(row[dim + 2]))
            except ValueError as exc:
                raise DataError(f"sample CSV row {k}: {exc}") from exc
            labels.append(row[dim])
        if len(ts) > 1 or len(seeds) > 1:
            raise DataError("sample CSV mixes timestamps or seeds")
        feats_arr = np.array(feats, dtype=np.float32).reshape(len(labels), dim)
        return SampleBatch(feats_arr, labels,
                           t=ts.pop() if ts else 0.0,
                           seed=seeds.pop() if seeds else 0)


@dataclass
class BranchCache:
    """States parked at branch end times, tagged with the branch that made them."""

    entries: dict = field(default_factory=dict)  # end time -> [(branch, states)]

    def put(self, time: float, branch: Branch, states: np.ndarray) -> None:
        self.entries.setdefault(time, []).append((branch, states))

    def get(self, time: float, branch: Branch) -> np.ndarray:
        for b, states in self.entries.get(time, ()):
            if b == branch:
                return states
        raise StateError(f"no cached states from {branch} at t={time}")


def _check_finite(x: np.ndarray, t, task) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite state at t={t}, task={task!r}")


def _pc_update(score_fn, process: VpSde, x: np.ndarray, t_hi: float, t_lo: float,
               config: SampleConfig, rng: np.random.Generator, final: bool, task) -> np.ndarray:
    """One predictor cell t_hi -> t_lo plus its corrector at t_lo."""
    beta = process.beta(t_hi)
    dt = t_hi - t_lo
    if dt < 0:
        raise DomainError("pc step must move backward in time")
    z = rng.standard_normal(x.shape, dtype=np.float32)
    s = score_fn(x, t_hi)
    x = x * np.float32(1.0 + 0.5 * beta * dt) + np.float32(beta * dt) * s \
        + np.float32(math.sqrt(beta * dt)) * z

    z = rng.standard_normal(x.shape, dtype=np.float32)
    s = score_fn(x, t_lo)
    if x.shape[0]:
        # batch-mean norms; a per-chain ratio diverges once a chain parks on a mode
        s_norm = float(np.linalg.norm(s.astype(np.float64), axis=1).mean())
        z_norm = float(np.linalg.norm(z.astype(np.float64), axis=1).mean())
        if s_norm > 0.0:
            eps = 2.0 * (config.snr * z_norm / s_norm) ** 2
            x = x + np.float32(eps) * s
            if not final:
                x = x + np.float32(math.sqrt(2.0 * eps)) * z
    _check_finite(x, t_hi, task)
    return x


def pc_step(model, task: int, x: np.ndarray, t: float, dt: float, spec: VpSde,
            config: SampleConfig, rng: np.random.Generator, final: bool = False) -> np.ndarray:
    """Public single-cell form: predictor at t, corrector at t - dt, one head."""
    if t - dt < 0:
        raise DomainError("pc_step would cross t = 0")
    x = np.asarray(x, dtype=np.float32)
    return _pc_update(lambda xx, tt: model.score(xx, tt, task),
                      spec, x, t, t - dt, config, rng, final, task)


def _class_score_fn(model, hierarchy: BranchHierarchy | None, c: str):
    """(score_fn(x, t, task), route(t) -> task) pair for either model kind."""
    c = str(c)
    if model.kind == "branched":
        if hierarchy is None:
            raise DomainError("branched sampling needs a hierarchy")
        hierarchy.path(c)  # unknown-class check up front
        return (lambda x, t, task: model.score(x, t, task),
                lambda t: branch_lookup(hierarchy, c, t))
    model.label_index(c)
    return (lambda x, t, task: model.score(x, t, c),
            lambda t: c)


def _run_cells(model, hierarchy, c, x, k_hi: int, k_lo: int, process: VpSde,
               config: SampleConfig, rng: np.random.Generator) -> np.ndarray:
    """Integrate cells k_hi..k_lo+1 (each cell k spans [(k-1) dt, k dt])."""
    if x.shape[0] == 0:
        return x
    score_fn, route = _class_score_fn(model, hierarchy, c)
    dt = process.horizon / config.steps
    for k in range(k_hi, k_lo, -1):
        t_hi, t_lo = k * dt, (k - 1) * dt
        task = route(t_lo)
        x = _pc_update(lambda xx, tt, tk=task: score_fn(xx, tt, tk),
                       process, x, t_hi, t_lo, config, rng,
                       final=(k == 1), task=task)
    return x


def _require_sde(process: DiffusionProcess) -> None:
    if process.kind != "sde":
        raise DomainError("predictor-corrector sampling needs a continuous-time "
                          "process; use ddpm_sample_class for discrete time")


def sample_class(model, hierarchy: BranchHierarchy | None, c: str, n: int,
                 process: VpSde, config: SampleConfig,
                 rng: np.random.Generator | None = None) -> SampleBatch:
    """n fresh draws of class c, run from the prior at T all the way to 0."""
    _require_sde(process)
    if n < 0:
        raise DomainError("n must be >= 0")
    if rng is None:
        rng = substream(config.seed, "sample", str(c))
    x = prior_sample(model.dim, rng, n)
    x = _run_cells(model, hierarchy, c, x, config.steps, 0, process, config, rng)
    return SampleBatch(x, [str(c)] * n, t=0.0, seed=config.seed)


def hybrid(model, hierarchy: BranchHierarchy, c1: str, c2: str, n: int,
           process: VpSde, config: SampleConfig,
           rng: np.random.Generator | None = None) -> SampleBatch:
    """Common ancestor of two classes: reverse diffusion stopped at their
    branch point. The head path above the stop is shared, so either class
    works as the routing label; the batch is stamped with the exact branch
    point so it can be resumed down a specific class later."""
    _require_sde(process)
    t_b = hierarchy.lca_branch_point(c1, c2)
    k_b = int(round(t_b * config.steps / process.horizon))
    if rng is None:
        rng = substream(config.seed, "sample", str(c1))
    x = prior_sample(model.dim, rng, n)
    x = _run_cells(model, hierarchy, c1, x, config.steps, k_b, process, config, rng)
    return SampleBatch(x, [f"{c1}|{c2}"] * n, t=float(t_b), seed=config.seed)


def sample_from(model, hierarchy: BranchHierarchy | None, batch: SampleBatch, c: str,
                process: VpSde, config: SampleConfig,
                rng: np.random.Generator | None = None) -> SampleBatch:
    """Resume intermediates (e.g. a hybrid batch) down class c's path to 0."""
    _require_sde(process)
    if not 0 <= batch.t <= process.horizon:
        raise DomainError(f"batch timestamp {batch.t} outside [0, horizon]")
    k_hi = int(round(batch.t * config.steps / process.horizon))
    if rng is None:
        rng = substream(config.seed, "continue", str(c))
    x = _run_cells(model, hierarchy, c, batch.features.copy(), k_hi, 0,
                   process, config, rng)
    return SampleBatch(x, [str(c)] * len(batch.classes), t=0.0, seed=config.seed)


def transmute(model, hierarchy: BranchHierarchy, x1: np.ndarray, c1: str, c2: str,
              process: VpSde, config: SampleConfig,
              rng: np.random.Generator | None = None) -> SampleBatch:
    """Turn objects of class c1 into their c2 analogs.

    Forward-diffuse the inputs to the classes' branch point, then reverse
    down c2's side. Features that both classes treat the same way survive
    the round trip (they are resolved above the branch point); class-defining
    features are resampled.
    """
    _require_sde(process)
    t_b = hierarchy.lca_branch_point(c1, c2)
    x1 = np.asarray(x1, dtype=np.float32)
    single = x1.ndim == 1
    if single:
        x1 = x1[None, :]
    if rng is None:
        rng = substream(config.seed, "transmute", str(c1), str(c2))
    x_b = perturb(process, x1, t_b, rng).x_t
    k_b = int(round(t_b * config.steps / process.horizon))
    x = _run_cells(model, hierarchy, c2, x_b, k_b, 0, process, config, rng)
    return SampleBatch(x, [str(c2)] * x.shape[0], t=0.0, seed=config.seed)


def branch_cells(branch: Branch, steps: int, horizon: float) -> tuple[int, int]:
    """Inclusive cell range (k_lo, k_hi) owned by a branch; empty when k_lo > k_hi.

    Cell k is owned by the branch covering its lower endpoint (k-1) dt, so
    sibling ranges partition 1..steps exactly even when branch points fall
    between grid points.
    """
    dt = horizon / steps
    k_lo = int(math.ceil(branch.start / dt + 1.0 - 1e-9))
    k_hi = int(math.ceil(branch.end / dt + 1.0 - 1e-9)) - 1
    return max(k_lo, 1), min(k_hi, steps)


def cached_step_ledger(hierarchy: BranchHierarchy, steps: int = 1000) -> dict:
    """Step counts with and without caching, from branch interval arithmetic."""
    per_branch = {}
    total = 0
    for b in hierarchy.branches:
        k_lo, k_hi = branch_cells(b, steps, hierarchy.horizon)
        n = max(k_hi - k_lo + 1, 0)
        per_branch[b] = n
        total += n
    return {
        "cached_steps": total,
        "uncached_steps": steps * len(hierarchy.classes),
        "per_branch": per_branch,
    }


def sample_all_cached(model, hierarchy: BranchHierarchy, n: int, process: VpSde,
                      config: SampleConfig,
                      rng: np.random.Generator | None = None) -> dict[str, SampleBatch]:
    """One batch per class, integrating every branch interval exactly once.

    Branches run in descending start order; each non-root branch starts from
    its parent's cached end states, so shared ancestry is shared computation
    (and classes split from a common node agree above it by construction).
    """
    _require_sde(process)
    if model.kind != "branched":
        raise DomainError("cached sampling needs a branched model")
    if n < 0:
        raise DomainError("n must be >= 0")
    if rng is None:
        rng = substream(config.seed, "sample-all")
    dt = process.horizon / config.steps
    order = sorted(hierarchy.branches,
                   key=lambda b: (-b.start, -b.end, tuple(sorted(b.classes))))
    cache = BranchCache()
    terminal = {c: hierarchy.path(c)[-1] for c in hierarchy.classes}
    out: dict[str, SampleBatch] = {}
    root = hierarchy.root
    for b in order:
        if b == root:
            x = prior_sample(model.dim, rng, n)
        else:
            x = cache.get(b.end, hierarchy.parent(b)).copy()
        k_lo, k_hi = branch_cells(b, config.steps, hierarchy.horizon)
        for k in range(k_hi, k_lo - 1, -1):
            t_hi, t_lo = k * dt, (k - 1) * dt
            x = _pc_update(lambda xx, tt, task=b.task_index: model.score(xx, tt, task),
                           process, x, t_hi, t_lo, config, rng,
                           final=(k == 1), task=b.task_index)
        cache.put(b.start, b, x)
        for c in hierarchy.classes:
            if terminal[c] == b:
                out[c] = SampleBatch(x.copy(), [c] * n, t=0.0, seed=config.seed)
    return out


def ddpm_sample_class(model, hierarchy: BranchHierarchy, c: str, n: int,
                      dspec: DdpmSchedule, config: SampleConfig,
                      rng: np.random.Generator | None = None) -> SampleBatch:
    """Ancestral sampling on the integer-step grid with per-step branch lookup.

    x_{t-1} = (x_t + beta_t s) / sqrt(alpha_t) + sigma_t z with the posterior
    variance sigma_t^2 = beta_t (1 - abar_{t-1}) / (1 - abar_t); the t = 1
    step adds no noise.
    """
    if dspec.kind != "ddpm":
        raise DomainError("ddpm_sample_class needs a discrete-time schedule")
    if hierarchy is not None and hierarchy.horizon != dspec.steps:
        raise DomainError(f"hierarchy horizon {hierarchy.horizon} does not match "
                          f"{dspec.steps} steps")
    if n < 0:
        raise DomainError("n must be >= 0")
    c = str(c)
    if rng is None:
        rng = substream(config.seed, "sample", c)
    score_fn, route = _class_score_fn(model, hierarchy, c)
    x = prior_sample(model.dim, rng, n)
    if n == 0:
        return SampleBatch(x, [], t=0.0, seed=config.seed)
    for t in range(dspec.steps, 0, -1):
        task = route(t - 1)
        beta, alpha, alpha_bar = dspec.schedule(t)
        s = score_fn(x, float(t), task)
        mean = (x + np.float32(beta) * s) / np.float32(math.sqrt(alpha))
        if t > 1:
            alpha_bar_prev = alpha_bar / alpha
            var = beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
            x = mean + np.float32(math.sqrt(var)) * rng.standard_normal(x.shape, dtype=np.float32)
        else:
            x = mean
        _check_finite(x, t, task)
    return SampleBatch(x, [c] * n, t=0.0, seed=config.seed)
