"""Branch hierarchies over classes and diffusion time, and their discovery.

A hierarchy over classes C partitions C x [0, T) into 2|C|-1 branches
(start, end, classes): one leaf per class starting at t=0 and one internal
branch per merge, with the root ending at t=T. Above a branch point the
noised class-conditional distributions are mutually indistinguishable, which
is what lets one denoiser head serve a whole class subset there.

Discovery measures that indistinguishability directly: forward-diffuse a
sample of each class over a shared time grid, track mean pairwise Euclidean
distances (cross-class and within-class), smooth the curves, and declare a
pair merged at the first grid time where the cross-class distance drops to
the mean of the two self distances (plus a small epsilon). A union-find pass
over the pairwise merge times, in ascending order, yields the tree.

Tied merge times are represented as two merges at equal times, which can
produce zero-length branches (start == end); these cover no (class, t) cell
and are legal everywhere.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .diffusion import DiffusionProcess
from .errors import DataError, DomainError, UnknownClassError


@dataclass(frozen=True)
class Branch:
    """One branch: classes `classes` on the half-open time interval [start, end)."""

    start: float
    end: float
    classes: frozenset[str]
    task_index: int = 0

    def __post_init__(self) -> None:
        if not self.classes:
            raise DataError("branch with empty class set")
        if self.start < 0 or self.end < self.start:
            raise DataError(f"bad branch interval [{self.start}, {self.end})")

    @property
    def length(self) -> float:
        return self.end - self.start

    def covers(self, c: str, t: float) -> bool:
        return c in self.classes and self.start <= t < self.end


@dataclass(frozen=True)
class BranchHierarchy:
    """An immutable branch hierarchy. `classes` keeps the canonical label order."""

    classes: tuple[str, ...]
    horizon: float
    branches: tuple[Branch, ...]

    def __post_init__(self) -> None:
        if len(set(self.classes)) != len(self.classes):
            raise DataError("duplicate class labels")
        if not self.branches:
            raise DataError("hierarchy with no branches")

    @cached_property
    def _paths(self) -> dict[str, tuple[Branch, ...]]:
        # root-to-leaf chain per class, upper branches first
        out = {}
        for c in self.classes:
            chain = [b for b in self.branches if c in b.classes]
            chain.sort(key=lambda b: (-b.start, -b.end))
            out[c] = tuple(chain)
        return out

    @property
    def root(self) -> Branch:
        for b in self.branches:
            if len(b.classes) == len(self.classes):
                return b
        raise DataError("hierarchy has no root branch")

    @property
    def task_count(self) -> int:
        return max(b.task_index for b in self.branches) + 1

    def path(self, c: str) -> tuple[Branch, ...]:
        try:
            return self._paths[c]
        except KeyError:
            raise UnknownClassError(f"unknown class {c!r}") from None

    def lookup(self, c: str, t: float) -> Branch:
        """The unique branch covering (c, t); t = horizon maps to the root."""
        chain = self.path(c)
        if t < 0 or t > self.horizon:
            raise DomainError(f"t={t} outside [0, {self.horizon}]")
        if t == self.horizon:
            return chain[0]
        for b in chain:
            if b.start <= t < b.end:
                return b
        raise DataError(f"no branch covers ({c!r}, {t}); hierarchy is not a partition")

    def lca_branch_point(self, c1: str, c2: str) -> float:
        """Start time of the lowest branch containing both classes."""
        if c1 == c2:
            raise DomainError("lca_branch_point needs two distinct classes")
        self.path(c2)  # unknown-class check
        shared = [b for b in self.path(c1) if c2 in b.classes]
        return min(b.start for b in shared)

    def parent(self, b: Branch) -> Branch | None:
        """The branch this one merges into (None for the root)."""
        if b.classes == frozenset(self.classes):
            return None
        candidates = [p for p in self.branches
                      if p is not b and p.start == b.end and b.classes <= p.classes]
        if not candidates:
            return None
        return min(candidates, key=lambda p: len(p.classes))

    def to_json_dict(self) -> dict:
        return {
            "classes": list(self.classes),
            "horizon": self.horizon,
            "branches": [
                {"start": b.start, "end": b.end, "classes": sorted(b.classes),
                 "task_index": b.task_index}
                for b in self.branches
            ],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2) + "\n")

    @staticmethod
    def from_json_dict(doc: dict) -> "BranchHierarchy":
        try:
            branches = tuple(
                Branch(start=float(rec["start"]), end=float(rec["end"]),
                       classes=frozenset(str(c) for c in rec["classes"]),
                       task_index=int(rec["task_index"]))
                for rec in doc["branches"]
            )
            return BranchHierarchy(
                classes=tuple(str(c) for c in doc["classes"]),
                horizon=float(doc["horizon"]),
                branches=branches,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed hierarchy document: {exc}") from exc

    @staticmethod
    def load(path: str | Path) -> "BranchHierarchy":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read hierarchy file: {exc}") from exc
        if not isinstance(doc, dict):
            raise DataError("hierarchy document must be a JSON object")
        return BranchHierarchy.from_json_dict(doc)


def branch_lookup(h: BranchHierarchy, c: str, t: float) -> int:
    """Task index of the branch covering (c, t)."""
    return h.lookup(c, t).task_index


def format_branch_table(h: BranchHierarchy) -> str:
    """Fixed-width branch table: start, end, classes (one branch per line)."""
    rows = sorted(h.branches, key=lambda b: (-b.start, -b.end, sorted(b.classes)))
    lines = [f"{'start':>10}  {'end':>10}  classes"]
    for b in rows:
        lines.append(f"{b.start:>10.4f}  {b.end:>10.4f}  {{{', '.join(sorted(b.classes))}}}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# discovery
# ---------------------------------------------------------------------------

@dataclass
class DistanceCurves:
    """Mean pairwise distances per class pair over a shared time grid.

    Keys are (ci, cj) with i <= j in class order; (c, c) entries are the
    within-class (self) curves.
    """

    classes: tuple[str, ...]
    grid: np.ndarray
    curves: dict[tuple[str, str], np.ndarray] = field(default_factory=dict)

    def key(self, ci: str, cj: str) -> tuple[str, str]:
        order = {c: k for k, c in enumerate(self.classes)}
        return (ci, cj) if order[ci] <= order[cj] else (cj, ci)


def pairwise_noisy_distances(dataset, process: DiffusionProcess, n_per_class: int,
                             grid: int, rng: np.random.Generator) -> DistanceCurves:
    """Forward-diffuse class samples and track mean pairwise distances.

    `dataset` needs `.features` (n, d) and `.labels` (n strings). Each class
    contributes min(n_per_class, class size) objects; the same fixed pairs are
    tracked across the whole grid so curves are smooth in t. Self pairs never
    compare an object with itself.
    """
    features = np.asarray(dataset.features, dtype=np.float64)
    labels = list(dataset.labels)
    if n_per_class < 1:
        raise DomainError("n_per_class must be at least 1")
    classes = tuple(sorted(set(labels)))
    times = process.time_grid(grid)

    by_class = {c: np.flatnonzero(np.array(labels) == c) for c in classes}
    states: dict[str, np.ndarray] = {}
    for c in classes:
        idx = by_class[c]
        if idx.size < 2:
            raise DataError(f"class {c!r} has fewer than 2 objects")
        take = min(max(n_per_class, 2), idx.size)  # >= 2 so self pairs can avoid identity
        chosen = rng.choice(idx, size=take, replace=False)
        states[c] = features[chosen]

    # fixed pair assignments, drawn once
    pairs: dict[tuple[str, str], tuple[np.ndarray, np.ndarray]] = {}
    for i, ci in enumerate(classes):
        for cj in classes[i:]:
            if ci == cj:
                n = states[ci].shape[0]
                a = rng.integers(0, n, n_per_class)
                b = (a + rng.integers(1, n, n_per_class)) % n
            else:
                a = rng.integers(0, states[ci].shape[0], n_per_class)
                b = rng.integers(0, states[cj].shape[0], n_per_class)
            pairs[(ci, cj)] = (a, b)

    curves = {k: np.empty(len(times)) for k in pairs}
    t_prev = 0.0
    for k, t in enumerate(times):
        coef, std = process.transition(t_prev, t)
        for c in classes:
            noise = rng.standard_normal(states[c].shape)
            states[c] = coef * states[c] + std * noise
        for (ci, cj), (a, b) in pairs.items():
            diff = states[ci][a] - states[cj][b]
            curves[(ci, cj)][k] = np.linalg.norm(diff, axis=1).mean()
        t_prev = t

    return DistanceCurves(classes=classes, grid=times, curves=curves)


def smooth_curves(curves: DistanceCurves, sigma: float = 3.0) -> DistanceCurves:
    """Gaussian smoothing along the grid (sigma in grid units, truncated at 4 sigma).

    The kernel is renormalized over the in-range window, so constant curves
    are unchanged everywhere, including the edges.
    """
    if sigma <= 0:
        raise DomainError("sigma must be positive")
    radius = int(np.floor(4.0 * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
    norm = np.convolve(np.ones(len(curves.grid)), kernel, mode="same")
    smoothed = {
        key: np.convolve(y, kernel, mode="same") / norm
        for key, y in curves.curves.items()
    }
    return DistanceCurves(classes=curves.classes, grid=curves.grid.copy(), curves=smoothed)


def merge_times(curves: DistanceCurves, epsilon: float) -> dict[tuple[str, str], float]:
    """First grid time where each cross curve meets the mean of the self curves.

    tau(ci, cj) = min { t : cross(t) <= (self_i(t) + self_j(t)) / 2 + epsilon },
    falling back to the grid end (the pair merges only at the root).
    """
    out = {}
    classes = curves.classes
    for i, ci in enumerate(classes):
        for cj in classes[i + 1:]:
            cross = curves.curves[curves.key(ci, cj)]
            self_i = curves.curves[(ci, ci)]
            self_j = curves.curves[(cj, cj)]
            hit = cross <= 0.5 * (self_i + self_j) + epsilon
            idx = np.flatnonzero(hit)
            tau = float(curves.grid[idx[0]]) if idx.size else float(curves.grid[-1])
            out[(ci, cj)] = tau
    return out


def build_hierarchy(taus: dict[tuple[str, str], float], classes: tuple[str, ...] | list[str],
                    horizon: float) -> BranchHierarchy:
    """Greedy union-find merge in ascending tau; ties break lexicographically."""
    classes = tuple(classes)
    if len(set(classes)) != len(classes):
        raise DataError("duplicate class labels")
    if len(classes) == 1:
        only = Branch(0.0, horizon, frozenset(classes), task_index=0)
        return BranchHierarchy(classes=classes, horizon=horizon, branches=(only,))

    normalized: dict[tuple[str, str], float] = {}
    for (a, b), tau in taus.items():
        if a == b or a not in classes or b not in classes:
            raise DataError(f"bad class pair ({a!r}, {b!r})")
        if not 0 < tau <= horizon:
            raise DomainError(f"merge time {tau} outside (0, {horizon}]")
        normalized[tuple(sorted((a, b)))] = tau
    expected = len(classes) * (len(classes) - 1) // 2
    if len(normalized) != expected:
        raise DataError(f"need all {expected} class pairs, got {len(normalized)}")

    parent = {c: c for c in classes}

    def find(c: str) -> str:
        while parent[c] != c:
            parent[c] = parent[parent[c]]
            c = parent[c]
        return c

    cluster = {c: (frozenset([c]), 0.0) for c in classes}  # root label -> (members, birth)
    branches: list[Branch] = []
    for (a, b), tau in sorted(normalized.items(), key=lambda kv: (kv[1], kv[0])):
        ra, rb = find(a), find(b)
        if ra == rb:
            continue
        (mem_a, birth_a), (mem_b, birth_b) = cluster[ra], cluster[rb]
        branches.append(Branch(birth_a, tau, mem_a))
        branches.append(Branch(birth_b, tau, mem_b))
        parent[rb] = ra
        cluster[ra] = (mem_a | mem_b, tau)
        del cluster[rb]

    (members, birth) = cluster[find(classes[0])]
    branches.append(Branch(birth, horizon, members))

    branches.sort(key=lambda br: (-br.start, -br.end, sorted(br.classes)))
    final = tuple(
        Branch(br.start, br.end, br.classes, task_index=k) for k, br in enumerate(branches)
    )
    return BranchHierarchy(classes=classes, horizon=horizon, branches=final)


def discover_hierarchy(dataset, process: DiffusionProcess, n_per_class: int = 500,
                       grid: int = 1000, epsilon: float = 0.005,
                       rng: np.random.Generator | None = None,
                       smoothing_sigma: float = 3.0):
    """End-to-end discovery; returns (hierarchy, smoothed curves, merge times)."""
    if rng is None:
        rng = np.random.default_rng(0)
    raw = pairwise_noisy_distances(dataset, process, n_per_class, grid, rng)
    smoothed = smooth_curves(raw, sigma=smoothing_sigma)
    taus = merge_times(smoothed, epsilon)
    hierarchy = build_hierarchy(taus, smoothed.classes, float(process.horizon))
    return hierarchy, smoothed, taus


# ---------------------------------------------------------------------------
# structure checks and edits
# ---------------------------------------------------------------------------

def validate(h: BranchHierarchy, grid: int = 1000, max_violations: int = 100) -> list[str]:
    """Structural violations as human-readable strings (empty list = valid)."""
    out: list[str] = []
    full = frozenset(h.classes)

    expected = 2 * len(h.classes) - 1
    if len(h.branches) != expected:
        out.append(f"branch count {len(h.branches)} != 2|C|-1 = {expected}")

    for b in h.branches:
        if b.end > h.horizon:
            out.append(f"branch {sorted(b.classes)} ends past the horizon: {b.end}")
        if not b.classes <= full:
            out.append(f"branch classes {sorted(b.classes - full)} not in the hierarchy")

    roots = [b for b in h.branches if b.classes == full]
    if len(roots) != 1:
        out.append(f"expected exactly one root branch, found {len(roots)}")
    elif roots[0].end != h.horizon:
        out.append(f"root ends at {roots[0].end}, not at the horizon {h.horizon}")

    for c in h.classes:
        leaves = [b for b in h.branches if b.classes == frozenset([c])]
        if len(leaves) != 1 or leaves[0].start != 0.0:
            out.append(f"class {c!r} lacks a unique leaf starting at 0")

    # partition check on a grid x classes lattice
    ts = np.arange(grid, dtype=np.float64) * (h.horizon / grid)
    starts = np.array([b.start for b in h.branches])
    ends = np.array([b.end for b in h.branches])
    for c in h.classes:
        has_c = np.array([c in b.classes for b in h.branches])
        cover = (starts[None, :] <= ts[:, None]) & (ts[:, None] < ends[None, :]) & has_c[None, :]
        counts = cover.sum(axis=1)
        for k in np.flatnonzero(counts != 1):
            out.append(f"class {c!r} at t={ts[k]:.6g} covered by {counts[k]} branches")
            if len(out) >= max_violations:
                out.append("... truncated")
                return out

    # every non-root branch needs a unique parent starting where it ends
    for b in h.branches:
        if b.classes == full:
            continue
        cands = [p for p in h.branches
                 if p is not b and p.start == b.end and b.classes <= p.classes]
        if not cands:
            out.append(f"branch {sorted(b.classes)} [{b.start}, {b.end}) has no parent")
        else:
            smallest = min(len(p.classes) for p in cands)
            if sum(1 for p in cands if len(p.classes) == smallest) > 1:
                out.append(f"branch {sorted(b.classes)} has an ambiguous parent")
    return out


def attach_class(h: BranchHierarchy, new_class: str, sibling_class: str,
                 attach_time: float) -> tuple[BranchHierarchy, dict[int, int]]:
    """Graft a new leaf next to `sibling_class` at `attach_time`.

    The branch containing the sibling at attach_time is split there; the part
    above the split absorbs the new class. Both split parts keep the original
    task index, so existing heads keep serving them; only the new leaf gets a
    fresh task. Returns the new hierarchy and the old-task -> new-task map
    (identity for all pre-existing tasks).
    """
    if new_class in h.classes:
        raise DomainError(f"class {new_class!r} already present")
    if sibling_class not in h.classes:
        raise UnknownClassError(f"unknown sibling class {sibling_class!r}")
    if not 0 < attach_time < h.horizon:
        raise DomainError(f"attach_time must lie strictly inside (0, {h.horizon})")

    target = h.lookup(sibling_class, attach_time)
    new_task = h.task_count
    ancestors = {id(b) for b in h.path(sibling_class) if b.start >= target.end}

    branches: list[Branch] = []
    for b in h.branches:
        if b is target:
            branches.append(Branch(b.start, attach_time, b.classes, b.task_index))
            branches.append(Branch(attach_time, b.end, b.classes | {new_class}, b.task_index))
        elif id(b) in ancestors:
            branches.append(Branch(b.start, b.end, b.classes | {new_class}, b.task_index))
        else:
            branches.append(b)
    branches.append(Branch(0.0, attach_time, frozenset([new_class]), new_task))

    out = BranchHierarchy(classes=h.classes + (new_class,), horizon=h.horizon,
                          branches=tuple(branches))
    return out, {b.task_index: b.task_index for b in h.branches}


def random_hierarchy(classes, horizon: float, rng: np.random.Generator) -> BranchHierarchy:
    """Random tree: uniform bipartition at each level, uniform time below the parent."""
    classes = tuple(classes)
    if len(set(classes)) != len(classes) or not classes:
        raise DataError("classes must be nonempty and unique")

    branches: list[Branch] = []

    def grow(members: tuple[str, ...], upper: float) -> None:
        if len(members) == 1:
            branches.append(Branch(0.0, upper, frozenset(members)))
            return
        while True:
            mask = rng.integers(0, 2, len(members)).astype(bool)
            if mask.any() and not mask.all():
                break
        split = float(rng.uniform(0.0, upper))
        branches.append(Branch(split, upper, frozenset(members)))
        grow(tuple(np.array(members)[mask]), split)
        grow(tuple(np.array(members)[~mask]), split)

    grow(classes, horizon)
    branches.sort(key=lambda br: (-br.start, -br.end, sorted(br.classes)))
    final = tuple(
        Branch(br.start, br.end, br.classes, task_index=k) for k, br in enumerate(branches)
    )
    return BranchHierarchy(classes=classes, horizon=horizon, branches=final)


def branch_score_distance(h1: BranchHierarchy, h2: BranchHierarchy) -> float:
    """Branch-length distance over class-set bipartitions.

    sqrt of the sum, over every class subset appearing as a branch in either
    tree, of the squared branch-length difference (absent subsets count as
    length 0). Zero iff both trees have identical topology and lengths.
    """
    if set(h1.classes) != set(h2.classes):
        raise DomainError("hierarchies cover different class sets")

    def clade_lengths(h: BranchHierarchy) -> dict[frozenset, float]:
        out: dict[frozenset, float] = {}
        for b in h.branches:
            out[b.classes] = out.get(b.classes, 0.0) + b.length
        return out

    l1, l2 = clade_lengths(h1), clade_lengths(h2)
    total = 0.0
    for key in l1.keys() | l2.keys():
        diff = l1.get(key, 0.0) - l2.get(key, 0.0)
        total += diff * diff
    return float(np.sqrt(total))
