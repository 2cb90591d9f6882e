"""Reference branch hierarchies shared across test modules.

Trees are written out literally as (start, end, classes) rows; task indices
follow the canonical ordering used by build_hierarchy (descending start,
descending end, then class list).
"""
from __future__ import annotations

from branchdiff.hierarchy import Branch, BranchHierarchy

DIGITS = tuple(str(d) for d in range(10))

# ten-digit tree, continuous time
MNIST10_ROWS = [
    (0.4855, 1.0, "0123456789"),
    (0.4474, 0.4855, "123456789"),
    (0.4334, 0.4474, "23456789"),
    (0.4164, 0.4334, "2345789"),
    (0.3744, 0.4164, "345789"),
    (0.3684, 0.3744, "34589"),
    (0.3524, 0.3684, "3459"),
    (0.3483, 0.3524, "345"),
    (0.2713, 0.3483, "35"),
    (0.0, 0.4855, "0"),
    (0.0, 0.4474, "1"),
    (0.0, 0.4334, "6"),
    (0.0, 0.4164, "2"),
    (0.0, 0.3744, "7"),
    (0.0, 0.3684, "8"),
    (0.0, 0.3524, "9"),
    (0.0, 0.3483, "4"),
    (0.0, 0.2713, "5"),
    (0.0, 0.2713, "3"),
]

# ten-digit tree, discrete time (integer steps, horizon 1000)
MNIST10_DISCRETE_ROWS = [
    (761, 1000, "0123456789"),
    (760, 761, "023456789"),
    (712, 760, "23456789"),
    (709, 712, "3456789"),
    (700, 709, "3568"),
    (685, 709, "479"),
    (659, 700, "358"),
    (656, 659, "35"),
    (527, 685, "49"),
    (0, 761, "1"),
    (0, 760, "0"),
    (0, 712, "2"),
    (0, 700, "6"),
    (0, 685, "7"),
    (0, 659, "8"),
    (0, 656, "5"),
    (0, 656, "3"),
    (0, 527, "4"),
    (0, 527, "9"),
]

# three-digit tree for 0/4/9 and its four-digit variant with 7 grafted at 0.38
DIGITS_049_ROWS = [
    (0.5, 1.0, "049"),
    (0.0, 0.5, "0"),
    (0.35, 0.5, "49"),
    (0.0, 0.35, "4"),
    (0.0, 0.35, "9"),
]

DIGITS_0479_ROWS = [
    (0.5, 1.0, "0479"),
    (0.0, 0.5, "0"),
    (0.38, 0.5, "479"),
    (0.0, 0.38, "7"),
    (0.35, 0.38, "49"),
    (0.0, 0.35, "4"),
    (0.0, 0.35, "9"),
]

# two cell types with a single boundary at 0.5796
TWO_CELL_ROWS = [
    (0.5796, 1.0, ["CD16+ NK", "Cl. Mono."]),
    (0.0, 0.5796, ["CD16+ NK"]),
    (0.0, 0.5796, ["Cl. Mono."]),
]


def tree_from_rows(rows, classes, horizon):
    ordered = sorted(rows, key=lambda r: (-r[0], -r[1], sorted(r[2])))
    branches = tuple(
        Branch(float(s), float(e), frozenset(cs), task_index=k)
        for k, (s, e, cs) in enumerate(ordered)
    )
    return BranchHierarchy(classes=tuple(classes), horizon=float(horizon), branches=branches)


def mnist10_tree() -> BranchHierarchy:
    return tree_from_rows(MNIST10_ROWS, DIGITS, 1.0)


def mnist10_discrete_tree() -> BranchHierarchy:
    return tree_from_rows(MNIST10_DISCRETE_ROWS, DIGITS, 1000)


def digits_049_tree() -> BranchHierarchy:
    return tree_from_rows(DIGITS_049_ROWS, ("0", "4", "9"), 1.0)


def digits_0479_tree() -> BranchHierarchy:
    return tree_from_rows(DIGITS_0479_ROWS, ("0", "4", "7", "9"), 1.0)


def two_cell_tree() -> BranchHierarchy:
    return tree_from_rows(TWO_CELL_ROWS, ("CD16+ NK", "Cl. Mono."), 1.0)


def branch_triples(h: BranchHierarchy) -> set:
    return {(b.start, b.end, b.classes) for b in h.branches}
