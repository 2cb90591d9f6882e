import json

import numpy as np
import pytest

from branchdiff.diffusion import VpSde
from branchdiff.errors import DataError, DomainError, UnknownClassError
from branchdiff.hierarchy import (
    Branch,
    BranchHierarchy,
    DistanceCurves,
    attach_class,
    branch_lookup,
    branch_score_distance,
    build_hierarchy,
    discover_hierarchy,
    format_branch_table,
    merge_times,
    pairwise_noisy_distances,
    random_hierarchy,
    smooth_curves,
    validate,
)
from branchdiff.rng import substream

from trees import (
    DIGITS,
    branch_triples,
    digits_049_tree,
    digits_0479_tree,
    mnist10_discrete_tree,
    mnist10_tree,
    two_cell_tree,
)


class _Toy:
    def __init__(self, features, labels):
        self.features = np.asarray(features, dtype=np.float32)
        self.labels = list(labels)


def gaussian_1d_toy(means, n, rng, scale=1.0):
    feats, labels = [], []
    for k, mu in enumerate(means):
        feats.append(mu + scale * rng.standard_normal((n, 1)))
        labels += [f"c{k}"] * n
    return _Toy(np.concatenate(feats), labels)


class TestBranch:
    def test_zero_length_is_legal_but_covers_nothing(self):
        b = Branch(0.3, 0.3, frozenset("ab"))
        assert b.length == 0.0
        assert not b.covers("a", 0.3)

    def test_bad_intervals_and_empty_classes(self):
        with pytest.raises(DataError):
            Branch(0.5, 0.3, frozenset("a"))
        with pytest.raises(DataError):
            Branch(-0.1, 0.3, frozenset("a"))
        with pytest.raises(DataError):
            Branch(0.0, 1.0, frozenset())


class TestBuildHierarchy:
    def test_single_class(self):
        h = build_hierarchy({}, ("a",), 1.0)
        assert branch_triples(h) == {(0.0, 1.0, frozenset("a"))}
        assert validate(h) == []

    def test_three_digit_tree(self):
        taus = {("0", "4"): 0.5, ("0", "9"): 0.5, ("4", "9"): 0.35}
        h = build_hierarchy(taus, ("0", "4", "9"), 1.0)
        assert branch_triples(h) == branch_triples(digits_049_tree())
        assert validate(h) == []

    def _rebuild_from_lca(self, tree):
        taus = {}
        for i, ci in enumerate(tree.classes):
            for cj in tree.classes[i + 1:]:
                taus[(ci, cj)] = tree.lca_branch_point(ci, cj)
        return build_hierarchy(taus, tree.classes, tree.horizon)

    def test_full_digit_tree_round_trips_through_merge_times(self):
        tree = mnist10_tree()
        assert branch_triples(self._rebuild_from_lca(tree)) == branch_triples(tree)

    def test_discrete_digit_tree_round_trips_through_merge_times(self):
        tree = mnist10_discrete_tree()
        rebuilt = self._rebuild_from_lca(tree)
        assert branch_triples(rebuilt) == branch_triples(tree)
        assert validate(rebuilt) == []

    def test_26_classes_give_51_branches(self):
        letters = tuple(chr(ord("A") + k) for k in range(26))
        rng = substream(11, "letters")
        taus = {}
        for i, a in enumerate(letters):
            for b in letters[i + 1:]:
                taus[(a, b)] = float(rng.uniform(0.05, 0.95))
        h = build_hierarchy(taus, letters, 1.0)
        assert len(h.branches) == 51
        assert validate(h) == []

    def test_branch_counts_for_all_sizes(self):
        rng = substream(12, "sizes")
        for size in range(1, 27):
            classes = tuple(f"k{j}" for j in range(size))
            taus = {}
            for i, a in enumerate(classes):
                for b in classes[i + 1:]:
                    taus[(a, b)] = float(rng.uniform(0.05, 0.95))
            h = build_hierarchy(taus, classes, 1.0)
            assert len(h.branches) == 2 * size - 1
            assert validate(h) == []

    def test_tied_merge_times_make_a_zero_length_branch(self):
        taus = {("a", "b"): 0.3, ("a", "c"): 0.3, ("b", "c"): 0.3}
        h = build_hierarchy(taus, ("a", "b", "c"), 1.0)
        assert len(h.branches) == 5
        assert validate(h) == []
        assert (0.3, 0.3, frozenset("ab")) in branch_triples(h)

    def test_key_order_does_not_matter(self):
        taus = {("b", "a"): 0.4, ("c", "a"): 0.7, ("c", "b"): 0.7}
        flipped = {("a", "b"): 0.4, ("a", "c"): 0.7, ("b", "c"): 0.7}
        h1 = build_hierarchy(taus, ("a", "b", "c"), 1.0)
        h2 = build_hierarchy(flipped, ("a", "b", "c"), 1.0)
        assert h1 == h2

    def test_errors(self):
        with pytest.raises(DataError):
            build_hierarchy({("a", "b"): 0.5}, ("a", "b", "a"), 1.0)
        with pytest.raises(DataError):
            build_hierarchy({("a", "b"): 0.5}, ("a", "b", "c"), 1.0)
        with pytest.raises(DomainError):
            build_hierarchy({("a", "b"): 1.5}, ("a", "b"), 1.0)


class TestLookup:
    def test_published_three_digit_cells(self):
        h = digits_049_tree()
        assert (h.lookup("4", 0.40).start, h.lookup("4", 0.40).end) == (0.35, 0.5)
        assert h.lookup("0", 0.2).classes == frozenset("0")
        assert h.lookup("9", 1.0) is h.root

    def test_matches_brute_force_scan(self):
        rng = substream(21, "lookup")
        for seed in range(4):
            h = random_hierarchy([f"c{k}" for k in range(6)], 1.0, substream(seed, "tree"))
            for _ in range(100):
                c = h.classes[rng.integers(len(h.classes))]
                t = float(rng.uniform(0.0, 1.0))
                hits = [b for b in h.branches if b.covers(c, t)]
                assert len(hits) == 1
                assert h.lookup(c, t) is hits[0]
            assert h.lookup(h.classes[0], 1.0) is h.root

    def test_task_index_form(self):
        h = digits_049_tree()
        assert branch_lookup(h, "4", 0.4) == h.lookup("4", 0.4).task_index

    def test_errors(self):
        h = digits_049_tree()
        with pytest.raises(UnknownClassError):
            h.lookup("7", 0.5)
        with pytest.raises(DomainError):
            h.lookup("0", 1.2)
        with pytest.raises(DomainError):
            h.lookup("0", -0.1)


class TestLca:
    def test_published_values(self):
        assert digits_049_tree().lca_branch_point("4", "9") == 0.35
        assert mnist10_tree().lca_branch_point("4", "9") == 0.3524
        assert mnist10_discrete_tree().lca_branch_point("4", "9") == 527
        assert two_cell_tree().lca_branch_point("CD16+ NK", "Cl. Mono.") == 0.5796

    def test_symmetry_and_errors(self):
        h = mnist10_tree()
        for a, b in [("0", "5"), ("3", "5"), ("1", "2")]:
            assert h.lca_branch_point(a, b) == h.lca_branch_point(b, a)
        with pytest.raises(DomainError):
            h.lca_branch_point("4", "4")
        with pytest.raises(UnknownClassError):
            h.lca_branch_point("4", "x")


class TestDistanceCurves:
    def test_identical_point_mass_classes(self):
        # both classes sit at the same point, so cross and self curves agree
        point = np.array([1.5, -0.5], dtype=np.float32)
        data = _Toy(np.tile(point, (40, 1)), ["a"] * 20 + ["b"] * 20)
        curves = pairwise_noisy_distances(data, VpSde(), 500, 1000, substream(31, "pm"))
        assert curves.grid[0] > 0
        assert curves.grid[-1] == 1.0
        assert all((v >= 0).all() for v in curves.curves.values())
        smoothed = smooth_curves(curves)
        cross = smoothed.curves[("a", "b")]
        mean_self = 0.5 * (smoothed.curves[("a", "a")] + smoothed.curves[("b", "b")])
        assert np.allclose(cross, mean_self, rtol=0.25, atol=1e-3)
        taus = merge_times(smoothed, epsilon=0.005)
        assert taus[("a", "b")] == curves.grid[0]

    def test_one_dim_gap_at_early_times(self):
        # means 0 and 10, unit noise: cross ~ 10, self ~ 2*sqrt(2/pi)*... = 2/sqrt(pi)*sqrt(2)
        rng = substream(32, "gap")
        data = gaussian_1d_toy([0.0, 10.0], 4000, rng)
        curves = pairwise_noisy_distances(data, VpSde(), 4000, 1000, substream(32, "curves"))
        self_expect = 2.0 / np.sqrt(np.pi)  # E|N(0, 2)| for within-class differences
        assert abs(curves.curves[("c0", "c1")][0] - 10.0) < 0.5
        assert abs(curves.curves[("c0", "c0")][0] - self_expect) < 0.1
        assert abs(curves.curves[("c1", "c1")][0] - self_expect) < 0.1

    def test_fixed_seed_reproducible(self):
        data = gaussian_1d_toy([0.0, 3.0], 50, substream(33, "data"))
        a = pairwise_noisy_distances(data, VpSde(), 40, 200, substream(33, "run"))
        b = pairwise_noisy_distances(data, VpSde(), 40, 200, substream(33, "run"))
        for key in a.curves:
            assert np.array_equal(a.curves[key], b.curves[key])

    def test_single_object_class_raises(self):
        data = _Toy(np.zeros((3, 2)), ["a", "a", "b"])
        with pytest.raises(DataError):
            pairwise_noisy_distances(data, VpSde(), 10, 100, substream(34, "x"))
        with pytest.raises(DomainError):
            pairwise_noisy_distances(data, VpSde(), 0, 100, substream(34, "y"))


def flat_curves(values_by_key, grid):
    classes = tuple(sorted({c for pair in values_by_key for c in pair}))
    return DistanceCurves(classes=classes, grid=grid,
                          curves={k: np.asarray(v, dtype=float) for k, v in values_by_key.items()})


class TestSmoothing:
    def test_constant_curve_unchanged(self):
        grid = np.linspace(0.001, 1.0, 1000)
        curves = flat_curves({("a", "a"): np.full(1000, 3.7)}, grid)
        out = smooth_curves(curves)
        assert np.allclose(out.curves[("a", "a")], 3.7, atol=1e-12)

    def test_impulse_gives_normalized_kernel_profile(self):
        grid = np.linspace(0.001, 1.0, 1000)
        y = np.zeros(1000)
        y[500] = 1.0
        out = smooth_curves(flat_curves({("a", "a"): y}, grid)).curves[("a", "a")]
        offsets = np.arange(-12, 13, dtype=float)
        kernel = np.exp(-0.5 * (offsets / 3.0) ** 2)
        kernel /= kernel.sum()
        assert np.allclose(out[488:513], kernel, atol=1e-12)
        assert out[487] == 0.0 and out[513] == 0.0
        assert abs(out.sum() - 1.0) < 1e-12

    def test_linear_ramp_interior_unchanged(self):
        grid = np.linspace(0.001, 1.0, 1000)
        y = np.linspace(0.0, 5.0, 1000)
        out = smooth_curves(flat_curves({("a", "a"): y}, grid)).curves[("a", "a")]
        assert np.allclose(out[12:-12], y[12:-12], atol=1e-6)
        assert abs(out[0] - y[0]) > 1e-4  # renormalized edge shifts on a ramp

    def test_bad_sigma(self):
        grid = np.linspace(0.001, 1.0, 10)
        with pytest.raises(DomainError):
            smooth_curves(flat_curves({("a", "a"): np.zeros(10)}, grid), sigma=0.0)


class TestMergeTimes:
    def test_identical_curves_merge_at_first_grid_point(self):
        grid = np.linspace(0.001, 1.0, 1000)
        flat = np.full(1000, 2.0)
        curves = flat_curves({("a", "a"): flat, ("b", "b"): flat, ("a", "b"): flat}, grid)
        assert merge_times(curves, epsilon=0.0)[("a", "b")] == grid[0]

    def test_infinite_epsilon_is_vacuous(self):
        grid = np.linspace(0.001, 1.0, 1000)
        curves = flat_curves({("a", "a"): np.full(1000, 1.0),
                              ("b", "b"): np.full(1000, 1.0),
                              ("a", "b"): np.full(1000, 50.0)}, grid)
        assert merge_times(curves, epsilon=np.inf)[("a", "b")] == grid[0]

    def test_never_satisfied_falls_back_to_horizon(self):
        grid = np.linspace(0.001, 1.0, 1000)
        curves = flat_curves({("a", "a"): np.full(1000, 1.0),
                              ("b", "b"): np.full(1000, 1.0),
                              ("a", "b"): np.full(1000, 50.0)}, grid)
        assert merge_times(curves, epsilon=0.005)[("a", "b")] == grid[-1]

    def test_near_pair_merges_before_far_pair(self):
        # pair assignments are frozen across the grid, so their MC jitter does
        # not average out over time; epsilon must clear that floor (~2/sqrt(n))
        rng = substream(41, "nearfar")
        data = gaussian_1d_toy([0.0, 0.1, 10.0], 20000, rng)
        curves = smooth_curves(
            pairwise_noisy_distances(data, VpSde(), 20000, 1000, substream(41, "c")))
        taus = merge_times(curves, epsilon=0.03)
        near, far = taus[("c0", "c1")], taus[("c0", "c2")]
        assert near < far
        assert near < 0.1
        assert far == curves.grid[-1]

    def test_merge_time_nondecreasing_in_gap(self):
        taus = []
        for k, gap in enumerate([0.2, 1.0, 3.0]):
            data = gaussian_1d_toy([0.0, gap], 3000, substream(42, "mono", k))
            curves = smooth_curves(
                pairwise_noisy_distances(data, VpSde(), 3000, 1000, substream(43, "mono", k)))
            taus.append(merge_times(curves, epsilon=0.2)[("c0", "c1")])
        assert taus[0] < taus[1] < taus[2]
        assert 0.5 < taus[1] < 0.95  # interior branch point for the middle gap
        assert taus[2] == 1.0


class TestValidate:
    def test_overlap_names_the_cell(self):
        branches = (
            Branch(0.5, 1.0, frozenset("ab"), 0),
            Branch(0.0, 0.6, frozenset("a"), 1),
            Branch(0.0, 0.5, frozenset("b"), 2),
        )
        h = BranchHierarchy(classes=("a", "b"), horizon=1.0, branches=branches)
        msgs = validate(h)
        assert any("'a'" in m and "covered by 2" in m for m in msgs)

    def test_missing_leaf_names_the_uncovered_cell(self):
        branches = (
            Branch(0.5, 1.0, frozenset("ab"), 0),
            Branch(0.0, 0.5, frozenset("a"), 1),
            Branch(0.1, 0.5, frozenset("b"), 2),
        )
        h = BranchHierarchy(classes=("a", "b"), horizon=1.0, branches=branches)
        msgs = validate(h)
        assert any("'b'" in m and "covered by 0" in m for m in msgs)
        assert any("lacks a unique leaf" in m for m in msgs)

    def test_published_trees_are_valid(self):
        assert validate(mnist10_tree()) == []
        assert validate(mnist10_discrete_tree()) == []
        assert validate(digits_049_tree()) == []
        assert validate(digits_0479_tree()) == []
        assert validate(two_cell_tree()) == []


class TestAttachClass:
    def test_published_four_digit_graft(self):
        grown, task_map = attach_class(digits_049_tree(), "7", "4", 0.38)
        assert branch_triples(grown) == branch_triples(digits_0479_tree())
        assert validate(grown) == []
        assert task_map == {b.task_index: b.task_index for b in digits_049_tree().branches}

    def test_split_halves_keep_the_old_task(self):
        base = digits_049_tree()
        old_task = base.lookup("4", 0.38).task_index
        grown, _ = attach_class(base, "7", "4", 0.38)
        assert grown.lookup("4", 0.36).task_index == old_task
        assert grown.lookup("4", 0.45).task_index == old_task
        assert grown.lookup("7", 0.45).task_index == old_task
        assert grown.lookup("7", 0.1).task_index == base.task_count
        assert grown.task_count == base.task_count + 1

    def test_other_branches_untouched(self):
        base = mnist10_tree()
        grown, _ = attach_class(base, "x", "4", 0.3)
        untouched = {(b.start, b.end, b.classes) for b in base.branches
                     if not (b.covers("4", 0.3) or b.start >= base.lookup("4", 0.3).end)}
        assert untouched <= branch_triples(grown)
        assert len(grown.branches) == 2 * 11 - 1
        assert validate(grown) == []

    def test_single_class_attach(self):
        base = build_hierarchy({}, ("a",), 1.0)
        grown, _ = attach_class(base, "b", "a", 0.5)
        assert len(grown.branches) == 3
        assert validate(grown) == []
        assert grown.lca_branch_point("a", "b") == 0.5

    def test_attach_at_existing_boundary(self):
        grown, _ = attach_class(digits_049_tree(), "7", "4", 0.5)
        assert validate(grown) == []
        assert (0.5, 0.5, frozenset("049")) in branch_triples(grown)
        assert grown.lookup("7", 0.2).classes == frozenset("7")
        assert grown.lca_branch_point("7", "0") == 0.5

    def test_errors(self):
        base = digits_049_tree()
        with pytest.raises(UnknownClassError):
            attach_class(base, "7", "8", 0.4)
        with pytest.raises(DomainError):
            attach_class(base, "4", "0", 0.4)
        for bad_time in (1.0, 1.5, 0.0, -0.2):
            with pytest.raises(DomainError):
                attach_class(base, "7", "4", bad_time)


class TestRandomHierarchy:
    def test_single_class(self):
        h = random_hierarchy(["a"], 1.0, substream(51, "one"))
        assert branch_triples(h) == {(0.0, 1.0, frozenset("a"))}

    def test_ten_classes_valid(self):
        for seed in range(5):
            h = random_hierarchy(DIGITS, 1.0, substream(seed, "rand10"))
            assert len(h.branches) == 19
            assert validate(h) == []

    def test_child_branch_points_below_parent(self):
        h = random_hierarchy(DIGITS, 1.0, substream(52, "mono"))
        for b in h.branches:
            p = h.parent(b)
            if p is not None:
                assert b.start < p.start or b.start == 0.0
                assert b.end == p.start


class TestBranchScoreDistance:
    def test_two_class_merge_depth_difference(self):
        h1 = build_hierarchy({("a", "b"): 0.3}, ("a", "b"), 1.0)
        h2 = build_hierarchy({("a", "b"): 0.5}, ("a", "b"), 1.0)
        # bipartitions: {a} and {b} differ by 0.2 each, {a,b} by 0.2
        expected = np.sqrt(3 * 0.2 ** 2)
        assert abs(branch_score_distance(h1, h2) - expected) < 1e-12

    def test_matches_subset_enumeration(self):
        def oracle(h1, h2):
            def lengths(h):
                out = {}
                for b in h.branches:
                    out[b.classes] = out.get(b.classes, 0.0) + b.length
                return out
            l1, l2 = lengths(h1), lengths(h2)
            return float(np.sqrt(sum(
                (l1.get(k, 0.0) - l2.get(k, 0.0)) ** 2 for k in set(l1) | set(l2))))

        for seed in range(6):
            h1 = random_hierarchy(DIGITS[:6], 1.0, substream(seed, "bsd", 1))
            h2 = random_hierarchy(DIGITS[:6], 1.0, substream(seed, "bsd", 2))
            d = branch_score_distance(h1, h2)
            assert abs(d - oracle(h1, h2)) < 1e-12
            assert abs(d - branch_score_distance(h2, h1)) < 1e-15
            assert branch_score_distance(h1, h1) == 0.0

    def test_leaf_set_mismatch(self):
        h1 = build_hierarchy({("a", "b"): 0.3}, ("a", "b"), 1.0)
        h2 = build_hierarchy({("a", "c"): 0.3}, ("a", "c"), 1.0)
        with pytest.raises(DomainError):
            branch_score_distance(h1, h2)


class TestDiscoveryStability:
    def test_discovered_trees_cluster_tighter_than_random(self):
        # three 1-d classes: a near pair plus one far class
        discovered = []
        for run in range(10):
            data = gaussian_1d_toy([0.0, 1.0, 6.0], 800, substream(61, "stab", run))
            h, _, _ = discover_hierarchy(
                data, VpSde(), n_per_class=800, grid=1000, epsilon=0.2,
                rng=substream(62, "stab", run))
            discovered.append(h)
        randoms = [random_hierarchy(("c0", "c1", "c2"), 1.0, substream(63, "stab", k))
                   for k in range(10)]

        def pairwise_median(trees):
            ds = [branch_score_distance(trees[i], trees[j])
                  for i in range(len(trees)) for j in range(i + 1, len(trees))]
            return float(np.median(ds))

        for h in discovered:
            assert validate(h) == []
        assert pairwise_median(discovered) < pairwise_median(randoms)


class TestJsonRoundTrip:
    def test_save_load_identity(self, tmp_path):
        tree = mnist10_tree()
        path = tmp_path / "tree.json"
        tree.save(path)
        assert BranchHierarchy.load(path) == tree

    def test_doc_round_trip_is_lossless(self):
        tree = two_cell_tree()
        doc = json.loads(json.dumps(tree.to_json_dict()))
        again = BranchHierarchy.from_json_dict(doc)
        assert again == tree
        assert again.to_json_dict() == tree.to_json_dict()

    def test_malformed_documents(self, tmp_path):
        path = tmp_path / "bad.json"
        rng = substream(71, "fuzz")
        for k in range(20):
            path.write_bytes(rng.bytes(40))
            with pytest.raises(DataError):
                BranchHierarchy.load(path)
        path.write_text(json.dumps({"classes": ["a"], "horizon": 1.0}))
        with pytest.raises(DataError):
            BranchHierarchy.load(path)
        path.write_text(json.dumps({"classes": ["a"], "horizon": 1.0,
                                    "branches": [{"start": 0.0}]}))
        with pytest.raises(DataError):
            BranchHierarchy.load(path)
        path.write_text("[1, 2, 3]")
        with pytest.raises(DataError):
            BranchHierarchy.load(path)


def test_branch_table_lists_every_branch():
    table = format_branch_table(digits_049_tree())
    lines = table.splitlines()
    assert lines[0].split() == ["start", "end", "classes"]
    assert len(lines) == 6
    assert "{4, 9}" in table
