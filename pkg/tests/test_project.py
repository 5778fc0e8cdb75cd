import itertools

import numpy as np
import pytest

from reart import geom, project
from reart.articulate import Normalization
from reart.errors import EmptyPart, InsufficientMotion
from reart.fitting import FitConfig, RelaxedModel
from reart.geom import JointState, JointType, RigidTransform, ScrewParams
from reart.project import KinematicTree, build_tree, fit_screw_pair, fit_spherical_pair
from reart.segfield import init_segfield


def screw_sequence(axis, moment, taus, ds):
    s = ScrewParams(np.asarray(axis, float), np.asarray(moment, float))
    return s, [geom.screw_transform(s, JointState(t, d)) for t, d in zip(taus, ds)]


def axis_aligned(a, b):
    a = a * geom.canonical_axis_sign(a)
    b = b * geom.canonical_axis_sign(b)
    return np.linalg.norm(a - b)


def line_distance(point, line_point, line_dir):
    delta = point - line_point
    return np.linalg.norm(delta - (delta @ line_dir) * line_dir)


def test_fit_screw_revolute_recovery():
    true_axis = np.array([0.3, -0.5, 0.8])
    true_axis /= np.linalg.norm(true_axis)
    true_m = np.array([0.2, 0.1, -0.3])
    taus = 0.1 * np.arange(10)
    s, rels = screw_sequence(true_axis, true_m, taus, np.zeros(10))
    screw, states, residual = fit_screw_pair(rels)
    assert axis_aligned(screw.axis, true_axis) < 1e-6
    assert line_distance(screw.moment, true_m, true_axis) < 1e-6
    assert residual < 1e-9
    sign = float(np.sign(screw.axis @ true_axis))
    assert np.allclose([s.tau * sign for s in states], taus, atol=1e-6)


def test_fit_screw_prismatic_recovery():
    u = np.array([1.0, 2.0, -1.0])
    u /= np.linalg.norm(u)
    ds = np.linspace(0, 0.5, 8)
    _, rels = screw_sequence(u, np.zeros(3), np.zeros(8), ds)
    screw, states, residual = fit_screw_pair(rels)
    assert axis_aligned(screw.axis, u) < 1e-9
    assert residual < 1e-9
    sign = float(np.sign(screw.axis @ u))
    assert np.allclose([s.d * sign for s in states], ds, atol=1e-9)
    assert all(s.tau == 0 for s in states)


def test_fit_screw_residual_zero_at_truth():
    s, rels = screw_sequence([0, 0, 1.0], [1.0, 0, 0], 0.2 * np.arange(6), np.zeros(6))
    _, _, residual = fit_screw_pair(rels)
    assert residual < 1e-12


def test_fit_screw_insufficient_motion():
    rels = [RigidTransform.identity() for _ in range(5)]
    with pytest.raises(InsufficientMotion):
        fit_screw_pair(rels)


def test_spatial_energy_cases():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(40, 3))
    assert project.spatial_energy(pts, pts) == 0.0
    a = np.array([[0.0, 0, 0]])
    b = np.array([[3.0, 0, 0]])
    assert project.spatial_energy(a, b) == pytest.approx(9.0)
    x = rng.normal(size=(30, 3))
    y = rng.normal(size=(25, 3)) + 2.0
    assert project.spatial_energy(x, y, seed=1) == pytest.approx(
        project.spatial_energy(y, x, seed=1)
    )
    with pytest.raises(EmptyPart):
        project.spatial_energy(np.zeros((0, 3)), b)


def relaxed_from_trajectories(twists, pts, labels, c=0):
    return RelaxedModel(
        n=twists.shape[0],
        segfield=init_segfield(8, 16, 0),
        twists=twists,
        canonical_index=c,
        canonical_points=pts,
        labels=labels,
        normalization=Normalization.fit(pts),
    )


def test_merge_identical_trajectories():
    rng = np.random.default_rng(1)
    T = 6
    xi = rng.normal(size=(T, 6)) * 0.2
    xi[0] = 0.0
    twists = np.stack([xi, xi, rng.normal(size=(T, 6)) * 0.5])
    twists[2, 0] = 0.0
    pts = np.concatenate([rng.normal(size=(30, 3)), rng.normal(size=(30, 3)) + 0.1,
                          rng.normal(size=(30, 3)) + 5.0])
    labels = np.repeat([0, 1, 2], 30)
    merged, remap = project.merge_parts(relaxed_from_trajectories(twists, pts, labels), 3e-2)
    assert merged.n == 2
    assert remap[0] == remap[1] != remap[2]
    assert merged.labels.max() == 1  # labels compacted into [0, n_merged)
    assert merged.labels.min() == 0
    # idempotent
    merged2, remap2 = project.merge_parts(merged, 3e-2)
    assert merged2.n == 2
    assert np.array_equal(remap2, np.arange(2))


def test_merge_rejects_large_relative_rotation():
    T = 6
    twists = np.zeros((2, T, 6))
    for t in range(T):
        twists[1, t, :3] = [0, 0, np.deg2rad(30) * t]  # 30 deg per frame
    pts = np.concatenate([np.random.default_rng(2).normal(size=(20, 3)),
                          np.random.default_rng(3).normal(size=(20, 3))])
    labels = np.repeat([0, 1], 20)
    merged, _ = project.merge_parts(relaxed_from_trajectories(twists, pts, labels), 3e-2)
    assert merged.n == 2


def test_build_tree_single_node():
    tree, total = build_tree(1, np.zeros((1, 1)))
    assert tree.n == 1 and tree.root == 0 and total == 0.0


def test_build_tree_three_parts_hand_case():
    w = np.array([[0.0, 1.0, 5.0], [1.0, 0.0, 2.0], [5.0, 2.0, 0.0]])
    # enumeration oracle over the 3 spanning trees of K3
    oracle = min(
        (w[0, 1] + w[1, 2], frozenset([(0, 1), (1, 2)])),
        (w[0, 1] + w[0, 2], frozenset([(0, 1), (0, 2)])),
        (w[0, 2] + w[1, 2], frozenset([(0, 2), (1, 2)])),
    )
    tree, total = build_tree(3, w, root=0)
    got = frozenset(tuple(sorted(e)) for e in tree.edges())
    assert total == pytest.approx(oracle[0]) == pytest.approx(3.0)
    assert got == oracle[1] == frozenset([(0, 1), (1, 2)])


def prufer_trees(n):
    """All spanning trees of K_n via Prüfer sequences."""
    if n == 1:
        yield []
        return
    if n == 2:
        yield [(0, 1)]
        return
    for seq in itertools.product(range(n), repeat=n - 2):
        seq = list(seq)
        degree = [1] * n
        for v in seq:
            degree[v] += 1
        edges = []
        seq_work = seq[:]
        leaves = sorted(i for i in range(n) if degree[i] == 1)
        import heapq

        heap = leaves[:]
        heapq.heapify(heap)
        for v in seq_work:
            leaf = heapq.heappop(heap)
            edges.append(tuple(sorted((leaf, v))))
            degree[leaf] = 0
            degree[v] -= 1
            if degree[v] == 1:
                heapq.heappush(heap, v)
        u, v = [i for i in range(n) if degree[i] == 1][:2]
        edges.append(tuple(sorted((u, v))))
        yield edges


def test_build_tree_matches_enumeration():
    rng = np.random.default_rng(4)
    for trial in range(100):
        n = int(rng.integers(2, 7))
        w = rng.uniform(0.1, 10, size=(n, n))
        w = (w + w.T) / 2
        np.fill_diagonal(w, 0)
        best_cost = min(sum(w[i, j] for i, j in edges) for edges in prufer_trees(n))
        tree, total = build_tree(n, w, root=int(rng.integers(n)))
        assert total == pytest.approx(best_cost)
        # distinct weights: edge sets must agree exactly
        best_sets = [
            frozenset(edges)
            for edges in prufer_trees(n)
            if sum(w[i, j] for i, j in edges) < best_cost + 1e-9
        ]
        got = frozenset(tuple(sorted(e)) for e in tree.edges())
        assert got in best_sets


def test_tree_invariants_random():
    rng = np.random.default_rng(5)
    for _ in range(50):
        n = int(rng.integers(1, 10))
        w = rng.uniform(0, 1, size=(n, n))
        tree, _ = build_tree(n, (w + w.T) / 2, root=int(rng.integers(n)))
        assert len(tree.topo_order()) == n  # connected + acyclic
        assert int((tree.parent == -1).sum()) == 1


def test_infer_joint_type():
    rev = [JointState(0.5, 0.0), JointState(-0.4, 0.0)]
    assert project.infer_joint_type(rev) == JointType.REVOLUTE
    pri = [JointState(0.0, 0.3), JointState(0.0, 0.6)]
    assert project.infer_joint_type(pri) == JointType.PRISMATIC
    mixed = [JointState(0.01, 0.2), JointState(-0.01, 0.2)]
    assert project.infer_joint_type(mixed) == JointType.PRISMATIC


def test_fit_spherical_recovery():
    center = np.array([0.4, -0.2, 0.7])
    rng = np.random.default_rng(6)
    rels = []
    for t in range(8):
        w = rng.normal(size=3) * 0.4
        rot = geom.exp_twist(geom.Twist(w, np.cross(center, w)))
        rels.append(rot)
    got, rotations, residual = fit_spherical_pair(rels)
    assert np.linalg.norm(got - center) < 1e-6
    assert residual < 1e-9
    assert len(rotations) == 8


def test_fit_spherical_identity_degenerate():
    rels = [RigidTransform.identity() for _ in range(4)]
    center, rotations, residual = fit_spherical_pair(rels, fallback_center=np.array([1.0, 2, 3]))
    assert np.allclose(center, [1.0, 2, 3])
    assert residual == 0.0


def test_fit_spherical_translation_has_residual():
    rels = [RigidTransform(np.eye(3), np.array([0.1 * t, 0, 0])) for t in range(1, 5)]
    _, _, residual = fit_spherical_pair(rels)
    assert residual > 1e-4


def chain_relaxed(T=10, seed=0):
    rng = np.random.default_rng(seed)
    s1 = ScrewParams(np.array([0, 0, 1.0]), np.array([0.5, 0, 0]))
    s2 = ScrewParams(np.array([0, 1.0, 0]), np.zeros(3))
    twists = np.zeros((3, T, 6))
    for t in range(T):
        t1 = geom.screw_transform(s1, JointState(0.09 * t, 0))
        t2 = geom.compose(geom.screw_transform(s2, JointState(0, 0.04 * t)), t1)
        twists[1, t] = geom.log_transform(t1).as_array()
        twists[2, t] = geom.log_transform(t2).as_array()
    pts = np.concatenate([
        rng.uniform([-0.5, -0.2, -0.2], [0.0, 0.2, 0.2], (300, 3)),
        rng.uniform([0.05, -0.2, -0.2], [0.45, 0.2, 0.2], (250, 3)),
        rng.uniform([0.5, -0.2, -0.2], [0.9, 0.2, 0.2], (200, 3)),
    ])
    labels = np.repeat([0, 1, 2], [300, 250, 200])
    return relaxed_from_trajectories(twists, pts, labels)


def test_project_chain_recovers_topology_and_types():
    model = project.project(chain_relaxed(), FitConfig(max_parts=8, hidden=16))
    assert model.n_parts == 3
    assert list(model.tree.parent) == [-1, 0, 1]
    assert model.joint_types[1] == JointType.REVOLUTE
    assert model.joint_types[2] == JointType.PRISMATIC
    assert np.allclose(model.states[0], 0.0)  # canonical frame pinned


def test_project_single_part_trivial():
    rng = np.random.default_rng(7)
    pts = rng.normal(size=(50, 3))
    rm = relaxed_from_trajectories(np.zeros((1, 5, 6)), pts, np.zeros(50, dtype=int))
    model = project.project(rm, FitConfig(max_parts=8, hidden=16))
    assert model.n_parts == 1
    assert model.screws == [None]
    assert model.e_project == 0.0


def test_project_fitness_stable_with_extra_consistent_frame():
    base = project.project(chain_relaxed(T=9), FitConfig(max_parts=8, hidden=16))
    longer = project.project(chain_relaxed(T=10), FitConfig(max_parts=8, hidden=16))
    assert longer.e_project <= base.e_project + 1e-6


def test_kinematic_tree_validation():
    with pytest.raises(ValueError):
        KinematicTree(np.array([1, 0]), 0)  # cycle, two roots missing
    with pytest.raises(ValueError):
        KinematicTree(np.array([-1, -1]), 0)  # two roots
    tree = KinematicTree(np.array([-1, 0, 0, 2]), 0)
    assert tree.topo_order()[0] == 0
    assert tree.children()[0] == [1, 2]
