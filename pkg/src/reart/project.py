"""Projection of a relaxed per-part 6-DOF model onto a kinematic tree.

Stages: merge parts that stay rigidly attached, fit a 1-DOF screw joint to
every part pair's relative motion, build the minimum spanning tree under a
spatial-proximity + motion-residual edge weight, then type each joint as
revolute or prismatic.

The residual of a rigid transform against a target is
``trace(I - R_err) + |t_err|^2`` with ``err = inv(target) @ T``; the
rotation part equals 2(1 - cos(angle)) and the whole expression is zero
exactly at the target.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch

from . import geom
from .cloud import farthest_point_sample
from .errors import EmptyPart, InsufficientMotion
from .geom import JointState, JointType, RigidTransform, ScrewParams

_IDENTITY_TOL = 1e-9


@dataclass
class PairFit:
    child: int
    parent: int
    screw: ScrewParams
    states: list[JointState]
    e_1dof: float
    e_spatial: float = 0.0
    e_merge: float = 0.0

    def flipped(self) -> "PairFit":
        """Same joint seen from the other side: axis kept, states negated."""
        states = [JointState(-s.tau, -s.d) for s in self.states]
        return PairFit(self.parent, self.child, self.screw, states,
                       self.e_1dof, self.e_spatial, self.e_merge)


@dataclass
class KinematicTree:
    parent: np.ndarray  # parent[i]; root has -1
    root: int

    def __post_init__(self):
        self.parent = np.asarray(self.parent, dtype=np.int64)
        n = len(self.parent)
        if not 0 <= self.root < n or self.parent[self.root] != -1:
            raise ValueError("root must exist and have no parent")
        if int((self.parent == -1).sum()) != 1:
            raise ValueError("tree must have exactly one root")
        seen = set()
        for i in range(n):
            path = []
            j = i
            while j != -1:
                if j in path:
                    raise ValueError("tree contains a cycle")
                path.append(j)
                if j in seen:
                    break
                j = int(self.parent[j])
            seen.update(path)
        if len(seen) != n:
            raise ValueError("tree is not connected")

    @property
    def n(self) -> int:
        return len(self.parent)

    def children(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {i: [] for i in range(self.n)}
        for i, p in enumerate(self.parent):
            if p != -1:
                out[int(p)].append(i)
        return out

    def topo_order(self) -> list[int]:
        """Root first, every parent before its children."""
        order, stack = [], [self.root]
        kids = self.children()
        while stack:
            i = stack.pop()
            order.append(i)
            stack.extend(reversed(kids[i]))
        return order

    def edges(self) -> list[tuple[int, int]]:
        return [(i, int(p)) for i, p in enumerate(self.parent) if p != -1]


def transform_residual(t: RigidTransform, target: RigidTransform | None = None) -> float:
    """trace(I - R_err) + |t_err|^2 of t against target (default identity)."""
    err = t if target is None else geom.relative(t, target)
    return float(3.0 - np.trace(err.rotation) + err.translation @ err.translation)


def _principal_direction(vectors: np.ndarray) -> np.ndarray:
    """Unit direction of largest variance, sign-aligned with the data."""
    _, _, vt = np.linalg.svd(vectors, full_matrices=False)
    direction = vt[0]
    score = vectors @ direction
    if np.sum(score * np.abs(score)) < 0:
        direction = -direction
    return direction


def _screw_states_least_squares(
    rels: list[RigidTransform], axis: np.ndarray, taus: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Moment point and per-frame slides from the translation model.

    The translation of a screw motion is V(tau*l) @ (tau*(m x l) + d*l),
    linear in m and d once the axis and rotations are fixed; the minimal-norm
    least-squares solution puts m perpendicular to the axis.
    """
    t_count = len(rels)
    a = np.zeros((3 * t_count, 3 + t_count))
    b = np.zeros(3 * t_count)
    lx = geom.skew(axis)
    for t, rel in enumerate(rels):
        theta = taus[t] * axis
        ang = float(np.linalg.norm(theta))
        _, bb, cc = geom._rot_coeffs(ang)
        k = geom.skew(theta)
        vmat = np.eye(3) + bb * k + cc * (k @ k)
        a[3 * t : 3 * t + 3, :3] = -taus[t] * (vmat @ lx)
        a[3 * t : 3 * t + 3, 3 + t] = vmat @ axis
        b[3 * t : 3 * t + 3] = rel.translation
    sol, *_ = np.linalg.lstsq(a, b, rcond=None)
    return sol[:3], sol[3:]


def _residual_torch(
    rels_r: torch.Tensor, rels_t: torch.Tensor,
    axis: torch.Tensor, moment: torch.Tensor,
    tau: torch.Tensor, d: torch.Tensor,
) -> torch.Tensor:
    unit = axis / torch.linalg.norm(axis)
    xi = geom.screw_twists_torch(
        unit.expand(len(tau), 3), moment.expand(len(tau), 3), tau, d
    )
    rs, ts = geom.exp_twists_torch(xi)
    r_err = rs.transpose(1, 2) @ rels_r
    t_err = (rs.transpose(1, 2) @ (rels_t - ts).unsqueeze(-1)).squeeze(-1)
    rot_part = 3.0 - r_err.diagonal(dim1=1, dim2=2).sum(-1)
    return (rot_part + (t_err**2).sum(-1)).sum()


def fit_screw_pair(
    rels: list[RigidTransform],
    refine_iters: int = 120,
    prismatic_threshold: float = 1e-4,
) -> tuple[ScrewParams, list[JointState], float]:
    """Fit one screw joint to a sequence of relative transforms.

    Closed-form initialization (principal rotation direction, or principal
    translation direction for near-zero rotations, then a linear solve for
    the moment point and slides), followed by a short joint Adam refinement
    of axis, moment, and per-frame states. Returns the summed per-frame
    residual.
    """
    if len(rels) < 2:
        raise ValueError("need at least two relative transforms")
    if all(np.abs(r.matrix() - np.eye(4)).max() < _IDENTITY_TOL for r in rels):
        raise InsufficientMotion("all relative transforms are identity; merge instead")

    omegas = np.stack([geom.log_transform(r).omega for r in rels])
    translations = np.stack([r.translation for r in rels])
    if np.linalg.norm(omegas, axis=1).mean() < prismatic_threshold:
        axis = _principal_direction(translations)
        taus = np.zeros(len(rels))
        moment = np.zeros(3)
        ds = translations @ axis
    else:
        axis = _principal_direction(omegas)
        taus = omegas @ axis
        moment, ds = _screw_states_least_squares(rels, axis, taus)

    rels_r = torch.tensor(np.stack([r.rotation for r in rels]))
    rels_t = torch.tensor(translations)

    def total(ax, mo, ta, dd):
        with torch.no_grad():
            return float(_residual_torch(rels_r, rels_t, ax, mo, ta, dd))

    params = {
        "axis": torch.tensor(axis, requires_grad=True),
        "moment": torch.tensor(moment, requires_grad=True),
        "tau": torch.tensor(taus, requires_grad=True),
        "d": torch.tensor(ds, requires_grad=True),
    }
    best = (
        total(params["axis"], params["moment"], params["tau"], params["d"]),
        (axis.copy(), moment.copy(), taus.copy(), ds.copy()),
    )
    from .optim import AdamState, adam_step, collect_grads, zero_grads

    state = AdamState()
    for _ in range(refine_iters):
        zero_grads(params)
        loss = _residual_torch(rels_r, rels_t, params["axis"], params["moment"],
                               params["tau"], params["d"])
        loss.backward()
        adam_step(state, params, collect_grads(params), lr=1e-2)
        with torch.no_grad():
            params["axis"] /= torch.linalg.norm(params["axis"])
        val = total(params["axis"], params["moment"], params["tau"], params["d"])
        if val < best[0]:
            best = (
                val,
                tuple(params[k].detach().numpy().copy() for k in ("axis", "moment", "tau", "d")),
            )

    residual, (axis, moment, taus, ds) = best
    axis = axis / np.linalg.norm(axis)
    moment = moment - (moment @ axis) * axis  # the axis-parallel part is gauge
    states = [JointState(float(t), float(d)) for t, d in zip(taus, ds)]
    return ScrewParams(axis, moment), states, residual


def fit_spherical_pair(
    rels: list[RigidTransform], fallback_center: np.ndarray | None = None
) -> tuple[np.ndarray, list[np.ndarray], float]:
    """Fixed rotation center explaining a sequence of relative transforms.

    Least-squares solve of (R_t - I) c = -t_t; the residual is the summed
    squared displacement of the center. A degenerate all-identity sequence
    accepts any center: the fallback (e.g. the part centroid) is returned
    with zero residual.
    """
    if len(rels) < 2:
        raise ValueError("need at least two relative transforms")
    if all(np.abs(r.matrix() - np.eye(4)).max() < _IDENTITY_TOL for r in rels):
        center = np.zeros(3) if fallback_center is None else np.asarray(fallback_center, float)
        return center, [np.zeros(3) for _ in rels], 0.0
    a = np.concatenate([r.rotation - np.eye(3) for r in rels], axis=0)
    b = np.concatenate([-r.translation for r in rels])
    if np.linalg.norm(a) < 1e-12:
        center = np.zeros(3) if fallback_center is None else np.asarray(fallback_center, float)
    else:
        center, *_ = np.linalg.lstsq(a, b, rcond=None)
    rotations = [geom.log_transform(r).omega for r in rels]
    residual = float(sum(np.sum((r.apply(center) - center) ** 2) for r in rels))
    return center, rotations, residual


def spatial_energy(
    points_i: np.ndarray, points_j: np.ndarray, fps_count: int = 20, seed: int = 0
) -> float:
    """Min squared distance between FPS representatives of two parts."""
    points_i = np.asarray(points_i, dtype=np.float64).reshape(-1, 3)
    points_j = np.asarray(points_j, dtype=np.float64).reshape(-1, 3)
    if len(points_i) == 0 or len(points_j) == 0:
        raise EmptyPart("spatial energy needs nonempty parts")
    if len(points_i) > fps_count:
        points_i = points_i[farthest_point_sample(points_i, fps_count, seed=seed)]
    if len(points_j) > fps_count:
        points_j = points_j[farthest_point_sample(points_j, fps_count, seed=seed)]
    d2 = ((points_i[:, None, :] - points_j[None, :, :]) ** 2).sum(-1)
    return float(d2.min())


def merge_energy(traj_i: list[RigidTransform], traj_j: list[RigidTransform]) -> float:
    """Summed residual of the relative motion of two parts against identity."""
    return sum(transform_residual(geom.relative(a, b)) for a, b in zip(traj_i, traj_j))


def trajectories_from_twists(twists: np.ndarray) -> list[list[RigidTransform]]:
    """(n, T, 6) twists -> per-part pose lists."""
    n, t_count, _ = twists.shape
    return [
        [geom.exp_twist(geom.Twist.from_array(twists[i, t])) for t in range(t_count)]
        for i in range(n)
    ]


def merge_parts(relaxed, merge_eps: float, fps_count: int = 20, seed: int = 0):
    """Iteratively merge part pairs with near-identity relative motion.

    Candidates are visited in ascending spatial proximity; a merged cluster
    keeps the trajectory of the member with more canonical points. Returns
    (merged relaxed model, remap table old label -> new label).
    """
    n = relaxed.n
    labels = np.asarray(relaxed.labels)
    all_points = np.asarray(relaxed.canonical_points)
    trajs = trajectories_from_twists(np.asarray(relaxed.twists))
    # cluster key = smallest member id; rep = part whose trajectory the
    # cluster inherits (the side with more canonical points wins a merge)
    clusters: dict[int, dict] = {
        i: {
            "members": [i],
            "rep": i,
            "count": int((labels == i).sum()),
            "points": all_points[labels == i],
        }
        for i in range(n)
    }

    while len(clusters) > 1:
        candidates = []
        ids = sorted(clusters)
        for pos, i in enumerate(ids):
            for j in ids[pos + 1:]:
                em = merge_energy(trajs[clusters[i]["rep"]], trajs[clusters[j]["rep"]])
                if em < merge_eps:
                    es = spatial_energy(
                        clusters[i]["points"], clusters[j]["points"], fps_count, seed
                    )
                    candidates.append((es, i, j))
        if not candidates:
            break
        _, i, j = min(candidates)
        a, b = clusters[i], clusters.pop(j)
        a["rep"] = a["rep"] if a["count"] >= b["count"] else b["rep"]
        a["members"] += b["members"]
        a["count"] += b["count"]
        a["points"] = np.concatenate([a["points"], b["points"]])

    survivors = sorted(clusters)
    remap = np.zeros(n, dtype=np.int64)
    for new_id, key in enumerate(survivors):
        for member in clusters[key]["members"]:
            remap[member] = new_id
    new_twists = np.stack([np.asarray(relaxed.twists)[clusters[key]["rep"]] for key in survivors])
    merged = dataclasses.replace(
        relaxed,
        n=len(survivors),
        twists=new_twists,
        labels=remap[labels],
    )
    return merged, remap


def build_tree(
    n: int,
    weights: np.ndarray,
    root: int = 0,
) -> tuple[KinematicTree, float]:
    """Minimum spanning tree over the complete part graph, oriented from root.

    Deterministic tie-breaking: lowest (weight, i, j) lexicographically.
    Returns the tree and its total edge weight.
    """
    if n == 1:
        return KinematicTree(np.array([-1]), 0), 0.0
    weights = np.asarray(weights, dtype=np.float64)
    in_tree = {0}
    mst_edges: list[tuple[int, int]] = []
    total = 0.0
    while len(in_tree) < n:
        best = None
        for i in sorted(in_tree):
            for j in range(n):
                if j in in_tree:
                    continue
                cand = (float(weights[i, j]), i, j)
                if best is None or cand < best:
                    best = cand
        w, i, j = best
        mst_edges.append((i, j))
        total += w
        in_tree.add(j)
    adj: dict[int, list[int]] = {i: [] for i in range(n)}
    for i, j in mst_edges:
        adj[i].append(j)
        adj[j].append(i)
    parent = np.full(n, -1, dtype=np.int64)
    stack = [root]
    visited = {root}
    while stack:
        i = stack.pop()
        for j in adj[i]:
            if j not in visited:
                parent[j] = i
                visited.add(j)
                stack.append(j)
    return KinematicTree(parent, root), total


def infer_joint_type(states: list[JointState]) -> JointType:
    """Prismatic when mean |tau| < mean |d|, else revolute.

    Radians and length units are compared directly, so the rule is
    scale-dependent; it matches the convention used throughout.
    """
    if len(states) < 1:
        raise ValueError("need at least one state")
    mean_tau = float(np.mean([abs(s.tau) for s in states]))
    mean_d = float(np.mean([abs(s.d) for s in states]))
    return JointType.PRISMATIC if mean_tau < mean_d else JointType.REVOLUTE


def _zero_motion_fit(child: int, parent: int, t_count: int, center: np.ndarray) -> PairFit:
    screw = ScrewParams(np.array([1.0, 0.0, 0.0]), center)
    return PairFit(child, parent, screw, [JointState(0.0, 0.0)] * t_count, 0.0)


def project(relaxed, config, joint_model: str = "screw"):
    """Merge, fit all pair joints, find the MST, and assemble the final model.

    ``joint_model`` is "screw" for 1-DOF joints or "spherical" for
    fixed-center 3-DOF joints. Records the spanning-tree fitness in
    ``e_project``.
    """
    from .articulate import ArticulatedModel  # assembled here, defined there

    merged, remap = merge_parts(relaxed, config.merge_eps, config.spatial_fps, config.seed)
    n = merged.n
    t_count = merged.twists.shape[1]
    labels = merged.labels
    pts = np.asarray(merged.canonical_points)
    counts = np.array([(labels == i).sum() for i in range(n)])
    root = int(np.argmax(counts))

    if n == 1:
        tree = KinematicTree(np.array([-1]), 0)
        return ArticulatedModel(
            tree=tree,
            screws=[None],
            joint_types=[None],
            states=np.zeros((t_count, 1, 3 if joint_model == "spherical" else 2)),
            segfield=merged.segfield,
            canonical_points=pts,
            canonical_labels=labels,
            normalization=merged.normalization,
            canonical_index=merged.canonical_index,
            e_project=0.0,
        )

    trajs = trajectories_from_twists(merged.twists)
    part_points = {i: pts[labels == i] for i in range(n)}
    pair_fits: dict[tuple[int, int], PairFit] = {}
    spherical: dict[tuple[int, int], tuple[np.ndarray, list[np.ndarray], float]] = {}
    weights = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            rels = [geom.relative(trajs[i][t], trajs[j][t]) for t in range(t_count)]
            e_sp = spatial_energy(part_points[i], part_points[j], config.spatial_fps, config.seed)
            e_mg = merge_energy(trajs[i], trajs[j])
            if joint_model == "spherical":
                try:
                    center, rotations, e_fit = fit_spherical_pair(
                        rels, fallback_center=part_points[i].mean(0)
                    )
                except InsufficientMotion:
                    center, rotations, e_fit = part_points[i].mean(0), [np.zeros(3)] * t_count, 0.0
                spherical[(i, j)] = (center, rotations, e_fit)
            else:
                try:
                    screw, states, e_fit = fit_screw_pair(rels)
                    fit = PairFit(i, j, screw, states, e_fit, e_sp, e_mg)
                except InsufficientMotion:
                    fit = _zero_motion_fit(i, j, t_count, part_points[i].mean(0))
                    fit.e_spatial, fit.e_merge = e_sp, e_mg
                pair_fits[(i, j)] = fit
            weights[i, j] = weights[j, i] = (
                config.lambda_spatial * e_sp
                + config.lambda_1dof * (e_fit if joint_model == "spherical" else pair_fits[(i, j)].e_1dof)
            )

    tree, e_project = build_tree(n, weights, root)

    dof = 3 if joint_model == "spherical" else 2
    screws: list[ScrewParams | None] = [None] * n
    joint_types: list[JointType | None] = [None] * n
    states = np.zeros((t_count, n, 3))
    for child, parent in tree.edges():
        key = (min(child, parent), max(child, parent))
        if joint_model == "spherical":
            center, rotations, _ = spherical[key]
            sign = 1.0 if key[0] == child else -1.0
            screws[child] = ScrewParams(np.array([1.0, 0.0, 0.0]), center)
            joint_types[child] = JointType.SPHERICAL
            for t in range(t_count):
                states[t, child] = sign * rotations[t]
        else:
            fit = pair_fits[key]
            if fit.child != child:
                fit = fit.flipped()
            jtype = infer_joint_type(fit.states)
            joint_types[child] = jtype
            screws[child] = fit.screw
            for t, s in enumerate(fit.states):
                if jtype == JointType.REVOLUTE:
                    states[t, child, 0] = s.tau
                else:
                    states[t, child, 1] = s.d
    states[merged.canonical_index] = 0.0  # canonical frame is the rest pose

    return ArticulatedModel(
        tree=tree,
        screws=screws,
        joint_types=joint_types,
        states=states if dof == 3 else states[:, :, :2],
        segfield=merged.segfield,
        canonical_points=pts,
        canonical_labels=labels,
        normalization=merged.normalization,
        canonical_index=merged.canonical_index,
        e_project=float(e_project),
    )
