"""Evaluation: reconstruction/flow error, Rand index, tree edit distance,
and reanimation error.

Ground truth comes from the synthetic generator: labeled frames plus the
generating model, from which the true position of any observed point at
any time (or at the held-out novel pose) follows analytically.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.spatial import cKDTree

from . import articulate
from .articulate import ArticulatedModel
from .cloud import Sequence
from .errors import LengthMismatch, MissingGroundTruth, TooLarge
from .project import KinematicTree


@dataclass
class GroundTruth:
    model: ArticulatedModel
    sequence: Sequence  # frames carry true part labels
    novel_states: np.ndarray | None = None

    def labels(self, t: int) -> np.ndarray:
        lab = self.sequence.frames[t].labels
        if lab is None:
            raise MissingGroundTruth(f"frame {t} carries no part labels")
        return lab


def _gt_true_positions(gt: GroundTruth, points: np.ndarray, labels: np.ndarray,
                       from_frame: int, to_states: np.ndarray) -> np.ndarray:
    """True positions of labeled points observed at from_frame, re-posed."""
    fk_from = articulate.forward_kinematics(gt.model, gt.model.states[from_frame])
    fk_to = articulate.forward_kinematics(gt.model, to_states)
    out = np.empty_like(points)
    for g in range(gt.model.n_parts):
        mask = labels == g
        if not mask.any():
            continue
        rest = fk_from[g].inverse().apply(points[mask])
        out[mask] = fk_to[g].apply(rest)
    return out


def _observed_canonical(model: ArticulatedModel, gt: GroundTruth) -> tuple[np.ndarray, np.ndarray]:
    """Observed points + true labels of the model's canonical frame.

    The fitted model's canonical cloud is the observed frame, so truth is
    anchored to the observation rather than to the model's own copy.
    """
    frame = gt.sequence.frames[model.canonical_index]
    if len(frame) != len(model.canonical_points):
        raise MissingGroundTruth("canonical frame size mismatch with ground truth")
    return frame.points, gt.labels(model.canonical_index)


def recon_error(model: ArticulatedModel, gt: GroundTruth) -> float:
    """Mean end-point error of reposed canonical points over all frames.

    Reported in object units (tables conventionally scale by 100).
    """
    obs_c, labels_c = _observed_canonical(model, gt)
    total, count = 0.0, 0
    for t in range(model.num_frames):
        pred = articulate.pose_cloud(model, model.states[t]).points
        true = _gt_true_positions(
            gt, obs_c, labels_c, model.canonical_index, gt.model.states[t]
        )
        total += float(np.linalg.norm(pred - true, axis=1).sum())
        count += len(pred)
    return total / count


def flow_error_and_acc(
    model: ArticulatedModel, gt: GroundTruth, delta: float = 0.005
) -> tuple[float, float]:
    """Mean end-point error of canonical-to-frame flow, and the fraction of
    points with error strictly below delta. The canonical frame itself is
    excluded (its flow is zero by construction)."""
    obs_c, labels_c = _observed_canonical(model, gt)
    x = model.canonical_points
    errors = []
    for t in range(model.num_frames):
        if t == model.canonical_index:
            continue
        pred_flow = articulate.pose_cloud(model, model.states[t]).points - x
        true_flow = (
            _gt_true_positions(gt, obs_c, labels_c, model.canonical_index, gt.model.states[t])
            - obs_c
        )
        errors.append(np.linalg.norm(pred_flow - true_flow, axis=1))
    if not errors:
        raise MissingGroundTruth("no non-canonical frames to score")
    epe = np.concatenate(errors)
    return float(epe.mean()), float((epe < delta).mean())


def rand_index(pred: np.ndarray, gt: np.ndarray) -> float:
    """Pair-counting agreement between two partitions, in [0, 1]."""
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    if len(pred) != len(gt):
        raise LengthMismatch(f"label lengths differ: {len(pred)} vs {len(gt)}")
    n = len(pred)
    if n < 2:
        return 1.0
    contingency = {}
    for p, g in zip(pred.tolist(), gt.tolist()):
        contingency[(p, g)] = contingency.get((p, g), 0) + 1
    sum_cells = sum(c * (c - 1) // 2 for c in contingency.values())
    a_counts = np.bincount(np.unique(pred, return_inverse=True)[1])
    b_counts = np.bincount(np.unique(gt, return_inverse=True)[1])
    sum_a = int(sum(c * (c - 1) // 2 for c in a_counts))
    sum_b = int(sum(c * (c - 1) // 2 for c in b_counts))
    pairs = n * (n - 1) // 2
    return (pairs + 2 * sum_cells - sum_a - sum_b) / pairs


def transfer_labels(model: ArticulatedModel, t: int, points: np.ndarray) -> np.ndarray:
    """Predicted labels for observed points: nearest posed-canonical label."""
    posed = articulate.pose_cloud(model, model.states[t]).points
    idx = cKDTree(posed).query(points, k=1)[1]
    return model.canonical_labels[idx]


def rand_index_per_scan(model: ArticulatedModel, gt: GroundTruth) -> float:
    vals = []
    for t in range(model.num_frames):
        pred = transfer_labels(model, t, gt.sequence.frames[t].points)
        vals.append(rand_index(pred, gt.labels(t)))
    return float(np.mean(vals))


def rand_index_multi_scan(model: ArticulatedModel, gt: GroundTruth) -> float:
    preds, gts = [], []
    for t in range(model.num_frames):
        preds.append(transfer_labels(model, t, gt.sequence.frames[t].points))
        gts.append(gt.labels(t))
    return rand_index(np.concatenate(preds), np.concatenate(gts))


# --- tree edit distance -----------------------------------------------------
#
# Kinematic trees are unordered and the predicted tree is undirected, so the
# metric is the minimum over all rootings of the predicted tree and all child
# orderings of both trees of the ordered edit distance with free renames and
# unit insert/delete.


def _subtree_tuple(parent: np.ndarray, root: int) -> tuple:
    """Nested-tuple encoding with children sorted canonically (AHU form)."""
    kids = {i: [] for i in range(len(parent))}
    for i, p in enumerate(parent):
        if p != -1:
            kids[int(p)].append(i)

    def build(i):
        return tuple(sorted(build(c) for c in kids[i]))

    return build(root)


def _reroot(parent: np.ndarray, new_root: int) -> np.ndarray:
    adj = {i: set() for i in range(len(parent))}
    for i, p in enumerate(parent):
        if p != -1:
            adj[i].add(int(p))
            adj[int(p)].add(i)
    out = np.full(len(parent), -1, dtype=np.int64)
    stack = [new_root]
    seen = {new_root}
    while stack:
        i = stack.pop()
        for j in adj[i]:
            if j not in seen:
                out[j] = i
                seen.add(j)
                stack.append(j)
    return out


def _distinct_permutations(items: list):
    """Permutations of a multiset without repeats (items must be sorted)."""
    if not items:
        yield ()
        return
    prev = object()
    for i, item in enumerate(items):
        if item == prev:
            continue
        prev = item
        for rest in _distinct_permutations(items[:i] + items[i + 1:]):
            yield (item,) + rest


def _ordered_variants(tree: tuple, budget: list[int]):
    """All distinct ordered trees obtainable by permuting children.

    ``tree`` must be in canonical form (children sorted), so identical
    sibling subtrees are interchangeable and enumerated once.
    """
    variants_by_form = {form: _ordered_variants(form, budget) for form in set(tree)}
    out = []
    for arrangement in _distinct_permutations(list(tree)):
        for combo in itertools.product(*(variants_by_form[f] for f in arrangement)):
            budget[0] -= 1
            if budget[0] < 0:
                raise TooLarge("child-ordering enumeration exceeded the budget")
            out.append(tuple(combo))
    return out


def _tree_size(t: tuple) -> int:
    return 1 + sum(_tree_size(c) for c in t)


def _forest_size(f: tuple) -> int:
    return sum(_tree_size(t) for t in f)


@lru_cache(maxsize=1_000_000)
def _forest_distance(f1: tuple, f2: tuple) -> int:
    """Ordered forest edit distance: rename free, insert/delete cost 1."""
    if not f1:
        return _forest_size(f2)
    if not f2:
        return _forest_size(f1)
    t1, t2 = f1[-1], f2[-1]
    delete = _forest_distance(f1[:-1] + t1, f2) + 1
    insert = _forest_distance(f1, f2[:-1] + t2) + 1
    match = _forest_distance(f1[:-1], f2[:-1]) + _forest_distance(t1, t2)
    return min(delete, insert, match)


def tree_edit_distance(
    pred: KinematicTree, gt: KinematicTree, budget: int = 500_000
) -> int:
    """Minimum insert/delete edit distance between kinematic trees.

    Exact for small trees; raises TooLarge when the ordering enumeration
    exceeds the budget (counted in enumerated orderings + distance calls).
    """
    remaining = [budget]
    gt_variants = _ordered_variants(_subtree_tuple(gt.parent, gt.root), remaining)
    best = None
    seen_rootings = set()
    for root in range(pred.n):
        parent = _reroot(pred.parent, root)
        canonical = _subtree_tuple(parent, root)
        if canonical in seen_rootings:
            continue
        seen_rootings.add(canonical)
        for pv in _ordered_variants(canonical, remaining):
            for gv in gt_variants:
                remaining[0] -= 1
                if remaining[0] < 0:
                    raise TooLarge("tree edit enumeration exceeded the budget")
                d = _forest_distance((pv,), (gv,))
                if best is None or d < best:
                    best = d
                    if best == 0:
                        return 0
    return int(best)


def reanimation_error(
    model: ArticulatedModel,
    gt: GroundTruth,
    ik_lr: float = 0.1,
    ik_iters: int = 200,
) -> float:
    """Mean point error after IK retargeting to the held-out novel pose.

    One constraint per fitted part: the canonical point nearest the part
    centroid, targeted at its ground-truth novel position.
    """
    if gt.novel_states is None:
        raise MissingGroundTruth("ground truth carries no novel pose")
    obs_c, labels_c = _observed_canonical(model, gt)
    true_novel = _gt_true_positions(
        gt, obs_c, labels_c, model.canonical_index,
        np.asarray(gt.novel_states, dtype=np.float64),
    )
    constraints = []
    for i in range(model.n_parts):
        members = np.nonzero(model.canonical_labels == i)[0]
        if len(members) == 0:
            continue
        pts = model.canonical_points[members]
        centroid = pts.mean(axis=0)
        pick = members[int(np.argmin(((pts - centroid) ** 2).sum(axis=1)))]
        constraints.append((int(pick), true_novel[pick]))
    states = articulate.retarget_ik(model, constraints, lr=ik_lr, iters=ik_iters)
    posed = articulate.pose_cloud(model, states).points
    return float(np.linalg.norm(posed - true_novel, axis=1).mean())


def evaluate(
    model: ArticulatedModel,
    gt: GroundTruth,
    delta: float = 0.005,
    ik_lr: float = 0.1,
    ik_iters: int = 200,
) -> dict:
    """Full metric report (runtime_seconds is filled in by the caller)."""
    flow_err, flow_acc = flow_error_and_acc(model, gt, delta)
    return {
        "recon_error": recon_error(model, gt),
        "flow_error": flow_err,
        "flow_acc": flow_acc,
        "rand_index_per_scan": rand_index_per_scan(model, gt),
        "rand_index_multi_scan": rand_index_multi_scan(model, gt),
        "tree_edit_distance": tree_edit_distance(model.tree, gt.model.tree),
        "reanimation_error": reanimation_error(model, gt, ik_lr, ik_iters),
    }
