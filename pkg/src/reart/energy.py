"""Reconstruction energy terms: chamfer, earth-mover (bipartite), flow.

All terms are torch-native (float64) and differentiable with respect to
predicted point positions. Discrete selections — nearest-neighbor indices
and the bipartite assignment — are treated as constants in the backward
pass; each term accepts frozen indices so callers can refresh them on
their own schedule (and so finite-difference gradient audits are
well-posed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .errors import EmptyCloud, NonFiniteCost, NoValidFlow, SizeMismatch
from .flow import FlowField


@dataclass(frozen=True)
class EnergyWeights:
    lambda_cd: float = 1.0
    lambda_emd: float = 0.3
    lambda_flow: float = 1.0

    def __post_init__(self):
        vals = (self.lambda_cd, self.lambda_emd, self.lambda_flow)
        if any(not np.isfinite(v) or v < 0 for v in vals):
            raise ValueError("energy weights must be finite and >= 0")


@dataclass
class Assignment:
    """Bijection from source index i to target index permutation[i]."""

    permutation: np.ndarray
    cost: float

    def __post_init__(self):
        self.permutation = np.asarray(self.permutation, dtype=np.int64)
        n = len(self.permutation)
        if len(np.unique(self.permutation)) != n:
            raise ValueError("assignment is not a bijection")


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _reduce(sq: torch.Tensor, reduction: str) -> torch.Tensor:
    return sq.mean() if reduction == "mean" else sq.sum()


def nn_indices(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Index into y of the nearest neighbor of each x (exact, kd-tree)."""
    return cKDTree(y).query(x, k=1, workers=-1)[1]


def chamfer(
    x,
    y,
    nn_xy: np.ndarray | None = None,
    nn_yx: np.ndarray | None = None,
    reduction: str = "mean",
) -> torch.Tensor:
    """Two-sided squared-distance chamfer energy between point sets."""
    x, y = _t(x), _t(y)
    if x.numel() == 0 or y.numel() == 0:
        raise EmptyCloud("chamfer requires nonempty point sets")
    if nn_xy is None:
        nn_xy = nn_indices(x.detach().numpy(), y.detach().numpy())
    if nn_yx is None:
        nn_yx = nn_indices(y.detach().numpy(), x.detach().numpy())
    d_xy = ((x - y[torch.as_tensor(nn_xy)]) ** 2).sum(-1)
    d_yx = ((y - x[torch.as_tensor(nn_yx)]) ** 2).sum(-1)
    return _reduce(d_xy, reduction) + _reduce(d_yx, reduction)


def lap_solve(cost: np.ndarray) -> Assignment:
    """Exact minimum-cost bipartite assignment on a square cost matrix."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError("cost matrix must be square")
    if not np.all(np.isfinite(cost)):
        raise NonFiniteCost("cost matrix contains non-finite entries")
    rows, cols = linear_sum_assignment(cost)
    return Assignment(cols, float(cost[rows, cols].sum()))


def emd(
    x,
    y,
    assignment: Assignment | None = None,
    reduction: str = "mean",
) -> tuple[torch.Tensor, Assignment]:
    """Earth-mover energy: squared residual under a bipartite matching.

    A fresh optimal assignment is solved when none is supplied; passing a
    stale assignment reuses it (callers refresh on their own schedule).
    """
    x, y = _t(x), _t(y)
    if len(x) != len(y):
        raise SizeMismatch(f"point sets differ in size: {len(x)} vs {len(y)}")
    if assignment is None:
        xd, yd = x.detach().numpy(), y.detach().numpy()
        cost = ((xd[:, None, :] - yd[None, :, :]) ** 2).sum(-1)
        assignment = lap_solve(cost)
    sq = ((x - y[torch.as_tensor(assignment.permutation)]) ** 2).sum(-1)
    return _reduce(sq, reduction), assignment


def flow_knn_indices(queries: np.ndarray, fld: FlowField, k: int) -> np.ndarray:
    """(N, k) indices into the field's valid anchors, nearest first."""
    n_valid = fld.num_valid()
    if n_valid == 0:
        raise NoValidFlow("flow field has no valid anchors")
    k = min(k, n_valid)
    _, idx = fld.valid_tree().query(queries, k=k, workers=-1)
    return idx.reshape(len(queries), k)


def interp_flow_torch(
    queries: torch.Tensor, fld: FlowField, k: int = 3, knn_idx: np.ndarray | None = None
) -> torch.Tensor:
    """Batched inverse-distance flow interpolation, differentiable in queries.

    Neighbor indices are frozen; the weights are recomputed in-graph.
    Distances are clamped at 1e-9, so exactly coincident queries take the
    anchor vector up to that clamp.
    """
    if knn_idx is None:
        knn_idx = flow_knn_indices(queries.detach().numpy(), fld, k)
    valid_anchors, valid_vectors = fld.valid_arrays()
    idx = torch.as_tensor(knn_idx)
    anchors = torch.as_tensor(valid_anchors)[idx]  # (N, k, 3)
    vectors = torch.as_tensor(valid_vectors)[idx]
    d = torch.linalg.norm(queries[:, None, :] - anchors, dim=-1).clamp_min(1e-9)
    w = 1.0 / d
    return (w[:, :, None] * vectors).sum(1) / w.sum(1, keepdim=True)


def flow_energy(
    pred_t,
    pred_prev,
    fld: FlowField,
    k: int = 3,
    knn_idx: np.ndarray | None = None,
    reduction: str = "mean",
) -> torch.Tensor:
    """Squared error between predicted per-point motion and observed flow."""
    pred_t, pred_prev = _t(pred_t), _t(pred_prev)
    if len(pred_t) != len(pred_prev):
        raise SizeMismatch("posed clouds must be index-aligned")
    g = interp_flow_torch(pred_t, fld, k=k, knn_idx=knn_idx)
    sq = ((pred_t - pred_prev - g) ** 2).sum(-1)
    return _reduce(sq, reduction)


def recons_energy(
    posed: list,
    observed: list,
    fields: list[FlowField | None],
    weights: EnergyWeights = EnergyWeights(),
    flow_k: int = 3,
    reduction: str = "mean",
) -> torch.Tensor:
    """Weighted sum over frames of chamfer + earth-mover + flow terms.

    ``fields[t]`` holds the flow anchored at frame t (None where absent,
    e.g. the first frame). Terms with zero weight are skipped entirely.
    """
    if len(posed) != len(observed):
        raise SizeMismatch("posed and observed frame counts differ")
    total = torch.zeros((), dtype=torch.float64)
    for t, (p, o) in enumerate(zip(posed, observed)):
        if weights.lambda_cd > 0:
            total = total + weights.lambda_cd * chamfer(p, o, reduction=reduction)
        if weights.lambda_emd > 0:
            total = total + weights.lambda_emd * emd(p, o, reduction=reduction)[0]
        if weights.lambda_flow > 0 and t > 0 and fields[t] is not None:
            total = total + weights.lambda_flow * flow_energy(
                _t(p), _t(posed[t - 1]), fields[t], k=flow_k, reduction=reduction
            )
    return total
