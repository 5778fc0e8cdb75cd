"""Observed scene flow: mutual-nearest-neighbor estimation and interpolation.

A flow field anchors motion vectors at the points of frame t, each vector
pointing from the matched position in frame t-1 to the anchor
(vector = x_t - x_{t-1}). Interpolation at an arbitrary query point is an
inverse-distance-weighted mean over the k nearest valid anchors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .cloud import PointCloud
from .errors import NoValidFlow

SNAP_DISTANCE = 1e-9  # queries this close to an anchor take its vector exactly


@dataclass
class FlowField:
    anchors: np.ndarray  # (N, 3) positions in frame t
    vectors: np.ndarray  # (N, 3) motion to the previous frame
    valid: np.ndarray  # (N,) bool
    frame_index: int = 0
    _tree: cKDTree | None = field(default=None, repr=False, compare=False)
    _valid_cache: tuple | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.anchors = np.asarray(self.anchors, dtype=np.float64).reshape(-1, 3)
        self.vectors = np.asarray(self.vectors, dtype=np.float64).reshape(-1, 3)
        self.valid = np.asarray(self.valid, dtype=bool).reshape(-1)
        if not (len(self.anchors) == len(self.vectors) == len(self.valid)):
            raise ValueError("flow field arrays must have equal length")
        if self.valid.any() and not np.all(np.isfinite(self.vectors[self.valid])):
            raise ValueError("non-finite flow vectors at valid anchors")

    def num_valid(self) -> int:
        return int(self.valid.sum())

    def valid_tree(self) -> cKDTree:
        if self._tree is None:
            if not self.valid.any():
                raise NoValidFlow("flow field has no valid anchors")
            self._tree = cKDTree(self.anchors[self.valid])
        return self._tree

    def valid_arrays(self):
        """(anchors, vectors) restricted to valid entries, computed once."""
        if self._valid_cache is None:
            self._valid_cache = (self.anchors[self.valid], self.vectors[self.valid])
        return self._valid_cache

    @staticmethod
    def from_cloud(frame: PointCloud) -> "FlowField":
        """Ground-truth flow carried in a loaded cloud's fx/fy/fz columns."""
        if frame.flow is None:
            raise NoValidFlow(f"frame {frame.frame_index} carries no flow")
        n = len(frame)
        return FlowField(frame.points, frame.flow, np.ones(n, dtype=bool), frame.frame_index)


def mnn_flow(frame_t: PointCloud, frame_prev: PointCloud) -> FlowField:
    """Flow from mutual nearest neighbors between consecutive frames.

    An anchor x in frame t is valid iff its nearest neighbor y in frame t-1
    has x as its own nearest neighbor; the vector is then x - y.
    """
    tree_prev = cKDTree(frame_prev.points)
    tree_t = cKDTree(frame_t.points)
    _, fwd = tree_prev.query(frame_t.points, k=1)
    _, bwd = tree_t.query(frame_prev.points, k=1)
    idx = np.arange(len(frame_t))
    valid = bwd[fwd] == idx
    vectors = np.zeros_like(frame_t.points)
    vectors[valid] = frame_t.points[valid] - frame_prev.points[fwd[valid]]
    return FlowField(frame_t.points, vectors, valid, frame_t.frame_index)


def interp_flow(query: np.ndarray, fld: FlowField, k: int = 3) -> np.ndarray:
    """Inverse-distance-weighted flow at ``query`` over k nearest valid anchors.

    Coincident queries (distance < SNAP_DISTANCE) return the anchor vector
    exactly. If fewer than k valid anchors exist, all of them are used.
    """
    q = np.asarray(query, dtype=np.float64).reshape(3)
    n_valid = fld.num_valid()
    if n_valid == 0:
        raise NoValidFlow("flow field has no valid anchors")
    k = min(k, n_valid)
    dists, local = fld.valid_tree().query(q, k=k)
    dists, local = np.atleast_1d(dists), np.atleast_1d(local)
    vecs = fld.vectors[fld.valid][local]
    if dists[0] < SNAP_DISTANCE:
        return vecs[0].copy()
    w = 1.0 / dists
    return (w[:, None] * vecs).sum(axis=0) / w.sum()
