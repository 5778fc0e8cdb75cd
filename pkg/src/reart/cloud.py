"""Point-cloud containers, spatial queries, and sequence file I/O.

File formats:
- cloud: binary little-endian PLY, element ``vertex`` with float32 x/y/z,
  optional uchar part_id, optional float32 fx/fy/fz (flow to the previous
  frame; absent or zero for frame 0);
- sequence directory: ``manifest.json`` with num_frames / points_per_frame /
  frame_files / optional ground_truth, plus one PLY per frame.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import KTooLarge


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3) float64
    labels: np.ndarray | None = None  # (N,) int
    flow: np.ndarray | None = None  # (N, 3) motion to previous frame
    frame_index: int = 0
    source_indices: np.ndarray | None = None  # provenance after downsampling
    _tree: cKDTree | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) < 1:
            raise ValueError("point cloud must contain at least one point")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if len(self.labels) != len(self.points):
                raise ValueError("labels length mismatch")
        if self.flow is not None:
            self.flow = np.asarray(self.flow, dtype=np.float64).reshape(-1, 3)
            if len(self.flow) != len(self.points):
                raise ValueError("flow length mismatch")

    def __len__(self) -> int:
        return len(self.points)

    def tree(self) -> cKDTree:
        """Spatial index, built once and reused (queries are exact)."""
        if self._tree is None:
            self._tree = cKDTree(self.points)
        return self._tree


@dataclass
class Sequence:
    frames: list[PointCloud]
    canonical_index: int | None = None

    def __post_init__(self):
        if len(self.frames) < 2:
            raise ValueError("sequence needs at least two frames")
        idx = [f.frame_index for f in self.frames]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("frame_index must be strictly increasing")

    def __len__(self) -> int:
        return len(self.frames)


def knn_query(cloud: PointCloud, query: np.ndarray, k: int) -> list[tuple[int, float]]:
    """k nearest neighbors of ``query``, ascending by distance.

    Exact, with deterministic tie-breaking by lower index (equidistant
    boundary points are resolved by re-ranking a ball query, so the result
    always matches an exhaustive linear scan).
    """
    n = len(cloud)
    if not 1 <= k <= n:
        raise KTooLarge(f"k={k} out of range for cloud of {n} points")
    q = np.asarray(query, dtype=np.float64).reshape(3)
    dists, idx = cloud.tree().query(q, k=k)
    dists, idx = np.atleast_1d(dists), np.atleast_1d(idx)
    # re-rank everything within the k-th distance so exact ties break by index
    ball = cloud.tree().query_ball_point(q, float(dists[-1]) + 0.0)
    if len(ball) > k:
        ball = np.asarray(ball)
        bd = np.linalg.norm(cloud.points[ball] - q, axis=1)
        order = np.lexsort((ball, bd))
        ball, bd = ball[order][:k], bd[order][:k]
        return [(int(i), float(d)) for i, d in zip(ball, bd)]
    order = np.lexsort((idx, dists))
    return [(int(idx[i]), float(dists[i])) for i in order]


def farthest_point_sample(
    points: np.ndarray, k: int, seed: int = 0, start: int | None = None
) -> np.ndarray:
    """Greedy farthest point sampling; returns k indices.

    The first index is drawn from a generator seeded with ``seed`` unless
    ``start`` is given. Ties in the max-min-distance step break toward the
    lower index.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if k > n:
        raise KTooLarge(f"k={k} exceeds {n} points")
    if start is None:
        start = int(np.random.default_rng(seed).integers(n))
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start
    min_d2 = np.sum((pts - pts[start]) ** 2, axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(min_d2))
        chosen[i] = nxt
        min_d2 = np.minimum(min_d2, np.sum((pts - pts[nxt]) ** 2, axis=1))
    return chosen


def downsample(cloud: PointCloud, factor: int, seed: int = 0) -> PointCloud:
    """FPS-based subsampling to ceil(N / factor) points."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return cloud
    n = len(cloud)
    k = -(-n // factor)
    idx = farthest_point_sample(cloud.points, k, seed=seed)
    return PointCloud(
        cloud.points[idx],
        labels=None if cloud.labels is None else cloud.labels[idx],
        flow=None if cloud.flow is None else cloud.flow[idx],
        frame_index=cloud.frame_index,
        source_indices=idx,
    )


# --- PLY ------------------------------------------------------------------


def write_ply(path: str | Path, cloud: PointCloud) -> None:
    n = len(cloud)
    props = ["property float x", "property float y", "property float z"]
    if cloud.labels is not None:
        props.append("property uchar part_id")
    if cloud.flow is not None:
        props += ["property float fx", "property float fy", "property float fz"]
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {n}\n" + "\n".join(props) + "\nend_header\n"
    )
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if cloud.labels is not None:
        fields.append(("part_id", "u1"))
    if cloud.flow is not None:
        fields += [("fx", "<f4"), ("fy", "<f4"), ("fz", "<f4")]
    rows = np.zeros(n, dtype=fields)
    rows["x"], rows["y"], rows["z"] = (cloud.points[:, j].astype("<f4") for j in range(3))
    if cloud.labels is not None:
        rows["part_id"] = cloud.labels.astype(np.uint8)
    if cloud.flow is not None:
        rows["fx"], rows["fy"], rows["fz"] = (cloud.flow[:, j].astype("<f4") for j in range(3))
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(rows.tobytes())


def read_ply(path: str | Path, frame_index: int = 0) -> PointCloud:
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"end_header\n")
    if end < 0:
        raise ValueError(f"{path}: not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    body = data[end + len(b"end_header\n"):]
    if "format binary_little_endian 1.0" not in header:
        raise ValueError(f"{path}: expected binary little-endian PLY")
    n = None
    fields: list[tuple[str, str]] = []
    in_vertex = False
    for line in header:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
            in_vertex = True
        elif parts and parts[0] == "element":
            in_vertex = False
        elif in_vertex and parts and parts[0] == "property":
            fields.append((parts[2], {"float": "<f4", "uchar": "u1"}[parts[1]]))
    if n is None:
        raise ValueError(f"{path}: no vertex element")
    rows = np.frombuffer(body, dtype=fields, count=n)
    points = np.stack([rows["x"], rows["y"], rows["z"]], axis=1).astype(np.float64)
    labels = rows["part_id"].astype(np.int64) if "part_id" in rows.dtype.names else None
    flow = None
    if "fx" in rows.dtype.names:
        flow = np.stack([rows["fx"], rows["fy"], rows["fz"]], axis=1).astype(np.float64)
    return PointCloud(points, labels=labels, flow=flow, frame_index=frame_index)


# --- sequence directories ---------------------------------------------------


def write_sequence_dir(seq: Sequence, out_dir: str | Path, ground_truth: str | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frame_files = []
    for t, frame in enumerate(seq.frames):
        name = f"frame_{t:03d}.ply"
        write_ply(out / name, frame)
        frame_files.append(name)
    manifest = {
        "num_frames": len(seq.frames),
        "points_per_frame": len(seq.frames[0]),
        "frame_files": frame_files,
    }
    if ground_truth is not None:
        manifest["ground_truth"] = ground_truth
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")


def read_sequence_dir(in_dir: str | Path) -> tuple[Sequence, dict]:
    """Load a sequence directory; returns (sequence, manifest dict)."""
    root = Path(in_dir)
    with open(root / "manifest.json") as fh:
        manifest = json.load(fh)
    frames = [
        read_ply(root / name, frame_index=t)
        for t, name in enumerate(manifest["frame_files"])
    ]
    return Sequence(frames), manifest
