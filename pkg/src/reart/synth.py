"""Synthetic articulated-object generator with full ground truth.

Objects are unions of non-overlapping primitive parts (box or cylinder
surfaces) connected by revolute or prismatic joints placed at part
interfaces: hinge axes lie tangent to the shared face, slide axes along
the face normal. Every frame is surface-resampled independently, so there
is no index-wise correspondence between frames; flow is computed
analytically from the part transforms. The whole object is normalized to
unit max extent at rest.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import articulate, geom
from .articulate import ArticulatedModel, Normalization
from .cloud import PointCloud, Sequence, write_sequence_dir
from .errors import SpecInfeasible
from .geom import JointType, ScrewParams
from .project import KinematicTree

_GAP = 0.05  # clearance between adjacent parts, build units; kept above the
# typical 4096-point sampling spacing so parts stay separable
_AXIS_DIRS = [
    np.array([1.0, 0, 0]), np.array([-1.0, 0, 0]),
    np.array([0, 1.0, 0]), np.array([0, -1.0, 0]),
    np.array([0, 0, 1.0]), np.array([0, 0, -1.0]),
]


@dataclass
class SynthSpec:
    n_parts: int = 3
    topology: str = "chain"  # chain | star | random
    joint_types: str = "mix"  # mix | revolute | prismatic
    frames: int = 10
    points_per_frame: int = 4096
    primitives: str = "box"  # box | cylinder | mix
    amplitude: float = 0.8  # radians for hinges; sized down for slides
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.n_parts <= 8:
            raise ValueError("n_parts must be in [1, 8]")
        if self.frames < 2:
            raise ValueError("need at least two frames")
        if self.topology not in ("chain", "star", "random"):
            raise ValueError(f"unknown topology {self.topology!r}")


@dataclass
class _Part:
    center: np.ndarray
    half: np.ndarray  # box half-extents
    shape: str  # box | cylinder


def _boxes_overlap(a: _Part, b: _Part, clearance: float) -> bool:
    return bool(np.all(np.abs(a.center - b.center) < a.half + b.half + clearance))


def _build_layout(spec: SynthSpec, rng: np.random.Generator):
    """Place parts, pick parents and joints; returns parts, tree, screws, types."""
    parts = [_Part(np.zeros(3), rng.uniform(0.14, 0.3, size=3), _pick_shape(spec, rng))]
    parent = [-1]
    screws: list[ScrewParams | None] = [None]
    jtypes: list[JointType | None] = [None]
    for i in range(1, spec.n_parts):
        if spec.topology == "chain":
            pa = i - 1
        elif spec.topology == "star":
            pa = 0
        else:
            pa = int(rng.integers(0, i))
        placed = False
        for _ in range(100):
            half = rng.uniform(0.14, 0.3, size=3)
            d = _AXIS_DIRS[rng.integers(6)]
            axis_i = int(np.argmax(np.abs(d)))
            offset = parts[pa].half[axis_i] + _GAP + half[axis_i]
            tangent_jitter = rng.uniform(-0.05, 0.05, size=3)
            tangent_jitter[axis_i] = 0.0
            center = parts[pa].center + d * offset + tangent_jitter
            cand = _Part(center, half, _pick_shape(spec, rng))
            if not any(_boxes_overlap(cand, p, 0.01) for p in parts):
                placed = True
                break
        if not placed:
            raise SpecInfeasible(
                f"could not place part {i} without overlap in 100 attempts"
            )
        parts.append(cand)
        parent.append(pa)
        interface = parts[pa].center + d * (parts[pa].half[axis_i] + _GAP / 2)
        interface = interface + tangent_jitter / 2
        jt = _pick_joint_type(spec, rng)
        if jt == JointType.REVOLUTE:
            tangents = [a for a in range(3) if a != axis_i]
            taxis = np.zeros(3)
            taxis[tangents[rng.integers(2)]] = 1.0 if rng.random() < 0.5 else -1.0
            screws.append(ScrewParams(taxis, interface))
        else:
            screws.append(ScrewParams(d.copy(), interface))
        jtypes.append(jt)
    return parts, np.array(parent), screws, jtypes


def _pick_shape(spec: SynthSpec, rng) -> str:
    if spec.primitives == "mix":
        return "cylinder" if rng.random() < 0.5 else "box"
    return spec.primitives


def _pick_joint_type(spec: SynthSpec, rng) -> JointType:
    if spec.joint_types == "revolute":
        return JointType.REVOLUTE
    if spec.joint_types == "prismatic":
        return JointType.PRISMATIC
    return JointType.REVOLUTE if rng.random() < 0.5 else JointType.PRISMATIC


def _joint_trajectories(spec: SynthSpec, jtypes, rng):
    """Per-joint smooth state curves theta(t) with theta(0) = 0."""
    t_grid = np.arange(spec.frames) / max(spec.frames - 1, 1)
    states = np.zeros((spec.frames, len(jtypes), 2))
    novel = np.zeros((len(jtypes), 2))
    for i, jt in enumerate(jtypes):
        if jt is None:
            continue
        amp = spec.amplitude if jt == JointType.REVOLUTE else spec.amplitude * 0.35
        scale = amp * rng.uniform(0.5, 1.0) * (1.0 if rng.random() < 0.5 else -1.0)
        curve = t_grid if rng.random() < 0.5 else np.sin(0.5 * np.pi * t_grid)
        col = 0 if jt == JointType.REVOLUTE else 1
        states[:, i, col] = scale * curve
        novel[i, col] = amp * rng.uniform(-1.0, 1.0)
    return states, novel


def _surface_areas(part: _Part) -> float:
    ex, ey, ez = 2 * part.half
    if part.shape == "cylinder":
        axis = int(np.argmax(part.half))
        others = [a for a in range(3) if a != axis]
        r = min(part.half[others[0]], part.half[others[1]])
        h = 2 * part.half[axis]
        return float(2 * np.pi * r * h + 2 * np.pi * r * r)
    return float(2 * (ex * ey + ey * ez + ez * ex))


def _sample_part_surface(part: _Part, count: int, rng) -> np.ndarray:
    if count == 0:
        return np.zeros((0, 3))
    if part.shape == "cylinder":
        return _sample_cylinder(part, count, rng)
    ex, ey, ez = 2 * part.half
    areas = np.array([ey * ez, ey * ez, ex * ez, ex * ez, ex * ey, ex * ey])
    face = rng.choice(6, size=count, p=areas / areas.sum())
    u = rng.uniform(-1, 1, size=(count, 3)) * part.half
    pts = u.copy()
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    pts[np.arange(count), axis] = sign * part.half[axis]
    return pts + part.center


def _sample_cylinder(part: _Part, count: int, rng) -> np.ndarray:
    axis = int(np.argmax(part.half))
    others = [a for a in range(3) if a != axis]
    r = min(part.half[others[0]], part.half[others[1]])
    h = 2 * part.half[axis]
    lateral = 2 * np.pi * r * h
    caps = 2 * np.pi * r * r
    on_side = rng.random(count) < lateral / (lateral + caps)
    phi = rng.uniform(0, 2 * np.pi, size=count)
    pts = np.zeros((count, 3))
    z = rng.uniform(-part.half[axis], part.half[axis], size=count)
    rad = np.where(on_side, r, r * np.sqrt(rng.random(count)))
    pts[:, others[0]] = rad * np.cos(phi)
    pts[:, others[1]] = rad * np.sin(phi)
    pts[:, axis] = np.where(on_side, z, np.sign(rng.random(count) - 0.5) * part.half[axis])
    return pts + part.center


def generate(spec: SynthSpec) -> tuple[Sequence, ArticulatedModel, np.ndarray]:
    """Build the object, articulate it, and resample each frame independently.

    Returns (sequence with labels+flow, ground-truth model, novel-pose
    states). The ground-truth model's canonical frame is frame 0.
    """
    rng = np.random.default_rng(spec.seed)
    parts, parent, screws, jtypes = _build_layout(spec, rng)
    states, novel_states = _joint_trajectories(spec, jtypes, rng)

    # normalize to unit max extent at rest
    lo = np.min([p.center - p.half for p in parts], axis=0)
    hi = np.max([p.center + p.half for p in parts], axis=0)
    span = float((hi - lo).max())
    mid = (hi + lo) / 2
    for p in parts:
        p.center = (p.center - mid) / span
        p.half = p.half / span
    screws = [
        None if s is None else ScrewParams(s.axis, (s.moment - mid) / span) for s in screws
    ]
    states[:, :, 1] /= span  # slide distances live in object units
    novel_states[:, 1] /= span

    tree = KinematicTree(parent, 0)
    areas = np.array([_surface_areas(p) for p in parts])
    weights = areas / areas.sum()

    # frame 0 is sampled first and doubles as the model's canonical cloud
    frames: list[PointCloud] = []
    gt_transforms = []
    proto = _gt_model_proto(tree, screws, jtypes, states, parts)
    for t in range(spec.frames):
        gt_transforms.append(articulate.forward_kinematics(proto, states[t]))
    for t in range(spec.frames):
        counts = rng.multinomial(spec.points_per_frame, weights)
        rest = np.concatenate(
            [_sample_part_surface(parts[i], counts[i], rng) for i in range(spec.n_parts)]
        )
        labels = np.repeat(np.arange(spec.n_parts), counts)
        posed = np.empty_like(rest)
        prev = np.empty_like(rest)
        for i in range(spec.n_parts):
            mask = labels == i
            posed[mask] = gt_transforms[t][i].apply(rest[mask])
            if t > 0:
                prev[mask] = gt_transforms[t - 1][i].apply(rest[mask])
        if spec.noise_sigma > 0:
            posed = posed + rng.normal(scale=spec.noise_sigma, size=posed.shape)
        flow = (posed - prev) if t > 0 else None
        frames.append(PointCloud(posed, labels=labels, flow=flow, frame_index=t))

    gt_model = ArticulatedModel(
        tree=tree,
        screws=screws,
        joint_types=jtypes,
        states=states,
        segfield=None,
        canonical_points=frames[0].points.copy(),
        canonical_labels=frames[0].labels.copy(),
        normalization=Normalization.fit(frames[0].points),
        canonical_index=0,
    )
    return Sequence(frames), gt_model, novel_states


def _gt_model_proto(tree, screws, jtypes, states, parts) -> ArticulatedModel:
    """Minimal model used only to run forward kinematics during generation."""
    dummy = np.zeros((1, 3))
    return ArticulatedModel(
        tree=tree,
        screws=screws,
        joint_types=jtypes,
        states=states,
        segfield=None,
        canonical_points=dummy,
        canonical_labels=np.zeros(1, dtype=np.int64),
        normalization=Normalization(np.zeros(3), 1.0),
        canonical_index=0,
    )


def write_dataset(spec: SynthSpec, out_dir: str | Path) -> tuple[Sequence, ArticulatedModel, np.ndarray]:
    """Generate and write the sequence directory + ground_truth.json."""
    seq, gt_model, novel_states = generate(spec)
    out = Path(out_dir)
    write_sequence_dir(seq, out, ground_truth="ground_truth.json")
    articulate.save_model(
        gt_model,
        out / "ground_truth.json",
        "frame_000.ply",
        extra={"novel_states": novel_states.tolist()},
    )
    return seq, gt_model, novel_states
