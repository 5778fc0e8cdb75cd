"""The assembled rearticulable model: forward kinematics, IK retargeting,
and JSON (de)serialization.

Joint axes and moment points are expressed in the canonical (rest) frame;
a part's world transform is the chain product parent_world @ joint_local,
which applies the part's own joint motion first and ancestor motions after
it. At the canonical frame all states are zero, so all transforms are the
identity.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import geom
from .cloud import PointCloud, read_ply
from .errors import NoConstraints
from .geom import JointState, JointType, RigidTransform, ScrewParams
from .project import KinematicTree
from .segfield import SegFieldParams


@dataclass(frozen=True)
class Normalization:
    """Zero-mean, unit-max-extent frame used for segmentation-field inputs."""

    center: np.ndarray
    scale: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) / self.scale

    @staticmethod
    def fit(points: np.ndarray) -> "Normalization":
        points = np.asarray(points, dtype=np.float64)
        center = points.mean(axis=0)
        extent = (points.max(axis=0) - points.min(axis=0)).max()
        return Normalization(center, float(extent) if extent > 0 else 1.0)


@dataclass
class ArticulatedModel:
    tree: KinematicTree
    screws: list[ScrewParams | None]  # per part; None at the root
    joint_types: list[JointType | None]
    states: np.ndarray  # (T, n, 2) [tau, d] per 1-DOF joint; (T, n, 3) rotvec for spherical
    segfield: SegFieldParams | None
    canonical_points: np.ndarray
    canonical_labels: np.ndarray
    normalization: Normalization
    canonical_index: int
    e_project: float = 0.0

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.canonical_points = np.asarray(self.canonical_points, dtype=np.float64)
        self.canonical_labels = np.asarray(self.canonical_labels, dtype=np.int64)
        n = self.tree.n
        if self.states.shape[1] != n or len(self.screws) != n:
            raise ValueError("states/screws must cover every part")
        if self.canonical_labels.max(initial=0) >= n:
            raise ValueError("canonical label out of range")
        for i in range(n):
            if i == self.tree.root:
                continue
            jt = self.joint_types[i]
            if jt == JointType.PRISMATIC and np.abs(self.states[:, i, 0]).max() > 0:
                raise ValueError("prismatic joint with nonzero rotation state")
            if jt == JointType.REVOLUTE and np.abs(self.states[:, i, 1]).max() > 0:
                raise ValueError("revolute joint with nonzero slide state")

    @property
    def n_parts(self) -> int:
        return self.tree.n

    @property
    def num_frames(self) -> int:
        return self.states.shape[0]

    @property
    def joint_dof(self) -> int:
        return self.states.shape[2]

    def frame_states(self, t: int) -> np.ndarray:
        return self.states[t]


def joint_local_transform(
    screw: ScrewParams, joint_type: JointType | None, state: np.ndarray
) -> RigidTransform:
    """Rest-to-posed motion of one joint for a single state vector."""
    if joint_type == JointType.SPHERICAL:
        w = np.asarray(state[:3], dtype=np.float64)
        return geom.exp_twist(geom.Twist(w, np.cross(screw.moment, w)))
    return geom.screw_transform(screw, JointState(float(state[0]), float(state[1])))


def forward_kinematics(model: ArticulatedModel, states: np.ndarray) -> list[RigidTransform]:
    """World transform per part for one frame of joint states (n, dof)."""
    states = np.asarray(states, dtype=np.float64)
    out: list[RigidTransform | None] = [None] * model.n_parts
    for i in model.tree.topo_order():
        if i == model.tree.root:
            out[i] = RigidTransform.identity()
            continue
        local = joint_local_transform(model.screws[i], model.joint_types[i], states[i])
        out[i] = geom.compose(local, out[int(model.tree.parent[i])])
    return out


def pose_cloud(model: ArticulatedModel, states: np.ndarray) -> PointCloud:
    """Move every canonical point by its part's world transform."""
    transforms = forward_kinematics(model, states)
    posed = model.canonical_points.copy()
    for i, t in enumerate(transforms):
        mask = model.canonical_labels == i
        if mask.any():
            posed[mask] = t.apply(posed[mask])
    return PointCloud(posed, labels=model.canonical_labels.copy())


# --- differentiable kinematics (shared by final fitting and IK) ------------


def fk_torch(
    model: ArticulatedModel, raw_states: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Differentiable world transforms from raw per-part states (n, 3).

    Raw layout: [tau, d, .] for screw joints (the joint type masks the
    complementary component), [wx, wy, wz] for spherical joints. Returns
    rotations (n, 3, 3) and translations (n, 3).
    """
    n = model.n_parts
    axes, moments, tmask, dmask, sph = _joint_tensors(model)
    if model.joint_dof == 3 or sph.any():
        w = raw_states * sph.unsqueeze(-1)
        v = torch.cross(moments, w, dim=-1)
        xi_sph = torch.cat([w, v], dim=-1)
    else:
        xi_sph = torch.zeros(n, 6, dtype=torch.float64)
    tau = raw_states[:, 0] * tmask
    d = raw_states[:, 1] * dmask
    xi_screw = geom.screw_twists_torch(axes, moments, tau, d)
    xi = torch.where(sph.unsqueeze(-1), xi_sph, xi_screw)
    local_r, local_t = geom.exp_twists_torch(xi)
    world_r: list = [None] * n
    world_t: list = [None] * n
    for i in model.tree.topo_order():
        if i == model.tree.root:
            world_r[i] = torch.eye(3, dtype=torch.float64)
            world_t[i] = torch.zeros(3, dtype=torch.float64)
            continue
        p = int(model.tree.parent[i])
        world_r[i] = world_r[p] @ local_r[i]
        world_t[i] = world_r[p] @ local_t[i] + world_t[p]
    return torch.stack(world_r), torch.stack(world_t)


def _joint_tensors(model: ArticulatedModel):
    n = model.n_parts
    axes = torch.zeros(n, 3, dtype=torch.float64)
    moments = torch.zeros(n, 3, dtype=torch.float64)
    tmask = torch.zeros(n, dtype=torch.float64)
    dmask = torch.zeros(n, dtype=torch.float64)
    sph = torch.zeros(n, dtype=torch.bool)
    axes[:, 0] = 1.0
    for i in range(n):
        if i == model.tree.root or model.screws[i] is None:
            continue
        axes[i] = torch.as_tensor(model.screws[i].axis)
        moments[i] = torch.as_tensor(model.screws[i].moment)
        jt = model.joint_types[i]
        if jt == JointType.SPHERICAL:
            sph[i] = True
        elif jt == JointType.PRISMATIC:
            dmask[i] = 1.0
        elif jt == JointType.REVOLUTE:
            tmask[i] = 1.0
        else:  # untyped joints keep both screw components
            tmask[i] = 1.0
            dmask[i] = 1.0
    return axes, moments, tmask, dmask, sph


def _raw_from_states(model: ArticulatedModel, states: np.ndarray) -> np.ndarray:
    raw = np.zeros((model.n_parts, 3))
    raw[:, : model.joint_dof] = states
    return raw


def _states_from_raw(model: ArticulatedModel, raw: np.ndarray) -> np.ndarray:
    states = raw[:, : model.joint_dof].copy()
    if model.joint_dof == 2:
        for i in range(model.n_parts):
            if model.joint_types[i] == JointType.PRISMATIC:
                states[i, 0] = 0.0
            elif model.joint_types[i] == JointType.REVOLUTE:
                states[i, 1] = 0.0
    return states


def retarget_ik(
    model: ArticulatedModel,
    constraints: list[tuple[int, np.ndarray]],
    lr: float = 0.1,
    iters: int = 200,
    init_states: np.ndarray | None = None,
) -> np.ndarray:
    """Joint states minimizing the MSE between constrained points and targets.

    Only the states move; segmentation, tree, and screw parameters stay
    fixed. Joint-type constraints are enforced throughout and the
    best-so-far iterate is returned.
    """
    if not constraints:
        raise NoConstraints("retargeting needs at least one constraint")
    idx = np.array([int(i) for i, _ in constraints])
    if idx.min() < 0 or idx.max() >= len(model.canonical_points):
        raise ValueError("constraint point index out of range")
    targets = torch.tensor(np.stack([np.asarray(t, dtype=np.float64) for _, t in constraints]))
    src = torch.tensor(model.canonical_points[idx])
    part = torch.as_tensor(model.canonical_labels[idx])

    init = np.zeros((model.n_parts, 3)) if init_states is None else _raw_from_states(model, init_states)
    raw = torch.tensor(init, requires_grad=True)

    from .optim import AdamState, adam_step

    def loss_of(raw_t: torch.Tensor) -> torch.Tensor:
        world_r, world_t = fk_torch(model, raw_t)
        posed = (world_r[part] @ src.unsqueeze(-1)).squeeze(-1) + world_t[part]
        return ((posed - targets) ** 2).sum(-1).mean()

    state = AdamState()
    best_loss = float(loss_of(raw).detach())
    best_raw = raw.detach().clone()
    for _ in range(iters):
        if raw.grad is not None:
            raw.grad = None
        loss = loss_of(raw)
        loss.backward()
        adam_step(state, {"states": raw}, {"states": raw.grad}, lr=lr)
        val = float(loss_of(raw).detach())
        if val < best_loss:
            best_loss = val
            best_raw = raw.detach().clone()
    return _states_from_raw(model, best_raw.numpy())


# --- serialization ----------------------------------------------------------


def _b64(t: torch.Tensor) -> str:
    return base64.b64encode(t.detach().numpy().astype("<f4").tobytes()).decode("ascii")


def _unb64(s: str, shape) -> torch.Tensor:
    arr = np.frombuffer(base64.b64decode(s), dtype="<f4").reshape(shape).astype(np.float64)
    return torch.tensor(arr)


def model_document(model: ArticulatedModel, canonical_cloud_ref: str) -> dict:
    joints = []
    for i in range(model.n_parts):
        if i == model.tree.root:
            continue
        joints.append(
            {
                "part": i,
                "type": model.joint_types[i].value if model.joint_types[i] else "rigid",
                "axis": model.screws[i].axis.tolist(),
                "moment": model.screws[i].moment.tolist(),
            }
        )
    seg = None
    if model.segfield is not None:
        sf = model.segfield
        seg = {
            "hidden": sf.hidden,
            "n_max": sf.n_max,
            "w1": _b64(sf.w1),
            "b1": _b64(sf.b1),
            "w2": _b64(sf.w2),
            "b2": _b64(sf.b2),
        }
    return {
        "parts": model.n_parts,
        "tree": {"parent": model.tree.parent.tolist(), "root": int(model.tree.root)},
        "joints": joints,
        "states": model.states.tolist(),
        "normalization": {
            "center": model.normalization.center.tolist(),
            "scale": model.normalization.scale,
        },
        "segfield": seg,
        "canonical_cloud": canonical_cloud_ref,
        "canonical_index": int(model.canonical_index),
        "canonical_labels": model.canonical_labels.tolist(),
        "e_project": float(model.e_project),
    }


def save_model(
    model: ArticulatedModel,
    path: str | Path,
    canonical_cloud_ref: str,
    extra: dict | None = None,
) -> None:
    doc = model_document(model, canonical_cloud_ref)
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_model(path: str | Path) -> tuple[ArticulatedModel, dict]:
    path = Path(path)
    with open(path) as fh:
        doc = json.load(fh)
    n = doc["parts"]
    tree = KinematicTree(np.array(doc["tree"]["parent"]), doc["tree"]["root"])
    screws: list[ScrewParams | None] = [None] * n
    joint_types: list[JointType | None] = [None] * n
    for j in doc["joints"]:
        i = j["part"]
        screws[i] = ScrewParams(np.array(j["axis"]), np.array(j["moment"]))
        joint_types[i] = JointType(j["type"]) if j["type"] != "rigid" else None
    seg = None
    if doc.get("segfield"):
        s = doc["segfield"]
        seg = SegFieldParams(
            w1=_unb64(s["w1"], (s["hidden"], 3)),
            b1=_unb64(s["b1"], (s["hidden"],)),
            w2=_unb64(s["w2"], (s["n_max"], s["hidden"])),
            b2=_unb64(s["b2"], (s["n_max"],)),
        )
    cloud_path = Path(doc["canonical_cloud"])
    if not cloud_path.is_absolute():
        cloud_path = path.parent / cloud_path
    canonical = read_ply(cloud_path, frame_index=doc["canonical_index"])
    if "canonical_labels" in doc:
        labels = np.array(doc["canonical_labels"], dtype=np.int64)
    elif canonical.labels is not None:
        labels = canonical.labels
    else:
        raise ValueError("model file carries no canonical labels")
    model = ArticulatedModel(
        tree=tree,
        screws=screws,
        joint_types=joint_types,
        states=np.array(doc["states"], dtype=np.float64),
        segfield=seg,
        canonical_points=canonical.points,
        canonical_labels=labels,
        normalization=Normalization(
            np.array(doc["normalization"]["center"]), doc["normalization"]["scale"]
        ),
        canonical_index=doc["canonical_index"],
        e_project=doc.get("e_project", 0.0),
    )
    return model, doc
