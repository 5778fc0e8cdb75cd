"""SE(3) rigid transforms, twists, and screw-joint parameterization.

Conventions:
- rotations are 3x3 matrices, points are row vectors transformed as R @ x + t;
- a twist is (omega, v) with omega = tau * axis for a screw motion;
- a 1-DOF screw joint (axis l through point m) moved by state (tau, d) is
  Exp([tau*l ; tau*(m x l) + d*l]), so the axis line {m + s*l} is the fixed
  point set of a pure rotation;
- pose composition follows a ``compose(a, b) = b @ a`` / ``relative(a, b) =
  inv(b) @ a`` operator pair.

Pure numpy for the scalar API; batched torch variants (used by the
differentiable fitting stages) live at the bottom and are cross-checked
against the numpy path in the tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import torch

from .errors import AngleNearPi

_SMALL_ANGLE = 1e-8


def _as_vec3(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite 3-vector")
    return v


def skew(w: np.ndarray) -> np.ndarray:
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def orthonormalize(rotation: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix by polar projection (SVD)."""
    u, _, vt = np.linalg.svd(rotation)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1.0
        r = u @ vt
    return r


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = _as_vec3(self.translation)
        if not np.all(np.isfinite(r)):
            raise ValueError("non-finite rotation")
        drift = np.abs(r.T @ r - np.eye(3)).max()
        if drift > 1e-6 or np.linalg.det(r) < 0.0:
            raise ValueError(f"rotation not orthonormal (drift {drift:.2e})")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def from_matrix(m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return RigidTransform(m[:3, :3], m[:3, 3])


@dataclass(frozen=True)
class Twist:
    omega: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "omega", _as_vec3(self.omega))
        object.__setattr__(self, "v", _as_vec3(self.v))

    @staticmethod
    def zero() -> "Twist":
        return Twist(np.zeros(3), np.zeros(3))

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.omega, self.v])

    @staticmethod
    def from_array(xi: np.ndarray) -> "Twist":
        xi = np.asarray(xi, dtype=np.float64).reshape(6)
        return Twist(xi[:3], xi[3:])


@dataclass(frozen=True)
class ScrewParams:
    """Joint axis direction (unit) and a point the axis passes through."""

    axis: np.ndarray
    moment: np.ndarray

    def __post_init__(self):
        l = _as_vec3(self.axis)
        n = np.linalg.norm(l)
        if n < 1e-12:
            raise ValueError("zero-length screw axis")
        object.__setattr__(self, "axis", l / n)
        object.__setattr__(self, "moment", _as_vec3(self.moment))


@dataclass(frozen=True)
class JointState:
    tau: float = 0.0
    d: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.tau) and math.isfinite(self.d)):
            raise ValueError("non-finite joint state")


class JointType(Enum):
    REVOLUTE = "revolute"
    PRISMATIC = "prismatic"
    SPHERICAL = "spherical"


def _rot_coeffs(theta: float) -> tuple[float, float, float]:
    """sin(t)/t, (1-cos t)/t^2, (t - sin t)/t^3 with small-angle series.

    1 - cos t is evaluated as 2*sin(t/2)^2 to avoid cancellation for small t.
    """
    if theta < _SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    t2 = theta * theta
    s = math.sin(theta)
    half = math.sin(0.5 * theta)
    return s / theta, 2.0 * half * half / t2, (theta - s) / (t2 * theta)


def exp_twist(xi: Twist) -> RigidTransform:
    """Exponential map from a twist to a rigid transform (Rodrigues form)."""
    w, v = xi.omega, xi.v
    theta = float(np.linalg.norm(w))
    a, b, c = _rot_coeffs(theta)
    k = skew(w)
    k2 = k @ k
    rot = np.eye(3) + a * k + b * k2
    vmat = np.eye(3) + b * k + c * k2
    return RigidTransform(rot, vmat @ v)


def log_transform(t: RigidTransform) -> Twist:
    """Inverse of exp_twist; requires rotation angle < pi - 1e-6."""
    r = t.rotation
    cos_theta = min(1.0, max(-1.0, 0.5 * (np.trace(r) - 1.0)))
    theta = math.acos(cos_theta)
    if theta >= math.pi - 1e-6:
        raise AngleNearPi(f"rotation angle {theta:.6f} too close to pi")
    if theta < _SMALL_ANGLE:
        w = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    else:
        scale = theta / (2.0 * math.sin(theta))
        w = scale * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    k = skew(w)
    k2 = k @ k
    if theta < _SMALL_ANGLE:
        vinv = np.eye(3) - 0.5 * k + (1.0 / 12.0) * k2
    else:
        half = 0.5 * theta
        coeff = (1.0 - half * math.cos(half) / math.sin(half)) / (theta * theta)
        vinv = np.eye(3) - 0.5 * k + coeff * k2
    return Twist(w, vinv @ t.translation)


def screw_twist(s: ScrewParams, theta: JointState) -> Twist:
    l, m = s.axis, s.moment
    return Twist(theta.tau * l, theta.tau * np.cross(m, l) + theta.d * l)


def screw_transform(s: ScrewParams, theta: JointState) -> RigidTransform:
    """Rigid motion of a 1-DOF screw joint at state (tau, d)."""
    return exp_twist(screw_twist(s, theta))


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """a followed by b, i.e. the matrix product b @ a."""
    rot = b.rotation @ a.rotation
    drift = np.abs(rot.T @ rot - np.eye(3)).max()
    if drift > 1e-7:
        rot = orthonormalize(rot)
    return RigidTransform(rot, b.rotation @ a.translation + b.translation)


def relative(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """inv(b) @ a: the motion of a expressed relative to b."""
    return compose(a, b.inverse())


def canonical_axis_sign(axis: np.ndarray, tol: float = 1e-9) -> float:
    """+1/-1 so that axis*sign has its first non-negligible component > 0.

    (l, tau) and (-l, -tau) describe the same joint; tests and comparisons
    normalize through this sign.
    """
    for comp in np.asarray(axis, dtype=np.float64).reshape(3):
        if abs(comp) > tol:
            return 1.0 if comp > 0 else -1.0
    return 1.0


def rotation_geodesic_angle(ra: np.ndarray, rb: np.ndarray) -> float:
    """Angle of the relative rotation between two rotation matrices."""
    cos_theta = min(1.0, max(-1.0, 0.5 * (np.trace(ra.T @ rb) - 1.0)))
    return math.acos(cos_theta)


# --- batched torch variants (differentiable, float64) ---------------------

_TORCH_SMALL = 1e-4  # switch on theta; series keeps gradients finite at 0


def exp_twists_torch(xi: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched exponential map: xi (..., 6) -> rotations (..., 3, 3), translations (..., 3)."""
    w, v = xi[..., :3], xi[..., 3:]
    theta2 = (w * w).sum(-1)
    theta = torch.sqrt(theta2.clamp_min(1e-30))
    small = theta < _TORCH_SMALL
    theta_safe = torch.where(small, torch.ones_like(theta), theta)
    half_sin = torch.sin(0.5 * theta_safe)
    a = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(theta_safe) / theta_safe)
    b = torch.where(small, 0.5 - theta2 / 24.0, 2.0 * half_sin * half_sin / (theta_safe * theta_safe))
    c = torch.where(
        small,
        1.0 / 6.0 - theta2 / 120.0,
        (theta_safe - torch.sin(theta_safe)) / (theta_safe * theta_safe * theta_safe),
    )
    zeros = torch.zeros_like(theta)
    k = torch.stack(
        [
            torch.stack([zeros, -w[..., 2], w[..., 1]], dim=-1),
            torch.stack([w[..., 2], zeros, -w[..., 0]], dim=-1),
            torch.stack([-w[..., 1], w[..., 0], zeros], dim=-1),
        ],
        dim=-2,
    )
    k2 = k @ k
    eye = torch.eye(3, dtype=xi.dtype, device=xi.device).expand(k.shape)
    rot = eye + a[..., None, None] * k + b[..., None, None] * k2
    vmat = eye + b[..., None, None] * k + c[..., None, None] * k2
    trans = (vmat @ v.unsqueeze(-1)).squeeze(-1)
    return rot, trans


def screw_twists_torch(axis: torch.Tensor, moment: torch.Tensor, tau: torch.Tensor, d: torch.Tensor) -> torch.Tensor:
    """Screw-joint twists: axis/moment (..., 3), tau/d (...) -> (..., 6)."""
    w = tau.unsqueeze(-1) * axis
    v = tau.unsqueeze(-1) * torch.cross(moment, axis, dim=-1) + d.unsqueeze(-1) * axis
    return torch.cat([w, v], dim=-1)
