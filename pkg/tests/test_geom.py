import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from reart import geom
from reart.errors import AngleNearPi
from reart.geom import JointState, RigidTransform, ScrewParams, Twist


def random_twist(rng, max_angle=math.pi - 0.1):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(1e-6, max_angle)
    return Twist(angle * axis, rng.normal(size=3))


def test_exp_zero_twist_is_identity():
    t = geom.exp_twist(Twist.zero())
    assert np.allclose(t.rotation, np.eye(3), atol=0)
    assert np.allclose(t.translation, 0.0, atol=0)


def test_exp_pure_translation():
    v = np.array([0.3, -1.0, 2.0])
    t = geom.exp_twist(Twist(np.zeros(3), v))
    assert np.allclose(t.rotation, np.eye(3))
    assert np.allclose(t.translation, v)


def test_exp_quarter_turn_about_z():
    t = geom.exp_twist(Twist(np.array([0.0, 0.0, math.pi / 2]), np.zeros(3)))
    assert np.allclose(t.apply(np.array([1.0, 0.0, 0.0])), [0.0, 1.0, 0.0], atol=1e-12)


def test_log_identity_and_translation():
    assert np.allclose(geom.log_transform(RigidTransform.identity()).as_array(), 0.0)
    v = np.array([1.0, 2.0, 3.0])
    xi = geom.log_transform(RigidTransform(np.eye(3), v))
    assert np.allclose(xi.omega, 0.0)
    assert np.allclose(xi.v, v)


def test_log_raises_near_pi():
    r = geom.exp_twist(Twist(np.array([math.pi - 1e-9, 0.0, 0.0]), np.zeros(3)))
    with pytest.raises(AngleNearPi):
        geom.log_transform(r)


def test_exp_log_round_trip_1000():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        xi = random_twist(rng)
        back = geom.log_transform(geom.exp_twist(xi))
        worst = max(worst, np.abs(back.as_array() - xi.as_array()).max())
    assert worst < 1e-9


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(-1, 1), min_size=3, max_size=3),
    st.floats(1e-5, math.pi - 0.1),
    st.lists(st.floats(-2, 2), min_size=3, max_size=3),
)
def test_round_trip_property(direction, angle, v):
    d = np.asarray(direction)
    if np.linalg.norm(d) < 1e-3:
        d = np.array([1.0, 0.0, 0.0])
    d = d / np.linalg.norm(d)
    xi = Twist(angle * d, np.asarray(v))
    back = geom.log_transform(geom.exp_twist(xi))
    assert np.abs(back.as_array() - xi.as_array()).max() < 1e-9


def test_screw_zero_state_identity():
    s = ScrewParams(np.array([0.2, 0.5, -0.3]), np.array([1.0, 0.0, 2.0]))
    t = geom.screw_transform(s, JointState(0.0, 0.0))
    assert np.allclose(t.matrix(), np.eye(4), atol=0)


def test_screw_rotation_about_z_through_origin():
    s = ScrewParams(np.array([0.0, 0.0, 1.0]), np.zeros(3))
    t = geom.screw_transform(s, JointState(math.pi / 2, 0.0))
    assert np.allclose(t.apply(np.array([1.0, 0.0, 0.0])), [0.0, 1.0, 0.0], atol=1e-12)


def test_screw_prismatic_ignores_moment():
    s1 = ScrewParams(np.array([1.0, 0.0, 0.0]), np.array([5.0, -2.0, 7.0]))
    s2 = ScrewParams(np.array([1.0, 0.0, 0.0]), np.array([0.0, 3.3, 0.1]))
    t1 = geom.screw_transform(s1, JointState(0.0, 2.5))
    t2 = geom.screw_transform(s2, JointState(0.0, 2.5))
    assert np.array_equal(t1.matrix(), t2.matrix())
    assert np.allclose(t1.translation, [2.5, 0.0, 0.0])


def test_screw_axis_line_is_fixed_under_rotation():
    rng = np.random.default_rng(1)
    for _ in range(50):
        s = ScrewParams(rng.normal(size=3), rng.normal(size=3))
        t = geom.screw_transform(s, JointState(rng.uniform(-3, 3), 0.0))
        for step in (-1.0, 0.0, 2.0):
            p = s.moment + step * s.axis
            assert np.linalg.norm(t.apply(p) - p) < 1e-9


def test_compose_identity_and_relative_self():
    rng = np.random.default_rng(2)
    t = geom.exp_twist(random_twist(rng))
    assert np.allclose(geom.compose(t, RigidTransform.identity()).matrix(), t.matrix())
    rel = geom.relative(t, t)
    assert np.abs(rel.matrix() - np.eye(4)).max() < 1e-12


def test_relative_of_compose_recovers_first():
    rng = np.random.default_rng(3)
    for _ in range(50):
        a = geom.exp_twist(random_twist(rng))
        b = geom.exp_twist(random_twist(rng))
        back = geom.relative(geom.compose(a, b), b)
        assert np.abs(back.matrix() - a.matrix()).max() < 1e-12


def test_compose_preserves_orthonormality():
    rng = np.random.default_rng(4)
    t = geom.exp_twist(random_twist(rng))
    for _ in range(500):
        t = geom.compose(t, geom.exp_twist(random_twist(rng)))
        drift = np.abs(t.rotation.T @ t.rotation - np.eye(3)).max()
        assert drift < 1e-7


def test_torch_exp_matches_numpy():
    rng = np.random.default_rng(5)
    xis = np.stack([random_twist(rng).as_array() for _ in range(64)])
    xis[0] = 0.0
    xis[1, :3] = 0.0
    xis[2, :3] = np.array([1e-6, 0.0, 0.0])
    rot, trans = geom.exp_twists_torch(torch.tensor(xis))
    for i in range(len(xis)):
        t = geom.exp_twist(Twist.from_array(xis[i]))
        assert np.abs(rot[i].numpy() - t.rotation).max() < 1e-12
        assert np.abs(trans[i].numpy() - t.translation).max() < 1e-12


def test_torch_exp_gradient_finite_at_zero():
    xi = torch.zeros(6, dtype=torch.float64, requires_grad=True)
    rot, trans = geom.exp_twists_torch(xi.unsqueeze(0))
    (rot.sum() + trans.sum()).backward()
    assert torch.isfinite(xi.grad).all()


def test_canonical_axis_sign():
    assert geom.canonical_axis_sign(np.array([0.0, -0.5, 1.0])) == -1.0
    assert geom.canonical_axis_sign(np.array([1e-12, 0.3, -1.0])) == 1.0
