import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from certmap.geom import (
    IDENTITY_QUAT,
    MAX_FROBENIUS,
    InvalidRotation,
    OutOfRange,
    RotoTranslation,
    angle_to_frobenius,
    canonical_quat,
    compose,
    frobenius_to_angle,
    invert,
    omega1,
    omega2,
    quat_inverse,
    quat_product,
    quat_to_rotation,
    random_rotation,
    rotation_angle_between,
    rotation_to_quat,
    transform_point,
)

unit_quats = st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(
    lambda v: np.linalg.norm(v) > 1e-3
).map(lambda v: np.asarray(v) / np.linalg.norm(v))
vectors = st.lists(st.floats(-10, 10), min_size=3, max_size=3).map(np.asarray)


def rodrigues_from_quat(q):
    # independent oracle: axis-angle read off the quaternion, then Rodrigues' formula
    v, w = np.asarray(q[:3]), q[3]
    s = np.linalg.norm(v)
    if s < 1e-15:
        return np.eye(3)
    k = v / s
    theta = 2.0 * math.atan2(s, w)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(theta) * kx + (1 - math.cos(theta)) * kx @ kx


def hamilton(qa, qb):
    va, wa = qa[:3], qa[3]
    vb, wb = qb[:3], qb[3]
    return np.concatenate([wa * vb + wb * va + np.cross(va, vb), [wa * wb - va @ vb]])


def test_identity_product_and_inverse():
    q = canonical_quat([0.3, -0.2, 0.5, 0.7])
    assert np.allclose(quat_product(IDENTITY_QUAT, q), q, atol=1e-12)
    assert np.allclose(quat_product(q, quat_inverse(q)), IDENTITY_QUAT, atol=1e-12)


@given(unit_quats, unit_quats)
def test_product_matches_matrix_product(qa, qb):
    qc = quat_product(qa, qb, check=True)
    assert abs(np.linalg.norm(qc) - 1) < 1e-9
    assert np.allclose(rodrigues_from_quat(qc), rodrigues_from_quat(qa) @ rodrigues_from_quat(qb), atol=1e-9)


def test_omega_identity_is_eye():
    assert np.array_equal(omega1(IDENTITY_QUAT), np.eye(4))
    assert np.array_equal(omega2(IDENTITY_QUAT), np.eye(4))


@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4), st.lists(st.floats(-5, 5), min_size=4, max_size=4))
def test_omega_matrices_encode_hamilton_product(a, b):
    a, b = np.asarray(a), np.asarray(b)
    ref = hamilton(a, b)
    assert np.allclose(omega1(a) @ b, ref, atol=1e-9)
    assert np.allclose(omega2(b) @ a, ref, atol=1e-9)


@given(unit_quats, vectors)
def test_conjugation_rotates_vector(q, a):
    a_bar = np.append(a, 0.0)
    rotated = omega2(q).T @ omega1(q) @ a_bar
    assert np.allclose(rotated[:3], quat_to_rotation(q) @ a, atol=1e-9)
    assert abs(rotated[3]) < 1e-9


@given(unit_quats)
def test_omega_orthogonal_and_transpose_is_inverse(q):
    for om in (omega1, omega2):
        m = om(q)
        assert np.linalg.norm(m.T @ m - np.eye(4)) < 1e-9
        assert np.allclose(om(quat_inverse(q)), m.T, atol=1e-12)


def test_quarter_turn_about_z():
    q = np.array([0, 0, math.sqrt(0.5), math.sqrt(0.5)])
    r = quat_to_rotation(q)
    assert r[0, 1] == pytest.approx(-1.0)
    assert r[1, 0] == pytest.approx(1.0)
    assert np.allclose(r, rodrigues_from_quat(q), atol=1e-12)


@given(unit_quats)
def test_rotation_quaternion_round_trip(q):
    r = quat_to_rotation(q)
    assert np.linalg.norm(r.T @ r - np.eye(3)) < 1e-9
    assert abs(np.linalg.det(r) - 1) < 1e-9
    back = rotation_to_quat(r)
    assert back[3] >= 0
    assert np.allclose(back, q, atol=1e-9) or np.allclose(back, -q, atol=1e-9)
    assert np.allclose(quat_to_rotation(back), r, atol=1e-9)


def test_canonical_sign_tie_break():
    assert np.allclose(canonical_quat([-1.0, 0, 0, 0]), [1, 0, 0, 0])
    assert np.allclose(canonical_quat([0, -0.6, 0.8, 0]), [0, 0.6, -0.8, 0])


def test_invalid_rotation_rejected():
    with pytest.raises(InvalidRotation):
        rotation_to_quat(np.diag([1.0, 1.0, 1.0 + 1e-4]))
    with pytest.raises(InvalidRotation):
        rotation_to_quat(np.diag([1.0, 1.0, -1.0]))


def test_frobenius_angle_anchors():
    assert angle_to_frobenius(0.0) == 0.0
    assert round(angle_to_frobenius(math.radians(5)), 3) == 0.123
    assert frobenius_to_angle(MAX_FROBENIUS) == pytest.approx(math.pi)
    with pytest.raises(OutOfRange):
        frobenius_to_angle(MAX_FROBENIUS + 1e-6)
    with pytest.raises(OutOfRange):
        angle_to_frobenius(4.0)


@given(st.floats(0, math.pi))
def test_frobenius_angle_inverse(theta):
    assert frobenius_to_angle(angle_to_frobenius(theta)) == pytest.approx(theta, abs=1e-7)
    f = theta / math.pi * MAX_FROBENIUS
    assert angle_to_frobenius(frobenius_to_angle(f)) == pytest.approx(f, abs=1e-9)


def test_frobenius_to_angle_strictly_increasing():
    f = np.linspace(0, MAX_FROBENIUS, 2001)
    assert np.all(np.diff([frobenius_to_angle(x) for x in f]) > 0)


def test_frobenius_matches_geodesic_angle(rng):
    for _ in range(200):
        r1, r2 = random_rotation(rng), random_rotation(rng)
        c = np.clip((np.trace(r1 @ r2.T) - 1) / 2, -1, 1)
        assert np.linalg.norm(r1 - r2) == pytest.approx(angle_to_frobenius(math.acos(c)), abs=1e-9)
        assert rotation_angle_between(r1, r2) == pytest.approx(math.acos(c), abs=1e-12)


def test_invert_special_cases():
    ident = RotoTranslation.identity()
    assert invert(ident).allclose(ident)
    t = RotoTranslation(np.eye(3), [1.0, -2.0, 3.0])
    assert np.allclose(invert(t).translation, [-1.0, 2.0, -3.0])


def test_invert_composition(rng):
    for _ in range(100):
        t = RotoTranslation(random_rotation(rng), rng.normal(size=3))
        inv = invert(t)
        assert np.allclose(inv.translation, -t.rotation.T @ t.translation)
        assert compose(inv, t).allclose(RotoTranslation.identity())
        assert compose(t, inv).allclose(RotoTranslation.identity())


def test_transform_point(rng):
    p = rng.normal(size=3)
    assert np.allclose(transform_point(RotoTranslation.identity(), p), p)
    assert np.allclose(transform_point(RotoTranslation(np.eye(3), [1, 2, 3]), p), p + [1, 2, 3])
    for _ in range(100):
        t = RotoTranslation(random_rotation(rng), rng.normal(size=3) * 5)
        p, q = rng.normal(size=(2, 3)) * 3
        assert np.allclose(transform_point(invert(t), transform_point(t, p)), p, atol=1e-9)
        assert np.linalg.norm(t.apply(p) - t.apply(q)) == pytest.approx(np.linalg.norm(p - q), abs=1e-9)


def test_rototranslation_is_immutable():
    t = RotoTranslation.identity()
    with pytest.raises(ValueError):
        t.translation[0] = 1.0
