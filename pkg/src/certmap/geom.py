"""Quaternion and rigid-transform algebra.

Quaternions are stored scalar-last, ``q = [q1, q2, q3, q4]`` with ``q4`` the
scalar part, and multiply with the Hamilton convention. Rotation matrices are
plain ``(3, 3)`` arrays. A :class:`RotoTranslation` ``(R, t)`` maps a point
``p_A`` in frame A to ``p_B = R p_A + t`` in frame B.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

ALGEBRA_TOL = 1e-9
INPUT_TOL = 1e-6
MAX_FROBENIUS = 2.0 * math.sqrt(2.0)

IDENTITY_QUAT = np.array([0.0, 0.0, 0.0, 1.0])


class InvalidRotation(ValueError):
    """A matrix that should be a rotation is not orthonormal with det +1."""


class OutOfRange(ValueError):
    pass


def omega1(q) -> np.ndarray:
    """Left-multiplication matrix: ``omega1(qa) @ qb == qa ∘ qb``."""
    q1, q2, q3, q4 = np.asarray(q, dtype=float)
    return np.array(
        [
            [q4, -q3, q2, q1],
            [q3, q4, -q1, q2],
            [-q2, q1, q4, q3],
            [-q1, -q2, -q3, q4],
        ]
    )


def omega2(q) -> np.ndarray:
    """Right-multiplication matrix: ``omega2(qb) @ qa == qa ∘ qb``."""
    q1, q2, q3, q4 = np.asarray(q, dtype=float)
    return np.array(
        [
            [q4, q3, -q2, q1],
            [-q3, q4, q1, q2],
            [q2, -q1, q4, q3],
            [-q1, -q2, -q3, q4],
        ]
    )


def omega1_stack(v: np.ndarray) -> np.ndarray:
    """Vectorized :func:`omega1` over an ``(n, 4)`` array."""
    q1, q2, q3, q4 = np.moveaxis(np.asarray(v, dtype=float), -1, 0)
    out = np.empty(q1.shape + (4, 4))
    out[..., 0, :] = np.stack([q4, -q3, q2, q1], axis=-1)
    out[..., 1, :] = np.stack([q3, q4, -q1, q2], axis=-1)
    out[..., 2, :] = np.stack([-q2, q1, q4, q3], axis=-1)
    out[..., 3, :] = np.stack([-q1, -q2, -q3, q4], axis=-1)
    return out


def omega2_stack(v: np.ndarray) -> np.ndarray:
    """Vectorized :func:`omega2` over an ``(n, 4)`` array."""
    q1, q2, q3, q4 = np.moveaxis(np.asarray(v, dtype=float), -1, 0)
    out = np.empty(q1.shape + (4, 4))
    out[..., 0, :] = np.stack([q4, q3, -q2, q1], axis=-1)
    out[..., 1, :] = np.stack([-q3, q4, q1, q2], axis=-1)
    out[..., 2, :] = np.stack([q2, -q1, q4, q3], axis=-1)
    out[..., 3, :] = np.stack([-q1, -q2, -q3, q4], axis=-1)
    return out


def canonical_quat(q) -> np.ndarray:
    """Normalize and fix the sign so that q4 >= 0 (first nonzero entry positive on a tie)."""
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0.0:
        raise ValueError("cannot normalize a zero or non-finite quaternion")
    q = q / n
    if q[3] < 0.0:
        q = -q
    elif q[3] == 0.0:
        nz = np.flatnonzero(q)
        if nz.size and q[nz[0]] < 0.0:
            q = -q
    return q


def quat_inverse(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return np.array([-q[0], -q[1], -q[2], q[3]])


def quat_product(qa, qb, check: bool = False) -> np.ndarray:
    """Hamilton product ``qa ∘ qb``, renormalized.

    With ``check=True`` the two factorizations through omega1 and omega2 are
    both evaluated and required to agree.
    """
    qa = np.asarray(qa, dtype=float)
    qb = np.asarray(qb, dtype=float)
    qc = omega1(qa) @ qb
    if check:
        other = omega2(qb) @ qa
        if not np.allclose(qc, other, atol=ALGEBRA_TOL, rtol=0.0):
            raise AssertionError("omega1/omega2 factorizations disagree")
    return qc / np.linalg.norm(qc)


def quat_to_rotation(q) -> np.ndarray:
    x, y, z, w = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def check_rotation(r, tol: float = INPUT_TOL) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        raise InvalidRotation(f"expected a finite 3x3 matrix, got shape {r.shape}")
    ortho = np.linalg.norm(r.T @ r - np.eye(3))
    det = np.linalg.det(r)
    if ortho > tol or abs(det - 1.0) > tol:
        raise InvalidRotation(f"not a rotation: |R^T R - I|_F={ortho:.3g}, det={det:.6f}")
    return r


def rotation_to_quat(r) -> np.ndarray:
    """Shepperd's method; result is canonical (q4 >= 0)."""
    r = check_rotation(r)
    tr = np.trace(r)
    diag = np.diag(r)
    k = int(np.argmax([diag[0], diag[1], diag[2], tr]))
    if k == 3:
        w = 0.5 * math.sqrt(max(1.0 + tr, 0.0))
        q = [
            (r[2, 1] - r[1, 2]) / (4 * w),
            (r[0, 2] - r[2, 0]) / (4 * w),
            (r[1, 0] - r[0, 1]) / (4 * w),
            w,
        ]
    else:
        i = k
        j, m = (i + 1) % 3, (i + 2) % 3
        s = 0.5 * math.sqrt(max(1.0 + r[i, i] - r[j, j] - r[m, m], 0.0))
        q = [0.0, 0.0, 0.0, (r[m, j] - r[j, m]) / (4 * s)]
        q[i] = s
        q[j] = (r[j, i] + r[i, j]) / (4 * s)
        q[m] = (r[m, i] + r[i, m]) / (4 * s)
    return canonical_quat(q)


def angle_to_frobenius(theta: float) -> float:
    """``||R1 - R2||_F`` for two rotations separated by geodesic angle ``theta``."""
    if theta < -ALGEBRA_TOL or theta > math.pi + ALGEBRA_TOL:
        raise OutOfRange(f"angle {theta} outside [0, pi]")
    theta = min(max(theta, 0.0), math.pi)
    # 4(1 - cos) written as 8 sin^2(theta/2) to keep precision near zero
    return 2.0 * math.sqrt(2.0) * math.sin(0.5 * theta)


def frobenius_to_angle(f: float) -> float:
    """Inverse of :func:`angle_to_frobenius`: ``cos(theta) = 1 - f**2 / 4``."""
    if f < 0.0 or f > MAX_FROBENIUS + ALGEBRA_TOL:
        raise OutOfRange(f"Frobenius distance {f} outside [0, 2*sqrt(2)]")
    s = min(f / MAX_FROBENIUS, 1.0)
    return 2.0 * math.asin(s)


def rotation_angle_between(r1, r2) -> float:
    """Geodesic angle between two rotations via the trace formula."""
    c = 0.5 * (np.trace(np.asarray(r1) @ np.asarray(r2).T) - 1.0)
    return math.acos(min(1.0, max(-1.0, c)))


def axis_angle_to_rotation(axis, angle: float) -> np.ndarray:
    """Rodrigues' formula."""
    k = np.asarray(axis, dtype=float)
    k = k / np.linalg.norm(k)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(angle) * kx + (1 - math.cos(angle)) * (kx @ kx)


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    return quat_to_rotation(q / np.linalg.norm(q))


@dataclass(frozen=True, eq=False)
class RotoTranslation:
    """Rigid transform ``p -> rotation @ p + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float)
        t = np.array(self.translation, dtype=float).reshape(3)
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RotoTranslation:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_quat(cls, q, t) -> RotoTranslation:
        return cls(quat_to_rotation(q), t)

    @property
    def quaternion(self) -> np.ndarray:
        return rotation_to_quat(self.rotation)

    def inverse(self) -> RotoTranslation:
        return invert(self)

    def __matmul__(self, other: RotoTranslation) -> RotoTranslation:
        return compose(self, other)

    def apply(self, p) -> np.ndarray:
        """Transform a point ``(3,)`` or a batch ``(n, 3)``."""
        p = np.asarray(p, dtype=float)
        return p @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def allclose(self, other: RotoTranslation, atol: float = ALGEBRA_TOL) -> bool:
        return np.allclose(self.rotation, other.rotation, rtol=0.0, atol=atol) and np.allclose(
            self.translation, other.translation, rtol=0.0, atol=atol
        )

    def __repr__(self) -> str:
        q = np.array2string(self.quaternion, precision=6)
        t = np.array2string(self.translation, precision=6)
        return f"RotoTranslation(q={q}, t={t})"


def compose(t_bc: RotoTranslation, t_ab: RotoTranslation) -> RotoTranslation:
    """Chain A->B followed by B->C into A->C."""
    return RotoTranslation(
        t_bc.rotation @ t_ab.rotation,
        t_bc.rotation @ t_ab.translation + t_bc.translation,
    )


def invert(t: RotoTranslation) -> RotoTranslation:
    """Inverse transform; the translation is ``-R^T t``."""
    rt = t.rotation.T
    return RotoTranslation(rt, -rt @ t.translation)


def transform_point(t: RotoTranslation, p) -> np.ndarray:
    return t.apply(p)
