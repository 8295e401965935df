"""Orientation helpers: Bunge Euler angles, unit quaternions, misorientation.

Conventions
-----------
Euler angles are Bunge (z-x-z) triples ``(phi1, Phi, phi2)`` in degrees and
describe the active rotation ``R = Rz(phi1) @ Rx(Phi) @ Rz(phi2)`` taking
crystal axes to sample axes.  Quaternions are ``(w, x, y, z)`` arrays with
the last axis of length 4.  Crystal symmetry operators act on the crystal
side, ``R @ S``.
"""

import numpy as np

SYMMETRIES = ("none", "hexagonal")


def normalize_euler(euler):
    """Map Euler triples to ``0 <= phi1 < 360``, ``0 <= Phi <= 180``, ``0 <= phi2 < 360``.

    ``Phi`` outside ``[0, 180]`` is folded with the identity
    ``Rz(a) Rx(-b) Rz(c) == Rz(a + 180) Rx(b) Rz(c + 180)``, so the rotation
    is unchanged.
    """
    e = np.array(euler, dtype=np.float64)
    phi1, Phi, phi2 = e[..., 0], np.mod(e[..., 1], 360.0), e[..., 2]
    flip = Phi > 180.0
    Phi = np.where(flip, 360.0 - Phi, Phi)
    phi1 = np.where(flip, phi1 + 180.0, phi1)
    phi2 = np.where(flip, phi2 + 180.0, phi2)
    out = np.stack([np.mod(phi1, 360.0), Phi, np.mod(phi2, 360.0)], axis=-1)
    # np.mod can return exactly 360.0 for tiny negative inputs
    out[..., 0][out[..., 0] >= 360.0] = 0.0
    out[..., 2][out[..., 2] >= 360.0] = 0.0
    return out


def quat_mult(qa, qb):
    """Hamilton product ``qa * qb`` (broadcasts over leading axes)."""
    qa = np.asarray(qa, dtype=np.float64)
    qb = np.asarray(qb, dtype=np.float64)
    a0, a1, a2, a3 = np.moveaxis(qa, -1, 0)
    b0, b1, b2, b3 = np.moveaxis(qb, -1, 0)
    return np.stack([
        a0 * b0 - a1 * b1 - a2 * b2 - a3 * b3,
        a0 * b1 + a1 * b0 + a2 * b3 - a3 * b2,
        a0 * b2 - a1 * b3 + a2 * b0 + a3 * b1,
        a0 * b3 + a1 * b2 - a2 * b1 + a3 * b0,
    ], axis=-1)


def quat_conj(q):
    q = np.array(q, dtype=np.float64)
    q[..., 1:] *= -1.0
    return q


def quat_from_axis_angle(axis, angle_deg):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = np.radians(np.asarray(angle_deg, dtype=np.float64)) / 2.0
    return np.concatenate([np.cos(half)[..., None], np.sin(half)[..., None] * axis], axis=-1)


def euler_to_quat(euler):
    """Unit quaternion of the Bunge rotation, composed as ``qz(phi1) qx(Phi) qz(phi2)``."""
    e = np.radians(np.asarray(euler, dtype=np.float64)) / 2.0
    zeros = np.zeros(e.shape[:-1])
    qz1 = np.stack([np.cos(e[..., 0]), zeros, zeros, np.sin(e[..., 0])], axis=-1)
    qx = np.stack([np.cos(e[..., 1]), np.sin(e[..., 1]), zeros, zeros], axis=-1)
    qz2 = np.stack([np.cos(e[..., 2]), zeros, zeros, np.sin(e[..., 2])], axis=-1)
    return quat_mult(quat_mult(qz1, qx), qz2)


def quat_to_matrix(q):
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
    ], axis=-2)


def euler_to_matrix(euler):
    """Rotation matrix ``Rz(phi1) @ Rx(Phi) @ Rz(phi2)`` built from elementary rotations."""
    e = np.radians(np.asarray(euler, dtype=np.float64))
    c1, s1 = np.cos(e[..., 0]), np.sin(e[..., 0])
    c, s = np.cos(e[..., 1]), np.sin(e[..., 1])
    c2, s2 = np.cos(e[..., 2]), np.sin(e[..., 2])
    one, zero = np.ones_like(c), np.zeros_like(c)

    def rz(cc, ss):
        return np.stack([np.stack([cc, -ss, zero], -1),
                         np.stack([ss, cc, zero], -1),
                         np.stack([zero, zero, one], -1)], -2)

    rx = np.stack([np.stack([one, zero, zero], -1),
                   np.stack([zero, c, -s], -1),
                   np.stack([zero, s, c], -1)], -2)
    return rz(c1, s1) @ rx @ rz(c2, s2)


def matrix_to_euler(R):
    """Bunge angles in degrees from rotation matrices; ``phi2 = 0`` at the gimbal poles."""
    R = np.asarray(R, dtype=np.float64)
    cos_Phi = np.clip(R[..., 2, 2], -1.0, 1.0)
    Phi = np.arccos(cos_Phi)
    sin_Phi = np.sqrt(R[..., 0, 2] ** 2 + R[..., 1, 2] ** 2)
    regular = sin_Phi > 1e-12
    phi1 = np.where(regular, np.arctan2(R[..., 0, 2], -R[..., 1, 2]),
                    np.arctan2(R[..., 1, 0], R[..., 0, 0]))
    phi2 = np.where(regular, np.arctan2(R[..., 2, 0], R[..., 2, 1]), 0.0)
    Phi = np.where(regular, Phi, np.where(cos_Phi > 0, 0.0, np.pi))
    return normalize_euler(np.degrees(np.stack([phi1, Phi, phi2], axis=-1)))


def quat_to_euler(q):
    return matrix_to_euler(quat_to_matrix(q))


def symmetry_quats(symmetry="none"):
    """Proper rotations of the crystal point group as an ``(n, 4)`` array.

    ``hexagonal`` is the 622 group: six rotations about ``c`` in steps of
    60 degrees and six two-fold axes in the basal plane every 30 degrees.
    """
    if symmetry == "none":
        return np.array([[1.0, 0.0, 0.0, 0.0]])
    if symmetry == "hexagonal":
        k = np.arange(6) * np.pi / 6.0
        about_c = np.stack([np.cos(k), np.zeros(6), np.zeros(6), np.sin(k)], axis=-1)
        basal = np.stack([np.zeros(6), np.cos(k), np.sin(k), np.zeros(6)], axis=-1)
        return np.concatenate([about_c, basal])
    raise ValueError(f"unknown symmetry {symmetry!r}; expected one of {SYMMETRIES}")


def quat_angle(q):
    """Rotation angle in degrees of (not necessarily positive) unit quaternions."""
    q = np.asarray(q, dtype=np.float64)
    vec = np.linalg.norm(q[..., 1:], axis=-1)
    return np.degrees(2.0 * np.arctan2(vec, np.abs(q[..., 0])))


def quat_misorientation(qa, qb, symmetry="none"):
    """Misorientation angle in degrees between quaternion arrays.

    The relative rotation is ``qa * S * conj(qb)``; with symmetry the
    minimum over the point group is returned.  Only ``|w|`` of that product
    matters, and ``w`` equals the 4-vector dot product of ``qa * S`` and
    ``qb``, so the search reduces to dot products.
    """
    qa = np.asarray(qa, dtype=np.float64)
    qb = np.asarray(qb, dtype=np.float64)
    sym = symmetry_quats(symmetry)
    best = np.zeros(np.broadcast_shapes(qa.shape[:-1], qb.shape[:-1]))
    for s in sym:
        w = np.abs(np.sum(quat_mult(qa, s) * qb, axis=-1))
        best = np.maximum(best, w)
    return np.degrees(2.0 * np.arccos(np.clip(best, 0.0, 1.0)))


def misorientation(a, b, symmetry="none"):
    """Misorientation angle in degrees between two Bunge Euler triples.

    Computed by unit-quaternion composition.  The result lies in ``[0, 180]``
    for ``none`` and in ``[0, ~93.8]`` for ``hexagonal``.

    >>> round(float(misorientation((0, 0, 0), (30, 0, 0))), 9)
    30.0
    """
    qa = euler_to_quat(np.asarray(a, dtype=np.float64))
    qb = euler_to_quat(np.asarray(b, dtype=np.float64))
    sym = symmetry_quats(symmetry)
    rel = quat_mult(qa[..., None, :], quat_mult(sym, quat_conj(qb)[..., None, :]))
    return np.min(quat_angle(rel), axis=-1)


def reduce_to_reference(q, ref, symmetry="none"):
    """Replace each quaternion by the symmetry-equivalent closest to ``ref``, sign-aligned."""
    q = np.asarray(q, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    sym = symmetry_quats(symmetry)
    best = q.copy()
    best_dot = np.sum(q * ref, axis=-1)
    for s in sym[1:]:
        cand = quat_mult(q, s)
        dot = np.sum(cand * ref, axis=-1)
        better = np.abs(dot) > np.abs(best_dot)
        best[better] = cand[better]
        best_dot = np.where(better, dot, best_dot)
    best[best_dot < 0] *= -1.0
    return best
