"""Rotation conversions between BVH Euler angles, matrices and exponential maps.

All functions broadcast over leading axes. Euler angles are in degrees and are
listed in the same sequence as ``order`` (e.g. ``order="ZXY"`` means the angles are
``(z, x, y)`` and ``R = Rz @ Rx @ Ry``, the BVH channel convention).
"""

import numpy as np
from scipy.spatial.transform import Rotation

SMALL_ANGLE = 1e-8
HALF_TURN_TOL = 1e-12


def _check_order(order: str) -> str:
    order = order.upper()
    if sorted(order) != ["X", "Y", "Z"]:
        raise ValueError(f"rotation order must be a permutation of XYZ, got {order!r}")
    return order


def axis_matrix(axis: str, angle) -> np.ndarray:
    """Rotation by ``angle`` radians about a coordinate axis."""
    angle = np.asarray(angle, dtype=np.float64)
    c, s = np.cos(angle), np.sin(angle)
    one, zero = np.ones_like(angle), np.zeros_like(angle)
    if axis == "X":
        rows = [[one, zero, zero], [zero, c, -s], [zero, s, c]]
    elif axis == "Y":
        rows = [[c, zero, s], [zero, one, zero], [-s, zero, c]]
    else:
        rows = [[c, -s, zero], [s, c, zero], [zero, zero, one]]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def euler_to_matrix(angles, order: str) -> np.ndarray:
    order = _check_order(order)
    rad = np.deg2rad(np.asarray(angles, dtype=np.float64))
    out = axis_matrix(order[0], rad[..., 0])
    for i in (1, 2):
        out = out @ axis_matrix(order[i], rad[..., i])
    return out


def _skew(r: np.ndarray) -> np.ndarray:
    x, y, z = r[..., 0], r[..., 1], r[..., 2]
    zero = np.zeros_like(x)
    return np.stack(
        [np.stack([zero, -z, y], -1), np.stack([z, zero, -x], -1), np.stack([-y, x, zero], -1)], -2
    )


def expmap_to_matrix(r) -> np.ndarray:
    """Rodrigues' formula; second-order Taylor expansion for angles under 1e-8."""
    r = np.asarray(r, dtype=np.float64)
    theta = np.linalg.norm(r, axis=-1)[..., None, None]
    K = _skew(r)
    K2 = K @ K
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0, np.sin(safe) / safe)
    b = np.where(small, 0.5, (1.0 - np.cos(safe)) / safe**2)
    return np.eye(3) + a * K + b * K2


def matrix_to_quat(R) -> np.ndarray:
    """Unit quaternion ``(w, x, y, z)`` with ``w >= 0`` (Shepperd's method)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        return _matrix_to_quat(np.asarray(R, dtype=np.float64))


def _matrix_to_quat(R: np.ndarray) -> np.ndarray:
    r00, r11, r22 = R[..., 0, 0], R[..., 1, 1], R[..., 2, 2]
    tr = r00 + r11 + r22
    d21, d02, d10 = R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0], R[..., 1, 0] - R[..., 0, 1]
    s01, s02, s12 = R[..., 0, 1] + R[..., 1, 0], R[..., 0, 2] + R[..., 2, 0], R[..., 1, 2] + R[..., 2, 1]
    cands = []
    w = 0.5 * np.sqrt(np.maximum(1.0 + tr, 1e-300))
    cands.append(np.stack([w, d21 / (4 * w), d02 / (4 * w), d10 / (4 * w)], -1))
    x = 0.5 * np.sqrt(np.maximum(1.0 + r00 - r11 - r22, 1e-300))
    cands.append(np.stack([d21 / (4 * x), x, s01 / (4 * x), s02 / (4 * x)], -1))
    y = 0.5 * np.sqrt(np.maximum(1.0 - r00 + r11 - r22, 1e-300))
    cands.append(np.stack([d02 / (4 * y), s01 / (4 * y), y, s12 / (4 * y)], -1))
    z = 0.5 * np.sqrt(np.maximum(1.0 - r00 - r11 + r22, 1e-300))
    cands.append(np.stack([d10 / (4 * z), s02 / (4 * z), s12 / (4 * z), z], -1))
    pick = np.argmax(np.stack([tr, r00, r11, r22], -1), axis=-1)
    q = np.take_along_axis(np.stack(cands, -2), pick[..., None, None], axis=-2)[..., 0, :]
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return np.where(q[..., :1] < 0, -q, q)


def _first_nonzero_positive(v: np.ndarray) -> np.ndarray:
    # sign that makes the first nonzero component positive
    nz = np.abs(v) > 0
    first = np.argmax(nz, axis=-1)
    lead = np.take_along_axis(v, first[..., None], axis=-1)
    return np.where(lead < 0, -1.0, 1.0)


def matrix_to_expmap(R) -> np.ndarray:
    """Canonical axis-angle vector with norm in [0, pi]."""
    q = matrix_to_quat(R)
    w, v = q[..., :1], q[..., 1:]
    vnorm = np.linalg.norm(v, axis=-1, keepdims=True)
    small = vnorm < SMALL_ANGLE
    angle = 2.0 * np.arctan2(vnorm, w)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(small, 2.0 * v / np.where(w == 0, 1.0, w), angle * v / np.where(small, 1.0, vnorm))
    # at pi, r and -r are the same rotation; pick a deterministic one (w carries
    # rounding noise of order 1e-17 there)
    half_turn = (np.abs(w) <= HALF_TURN_TOL) & ~small
    return np.where(half_turn, r * _first_nonzero_positive(r), r)


def canonicalize_expmap(r) -> np.ndarray:
    """Equivalent exp-map with norm <= pi."""
    return matrix_to_expmap(expmap_to_matrix(r))


def euler_to_expmap(angles, order: str) -> np.ndarray:
    return matrix_to_expmap(euler_to_matrix(angles, order))


def matrix_to_euler(R, order: str) -> np.ndarray:
    order = _check_order(order)
    R = np.asarray(R, dtype=np.float64)
    flat = R.reshape(-1, 3, 3)
    # uppercase sequence = intrinsic rotations, matching euler_to_matrix
    out = Rotation.from_matrix(flat).as_euler(order, degrees=True)
    return out.reshape(R.shape[:-2] + (3,))


def expmap_to_euler(r, order: str) -> np.ndarray:
    return matrix_to_euler(expmap_to_matrix(r), order)


def heading_angle(R) -> np.ndarray:
    """Yaw about +Y of the rotated +Z axis (BVH characters are Y-up, facing +Z)."""
    R = np.asarray(R, dtype=np.float64)
    return np.arctan2(R[..., 0, 2], R[..., 2, 2])
