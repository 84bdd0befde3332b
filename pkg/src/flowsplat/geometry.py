"""Camera model, rigid-body poses, and two-view epipolar geometry.

Conventions used throughout the package:

* Quaternions are (w, x, y, z) with the Hamilton product.
* A pose maps world points into the camera frame: ``p_cam = R(q) @ p + t``.
* Pixel coordinates are (u, v) = (column, row); the sample point of pixel
  (row r, col c) is exactly (u=c, v=r).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateBaseline, DepthBehindCamera, InvalidDepth

DEFAULT_Z_NEAR = 1e-4


# ---------------------------------------------------------------------------
# Quaternion helpers
# ---------------------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Return q scaled to unit norm."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("cannot normalize a zero quaternion")
    return q / n


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a * b, both (w, x, y, z)."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w, x, y, z)."""
    w, x, y, z = q
    return np.array(
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    )


def quats_to_matrices(q: np.ndarray) -> np.ndarray:
    """Batched quat_to_matrix: (N, 4) -> (N, 3, 3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    out = np.empty((q.shape[0], 3, 3))
    out[:, 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    out[:, 0, 1] = 2.0 * (x * y - w * z)
    out[:, 0, 2] = 2.0 * (x * z + w * y)
    out[:, 1, 0] = 2.0 * (x * y + w * z)
    out[:, 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    out[:, 1, 2] = 2.0 * (y * z - w * x)
    out[:, 2, 0] = 2.0 * (x * z - w * y)
    out[:, 2, 1] = 2.0 * (y * z + w * x)
    out[:, 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return out


def quat_to_matrix_jac(q: np.ndarray) -> np.ndarray:
    """Partial derivatives dR/dq_k for a unit quaternion, shape (4, 3, 3)."""
    w, x, y, z = q
    dw = 2.0 * np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    dx = 2.0 * np.array([[0.0, y, z], [y, -2.0 * x, -w], [z, w, -2.0 * x]])
    dy = 2.0 * np.array([[-2.0 * y, x, w], [x, 0.0, z], [-w, z, -2.0 * y]])
    dz = 2.0 * np.array([[-2.0 * z, -w, x], [w, -2.0 * z, y], [x, y, 0.0]])
    return np.stack([dw, dx, dy, dz])


def quats_to_matrix_jac(q: np.ndarray) -> np.ndarray:
    """Batched quat_to_matrix_jac: (N, 4) -> (N, 4, 3, 3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    zero = np.zeros_like(w)
    out = np.empty((q.shape[0], 4, 3, 3))
    out[:, 0] = 2.0 * np.stack(
        [zero, -z, y, z, zero, -x, -y, x, zero], axis=-1
    ).reshape(-1, 3, 3)
    out[:, 1] = 2.0 * np.stack(
        [zero, y, z, y, -2.0 * x, -w, z, w, -2.0 * x], axis=-1
    ).reshape(-1, 3, 3)
    out[:, 2] = 2.0 * np.stack(
        [-2.0 * y, x, w, x, zero, z, -w, z, -2.0 * y], axis=-1
    ).reshape(-1, 3, 3)
    out[:, 3] = 2.0 * np.stack(
        [-2.0 * z, -w, x, w, -2.0 * z, y, x, y, zero], axis=-1
    ).reshape(-1, 3, 3)
    return out


def quat_tangent_project(q_unit: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Project a raw quaternion gradient onto the tangent of the unit sphere.

    Matches the Jacobian of q -> q/|q| evaluated at a unit q, which is what
    finite differences of any function that normalizes on read will measure.
    """
    return grad - q_unit * float(np.dot(q_unit, grad))


def quat_normalize_backward(q_raw: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    """Chain a gradient w.r.t. the unit quaternion back to the raw 4-vector."""
    n = np.linalg.norm(q_raw)
    q_unit = q_raw / n
    return (grad_unit - q_unit * float(np.dot(q_unit, grad_unit))) / n


def rotation_angle_deg(q: np.ndarray) -> float:
    """Geodesic rotation angle of a unit quaternion, in degrees."""
    w = abs(float(q[0]))
    vec = float(np.linalg.norm(q[1:]))
    return float(np.degrees(2.0 * np.arctan2(vec, w)))


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics; fx/fy in pixels, (cx, cy) principal point."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @property
    def inverse_matrix(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )


class PoseSE3:
    """World-to-camera rigid transform stored as unit quaternion + translation.

    The quaternion is re-normalized on construction so the stored value is
    always unit within floating precision.
    """

    __slots__ = ("q", "t")

    def __init__(self, q, t):
        q = np.asarray(q, dtype=np.float64).copy()
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0.0:
            raise ValueError("pose quaternion must be finite and nonzero")
        if n != 1.0:
            q = q / n
        self.q = q
        self.t = np.asarray(t, dtype=np.float64).copy()
        if self.t.shape != (3,):
            raise ValueError("translation must be a 3-vector")

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map world points (3,) or (N, 3) into the camera frame."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.t

    def inverse(self) -> "PoseSE3":
        qc = quat_conjugate(self.q)
        return PoseSE3(qc, -(quat_to_matrix(qc) @ self.t))

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """Return self ∘ other (apply `other` first, then `self`)."""
        return PoseSE3(
            quat_multiply(self.q, other.q), self.rotation @ other.t + self.t
        )

    @property
    def camera_center(self) -> np.ndarray:
        """Camera center in world coordinates (-R^T t)."""
        return -(self.rotation.T @ self.t)

    def copy(self) -> "PoseSE3":
        return PoseSE3(self.q, self.t)

    def __repr__(self):
        return f"PoseSE3(q={self.q.tolist()}, t={self.t.tolist()})"


@dataclass(frozen=True)
class FundamentalMatrix:
    """3x3 rank-2 matrix; normalized to unit Frobenius norm on construction."""

    f: np.ndarray = field(repr=False)

    def __post_init__(self):
        f = np.asarray(self.f, dtype=np.float64)
        if f.shape != (3, 3):
            raise ValueError("fundamental matrix must be 3x3")
        norm = np.linalg.norm(f)
        if norm == 0.0:
            raise ValueError("fundamental matrix is zero")
        object.__setattr__(self, "f", f / norm)


# ---------------------------------------------------------------------------
# Projection operations
# ---------------------------------------------------------------------------

def project(
    p_world: np.ndarray,
    pose: PoseSE3,
    k: CameraIntrinsics,
    z_near: float = DEFAULT_Z_NEAR,
) -> np.ndarray:
    """Project a world point to pixel coordinates (u, v).

    Raises DepthBehindCamera when the camera-frame depth is at or below
    z_near. The result may lie outside the image bounds.
    """
    p_cam = pose.apply(np.asarray(p_world, dtype=np.float64))
    z = p_cam[2]
    if not z > z_near:
        raise DepthBehindCamera(f"camera-frame depth {z} <= z_near {z_near}")
    return np.array([k.fx * p_cam[0] / z + k.cx, k.fy * p_cam[1] / z + k.cy])


def unproject(
    pixel: np.ndarray, depth: float, pose: PoseSE3, k: CameraIntrinsics
) -> np.ndarray:
    """Inverse of `project`: pixel + camera-frame depth -> world point."""
    depth = float(depth)
    if not np.isfinite(depth) or depth <= 0.0:
        raise InvalidDepth(f"depth must be finite and positive, got {depth}")
    u, v = float(pixel[0]), float(pixel[1])
    p_cam = np.array(
        [(u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth]
    )
    return pose.rotation.T @ (p_cam - pose.t)


def project_points(
    points: np.ndarray,
    pose: PoseSE3,
    k: CameraIntrinsics,
    z_near: float = DEFAULT_Z_NEAR,
):
    """Batched projection returning (pixels (N,2), depths (N,), valid (N,)).

    Points at or behind the near plane are flagged invalid instead of raising.
    """
    p_cam = pose.apply(points)
    z = p_cam[:, 2]
    valid = z > z_near
    safe_z = np.where(valid, z, 1.0)
    pix = np.empty((points.shape[0], 2))
    pix[:, 0] = k.fx * p_cam[:, 0] / safe_z + k.cx
    pix[:, 1] = k.fy * p_cam[:, 1] / safe_z + k.cy
    return pix, z, valid


def relative_pose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    """Return b ∘ a⁻¹: the transform taking camera-a coordinates to camera-b."""
    return b.compose(a.inverse())


def skew(v: np.ndarray) -> np.ndarray:
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
    )


def fundamental_from_poses(
    a: PoseSE3, b: PoseSE3, k: CameraIntrinsics
) -> FundamentalMatrix:
    """Fundamental matrix mapping view-a pixels to view-b epipolar lines.

    F = K^-T [t]x R K^-1 for the relative pose (R, t) from a to b; raises
    DegenerateBaseline when the relative translation is (numerically) zero.
    """
    rel = relative_pose(a, b)
    if np.linalg.norm(rel.t) <= 1e-9:
        raise DegenerateBaseline("relative translation is numerically zero")
    kinv = k.inverse_matrix
    e = skew(rel.t) @ rel.rotation
    return FundamentalMatrix(kinv.T @ e @ kinv)


def sampson_distance(
    x: np.ndarray, x_prime: np.ndarray, f: FundamentalMatrix
) -> float:
    """First-order geometric (Sampson) error of a pixel correspondence.

    Returns +inf when the denominator underflows below 1e-20.
    """
    fm = f.f
    xh = np.array([x[0], x[1], 1.0])
    xph = np.array([x_prime[0], x_prime[1], 1.0])
    fx = fm @ xh
    ftxp = fm.T @ xph
    num = float(xph @ fx) ** 2
    den = fx[0] ** 2 + fx[1] ** 2 + ftxp[0] ** 2 + ftxp[1] ** 2
    if den < 1e-20:
        return float("inf")
    return num / den


def sampson_distances(
    x: np.ndarray, x_prime: np.ndarray, f: FundamentalMatrix
) -> np.ndarray:
    """Vectorized sampson_distance over (N, 2) correspondence arrays."""
    fm = f.f
    ones = np.ones((x.shape[0], 1))
    xh = np.concatenate([x, ones], axis=1)
    xph = np.concatenate([x_prime, ones], axis=1)
    fx = xh @ fm.T
    ftxp = xph @ fm
    num = np.einsum("ij,ij->i", xph, fx) ** 2
    den = fx[:, 0] ** 2 + fx[:, 1] ** 2 + ftxp[:, 0] ** 2 + ftxp[:, 1] ** 2
    out = np.full(x.shape[0], np.inf)
    ok = den >= 1e-20
    out[ok] = num[ok] / den[ok]
    return out
