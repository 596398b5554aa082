"""Rigid-body poses, plane parameters and planar depth rendering.

Conventions
-----------
* Quaternions are ``(w, x, y, z)`` and kept with ``w >= 0``.
* A pose ``T = (q, t)`` maps points as ``X' = R(q) X + t``.
* A plane is stored as ``n = normal / offset`` so that points on it satisfy
  ``n . X = 1``; the offset is ``1 / |n|`` and is positive by construction.
* Pixel ``(u, v)`` back-projects to the ray ``((u - cx)/fx, (v - cy)/fy, 1)``.
* The SE(3) tangent vector is ordered translation first: ``(rho, phi)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DegeneratePlaneError, InvalidRayError

PLANE_EPS = 1e-6
RAY_EPS = 1e-9


# ---------------------------------------------------------------------------
# quaternions


def quat_canonical(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q)
    return -q if q[0] < 0 else q


def quat_mul(a, b) -> np.ndarray:
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


def quat_conj(q) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]], dtype=np.float64)


def quat_to_rotmat(q) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotmat_to_quat(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_canonical(q)


def quat_from_axis_angle(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return quat_canonical(np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis]))


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


# ---------------------------------------------------------------------------
# SE(3)


@dataclass(frozen=True)
class PoseSE3:
    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", quat_canonical(self.q))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.array([1.0, 0, 0, 0]), np.zeros(3))

    @property
    def R(self) -> np.ndarray:
        return quat_to_rotmat(self.q)

    def apply(self, X) -> np.ndarray:
        """Transform points of shape (..., 3)."""
        return np.asarray(X) @ self.R.T + self.t

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.q, self.t])

    @classmethod
    def from_vector(cls, v) -> "PoseSE3":
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:4], v[4:7])

    def to_dict(self) -> dict:
        return {"q": [float(x) for x in self.q], "t": [float(x) for x in self.t]}

    @classmethod
    def from_dict(cls, d) -> "PoseSE3":
        return cls(np.array(d["q"]), np.array(d["t"]))


def se3_compose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    """``a o b``: apply ``b`` first, then ``a``."""
    return PoseSE3(quat_mul(a.q, b.q), a.R @ b.t + a.t)


def se3_inverse(a: PoseSE3) -> PoseSE3:
    qi = quat_conj(a.q)
    return PoseSE3(qi, -(quat_to_rotmat(qi) @ a.t))


def so3_log(q) -> np.ndarray:
    q = quat_canonical(q)
    w, v = q[0], q[1:]
    nv = np.linalg.norm(v)
    if nv == 0.0:
        return np.zeros(3)
    if nv < 1e-8:
        # theta / |v| -> 2 / w  (series of 2 atan(n/w) / n)
        return (2.0 / w) * (1.0 - nv * nv / (3.0 * w * w)) * v
    return 2.0 * np.arctan2(nv, w) * v / nv


def so3_exp(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    theta = np.linalg.norm(phi)
    if theta < 1e-8:
        q = np.concatenate([[1.0 - theta * theta / 8.0], 0.5 * phi])
    else:
        q = np.concatenate([[np.cos(theta / 2)], np.sin(theta / 2) * phi / theta])
    return quat_canonical(q)


def left_jacobian(phi) -> np.ndarray:
    """V(phi), the SE(3) left Jacobian mapping rho to translation."""
    phi = np.asarray(phi, dtype=np.float64)
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-5:
        a = 0.5 - theta**2 / 24.0
        b = 1.0 / 6.0 - theta**2 / 120.0
    else:
        a = (1.0 - np.cos(theta)) / theta**2
        b = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + a * K + b * (K @ K)


def vinv_coefficient(theta: float) -> float:
    if abs(theta) < 1e-3:
        return 1.0 / 12.0 + theta**2 / 720.0 + theta**4 / 30240.0
    half = 0.5 * theta
    return 1.0 / theta**2 - np.cos(half) / np.sin(half) / (2.0 * theta)


def left_jacobian_inv(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    K = skew(phi)
    return np.eye(3) - 0.5 * K + vinv_coefficient(np.linalg.norm(phi)) * (K @ K)


def se3_exp(xi) -> PoseSE3:
    xi = np.asarray(xi, dtype=np.float64)
    rho, phi = xi[:3], xi[3:]
    return PoseSE3(so3_exp(phi), left_jacobian(phi) @ rho)


def se3_log(T: PoseSE3) -> np.ndarray:
    """Tangent 6-vector ``(rho, phi)`` with ``se3_exp(se3_log(T)) == T``."""
    phi = so3_log(T.q)
    if not phi.any():
        return np.concatenate([T.t, phi])
    return np.concatenate([left_jacobian_inv(phi) @ T.t, phi])


def relative_pose(T1: PoseSE3, T2: PoseSE3) -> PoseSE3:
    """Pose mapping camera-1 coordinates to camera-2 coordinates (``T2 o T1^-1``)."""
    return se3_compose(T2, se3_inverse(T1))


def pose_close(a: PoseSE3, b: PoseSE3, tol: float) -> bool:
    dq = min(np.abs(a.q - b.q).max(), np.abs(a.q + b.q).max())
    return dq <= tol and np.abs(a.t - b.t).max() <= tol


# ---------------------------------------------------------------------------
# planes


def plane_from_normal_offset(normal, offset) -> np.ndarray:
    normal = np.asarray(normal, dtype=np.float64)
    normal = normal / np.linalg.norm(normal)
    if offset <= 0:
        raise DegeneratePlaneError(f"offset must be positive, got {offset}")
    return normal / offset


def plane_normal(n) -> np.ndarray:
    n = np.asarray(n, dtype=np.float64)
    return n / np.linalg.norm(n)


def plane_offset(n) -> float:
    return 1.0 / float(np.linalg.norm(n))


def plane_transform(n, T: PoseSE3) -> np.ndarray:
    """Express plane ``n`` (frame 1) in frame 2, where ``X2 = R X1 + t``."""
    n = np.asarray(n, dtype=np.float64)
    normal2 = T.R @ plane_normal(n)
    d2 = plane_offset(n) + normal2 @ T.t
    if d2 <= PLANE_EPS:
        raise DegeneratePlaneError(f"transformed plane passes through or behind the camera (d={d2:.3g})")
    return normal2 / d2


def normal_angle_deg(a, b) -> float:
    c = float(np.clip(plane_normal(a) @ plane_normal(b), -1.0, 1.0))
    return float(np.degrees(np.arccos(c)))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ContractError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ContractError("principal point outside the image")

    def ray(self, u, v) -> np.ndarray:
        return np.array([(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0])

    def rays(self) -> np.ndarray:
        """(H, W, 3) grid of unnormalised pixel rays."""
        v, u = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)

    def project(self, X) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        X = np.asarray(X, dtype=np.float64)
        z = X[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * X[..., 0] / z + self.cx
            v = self.fy * X[..., 1] / z + self.cy
        return u, v, z

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("fx", "fy", "cx", "cy", "width", "height")}

    @classmethod
    def from_dict(cls, d) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"]))


def render_plane_depth(n, cam: CameraIntrinsics, u, v) -> float:
    if not (0 <= u < cam.width and 0 <= v < cam.height):
        raise ContractError(f"pixel ({u}, {v}) outside the image")
    nr = float(np.asarray(n, dtype=np.float64) @ cam.ray(u, v))
    if nr <= RAY_EPS:
        raise InvalidRayError(f"ray at ({u}, {v}) does not hit the plane in front of the camera")
    return 1.0 / nr


def depth_map_from_planes(seg, params, cam: CameraIntrinsics):
    """Planar depth for a segmentation map (``-1`` = background).

    Returns ``(depth, invalid)`` where ``invalid`` flags planar pixels whose
    ray misses their plane; those pixels get depth 0 like background.
    """
    seg = np.asarray(seg)
    if seg.shape != (cam.height, cam.width):
        raise ContractError(f"segmentation shape {seg.shape} does not match camera")
    params = np.asarray(params, dtype=np.float64).reshape(-1, 3)
    if seg.size and (seg.max() >= len(params) or seg.min() < -1):
        raise ContractError("segmentation references a plane that does not exist")
    depth = np.zeros(seg.shape)
    invalid = np.zeros(seg.shape, dtype=bool)
    planar = seg >= 0
    if not planar.any():
        return depth, invalid
    rays = cam.rays()[planar]
    nr = np.einsum("ij,ij->i", params[seg[planar]], rays)
    ok = nr > RAY_EPS
    vals = np.zeros_like(nr)
    vals[ok] = 1.0 / nr[ok]
    depth[planar] = vals
    invalid[planar] = ~ok
    return depth, invalid


# ---------------------------------------------------------------------------
# two-view fusion


@dataclass
class FusedPlane:
    n: np.ndarray
    index1: int
    index2: int
    score: float = 1.0


@dataclass
class RejectedPair:
    index1: int
    index2: int
    reason: str


def fuse_planes(pairs, T21: PoseSE3, max_normal_deg: float = 30.0, max_offset: float = 0.5):
    """Merge matched plane pairs in the view-1 frame.

    ``pairs`` holds ``(index1, n1, index2, n2[, score])`` tuples with ``n1`` in
    view 1 and ``n2`` in view 2; ``T21`` maps view-1 points to view 2.
    """
    T12 = se3_inverse(T21)
    fused, rejected = [], []
    for pair in pairs:
        i1, n1, i2, n2 = pair[:4]
        score = pair[4] if len(pair) > 4 else 1.0
        try:
            n2_in_1 = plane_transform(n2, T12)
        except DegeneratePlaneError as exc:
            rejected.append(RejectedPair(i1, i2, f"degenerate: {exc}"))
            continue
        angle = normal_angle_deg(n1, n2_in_1)
        d1, d2 = plane_offset(n1), plane_offset(n2_in_1)
        if angle > max_normal_deg:
            rejected.append(RejectedPair(i1, i2, f"normal deviation {angle:.2f} deg"))
            continue
        if abs(d1 - d2) > max_offset:
            rejected.append(RejectedPair(i1, i2, f"offset deviation {abs(d1 - d2):.3f} m"))
            continue
        normal = plane_normal(n1) + plane_normal(n2_in_1)
        normal = normal / np.linalg.norm(normal)
        fused.append(FusedPlane(normal / (0.5 * (d1 + d2)), i1, i2, score))
    return fused, rejected
