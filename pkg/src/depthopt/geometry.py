"""Pinhole camera model, rigid 6-DoF poses, and per-pixel warp coordinates.

Conventions used throughout the package:

Camera frame (right-handed, standard computer vision):
  - x right, y down, z forward along the optical axis.
  - A pixel (u, v) has u along image width and v along image height.

Poses:
  - A pose is 6 numbers: translation (tx, ty, tz) in meters followed by an
    axis-angle rotation (rx, ry, rz) in radians.
  - ``warp_coordinates(depth, pose, K)`` uses the inverse-warp convention:
    it iterates over the pixels of the view the depth map belongs to (the
    "target" of a reconstruction), lifts each pixel with its depth, maps the
    point through ``pose`` into the other camera ("source"), and projects.
    ``pose`` therefore maps target-camera coordinates into source-camera
    coordinates.
  - For a rectified stereo rig with the right camera at +baseline along x of
    the left camera, the pose taking right-view coordinates into left-view
    coordinates is ``(baseline, 0, 0, 0, 0, 0)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Below this squared angle, sin/cos coefficient ratios switch to their
# Taylor series to keep values and derivatives finite.
_SMALL_ANGLE_SQ = 1e-8

# A transformed point with z at or below this is treated as unprojectable.
_MIN_Z = 1e-12


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole calibration: focal lengths, principal point, sensor size."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 2 or self.height < 2:
            raise ValueError(f"sensor must be at least 2x2, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width):
            raise ValueError(f"cx={self.cx} outside [0, {self.width})")
        if not (0 <= self.cy < self.height):
            raise ValueError(f"cy={self.cy} outside [0, {self.height})")

    def scaled_to(self, width: int, height: int) -> "Intrinsics":
        """Intrinsics for the same camera resampled to a new pixel grid."""
        sx = width / self.width
        sy = height / self.height
        return Intrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy,
                          width, height)

    def halved(self) -> "Intrinsics":
        """Intrinsics after 2x2 mean-pooling: output pixel j covers input
        pixels 2j and 2j+1, so centers map as u_out = (u_in - 0.5) / 2."""
        return Intrinsics(self.fx / 2.0, self.fy / 2.0,
                          (self.cx - 0.5) / 2.0, (self.cy - 0.5) / 2.0,
                          self.width // 2, self.height // 2)


@dataclass
class Pose6:
    """Rigid motion as translation (meters) + axis-angle rotation (radians)."""

    t: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.r = np.asarray(self.r, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls) -> "Pose6":
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_vector(cls, vec) -> "Pose6":
        vec = np.asarray(vec, dtype=np.float64).reshape(6)
        return cls(vec[:3].copy(), vec[3:].copy())

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.t, self.r])


@dataclass
class CoordGrid:
    """Continuous source-image coordinates for every target pixel.

    ``valid`` is False exactly where (u, v) falls outside
    [0, W-1] x [0, H-1] or the transformed point has non-positive depth.
    """

    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray


def _skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _rot_coeffs(theta_sq: float):
    """Rodrigues coefficients a = sin(t)/t, b = (1-cos(t))/t^2 and their
    derivatives with respect to theta^2 (smooth through zero rotation)."""
    if theta_sq < _SMALL_ANGLE_SQ:
        a = 1.0 - theta_sq / 6.0 + theta_sq * theta_sq / 120.0
        b = 0.5 - theta_sq / 24.0 + theta_sq * theta_sq / 720.0
        da = -1.0 / 6.0 + theta_sq / 60.0
        db = -1.0 / 24.0 + theta_sq / 360.0
    else:
        theta = np.sqrt(theta_sq)
        s, c = np.sin(theta), np.cos(theta)
        a = s / theta
        b = (1.0 - c) / theta_sq
        da = (theta * c - s) / (2.0 * theta ** 3)
        db = (theta * s - 2.0 * (1.0 - c)) / (2.0 * theta_sq * theta_sq)
    return a, b, da, db


def rotation_from_axis_angle(r) -> np.ndarray:
    """3x3 rotation matrix from an axis-angle vector (Rodrigues)."""
    r = np.asarray(r, dtype=np.float64).reshape(3)
    a, b, _, _ = _rot_coeffs(float(r @ r))
    K = _skew(r)
    return np.eye(3) + a * K + b * (K @ K)


def pose_to_transform(pose: Pose6) -> np.ndarray:
    """4x4 homogeneous matrix for a pose."""
    T = np.eye(4)
    T[:3, :3] = rotation_from_axis_angle(pose.r)
    T[:3, 3] = pose.t
    return T


def transform_to_pose(T: np.ndarray) -> Pose6:
    """Inverse of :func:`pose_to_transform` (rotation log map, |r| <= pi)."""
    T = np.asarray(T, dtype=np.float64)
    R = T[:3, :3]
    vee = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = np.linalg.norm(vee)
    c = (np.trace(R) - 1.0) / 2.0
    theta = np.arctan2(s, np.clip(c, -1.0, 1.0))
    if theta < 1e-7:
        r = vee * (1.0 + theta * theta / 6.0)
    elif np.pi - theta > 1e-4:
        r = vee * (theta / s)
    else:
        # Near pi the vee part degenerates; recover the axis from R + I.
        B = R + np.eye(3)
        k = int(np.argmax(np.diag(B)))
        axis = B[:, k] / np.linalg.norm(B[:, k])
        if s > 1e-12 and axis @ vee < 0:
            axis = -axis
        r = axis * theta
    return Pose6(T[:3, 3].copy(), r)


def compose_small(a: Pose6, b: Pose6) -> Pose6:
    """Small-rotation pose composition: componentwise sum of the 6-vectors.

    Error versus exact matrix composition is bounded by the product of the
    two rotation angles; callers needing exactness compose the matrices.
    """
    return Pose6(a.t + b.t, a.r + b.r)


def backproject(pixel, depth: float, K: Intrinsics) -> np.ndarray:
    """Lift a pixel (u, v) with metric depth to a camera-frame 3D point."""
    if not depth > 0:
        raise ValueError(f"depth must be positive, got {depth}")
    u, v = pixel
    return np.array([(u - K.cx) * depth / K.fx, (v - K.cy) * depth / K.fy, depth])


def project(point, K: Intrinsics):
    """Project a camera-frame point; returns (u, v, z, valid).

    ``valid`` is False when z is at or below the near clip, in which case
    (u, v) are zeros rather than a division blow-up.
    """
    x, y, z = np.asarray(point, dtype=np.float64).reshape(3)
    if z < _MIN_Z:
        return 0.0, 0.0, float(z), False
    return float(K.fx * x / z + K.cx), float(K.fy * y / z + K.cy), float(z), True


_RAY_CACHE: dict = {}


def _pixel_rays(K: Intrinsics):
    """Per-pixel unit-depth ray directions ((u-cx)/fx, (v-cy)/fy, 1)."""
    rays = _RAY_CACHE.get(K)
    if rays is None:
        u = np.arange(K.width, dtype=np.float64)
        v = np.arange(K.height, dtype=np.float64)
        rx = (u[None, :] - K.cx) / K.fx * np.ones((K.height, 1))
        ry = (v[:, None] - K.cy) / K.fy * np.ones((1, K.width))
        rz = np.ones((K.height, K.width))
        rays = (rx, ry, rz)
        _RAY_CACHE[K] = rays
    return rays


class _WarpCache:
    """Intermediates of a warp forward pass needed by its VJP."""

    __slots__ = ("K", "pose_vec", "depth", "rays", "ray_cross", "rot_rays",
                 "xs", "ys", "zs", "inv_z", "valid", "coeffs")

    def __init__(self, **kw):
        for k, v in kw.items():
            setattr(self, k, v)


def _warp_forward(depth: np.ndarray, pose_vec: np.ndarray, K: Intrinsics):
    """Vectorized warp; returns (u, v, valid, cache for the VJP)."""
    t = pose_vec[:3]
    w = pose_vec[3:]
    a, b, da, db = _rot_coeffs(float(w @ w))

    rx, ry, rz = _pixel_rays(K)
    # Rotate the rays once: R r = r + a (w x r) + b (w x (w x r)).
    c1x = w[1] * rz - w[2] * ry
    c1y = w[2] * rx - w[0] * rz
    c1z = w[0] * ry - w[1] * rx
    c2x = w[1] * c1z - w[2] * c1y
    c2y = w[2] * c1x - w[0] * c1z
    c2z = w[0] * c1y - w[1] * c1x
    Rrx = rx + a * c1x + b * c2x
    Rry = ry + a * c1y + b * c2y
    Rrz = rz + a * c1z + b * c2z

    xs = Rrx * depth + t[0]
    ys = Rry * depth + t[1]
    zs = Rrz * depth + t[2]

    in_front = zs > _MIN_Z
    inv_z = np.where(in_front, 1.0 / np.where(in_front, zs, 1.0), 0.0)
    u = K.fx * xs * inv_z + K.cx
    v = K.fy * ys * inv_z + K.cy
    # A pixel mapping exactly onto the boundary is in bounds; tolerate the
    # few-ulp overshoot of the projection arithmetic, then clamp for sampling.
    tol = 1e-9
    valid = (in_front & (u >= -tol) & (u <= K.width - 1.0 + tol)
             & (v >= -tol) & (v <= K.height - 1.0 + tol))
    u = np.where(valid, np.clip(u, 0.0, K.width - 1.0), 0.0)
    v = np.where(valid, np.clip(v, 0.0, K.height - 1.0), 0.0)

    cache = _WarpCache(K=K, pose_vec=pose_vec, depth=depth, rays=(rx, ry, rz),
                       ray_cross=(c1x, c1y, c1z, c2x, c2y, c2z),
                       rot_rays=(Rrx, Rry, Rrz), xs=xs, ys=ys, zs=zs,
                       inv_z=inv_z, valid=valid, coeffs=(a, b, da, db))
    return u, v, valid, cache


def _warp_vjp(cache: _WarpCache, gu: np.ndarray, gv: np.ndarray):
    """Gradients of warp coordinates w.r.t. the depth map and the 6-vector pose.

    ``gu``/``gv`` are cotangents on the output coordinates; entries at
    invalid pixels are ignored.
    """
    K = cache.K
    w = cache.pose_vec[3:]
    a, b, da, db = cache.coeffs
    rx, ry, rz = cache.rays
    Rrx, Rry, Rrz = cache.rot_rays
    inv_z = cache.inv_z
    m = cache.valid
    gu = np.where(m, gu, 0.0)
    gv = np.where(m, gv, 0.0)

    # Through the projection: u = fx*x/z + cx, v = fy*y/z + cy.
    gx = gu * K.fx * inv_z
    gy = gv * K.fy * inv_z
    gz = -(gu * K.fx * cache.xs + gv * K.fy * cache.ys) * inv_z * inv_z

    # Depth: d(X_s)/dd = R r.
    grad_depth = gx * Rrx + gy * Rry + gz * Rrz

    # Translation: d(X_s)/dt = I.
    grad_t = np.array([gx.sum(), gy.sum(), gz.sum()])

    # Rotation: X_s = X + a (w x X) + b (w x (w x X)) with X = d * r, so the
    # X-based cross products are the ray-based ones from the forward pass
    # scaled by depth; the depth factor is pulled out of each reduction.
    d = cache.depth
    gxd, gyd, gzd = gx * d, gy * d, gz * d
    r1x, r1y, r1z, r2x, r2y, r2z = cache.ray_cross

    # a * (X x g)
    tx = ry * gzd - rz * gyd
    ty = rz * gxd - rx * gzd
    tz = rx * gyd - ry * gxd
    grad_w = a * np.array([tx.sum(), ty.sum(), tz.sum()])
    # b * (c1 x g)
    tx = r1y * gzd - r1z * gyd
    ty = r1z * gxd - r1x * gzd
    tz = r1x * gyd - r1y * gxd
    grad_w += b * np.array([tx.sum(), ty.sum(), tz.sum()])
    # -b * (X x (w x g))
    wgx = w[1] * gzd - w[2] * gyd
    wgy = w[2] * gxd - w[0] * gzd
    wgz = w[0] * gyd - w[1] * gxd
    tx = ry * wgz - rz * wgy
    ty = rz * wgx - rx * wgz
    tz = rx * wgy - ry * wgx
    grad_w -= b * np.array([tx.sum(), ty.sum(), tz.sum()])
    # Coefficient sensitivity: da/dw = 2 da_dt2 * w (same for b).
    c1_dot_g = (r1x * gxd + r1y * gyd + r1z * gzd).sum()
    c2_dot_g = (r2x * gxd + r2y * gyd + r2z * gzd).sum()
    grad_w += 2.0 * (da * c1_dot_g + db * c2_dot_g) * w

    return grad_depth, np.concatenate([grad_t, grad_w])


def warp_coordinates(depth: np.ndarray, pose: Pose6, K: Intrinsics) -> CoordGrid:
    """Source-image coordinates for every pixel of the depth map's view.

    For each pixel: backproject with its depth, apply ``pose`` (target-camera
    coordinates into source-camera coordinates), project into the source
    camera. Pixels landing out of bounds or behind the camera are invalid.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (K.height, K.width):
        raise ValueError(f"depth shape {depth.shape} does not match intrinsics "
                         f"{K.height}x{K.width}")
    if not np.all(depth > 0):
        raise ValueError("all depths must be positive")

    vec = pose.as_vector()
    if not vec.any():
        # Identity motion maps every pixel to itself, bit-exactly.
        u = np.broadcast_to(np.arange(K.width, dtype=np.float64), depth.shape).copy()
        v = np.broadcast_to(np.arange(K.height, dtype=np.float64)[:, None], depth.shape).copy()
        return CoordGrid(u, v, np.ones(depth.shape, dtype=bool))

    u, v, valid, _ = _warp_forward(depth, vec, K)
    return CoordGrid(u, v, valid)
