"""Pinhole camera, angle-axis rigid motion and per-pixel warp coordinates.

A pose maps points from the reference (target) camera frame into the source
camera frame: ``q = R p + t``. Warping back-projects every reference pixel with
its depth, moves it by the pose and projects it into the source image, where
the sampler pulls intensities from.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .image import DepthMap

_SMALL_ANGLE = 1e-4


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, sx: float, sy: float | None = None) -> "Intrinsics":
        """Intrinsics for an image resized by (sx, sy), half-pixel convention."""
        sy = sx if sy is None else sy
        return Intrinsics(
            self.fx * sx,
            self.fy * sy,
            (self.cx + 0.5) * sx - 0.5,
            (self.cy + 0.5) * sy - 0.5,
        )

    def for_level(self, level: int) -> "Intrinsics":
        return self.scaled(0.5**level)

    @classmethod
    def from_file(cls, path) -> "Intrinsics":
        """Parse ``key=value`` lines (fx, fy, cx, cy); '#' starts a comment."""
        vals = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            vals[key] = float(value)
        missing = {"fx", "fy", "cx", "cy"} - vals.keys()
        if missing:
            raise ValueError(f"{path}: missing {', '.join(sorted(missing))}")
        return cls(vals["fx"], vals["fy"], vals["cx"], vals["cy"])

    def to_file(self, path) -> None:
        Path(path).write_text(
            f"fx={self.fx!r}\nfy={self.fy!r}\ncx={self.cx!r}\ncy={self.cy!r}\n"
        )


# TUM RGB-D freiburg3 colour camera, 640x480 (images are pre-rectified)
TUM_FREIBURG3 = Intrinsics(535.4, 539.2, 320.1, 247.6)
PRESETS = {"tum-fr3": TUM_FREIBURG3}


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def axis_angle_to_matrix(r) -> np.ndarray:
    """Rodrigues' formula, with series coefficients near zero."""
    r = np.asarray(r, dtype=np.float64)
    theta2 = float(r @ r)
    theta = math.sqrt(theta2)
    if theta < _SMALL_ANGLE:
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        a = math.sin(theta) / theta
        b = (1.0 - math.cos(theta)) / theta2
    k = skew(r)
    return np.eye(3) + a * k + b * (k @ k)


def matrix_to_axis_angle(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    cos = min(1.0, max(-1.0, (np.trace(m) - 1.0) / 2.0))
    theta = math.acos(cos)
    w = np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
    if theta < _SMALL_ANGLE:
        return 0.5 * w * (1.0 + theta * theta / 6.0)
    if math.pi - theta < 1e-6:
        # near pi the antisymmetric part vanishes; read the axis off R + I
        b = (m + np.eye(3)) / 2.0
        axis = b[:, int(np.argmax(np.diag(b)))]
        axis = axis / np.linalg.norm(axis)
        return axis * theta
    return w * (theta / (2.0 * math.sin(theta)))


def rotation_derivatives(r) -> np.ndarray:
    """dR/dr_i for i = 0..2, shape (3, 3, 3), exact away from r = 0.

    Uses dR/dr_i = (r_i [r]x + [r x (I - R) e_i]x) R / |r|^2.
    """
    r = np.asarray(r, dtype=np.float64)
    theta2 = float(r @ r)
    out = np.empty((3, 3, 3))
    eye = np.eye(3)
    if theta2 < 1e-16:
        rx = skew(r)
        for i in range(3):
            ei = skew(eye[i])
            out[i] = ei + 0.5 * (ei @ rx + rx @ ei)
        return out
    rot = axis_angle_to_matrix(r)
    rx = skew(r)
    for i in range(3):
        v = np.cross(r, (eye - rot)[:, i])
        out[i] = (r[i] * rx + skew(v)) @ rot / theta2
    return out


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Angle-axis rotation (radians) plus translation (meters)."""

    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64).reshape(3)
        trans = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise ValueError("pose parameters must be finite")
        if np.linalg.norm(rot) >= math.pi:
            raise ValueError("rotation angle must be below pi")
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_params(cls, params) -> "RigidTransform":
        params = np.asarray(params, dtype=np.float64)
        return cls(params[:3], params[3:6])

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(matrix_to_axis_angle(m[:3, :3]), m[:3, 3])

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.rotation, self.translation])

    @property
    def rotation_matrix(self) -> np.ndarray:
        return axis_angle_to_matrix(self.rotation)

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix
        m[:3, 3] = self.translation
        return m

    @property
    def angle(self) -> float:
        return float(np.linalg.norm(self.rotation))

    def inverse(self) -> "RigidTransform":
        rt = self.rotation_matrix.T
        return RigidTransform(-self.rotation, -rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other."""
        return RigidTransform.from_matrix(self.matrix @ other.matrix)

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation_matrix.T + self.translation


@dataclass(frozen=True, eq=False)
class PointCloud:
    """N x 3 points in meters; ``source_pixel`` holds flat pixel indices when known."""

    points: np.ndarray
    source_pixel: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        if self.source_pixel is not None:
            idx = np.asarray(self.source_pixel, dtype=np.int64).reshape(-1)
            if idx.size != len(pts):
                raise ValueError("source_pixel length does not match point count")
            object.__setattr__(self, "source_pixel", idx)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def empty(self) -> bool:
        return len(self.points) == 0


@dataclass(frozen=True, eq=False)
class FlowField:
    """Per-pixel continuous source coordinates for a reference pixel grid.

    ``z`` is the depth of each moved point in the source camera.
    """

    coords: np.ndarray  # (H, W, 2) as (u, v)
    valid: np.ndarray  # (H, W) bool
    z: np.ndarray  # (H, W)

    @property
    def height(self) -> int:
        return self.coords.shape[0]

    @property
    def width(self) -> int:
        return self.coords.shape[1]


def pixel_grid(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    u, v = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    return u, v


def rays(u, v, k: Intrinsics) -> np.ndarray:
    """Unit-depth rays K^-1 [u, v, 1], stacked on the last axis."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1)


def backproject(depth: DepthMap, k: Intrinsics) -> PointCloud:
    """One point per valid pixel; an all-invalid map yields an empty cloud."""
    u, v = pixel_grid(depth.width, depth.height)
    m = depth.mask
    pts = rays(u[m], v[m], k) * depth.values[m][:, None]
    return PointCloud(pts, np.flatnonzero(m.ravel()))


def backproject_at(u, v, z, k: Intrinsics) -> np.ndarray:
    """Points at continuous pixel coordinates (u, v) with depth z."""
    return rays(u, v, k) * np.asarray(z, dtype=np.float64)[..., None]


def project(points, k: Intrinsics) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Returns (u, v, z, valid); points with z <= 0 are invalid and get u = v = nan."""
    if isinstance(points, PointCloud):
        points = points.points
    points = np.asarray(points, dtype=np.float64)
    x, y, z = points[..., 0], points[..., 1], points[..., 2]
    valid = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(valid, k.fx * x / z + k.cx, np.nan)
        v = np.where(valid, k.fy * y / z + k.cy, np.nan)
    return u, v, z, valid


def in_bounds(u, v, width: int, height: int) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        return (u >= 0) & (u <= width - 1) & (v >= 0) & (v <= height - 1)


def warp_rays(disparity: np.ndarray, pose: RigidTransform, k: Intrinsics):
    """Moved rays m = R ray + t * disparity; the moved point is depth * m.

    Coordinates are formed as grid + f * (m_x / m_z - ray_x) so that the
    identity pose reproduces the pixel grid bit-exactly.
    """
    h, w = disparity.shape
    u0, v0 = pixel_grid(w, h)
    ray = rays(u0, v0, k)
    m = ray @ pose.rotation_matrix.T + pose.translation * disparity[..., None]
    front = m[..., 2] > 0
    mz = np.where(front, m[..., 2], 1.0)
    u = u0 + k.fx * (m[..., 0] / mz - ray[..., 0])
    v = v0 + k.fy * (m[..., 1] / mz - ray[..., 1])
    return ray, m, u, v, front


def warp_coords(depth: DepthMap, pose: RigidTransform, k: Intrinsics) -> FlowField:
    disparity = np.where(depth.mask, 1.0 / np.where(depth.mask, depth.values, 1.0), 1.0)
    _, m, u, v, front = warp_rays(disparity, pose, k)
    valid = depth.mask & front & in_bounds(u, v, depth.width, depth.height)
    z = np.where(depth.mask, depth.values * m[..., 2], 0.0)
    u = np.where(front, u, np.nan)
    v = np.where(front, v, np.nan)
    return FlowField(np.stack([u, v], axis=-1), valid, z)


def warp_with_jacobians(disparity: np.ndarray, pose: RigidTransform, k: Intrinsics):
    """Warp driven by a disparity map, with derivatives for back-propagation.

    Returns a dict with
      q        (H, W, 3)    moved points in the source camera
      u, v     (H, W)       projected coordinates
      front    (H, W)       q_z > 0
      dq_dd    (H, W, 3)    derivative of q w.r.t. the pixel's disparity
      dq_dpose (H, W, 3, 6) derivative of q w.r.t. (rotation, translation)
      du_dq, dv_dq (H, W, 3)
    """
    disparity = np.asarray(disparity, dtype=np.float64)
    h, w = disparity.shape
    depth = 1.0 / disparity
    ray, m, u, v, front = warp_rays(disparity, pose, k)
    rot = pose.rotation_matrix
    q = m * depth[..., None]
    p = ray * depth[..., None]

    dq_dd = -(ray @ rot.T) * (depth * depth)[..., None]

    drot = rotation_derivatives(pose.rotation)
    dq_dpose = np.zeros((h, w, 3, 6))
    for i in range(3):
        dq_dpose[..., :, i] = p @ drot[i].T
    dq_dpose[..., 0, 3] = 1.0
    dq_dpose[..., 1, 4] = 1.0
    dq_dpose[..., 2, 5] = 1.0

    qx, qy = q[..., 0], q[..., 1]
    qz = np.where(front, q[..., 2], 1.0)
    zeros = np.zeros_like(qz)
    du_dq = np.stack([k.fx / qz, zeros, -k.fx * qx / qz**2], axis=-1)
    dv_dq = np.stack([zeros, k.fy / qz, -k.fy * qy / qz**2], axis=-1)
    return {
        "q": q,
        "u": u,
        "v": v,
        "front": front,
        "dq_dd": dq_dd,
        "dq_dpose": dq_dpose,
        "du_dq": du_dq,
        "dv_dq": dv_dq,
    }
