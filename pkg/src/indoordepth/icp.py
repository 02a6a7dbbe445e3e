"""Point-to-point ICP and the 3D alignment loss built on it."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import FlowField, Intrinsics, PointCloud, RigidTransform, backproject_at, warp_coords
from .image import DepthMap
from .sampler import sample_array

REJECT_FACTOR = 3.0


class DegenerateCloudError(ValueError):
    """Cloud too small, coincident or collinear to pin down a rigid motion."""


class DegenerateCloudWarning(RuntimeWarning):
    pass


@dataclass(frozen=True, eq=False)
class IcpResult:
    transform: RigidTransform
    residuals: np.ndarray  # (M, 3): matched dst - transform(src)
    converged: bool
    iterations: int
    src_index: np.ndarray  # (M,) indices into the source cloud
    dst_index: np.ndarray  # (M,) indices into the destination cloud
    errors: tuple[float, ...] = ()  # mean squared matched distance per iteration

    @property
    def matrix(self) -> np.ndarray:
        return self.transform.matrix


def check_cloud(points: np.ndarray, name: str = "cloud") -> None:
    if len(points) < 3:
        raise DegenerateCloudError(f"{name} needs at least 3 points, got {len(points)}")
    centred = points - points.mean(axis=0)
    sv = np.linalg.svd(centred, compute_uv=False)
    if sv[0] <= 1e-12 or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateCloudError(f"{name} is coincident or collinear")


def rigid_fit(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Least-squares R, t with dst ~ R src + t (Kabsch / SVD), as a 4x4 matrix."""
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    h = (src - cs).T @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    m = np.eye(4)
    m[:3, :3] = rot
    m[:3, 3] = cd - rot @ cs
    return m


def _matches(tree: cKDTree, moved: np.ndarray):
    dist, idx = tree.query(moved)
    med = np.median(dist)
    keep = dist <= REJECT_FACTOR * med
    return np.flatnonzero(keep), idx[keep], dist[keep]


def icp_align(src, dst, max_iters: int = 50, tol: float = 1e-10) -> IcpResult:
    """Align ``src`` onto ``dst`` by alternating nearest neighbours and a rigid fit.

    Each iteration matches every transformed source point to its nearest
    destination point, drops pairs farther than three times the median match
    distance, and refits the full transform from the original source points.
    Stops when the transform changes by less than ``tol`` (max abs entry), or
    at once when every kept match is exact.
    """
    s = src.points if isinstance(src, PointCloud) else np.asarray(src, dtype=np.float64)
    d = dst.points if isinstance(dst, PointCloud) else np.asarray(dst, dtype=np.float64)
    check_cloud(s, "source cloud")
    check_cloud(d, "destination cloud")
    tree = cKDTree(d)
    m = np.eye(4)
    errors = []
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        moved = s @ m[:3, :3].T + m[:3, 3]
        si, di, dist = _matches(tree, moved)
        errors.append(float(np.mean(dist**2)))
        if len(si) < 3:
            break
        if not dist.any():
            # exact alignment: a refit would only add SVD rounding
            converged = True
            break
        new = rigid_fit(s[si], d[di])
        change = np.max(np.abs(new - m))
        m = new
        if change < tol:
            converged = True
            break
    moved = s @ m[:3, :3].T + m[:3, 3]
    si, di, _ = _matches(tree, moved)
    residuals = d[di] - moved[si]
    return IcpResult(
        RigidTransform.from_matrix(m), residuals, converged, it, si, di, tuple(errors)
    )


def icp_3d_loss(result: IcpResult) -> float:
    """Elementwise L1 of (T' - I) over the 4x4 matrix plus L1 of all residuals."""
    dev = np.abs(result.matrix - np.eye(4)).ravel()
    return math.fsum(dev) + math.fsum(np.abs(result.residuals).ravel())


def sample_depth(source_depth: DepthMap, flow: FlowField) -> DepthMap:
    """Source-camera depth seen at each flow coordinate (target grid).

    Interpolates disparity, which is exact for planar surfaces.
    """
    disp = source_depth.inverted()
    u = flow.coords[..., 0]
    v = flow.coords[..., 1]
    vals, valid = sample_array(disp.values, u, v)
    touched, _ = sample_array((~source_depth.mask).astype(np.float64), u, v)
    ok = valid & flow.valid & (touched[..., 0] == 0.0) & (vals[..., 0] > 0)
    out = np.zeros(ok.shape)
    out[ok] = 1.0 / vals[ok, 0]
    return DepthMap(out, ok)


def clouds_for_3d_loss(depth_t: DepthMap, depth_warp: DepthMap, pose: RigidTransform, k: Intrinsics):
    """Moved target points and the source-surface points along the same rays.

    ``depth_warp`` lives on the target grid: its value at a pixel is the
    source-camera depth of the surface at that pixel's flow coordinate (see
    :func:`sample_depth`). Returns (src_points, dst_points, pixel_index).
    """
    if depth_t.size != depth_warp.size:
        raise ValueError("depth maps differ in size")
    flow = warp_coords(depth_t, pose, k)
    ok = flow.valid & depth_warp.mask
    u = flow.coords[..., 0][ok]
    v = flow.coords[..., 1][ok]
    z = flow.z[ok]
    moved = backproject_at(u, v, z, k)
    dst = backproject_at(u, v, depth_warp.values[ok], k)
    return moved, dst, np.flatnonzero(ok.ravel())


def per_scale_3d_loss(
    depth_t: DepthMap, depth_warp: DepthMap, pose: RigidTransform, k: Intrinsics, **icp_kw
) -> float:
    """3D loss for one pyramid level; a degenerate cloud contributes 0 with a warning."""
    src, dst, _ = clouds_for_3d_loss(depth_t, depth_warp, pose, k)
    try:
        result = icp_align(src, dst, **icp_kw)
    except DegenerateCloudError as exc:
        warnings.warn(f"3D loss skipped: {exc}", DegenerateCloudWarning, stacklevel=2)
        return 0.0
    return icp_3d_loss(result)
