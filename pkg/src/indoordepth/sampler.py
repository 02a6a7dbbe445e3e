"""Bilinear sampling of an image at continuous coordinates, with Jacobians.

A coordinate is valid when its four integer neighbours lie inside the image;
anything else is masked out (value 0) rather than clamped. The Jacobian takes
the right-hand cell at exact integer coordinates, except on the last
row/column where only the left-hand cell exists.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import FlowField, in_bounds
from .image import ImageBuffer


@dataclass(frozen=True, eq=False)
class SampleResult:
    image: ImageBuffer
    mask: np.ndarray


def _cells(u, v, width, height):
    valid = in_bounds(u, v, width, height)
    us = np.where(valid, u, 0.0)
    vs = np.where(valid, v, 0.0)
    x0 = np.clip(np.floor(us).astype(np.int64), 0, max(width - 2, 0))
    y0 = np.clip(np.floor(vs).astype(np.int64), 0, max(height - 2, 0))
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    return valid, x0, x1, y0, y1, us - x0, vs - y0


def sample_array(src: np.ndarray, u: np.ndarray, v: np.ndarray, jacobian: bool = False):
    """Sample an (H, W, C) array at coordinates u, v of any common shape S.

    Returns (values (S..., C), valid (S...)) and, with ``jacobian``, also the
    partial derivatives with respect to u and v, each (S..., C).
    """
    src = np.asarray(src, dtype=np.float64)
    if src.ndim == 2:
        src = src[:, :, None]
    height, width = src.shape[:2]
    valid, x0, x1, y0, y1, fx, fy = _cells(u, v, width, height)
    ia = src[y0, x0]
    ib = src[y0, x1]
    ic = src[y1, x0]
    id_ = src[y1, x1]
    wx = fx[..., None]
    wy = fy[..., None]
    top = ia + wx * (ib - ia)
    bottom = ic + wx * (id_ - ic)
    out = top + wy * (bottom - top)
    vmask = valid[..., None]
    out = np.where(vmask, out, 0.0)
    if not jacobian:
        return out, valid
    du = (ib - ia) * (1.0 - wy) + (id_ - ic) * wy
    dv = bottom - top
    return out, valid, np.where(vmask, du, 0.0), np.where(vmask, dv, 0.0)


def bilinear_sample(src: ImageBuffer, flow: FlowField, src_valid: np.ndarray | None = None) -> SampleResult:
    """Reconstruct the reference view by pulling ``src`` at ``flow`` coordinates.

    ``src_valid`` optionally marks unusable source pixels; a sample touching
    one of them is masked.
    """
    u = flow.coords[..., 0]
    v = flow.coords[..., 1]
    out, valid = sample_array(src.data, u, v)
    valid = valid & flow.valid
    if src_valid is not None:
        touched, _ = sample_array((~np.asarray(src_valid, dtype=bool)).astype(np.float64), u, v)
        valid &= touched[..., 0] == 0.0
    out[~valid] = 0.0
    # convex combination of in-range values; clip removes rounding spill
    return SampleResult(ImageBuffer(np.clip(out, 0.0, 1.0)), valid)


def bilinear_sample_jacobian(src: ImageBuffer, flow: FlowField) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel d(value)/du and d(value)/dv, each (H, W, C); zero where invalid."""
    u = flow.coords[..., 0]
    v = flow.coords[..., 1]
    _, valid, du, dv = sample_array(src.data, u, v, jacobian=True)
    invalid = ~(valid & flow.valid)
    du[invalid] = 0.0
    dv[invalid] = 0.0
    return du, dv
