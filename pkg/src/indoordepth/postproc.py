"""Flip ensembling, Godard-style edge blending and median/max filtering."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .image import DepthMap, flip_horizontal

GODARD_MIN_WIDTH = 20
_FILTER_CHUNK = 2_000_000  # window values per sort batch


class NarrowMapWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class FilterSpec:
    kind: str = "median"
    size: int = 35

    def __post_init__(self):
        if self.kind not in ("median", "max"):
            raise ValueError(f"filter kind must be 'median' or 'max', got {self.kind!r}")
        if self.size < 3 or self.size % 2 == 0:
            raise ValueError(f"filter size must be odd and >= 3, got {self.size}")

    @classmethod
    def parse(cls, text: str) -> "FilterSpec":
        """'median-35' or 'max-15'."""
        kind, _, size = text.partition("-")
        return cls(kind, int(size))

    def __str__(self) -> str:
        return f"{self.kind}-{self.size}"


def _check_same(a: DepthMap, b: DepthMap) -> None:
    if a.size != b.size:
        raise ValueError(f"map sizes differ: {a.width}x{a.height} vs {b.width}x{b.height}")


def elwf_combine(disp_a: DepthMap, disp_b_flipped_domain: DepthMap) -> DepthMap:
    """Average a prediction with the flip-trained model's prediction on the flipped input.

    ``disp_b_flipped_domain`` is still mirrored; it is flipped back before the
    per-pixel mean. Callers combining depth files convert to disparity first
    (see :func:`in_domain`).
    """
    _check_same(disp_a, disp_b_flipped_domain)
    b = flip_horizontal(disp_b_flipped_domain)
    mask = disp_a.mask & b.mask
    out = np.where(mask, (disp_a.values + b.values) / 2.0, 0.0)
    return DepthMap(out, mask)


def in_domain(fn, maps, domain: str = "disparity", maps_are: str = "depth"):
    """Run ``fn`` on maps converted to ``domain`` and convert the result back."""
    for name in (domain, maps_are):
        if name not in ("disparity", "depth"):
            raise ValueError(f"unknown domain {name!r}")
    if domain == maps_are:
        return fn(*maps)
    return fn(*(m.inverted() for m in maps)).inverted()


def edge_columns(width: int) -> int:
    """ceil(5% of width), in integer arithmetic."""
    return -(-width * 5 // 100)


def godard_postprocess(disp: DepthMap, disp_from_flipped: DepthMap) -> DepthMap:
    """Left 5% from ``disp``, right 5% from the flipped-back map, mean elsewhere.

    Maps narrower than 20 columns fall back to the plain mean with a warning.
    """
    _check_same(disp, disp_from_flipped)
    mask = disp.mask & disp_from_flipped.mask
    out = (disp.values + disp_from_flipped.values) / 2.0
    if disp.width < GODARD_MIN_WIDTH:
        warnings.warn(
            f"width {disp.width} < {GODARD_MIN_WIDTH}: edge bands under one column, plain mean used",
            NarrowMapWarning,
            stacklevel=2,
        )
    else:
        n = edge_columns(disp.width)
        out[:, :n] = disp.values[:, :n]
        out[:, -n:] = disp_from_flipped.values[:, -n:]
        mask = mask.copy()
        mask[:, :n] = disp.mask[:, :n]
        mask[:, -n:] = disp_from_flipped.mask[:, -n:]
    return DepthMap(np.where(mask, out, 0.0), mask)


def apply_filter(depth: DepthMap, spec: FilterSpec) -> DepthMap:
    """Sliding median or max over valid pixels, replicate padding at borders.

    Invalid pixels are left out of each window. An even valid count takes the
    lower of the two middle values. A pixel stays invalid only when its whole
    window is invalid.
    """
    r = spec.size // 2
    vals = np.where(depth.mask, depth.values, np.nan)
    padded = np.pad(vals, r, mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (spec.size, spec.size))
    h, w = depth.values.shape
    out = np.zeros((h, w))
    rows_per_chunk = max(1, _FILTER_CHUNK // (w * spec.size * spec.size))
    for r0 in range(0, h, rows_per_chunk):
        block = windows[r0 : r0 + rows_per_chunk].reshape(-1, w, spec.size * spec.size)
        if spec.kind == "max":
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                res = np.nanmax(block, axis=2)
        else:
            srt = np.sort(block, axis=2)  # nan sorts last
            count = np.sum(~np.isnan(block), axis=2)
            pick = np.maximum(count - 1, 0) // 2
            res = np.take_along_axis(srt, pick[..., None], axis=2)[..., 0]
        out[r0 : r0 + rows_per_chunk] = res
    return DepthMap(np.nan_to_num(out, nan=0.0), np.isfinite(out))
