"""TUM RGB-D style ingestion: listings, timestamp association, depth PNGs, splits."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .image import DepthMap, ImageBuffer, read_image, read_png16, resize_bilinear, write_png16

TUM_DEPTH_DIVISOR = 5000.0
DEFAULT_MAX_DT = 0.02


class DatasetError(ValueError):
    pass


class EmptyTestSetWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class FrameRecord:
    timestamp: float
    rgb_path: str
    depth_path: str | None = None
    depth_timestamp: float | None = None

    @property
    def paired(self) -> bool:
        return self.depth_path is not None


@dataclass(frozen=True)
class SequenceConfig:
    stride: int = 5
    target_width: int = 320
    target_height: int = 192
    max_dt: float = DEFAULT_MAX_DT

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if not self.max_dt > 0:
            raise ValueError(f"max_dt must be positive, got {self.max_dt}")


def read_listing(path) -> list[tuple[float, str]]:
    """Parse a TUM ``rgb.txt``/``depth.txt``: "timestamp path" lines, '#' comments."""
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 2:
            raise DatasetError(f"{path}:{lineno}: expected 'timestamp path'")
        try:
            ts = float(parts[0])
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: bad timestamp {parts[0]!r}") from None
        entries.append((ts, parts[1]))
    check_sorted(entries, str(path))
    return entries


def check_sorted(entries, name: str = "listing") -> None:
    for (a, _), (b, _) in zip(entries, entries[1:]):
        if not b > a:
            raise DatasetError(f"{name}: timestamps not strictly increasing at {b!r}")


def associate_frames(rgb_list, depth_list, max_dt: float = DEFAULT_MAX_DT) -> list[FrameRecord]:
    """Greedy nearest-timestamp pairing, each frame used at most once.

    Candidate pairs within ``max_dt`` are taken in order of increasing time
    gap (ties broken by timestamps), so the outcome does not depend on which
    stream is treated as the reference. Returns matched records sorted by RGB
    timestamp.
    """
    if not rgb_list or not depth_list:
        raise DatasetError("association needs non-empty rgb and depth listings")
    if max_dt < 0:
        raise DatasetError("max_dt must be >= 0")
    check_sorted(rgb_list, "rgb listing")
    check_sorted(depth_list, "depth listing")
    rgb_ts = np.array([t for t, _ in rgb_list])
    dep_ts = np.array([t for t, _ in depth_list])
    candidates = []
    for i, t in enumerate(rgb_ts):
        lo = np.searchsorted(dep_ts, t - max_dt, side="left")
        hi = np.searchsorted(dep_ts, t + max_dt, side="right")
        for j in range(lo, hi):
            dt = abs(dep_ts[j] - t)
            if dt <= max_dt:
                candidates.append((dt, rgb_ts[i], dep_ts[j], i, j))
    candidates.sort()
    used_rgb, used_dep, pairs = set(), set(), []
    for _, _, _, i, j in candidates:
        if i in used_rgb or j in used_dep:
            continue
        used_rgb.add(i)
        used_dep.add(j)
        pairs.append((i, j))
    pairs.sort()
    return [
        FrameRecord(rgb_list[i][0], rgb_list[i][1], depth_list[j][1], depth_list[j][0])
        for i, j in pairs
    ]


def write_association(path, records: list[FrameRecord]) -> None:
    """Same layout as the TUM associate tool: "t_rgb rgb_path t_depth depth_path"."""
    lines = [
        f"{r.timestamp:.6f} {r.rgb_path} {r.depth_timestamp:.6f} {r.depth_path}" for r in records
    ]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_association(path) -> list[FrameRecord]:
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise DatasetError(f"{path}:{lineno}: expected 4 fields")
        records.append(FrameRecord(float(parts[0]), parts[1], parts[3], float(parts[2])))
    return records


def depth_from_raw(raw: np.ndarray, scale_divisor: float = TUM_DEPTH_DIVISOR) -> DepthMap:
    raw = np.asarray(raw)
    return DepthMap(raw.astype(np.float64) / scale_divisor, raw > 0)


def load_depth_png(path, scale_divisor: float = TUM_DEPTH_DIVISOR) -> DepthMap:
    """16-bit depth PNG to meters; raw 0 is invalid. Values are never clamped."""
    return depth_from_raw(read_png16(path), scale_divisor)


def save_depth_png(path, depth: DepthMap, scale_divisor: float = TUM_DEPTH_DIVISOR) -> None:
    raw = np.round(depth.values * scale_divisor)
    if raw.max(initial=0) > 65535:
        raise DatasetError(f"{path}: depth exceeds the 16-bit range at divisor {scale_divisor}")
    raw[~depth.mask] = 0
    write_png16(path, raw.astype(np.uint16))


def load_rgb(path, cfg: SequenceConfig | None = None) -> ImageBuffer:
    """Read an RGB frame, resizing (bilinear) to the configured network size."""
    img = read_image(path)
    if cfg is not None:
        img = resize_bilinear(img, cfg.target_width, cfg.target_height)
    return img


def subsample_and_split(records, cfg: SequenceConfig, train_count: int):
    """Every ``stride``-th record goes to training until ``train_count`` are taken.

    All other records form the test set, in their original order.
    """
    records = list(records)
    picked = list(range(0, len(records), cfg.stride))
    if len(picked) < train_count:
        raise DatasetError(
            f"stride {cfg.stride} over {len(records)} records yields {len(picked)} "
            f"candidates, {train_count} requested"
        )
    train_idx = set(picked[:train_count])
    train = [records[i] for i in sorted(train_idx)]
    test = [r for i, r in enumerate(records) if i not in train_idx]
    if not test:
        warnings.warn("test split is empty", EmptyTestSetWarning, stacklevel=2)
    return train, test
