"""Depth error metrics (RMSE, Abs Rel, Sq Rel, threshold accuracies) and report output."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .image import DepthMap

DEFAULT_CAP = (0.1, 10.0)
COLUMNS = ("rmse", "abs_rel", "sq_rel", "delta1", "delta2", "delta3")
HEADERS = ("RMSE", "Abs Rel", "Sq Rel", "d<1.25", "d<1.25^2", "d<1.25^3")


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class MetricReport:
    rmse: float
    abs_rel: float
    sq_rel: float
    delta1: float
    delta2: float
    delta3: float
    n_pixels: int
    scale_factor: float = 1.0

    def to_json(self, **extra) -> str:
        return json.dumps({**extra, **asdict(self)}, sort_keys=False)


def depth_metrics(
    pred: DepthMap,
    gt: DepthMap,
    median_scale: bool = True,
    cap: tuple[float, float] | None = DEFAULT_CAP,
    holes: str = "exclude",
) -> MetricReport:
    """Compare a predicted depth map with ground truth.

    Pixels count when valid in ``gt`` (and inside ``cap`` if given). With
    ``holes="exclude"`` they must be valid in ``pred`` as well; with
    ``holes="cap"`` an invalid prediction is scored as depth 0, which the cap
    then lifts to its lower bound. Median scaling multiplies the prediction by
    median(gt)/median(pred) over the evaluated pixels before capping.
    """
    if pred.size != gt.size:
        raise MetricsError(f"size mismatch: pred {pred.size} vs gt {gt.size}")
    if holes not in ("exclude", "cap"):
        raise MetricsError(f"holes must be 'exclude' or 'cap', got {holes!r}")
    sel = gt.mask.copy()
    if cap is not None:
        lo, hi = cap
        sel &= (gt.values >= lo) & (gt.values <= hi)
    if holes == "exclude":
        sel &= pred.mask
    elif cap is None:
        raise MetricsError("holes='cap' needs a depth cap")
    if not sel.any():
        raise MetricsError("no pixels valid in both prediction and ground truth")
    g = gt.values[sel]
    if np.any(g <= 0):
        raise MetricsError("ground truth has non-positive values on valid pixels")
    p = pred.values[sel].copy()
    scale = 1.0
    if median_scale:
        valid_p = pred.mask[sel]
        if not valid_p.any():
            raise MetricsError("prediction has no valid pixels to scale")
        scale = float(np.median(g[valid_p]) / np.median(p[valid_p]))
        p = p * scale
    if cap is not None:
        p = np.clip(p, *cap)
    err = p - g
    ratio = np.maximum(p / g, g / p)
    return MetricReport(
        rmse=math.sqrt(float(np.mean(err**2))),
        abs_rel=float(np.mean(np.abs(err) / g)),
        sq_rel=float(np.mean(err**2 / g)),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
        n_pixels=int(sel.sum()),
        scale_factor=scale,
    )


def mean_report(reports: list[MetricReport]) -> MetricReport:
    """Per-frame mean of each metric; pixel counts add up."""
    if not reports:
        raise MetricsError("no reports to aggregate")
    vals = {c: float(np.mean([getattr(r, c) for r in reports])) for c in COLUMNS}
    return MetricReport(
        **vals,
        n_pixels=sum(r.n_pixels for r in reports),
        scale_factor=float(np.median([r.scale_factor for r in reports])),
    )


def format_table(rows: list[tuple[str, MetricReport]], label: str = "Method") -> str:
    """Aligned plain-text table, metric columns in the usual depth-benchmark order."""
    names = [name for name, _ in rows]
    width = max([len(label)] + [len(n) for n in names])
    head = f"{label:<{width}}" + "".join(f"  {h:>9}" for h in HEADERS)
    lines = [head, "-" * len(head)]
    for name, rep in rows:
        cells = "".join(f"  {getattr(rep, c):>9.3f}" for c in COLUMNS)
        lines.append(f"{name:<{width}}{cells}")
    return "\n".join(lines)
