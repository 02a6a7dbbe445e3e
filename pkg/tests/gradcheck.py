"""Central finite-difference checks of the 2D loss gradients.

The total loss is piecewise smooth: L1 terms switch sign, bilinear samples
switch cells and pixels enter or leave the valid mask. A central difference
whose stencil straddles such a switch measures an average of two slopes, not
the derivative. Each stencil is therefore classified by a regime signature
(every discrete state the loss depends on) at x - h, x and x + h. Stencils
with an unchanged signature must match the analytic gradient. The others are
retried with a smaller step; those still straddling a switch are counted
and reported rather than compared.
"""

from dataclasses import dataclass, field

import numpy as np

from indoordepth.geometry import RigidTransform, warp_rays
from indoordepth.image import resize_array
from indoordepth.losses import Strategy, l1_sign
from indoordepth.optimizer import disparity_levels, evaluate
from indoordepth.sampler import sample_array


def regime_signature(problem) -> list[np.ndarray]:
    levels = disparity_levels(problem.disparity)
    tgt, src = problem.target.data, problem.source.data
    height, width = problem.disparity.shape
    sig = []
    for s, disp in enumerate(levels):
        h_s, w_s = disp.shape
        if problem.scales_2d == "all" or s == 0:
            if problem.strategy is Strategy.A:
                t_s, s_s, d_s = resize_array(tgt, w_s, h_s), resize_array(src, w_s, h_s), disp
                k = problem.intrinsics.for_level(s)
            else:
                t_s, s_s, d_s = tgt, src, resize_array(disp, width, height)
                k = problem.intrinsics
            _, _, u, v, front = warp_rays(d_s, problem.pose, k)
            vals, valid = sample_array(s_s, u, v)
            valid &= front
            sig += [valid, np.where(valid, np.floor(np.where(valid, u, 0)), -1)]
            sig += [np.where(valid, np.floor(np.where(valid, v, 0)), -1)]
            sig.append(l1_sign((t_s - vals) * valid[..., None]))
        sig.append(l1_sign(np.diff(disp, axis=1)))
        sig.append(l1_sign(np.diff(disp, axis=0)))
    return sig


def _same(a, b) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


@dataclass
class GradCheckStats:
    checked: int = 0
    straddled: int = 0  # stencils at the first step that crossed a switch
    rescued: int = 0  # of those, compared successfully at the smaller step
    unresolved: int = 0
    max_rel: float = 0.0
    failures: list = field(default_factory=list)

    def merge(self, other: "GradCheckStats") -> None:
        self.checked += other.checked
        self.straddled += other.straddled
        self.rescued += other.rescued
        self.unresolved += other.unresolved
        self.max_rel = max(self.max_rel, other.max_rel)
        self.failures += other.failures


def check_gradient(problem, directions, h=1e-5, h_small=1e-7, rtol=1e-4, floor=1e-4) -> GradCheckStats:
    """Compare directional derivatives along each (d_disp, d_pose) direction.

    Relative error is |analytic - fd| / max(|analytic|, |fd|, floor).
    """
    ev = evaluate(problem)
    x_disp = problem.disparity
    x_pose = problem.pose.params
    base_sig = regime_signature(problem)
    stats = GradCheckStats()

    def at(step, dd, dp):
        p = problem.with_params(x_disp + step * dd, RigidTransform.from_params(x_pose + step * dp))
        return evaluate(p, want_grad=False).total, regime_signature(p)

    for dd, dp in directions:
        analytic = float(np.sum(ev.grad_disparity * dd) + ev.grad_pose @ dp)
        stats.checked += 1
        for step in (h, h_small):
            fp, sp = at(step, dd, dp)
            fm, sm = at(-step, dd, dp)
            if _same(sp, base_sig) and _same(sm, base_sig):
                fd = (fp - fm) / (2 * step)
                rel = abs(analytic - fd) / max(abs(analytic), abs(fd), floor)
                stats.max_rel = max(stats.max_rel, rel)
                if rel > rtol:
                    stats.failures.append((analytic, fd, rel, step))
                if step != h:
                    stats.rescued += 1
                break
            if step == h:
                stats.straddled += 1
        else:
            stats.unresolved += 1
    return stats


def coordinate_directions(shape, pixels=None, pose=True, random=0, rng=None):
    """Unit directions: chosen disparity pixels, the six pose axes, random mixes."""
    n = shape[0] * shape[1]
    out = []
    for i in range(n) if pixels is None else pixels:
        dd = np.zeros(n)
        dd[i] = 1.0
        out.append((dd.reshape(shape), np.zeros(6)))
    if pose:
        for j in range(6):
            dp = np.zeros(6)
            dp[j] = 1.0
            out.append((np.zeros(shape), dp))
    for _ in range(random):
        vec = rng.normal(size=n + 6)
        vec /= np.linalg.norm(vec)
        out.append((vec[:n].reshape(shape), vec[n:]))
    return out
