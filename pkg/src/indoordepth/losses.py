"""Photometric, SSIM and edge-aware smoothness losses and their multi-scale sum.

All losses are sums over valid pixels. Every term has a hand-written adjoint
so the direct optimizer can back-propagate through warping and sampling
without an autodiff framework.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .geometry import Intrinsics, RigidTransform, warp_rays, warp_with_jacobians
from .image import DepthMap, ImageBuffer, PYRAMID_LEVELS, pyramid_sizes, resize_array, resize_array_adjoint
from .sampler import SampleResult, sample_array

# below this a residual counts as zero when picking an L1 subgradient
SIGN_DEADZONE = 1e-12


class EmptyMaskWarning(RuntimeWarning):
    pass


class Strategy(str, Enum):
    """A: resize the images to each disparity level. B: upsample disparities."""

    A = "A"
    B = "B"


@dataclass(frozen=True)
class SsimParams:
    c1: float = 0.01**2
    c2: float = 0.03**2
    window: int = 3

    def __post_init__(self):
        if not (self.c1 > 0 and self.c2 > 0):
            raise ValueError("c1 and c2 must be positive")
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError(f"window must be odd and >= 3, got {self.window}")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.85  # reconstruction
    beta: float = 0.15  # SSIM
    gamma: float = 0.15  # smoothness, per scale
    omega: float = 0.1  # 3D/ICP, per scale

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "omega"):
            val = getattr(self, name)
            if not (math.isfinite(val) and val >= 0):
                raise ValueError(f"weight {name} must be finite and >= 0, got {val}")

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(*(factor * w for w in (self.alpha, self.beta, self.gamma, self.omega)))


@dataclass(frozen=True)
class LossBreakdown:
    reconstr: float
    ssim: float
    smooth_per_scale: tuple[float, ...]
    loss3d_per_scale: tuple[float, ...]
    total: float
    reconstr_per_scale: tuple[float, ...] | None = None
    ssim_per_scale: tuple[float, ...] | None = None
    flags: tuple[str, ...] = field(default_factory=tuple)

    def as_row(self) -> dict:
        row = {"reconstr": self.reconstr, "ssim": self.ssim}
        for s, val in enumerate(self.smooth_per_scale):
            row[f"smooth_{s}"] = val
        for s, val in enumerate(self.loss3d_per_scale):
            row[f"loss3d_{s}"] = val
        row["total"] = self.total
        return row


def l1_sign(x: np.ndarray) -> np.ndarray:
    s = np.sign(x)
    s[np.abs(x) <= SIGN_DEADZONE] = 0.0
    return s


def _as_array(img) -> np.ndarray:
    if isinstance(img, ImageBuffer):
        return img.data
    arr = np.asarray(img, dtype=np.float64)
    return arr[:, :, None] if arr.ndim == 2 else arr


def _as_disparity(disp) -> np.ndarray:
    if isinstance(disp, DepthMap):
        if not disp.mask.all():
            raise ValueError("disparity map must be valid everywhere")
        return disp.values
    return np.asarray(disp, dtype=np.float64)


# --- reconstruction ---------------------------------------------------------


def _reconstruction(target: np.ndarray, warped: np.ndarray, mask: np.ndarray):
    diff = (target - warped) * mask[..., None]
    return math.fsum(np.abs(diff).ravel()), -l1_sign(diff)


def reconstruction_loss(target: ImageBuffer, warped: SampleResult) -> float:
    """Sum over valid pixels of the L1 intensity difference, summed over channels."""
    if target.size != warped.image.size:
        raise ValueError("target and warped image sizes differ")
    if not warped.mask.any():
        warnings.warn("reconstruction loss over an empty mask is 0", EmptyMaskWarning, stacklevel=2)
        return 0.0
    return _reconstruction(target.data, warped.image.data, warped.mask)[0]


# --- SSIM -------------------------------------------------------------------


def _reflect_index(n: int, radius: int) -> np.ndarray:
    idx = np.arange(-radius, n + radius)
    idx = np.abs(idx)
    idx = np.where(idx > n - 1, 2 * (n - 1) - idx, idx)
    return np.clip(idx, 0, n - 1)


@lru_cache(maxsize=64)
def _box_operator(height: int, width: int, window: int) -> sp.csr_matrix:
    """Sparse (HW x HW) window mean with reflect (mirror, edge not repeated) padding."""
    r = window // 2
    ri = _reflect_index(height, r)
    ci = _reflect_index(width, r)
    rows = np.arange(height * width).reshape(height, width)
    out_idx, in_idx = [], []
    for dy in range(window):
        for dx in range(window):
            src = ri[dy : dy + height][:, None] * width + ci[dx : dx + width][None, :]
            out_idx.append(rows.ravel())
            in_idx.append(src.ravel())
    data = np.full(height * width * window * window, 1.0 / (window * window))
    op = sp.coo_matrix(
        (data, (np.concatenate(out_idx), np.concatenate(in_idx))), shape=(height * width,) * 2
    )
    return op.tocsr()


def _ssim_terms(x: np.ndarray, y: np.ndarray, p: SsimParams):
    h, w, c = x.shape
    op = _box_operator(h, w, p.window)
    xf = x.reshape(h * w, c)
    yf = y.reshape(h * w, c)
    mu_x = op @ xf
    mu_y = op @ yf
    sxx = op @ (xf * xf) - mu_x * mu_x
    syy = op @ (yf * yf) - mu_y * mu_y
    sxy = op @ (xf * yf) - mu_x * mu_y
    n1 = 2 * mu_x * mu_y + p.c1
    n2 = 2 * sxy + p.c2
    d1 = mu_x * mu_x + mu_y * mu_y + p.c1
    d2 = sxx + syy + p.c2
    s = n1 * n2 / (d1 * d2)
    return op, s, (mu_x, mu_y, n1, n2, d1, d2)


def ssim_map(x, y, p: SsimParams = SsimParams()) -> np.ndarray:
    """Per-pixel SSIM averaged over channels, shape (H, W).

    Uses the textbook form with variances in the contrast denominator.
    """
    x = _as_array(x)
    y = _as_array(y)
    if x.shape != y.shape:
        raise ValueError("images must have the same shape")
    _, s, _ = _ssim_terms(x, y, p)
    return s.mean(axis=1).reshape(x.shape[:2])


def _ssim_loss(target: np.ndarray, warped: np.ndarray, mask: np.ndarray, p: SsimParams):
    """Loss and its gradient w.r.t. ``warped``, summed over ``mask``.

    Inside neighbouring windows an invalid pixel takes the target value, so
    it adds no residual there. A stored 0 would instead make the loss jump
    whenever a pixel leaves the valid set, walling descent off from it.
    """
    h, w, c = target.shape
    warped = np.where(mask[..., None], warped, target)
    op, s, (mu_x, mu_y, n1, n2, d1, d2) = _ssim_terms(target, warped, p)
    term = 1.0 - s.mean(axis=1)
    keep = mask.ravel()
    clipped = (term < 0) | (term > 2)
    loss = math.fsum(np.clip(term[keep], 0.0, 2.0))

    # dL/dS for every channel's SSIM
    g = np.where((keep & ~clipped)[:, None], -1.0 / c, 0.0) * np.ones((1, c))
    dd = d1 * d2
    g_mu = g * ((2 * mu_x * n2 - 2 * mu_x * n1) / dd - s * (2 * mu_y / d1 - 2 * mu_y / d2))
    g_syy = g * (-s / d2)
    g_sxy = g * (2 * n1 / dd)
    opt = op.T
    yf = warped.reshape(h * w, c)
    xf = target.reshape(h * w, c)
    grad = opt @ g_mu + 2 * yf * (opt @ g_syy) + xf * (opt @ g_sxy)
    grad[~keep] = 0.0
    return loss, grad.reshape(h, w, c), int(keep.sum())


def ssim_loss(target: ImageBuffer, warped: SampleResult, p: SsimParams = SsimParams()) -> float:
    """Sum over valid pixels of (1 - SSIM), each term clipped to [0, 2]."""
    if target.size != warped.image.size:
        raise ValueError("target and warped image sizes differ")
    loss, _, n = _ssim_loss(target.data, warped.image.data, warped.mask, p)
    if n == 0:
        warnings.warn("SSIM loss over an empty mask is 0", EmptyMaskWarning, stacklevel=2)
    return loss


# --- smoothness -------------------------------------------------------------


def _smoothness(disp: np.ndarray, img: np.ndarray):
    dx = disp[:, 1:] - disp[:, :-1]
    dy = disp[1:, :] - disp[:-1, :]
    wx = np.exp(-np.abs(img[:, 1:] - img[:, :-1]).mean(axis=2))
    wy = np.exp(-np.abs(img[1:, :] - img[:-1, :]).mean(axis=2))
    loss = math.fsum((np.abs(dx) * wx).ravel()) + math.fsum((np.abs(dy) * wy).ravel())
    gx = l1_sign(dx) * wx
    gy = l1_sign(dy) * wy
    grad = np.zeros_like(disp)
    grad[:, 1:] += gx
    grad[:, :-1] -= gx
    grad[1:, :] += gy
    grad[:-1, :] -= gy
    return loss, grad


def smoothness_loss(disp, img) -> float:
    """Edge-aware first-order smoothness of a disparity map (forward differences)."""
    d = _as_disparity(disp)
    im = _as_array(img)
    if d.shape != im.shape[:2]:
        raise ValueError("disparity and image sizes differ")
    return _smoothness(d, im)[0]


# --- multi-scale orchestration ------------------------------------------------


@dataclass
class ScaleTerms:
    """Per-level 2D loss values plus the sampled reconstruction at that level."""

    reconstr: float
    ssim: float
    smooth: float
    sample: SampleResult


@dataclass
class MultiscaleResult:
    levels: list[ScaleTerms]
    strategy: Strategy
    scales_2d: str
    grad_levels: list[np.ndarray] | None = None
    grad_pose: np.ndarray | None = None

    @property
    def included(self) -> list[int]:
        return [0] if self.scales_2d == "input" else list(range(len(self.levels)))

    @property
    def reconstr(self) -> float:
        return math.fsum(self.levels[i].reconstr for i in self.included)

    @property
    def ssim(self) -> float:
        return math.fsum(self.levels[i].ssim for i in self.included)

    @property
    def smooth_per_scale(self) -> tuple[float, ...]:
        return tuple(t.smooth for t in self.levels)


def photometric_terms(
    target: np.ndarray,
    source: np.ndarray,
    disparity: np.ndarray,
    pose: RigidTransform,
    k: Intrinsics,
    p: SsimParams,
    alpha: float = 1.0,
    beta: float = 1.0,
    want_grad: bool = False,
):
    """Warp ``source`` into the target grid and score it.

    Returns (reconstr, ssim, SampleResult, grad_disparity, grad_pose); the
    gradients are of ``alpha * reconstr + beta * ssim`` and are None unless
    requested.
    """
    if want_grad:
        jac = warp_with_jacobians(disparity, pose, k)
        u, v, front = jac["u"], jac["v"], jac["front"]
        vals, valid, du, dv = sample_array(source, u, v, jacobian=True)
    else:
        _, _, u, v, front = warp_rays(disparity, pose, k)
        vals, valid = sample_array(source, u, v)
    valid &= front
    vals[~valid] = 0.0
    recon, g_recon = _reconstruction(target, vals, valid)
    ssim, g_ssim, _ = _ssim_loss(target, vals, valid, p)
    sample = SampleResult(ImageBuffer(np.clip(vals, 0.0, 1.0)), valid)
    if not want_grad:
        return recon, ssim, sample, None, None
    g_img = alpha * g_recon + beta * g_ssim
    g_img[~valid] = 0.0
    g_u = (g_img * du).sum(axis=2)
    g_v = (g_img * dv).sum(axis=2)
    g_q = g_u[..., None] * jac["du_dq"] + g_v[..., None] * jac["dv_dq"]
    g_disp = (g_q * jac["dq_dd"]).sum(axis=2)
    g_pose = np.einsum("hwi,hwij->j", g_q, jac["dq_dpose"])
    return recon, ssim, sample, g_disp, g_pose


def check_levels(target: ImageBuffer, disparities) -> list[np.ndarray]:
    sizes = pyramid_sizes(target.width, target.height)
    levels = [_as_disparity(d) for d in disparities]
    if len(levels) != PYRAMID_LEVELS:
        raise ValueError(f"expected {PYRAMID_LEVELS} disparity levels, got {len(levels)}")
    for i, (d, (w, h)) in enumerate(zip(levels, sizes)):
        if d.shape != (h, w):
            raise ValueError(f"disparity level {i} is {d.shape[1]}x{d.shape[0]}, expected {w}x{h}")
        if not np.all(d > 0):
            raise ValueError(f"disparity level {i} must be strictly positive")
    return levels


def multiscale_losses(
    target: ImageBuffer,
    source: ImageBuffer,
    disparities,
    pose: RigidTransform,
    k: Intrinsics,
    strategy: Strategy | str = Strategy.B,
    ssim_params: SsimParams = SsimParams(),
    scales_2d: str = "input",
    weights: LossWeights | None = None,
    want_grad: bool = False,
) -> MultiscaleResult:
    """Evaluate the 2D terms at all four disparity levels.

    Strategy A compares resized target and source images at each level's own
    resolution. Strategy B upsamples each disparity level to the input size
    and always compares at input resolution. Smoothness is always taken at the
    level's native size against the resized target.

    ``scales_2d`` chooses which levels feed the reconstruction and SSIM sums:
    "input" keeps level 0 only, "all" sums every level. With ``want_grad`` the
    result carries the gradient of
    ``alpha * reconstr + beta * ssim + gamma * sum(smooth)`` with respect to
    each disparity level and to the six pose parameters.
    """
    strategy = Strategy(strategy)
    if scales_2d not in ("input", "all"):
        raise ValueError(f"scales_2d must be 'input' or 'all', got {scales_2d!r}")
    if target.size != source.size or target.channels != source.channels:
        raise ValueError("target and source images differ in shape")
    levels = check_levels(target, disparities)
    w = weights or LossWeights()
    width, height = target.size
    result = MultiscaleResult([], strategy, scales_2d)
    grads = []
    g_pose = np.zeros(6)
    for s, disp in enumerate(levels):
        h_s, w_s = disp.shape
        tgt_s = resize_array(target.data, w_s, h_s)
        in_sum = scales_2d == "all" or s == 0
        a = w.alpha if in_sum else 0.0
        b = w.beta if in_sum else 0.0
        need = want_grad and in_sum
        if strategy is Strategy.A:
            src_s = resize_array(source.data, w_s, h_s)
            recon, ssim, sample, g_d, g_p = photometric_terms(
                tgt_s, src_s, disp, pose, k.for_level(s), ssim_params, a, b, need
            )
        else:
            up = resize_array(disp, width, height)
            recon, ssim, sample, g_up, g_p = photometric_terms(
                target.data, source.data, up, pose, k, ssim_params, a, b, need
            )
            g_d = resize_array_adjoint(g_up, w_s, h_s) if need else None
        smooth, g_smooth = _smoothness(disp, tgt_s)
        result.levels.append(ScaleTerms(recon, ssim, smooth, sample))
        if want_grad:
            g = w.gamma * g_smooth
            if need:
                g = g + g_d
                g_pose += g_p
            grads.append(g)
    if want_grad:
        result.grad_levels = grads
        result.grad_pose = g_pose
    return result


def total_loss(
    reconstr: float,
    ssim: float,
    smooth_per_scale,
    loss3d_per_scale,
    weights: LossWeights = LossWeights(),
    **extra,
) -> LossBreakdown:
    """Weighted sum: alpha*reconstr + beta*ssim + sum_s(gamma*smooth_s + omega*loss3d_s)."""
    smooth = tuple(float(x) for x in smooth_per_scale)
    l3d = tuple(float(x) for x in loss3d_per_scale)
    if len(smooth) != PYRAMID_LEVELS or len(l3d) != PYRAMID_LEVELS:
        raise ValueError(f"need {PYRAMID_LEVELS} smoothness and 3D terms")
    parts = [weights.alpha * reconstr, weights.beta * ssim]
    parts += [weights.gamma * x for x in smooth]
    parts += [weights.omega * x for x in l3d]
    return LossBreakdown(float(reconstr), float(ssim), smooth, l3d, math.fsum(parts), **extra)
