"""Per-pair direct optimisation of disparity and pose, plus synthetic test scenes.

This stands in for network training at desk scale: the decision variables are
a full-resolution disparity map and a six-parameter pose, fitted to one frame
pair by first-order descent on the weighted training loss. It exists to
exercise the loss and gradient stack, not to generalise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import (
    FlowField,
    Intrinsics,
    RigidTransform,
    backproject_at,
    in_bounds,
    matrix_to_axis_angle,
    pixel_grid,
    rays,
    warp_with_jacobians,
)
from .icp import DegenerateCloudError, icp_3d_loss, icp_align, sample_depth
from .image import DepthMap, ImageBuffer, pyramid_sizes, resize_array, resize_array_adjoint
from .losses import (
    LossBreakdown,
    LossWeights,
    SsimParams,
    Strategy,
    l1_sign,
    multiscale_losses,
    total_loss,
)
from .sampler import sample_array

DEPTH_PROFILES = ("plane", "slant", "steps")


class SceneError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, message: str, trace: list[LossBreakdown]):
        super().__init__(message)
        self.trace = trace


# --- synthetic scenes ------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    """Ground truth for one frame pair.

    ``target`` is exactly the bilinear reconstruction of the source view
    (``texture`` is the source view with a margin) under ``gt_depth`` and
    ``gt_pose``. ``visible`` marks target pixels that are in bounds and not
    hidden from the source camera.
    """

    gt_depth: DepthMap
    gt_pose: RigidTransform
    texture: ImageBuffer
    target: ImageBuffer
    source: ImageBuffer
    intrinsics: Intrinsics
    source_depth: DepthMap
    flow: FlowField
    visible: np.ndarray
    depth_profile: str = "plane"

    @property
    def rendered_pair(self) -> tuple[ImageBuffer, ImageBuffer]:
        return self.target, self.source

    @property
    def gt_disparity(self) -> np.ndarray:
        return self.gt_depth.inverted().values


def default_intrinsics(width: int, height: int) -> Intrinsics:
    f = 0.9 * width
    return Intrinsics(f, f, (width - 1) / 2.0, (height - 1) / 2.0)


def _planes(profile: str, width: int, base_depth: float):
    """(normal, column range) pairs; a plane n satisfies n . X = 1 in the target camera."""
    inv = 1.0 / base_depth
    if profile == "plane":
        return [(np.array([0.0, 0.0, inv]), None)]
    if profile == "slant":
        return [(np.array([0.25 * inv, 0.15 * inv, inv]), None)]
    if profile == "steps":
        edges = np.linspace(0, width, 4).round().astype(int)
        depths = base_depth * np.array([0.8, 1.0, 1.25])
        return [
            (np.array([0.0, 0.0, 1.0 / z]), (edges[i], edges[i + 1])) for i, z in enumerate(depths)
        ]
    raise SceneError(f"unknown depth profile {profile!r}; choose from {DEPTH_PROFILES}")


def _target_disparity(planes, k: Intrinsics, width: int, height: int) -> np.ndarray:
    u, v = pixel_grid(width, height)
    ray = rays(u, v, k)
    disp = np.zeros((height, width))
    for n, cols in planes:
        d = ray @ n
        if cols is None:
            disp = d
        else:
            disp[:, cols[0] : cols[1]] = d[:, cols[0] : cols[1]]
    return disp


def _source_disparity(planes, pose: RigidTransform, k: Intrinsics, width: int, height: int):
    """Ray-cast the source camera against the target-frame planes; nearest hit wins."""
    rot = pose.rotation_matrix
    t = pose.translation
    u, v = pixel_grid(width, height)
    ray = rays(u, v, k)
    best = np.zeros((height, width))
    inv = pose.inverse()
    for n, cols in planes:
        rn = rot @ n
        n_src = rn / (1.0 + rn @ t)
        d = ray @ n_src
        ok = d > 0
        if cols is not None:
            pts = ray / np.where(ok, d, 1.0)[..., None]
            back = inv.apply(pts)
            with np.errstate(divide="ignore", invalid="ignore"):
                ut = k.fx * back[..., 0] / back[..., 2] + k.cx
            ok &= (back[..., 2] > 0) & (ut >= cols[0] - 0.5) & (ut < cols[1] - 0.5)
        best = np.where(ok & (d > best), d, best)
    return best


def make_synthetic_scene(
    seed: int = 0,
    size: tuple[int, int] = (64, 48),
    depth_profile: str = "slant",
    motion: RigidTransform | None = None,
    intrinsics: Intrinsics | None = None,
    channels: int = 3,
    base_depth: float = 2.0,
    blur: float = 1.5,
    min_in_bounds: float = 0.8,
) -> SyntheticScene:
    """Render a textured frame pair with known depth and relative pose.

    The source view is smoothed random noise; the target is its exact bilinear
    warp, drawn from a margin around the source so every target pixel has
    content.
    """
    width, height = size
    motion = motion or RigidTransform.identity()
    k = intrinsics or default_intrinsics(width, height)
    planes = _planes(depth_profile, width, base_depth)
    disp = _target_disparity(planes, k, width, height)
    if not np.all(disp > 0):
        raise SceneError("depth profile puts surface points behind the camera")

    jac = warp_with_jacobians(disp, motion, k)
    u, v = jac["u"], jac["v"]
    if not jac["front"].all():
        raise SceneError("motion moves points behind the source camera")
    inside = in_bounds(u, v, width, height)
    frac = float(inside.mean())
    if frac < min_in_bounds:
        raise SceneError(f"only {frac:.1%} of pixels stay in bounds (need {min_in_bounds:.0%})")

    over = max(0.0, -u.min(), u.max() - (width - 1), -v.min(), v.max() - (height - 1))
    margin = int(math.ceil(over)) + 2
    rng = np.random.default_rng(seed)
    noise = rng.random((height + 2 * margin, width + 2 * margin, channels))
    canvas = np.stack([gaussian_filter(noise[..., c], blur, mode="reflect") for c in range(channels)], axis=-1)
    lo = canvas.min(axis=(0, 1))
    hi = canvas.max(axis=(0, 1))
    canvas = 0.05 + 0.9 * (canvas - lo) / (hi - lo)

    source = canvas[margin : margin + height, margin : margin + width]
    target, _ = sample_array(canvas, u + margin, v + margin)

    src_disp = _source_disparity(planes, motion, k, width, height)
    source_depth = DepthMap(np.where(src_disp > 0, 1.0 / np.where(src_disp > 0, src_disp, 1.0), 0.0))
    depth = DepthMap(1.0 / disp)
    z = jac["q"][..., 2]
    flow = FlowField(np.stack([u, v], axis=-1), inside, jac["q"][..., 2])
    seen = sample_depth(source_depth, flow)
    visible = inside & seen.mask & (z <= seen.values * (1 + 1e-6))
    return SyntheticScene(
        gt_depth=depth,
        gt_pose=motion,
        texture=ImageBuffer(np.clip(canvas, 0.0, 1.0)),
        target=ImageBuffer(np.clip(target, 0.0, 1.0)),
        source=ImageBuffer(source),
        intrinsics=k,
        source_depth=source_depth,
        flow=flow,
        visible=visible,
        depth_profile=depth_profile,
    )


def synthetic_depth_maps(count: int, size: tuple[int, int] = (96, 72), seed: int = 0) -> list[DepthMap]:
    """Ground-truth depth maps cycling through the scene profiles at random base depths."""
    rng = np.random.default_rng(seed)
    width, height = size
    k = default_intrinsics(width, height)
    maps = []
    for i in range(count):
        profile = DEPTH_PROFILES[i % len(DEPTH_PROFILES)]
        planes = _planes(profile, width, float(rng.uniform(1.5, 4.0)))
        maps.append(DepthMap(1.0 / _target_disparity(planes, k, width, height)))
    return maps


def inject_holes(depth: DepthMap, fraction: float, seed: int = 0) -> DepthMap:
    """Zero out ``round(fraction * pixels)`` distinct random pixels ("black holes")."""
    if not 0 <= fraction <= 1:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    rng = np.random.default_rng(seed)
    n = int(round(fraction * depth.values.size))
    idx = rng.choice(depth.values.size, size=n, replace=False)
    vals = depth.values.copy().ravel()
    mask = depth.mask.copy().ravel()
    vals[idx] = 0.0
    mask[idx] = False
    return DepthMap(vals.reshape(depth.values.shape), mask.reshape(depth.mask.shape))


# --- objective ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PairProblem:
    target: ImageBuffer
    source: ImageBuffer
    intrinsics: Intrinsics
    disparity: np.ndarray
    pose: RigidTransform
    weights: LossWeights = field(default_factory=LossWeights)
    strategy: Strategy = Strategy.B
    source_depth: DepthMap | None = None
    ssim_params: SsimParams = field(default_factory=SsimParams)
    scales_2d: str = "input"
    icp_iters: int = 20

    def __post_init__(self):
        disp = np.asarray(self.disparity, dtype=np.float64)
        if disp.shape != (self.target.height, self.target.width):
            raise ValueError("disparity must match the target image size")
        if not np.all(np.isfinite(disp) & (disp > 0)):
            raise ValueError("disparity must be finite and strictly positive")
        object.__setattr__(self, "disparity", disp)
        object.__setattr__(self, "strategy", Strategy(self.strategy))

    def with_params(self, disparity=None, pose=None) -> "PairProblem":
        return replace(
            self,
            disparity=self.disparity if disparity is None else disparity,
            pose=self.pose if pose is None else pose,
        )

    @classmethod
    def from_scene(cls, scene: SyntheticScene, **kw) -> "PairProblem":
        kw.setdefault("disparity", scene.gt_disparity)
        kw.setdefault("pose", scene.gt_pose)
        kw.setdefault("source_depth", scene.source_depth)
        return cls(scene.target, scene.source, scene.intrinsics, **kw)


@dataclass(frozen=True, eq=False)
class Evaluation:
    breakdown: LossBreakdown
    grad_disparity: np.ndarray
    grad_pose: np.ndarray

    @property
    def total(self) -> float:
        return self.breakdown.total


def disparity_levels(disparity: np.ndarray) -> list[np.ndarray]:
    """Box-averaged pyramid of a disparity map (repeated exact halving)."""
    h, w = disparity.shape
    levels = [disparity]
    for lw, lh in pyramid_sizes(w, h)[1:]:
        levels.append(resize_array(levels[-1], lw, lh))
    return levels


def _levels_adjoint(grads: list[np.ndarray]) -> np.ndarray:
    g = grads[-1]
    for s in range(len(grads) - 2, -1, -1):
        h, w = grads[s].shape
        g = grads[s] + resize_array_adjoint(g, w, h)
    return g


def _source_depth_levels(source_depth: DepthMap) -> list[DepthMap]:
    disp = source_depth.inverted()
    vals, mask = disp.values, source_depth.mask.astype(np.float64)
    out = [source_depth]
    for lw, lh in pyramid_sizes(source_depth.width, source_depth.height)[1:]:
        vals = resize_array(vals, lw, lh)
        mask = resize_array(mask, lw, lh)
        full = mask > 1.0 - 1e-9
        out.append(DepthMap(np.where(full, 1.0 / np.where(full, vals, 1.0), 0.0), full))
    return out


def level_3d_loss(disparity: np.ndarray, source_depth: DepthMap, pose: RigidTransform, k: Intrinsics,
                  max_iters: int = 20, want_grad: bool = False):
    """3D loss at one level and, optionally, its gradient with ICP held fixed.

    Target pixels are lifted with their disparity and moved by ``pose``; each
    is paired with the source surface point on the same source-camera ray.
    The ICP correction and correspondences are treated as constants, so the
    gradient pulls moved points toward their ICP-corrected targets.
    """
    jac = warp_with_jacobians(disparity, pose, k)
    u, v = jac["u"], jac["v"]
    h, w = disparity.shape
    ok = jac["front"] & in_bounds(u, v, w, h)
    flow = FlowField(np.stack([u, v], axis=-1), ok, jac["q"][..., 2])
    seen = sample_depth(source_depth, flow)
    ok &= seen.mask
    moved = jac["q"][ok]
    dst = backproject_at(u[ok], v[ok], seen.values[ok], k)
    try:
        res = icp_align(moved, dst, max_iters=max_iters)
    except DegenerateCloudError:
        return 0.0, None, None, True
    loss = icp_3d_loss(res)
    if not want_grad:
        return loss, None, None, False
    rot = res.matrix[:3, :3]
    g_moved = np.zeros_like(moved)
    g_moved[res.src_index] = -l1_sign(res.residuals) @ rot
    g_q = np.zeros((h, w, 3))
    g_q[ok] = g_moved
    g_disp = (g_q * jac["dq_dd"]).sum(axis=2)
    g_pose = np.einsum("hwi,hwij->j", g_q, jac["dq_dpose"])
    return loss, g_disp, g_pose, False


def evaluate(problem: PairProblem, want_grad: bool = True) -> Evaluation:
    """Total loss of the current disparity/pose and its gradient.

    The 2D terms have exact gradients. The 3D term (only when the problem
    carries a source depth and omega > 0) uses the fixed-ICP approximation.
    """
    w = problem.weights
    levels = disparity_levels(problem.disparity)
    ms = multiscale_losses(
        problem.target,
        problem.source,
        levels,
        problem.pose,
        problem.intrinsics,
        problem.strategy,
        problem.ssim_params,
        problem.scales_2d,
        weights=w,
        want_grad=want_grad,
    )
    grads = ms.grad_levels if want_grad else None
    g_pose = ms.grad_pose.copy() if want_grad else None
    loss3d = [0.0] * len(levels)
    flags = []
    if problem.source_depth is not None and w.omega > 0:
        src_levels = _source_depth_levels(problem.source_depth)
        for s, (disp, src) in enumerate(zip(levels, src_levels)):
            loss, g_d, g_p, skipped = level_3d_loss(
                disp, src, problem.pose, problem.intrinsics.for_level(s), problem.icp_iters, want_grad
            )
            loss3d[s] = loss
            if skipped:
                flags.append(f"3d-skipped-level-{s}")
            elif want_grad:
                grads[s] = grads[s] + w.omega * g_d
                g_pose += w.omega * g_p
    breakdown = total_loss(
        ms.reconstr,
        ms.ssim,
        ms.smooth_per_scale,
        loss3d,
        w,
        reconstr_per_scale=tuple(t.reconstr for t in ms.levels),
        ssim_per_scale=tuple(t.ssim for t in ms.levels),
        flags=tuple(flags),
    )
    if not want_grad:
        return Evaluation(breakdown, None, None)
    return Evaluation(breakdown, _levels_adjoint(grads), g_pose)


# --- optimisation --------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class OptimizeResult:
    disparity: np.ndarray
    pose: RigidTransform
    trace: list[LossBreakdown]

    @property
    def totals(self) -> np.ndarray:
        return np.array([b.total for b in self.trace])


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inverse(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _schedule(name: str, step: int, steps: int) -> float:
    if name == "constant":
        return 1.0
    if name == "cosine":
        return 0.5 * (1.0 + math.cos(math.pi * step / steps))
    if name == "step":
        return 0.1 ** (step // max(1, steps // 3))
    raise ValueError(f"unknown schedule {name!r}")


def optimize_pair(
    problem: PairProblem,
    steps: int = 500,
    step_size: float = 2e-3,
    schedule: str = "cosine",
    disparity_step_scale: float = 0.03,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    divergence_factor: float = 10.0,
    divergence_floor: float = 1e-6,
    monotone: bool = True,
    backoff: float = 0.5,
    recovery: float = 2.0,
) -> OptimizeResult:
    """Adam on (softplus-parameterised disparity, pose) for a fixed number of steps.

    ``trace[0]`` is the initial loss and ``trace[i]`` the loss after step
    ``i``, so the trace has ``steps + 1`` entries. With ``monotone`` a step
    that would raise the loss is not taken and the step size shrinks by
    ``backoff``; each accepted step grows it again by ``recovery`` up to the
    scheduled value. The L1 terms are not smooth, and without this Adam keeps
    hopping across their kinks near the optimum. Disparity steps are scaled
    by ``disparity_step_scale``: per-pixel sign-like updates otherwise add
    noise that swamps the six pose parameters.
    A step that would be taken with a loss above ``divergence_factor`` times
    the initial loss aborts the run, as does a non-finite loss. Under
    ``monotone`` such a step is never taken, so only non-finite losses abort.
    The initial loss is floored at ``divergence_floor`` for this test: at an
    exact optimum it is rounding noise, and any step off an L1 kink
    multiplies it.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not 0 < backoff < 1:
        raise ValueError("backoff must lie in (0, 1)")
    if recovery < 1:
        raise ValueError("recovery must be >= 1")
    _schedule(schedule, 0, steps)
    theta = softplus_inverse(problem.disparity)
    pose = problem.pose.params.copy()
    m_t, v_t = np.zeros_like(theta), np.zeros_like(theta)
    m_p, v_p = np.zeros(6), np.zeros(6)
    b1, b2 = betas
    current = problem
    ev = evaluate(current)
    trace: list[LossBreakdown] = [ev.breakdown]
    if not math.isfinite(ev.total):
        raise DivergenceError("initial loss is not finite", trace)
    bound = divergence_factor * max(ev.total, divergence_floor)
    mult = 1.0
    for step in range(steps):
        g_theta = ev.grad_disparity * _sigmoid(theta)
        lr = mult * step_size * _schedule(schedule, step, steps)
        n = step + 1
        m_t = b1 * m_t + (1 - b1) * g_theta
        v_t = b2 * v_t + (1 - b2) * g_theta**2
        m_p = b1 * m_p + (1 - b1) * ev.grad_pose
        v_p = b2 * v_p + (1 - b2) * ev.grad_pose**2
        corr = math.sqrt(1 - b2**n) / (1 - b1**n)
        cand_theta = theta - disparity_step_scale * lr * corr * m_t / (np.sqrt(v_t) + eps)
        cand_pose = pose - lr * corr * m_p / (np.sqrt(v_p) + eps)
        try:
            cand = current.with_params(softplus(cand_theta), RigidTransform.from_params(cand_pose))
        except ValueError as exc:  # rotation past pi or disparity underflow
            raise DivergenceError(f"step {n} left the parameter domain: {exc}", trace) from None
        cand_ev = evaluate(cand)
        if not math.isfinite(cand_ev.total):
            trace.append(cand_ev.breakdown)
            raise DivergenceError(f"loss is not finite at step {n}", trace)
        if monotone and cand_ev.total > ev.total:
            mult *= backoff
        else:
            if cand_ev.total > bound:
                trace.append(cand_ev.breakdown)
                raise DivergenceError(
                    f"loss {cand_ev.total:.4g} at step {n} exceeds {divergence_factor:g}x the initial loss", trace
                )
            theta, pose, current, ev = cand_theta, cand_pose, cand, cand_ev
            mult = min(1.0, mult * recovery)
        trace.append(ev.breakdown)
    return OptimizeResult(current.disparity, current.pose, trace)


def perturb_pose(pose: RigidTransform, rotation_deg: float, translation_frac: float, seed: int = 0) -> RigidTransform:
    """Pose off by a rotation of ``rotation_deg`` about a random axis and a
    translation error of ``translation_frac`` of the translation norm."""
    rng = np.random.default_rng(seed)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    delta = RigidTransform(axis * math.radians(rotation_deg), np.zeros(3))
    rotated = delta.compose(pose)
    trans = pose.translation + direction * translation_frac * np.linalg.norm(pose.translation)
    return RigidTransform(rotated.rotation, trans)


def pose_error(estimate: RigidTransform, truth: RigidTransform) -> tuple[float, float]:
    """(rotation error in degrees, translation error relative to |t_true|).

    With a zero true translation the absolute translation error is returned.
    """
    rel = matrix_to_axis_angle(estimate.rotation_matrix.T @ truth.rotation_matrix)
    t_err = np.linalg.norm(estimate.translation - truth.translation)
    t_norm = np.linalg.norm(truth.translation)
    if t_norm > 0:
        t_err /= t_norm
    return math.degrees(float(np.linalg.norm(rel))), float(t_err)
