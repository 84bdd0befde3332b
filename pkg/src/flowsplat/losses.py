"""Training objectives and their gradients w.r.t. rendered quantities.

The photometric term mixes mean absolute error with structural dissimilarity
(1 - SSIM)/2 using an 11x11 Gaussian window (sigma 1.5, zero padding, map
averaged over all pixels). The flow term is the mean squared flow residual
over masked valid pixels; the depth term is a scale-and-shift-invariant MAE
where the prior is affinely aligned to the rendered depth before comparing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve1d

from .errors import DimensionMismatch, InsufficientValidPixels
from .flow import (
    FlowField,
    Mask,
    combine_mask,
    flow_grad_to_depth,
    flow_grad_to_pose,
    projection_flow_with_context,
)
from .rasterizer import RasterSettings, render, render_backward, visibility_map

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass(frozen=True)
class LossWeights:
    """Weights of the photometric / flow / depth mixture."""

    lambda_dssim: float = 0.2
    lambda_rgb: float = 1.0
    lambda_flow: float = 0.1
    lambda_depth: float = 0.05

    def __post_init__(self):
        if min(self.lambda_dssim, self.lambda_rgb, self.lambda_flow, self.lambda_depth) < 0:
            raise ValueError("loss weights must be nonnegative")
        if not 0.0 <= self.lambda_dssim <= 1.0:
            raise ValueError("lambda_dssim must lie in [0, 1]")


def _gaussian_kernel(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    xs = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(xs ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()

_SSIM_KERNEL = _gaussian_kernel()


def _window_filter(img: np.ndarray) -> np.ndarray:
    """Separable Gaussian window average with zero padding (any trailing dims)."""
    out = convolve1d(img, _SSIM_KERNEL, axis=0, mode="constant", cval=0.0)
    return convolve1d(out, _SSIM_KERNEL, axis=1, mode="constant", cval=0.0)


def ssim(x: np.ndarray, y: np.ndarray):
    """Mean SSIM and intermediates for the backward pass.

    Returns (mean, cache); the map matches unit-range constants C1, C2.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionMismatch(f"image shapes differ: {x.shape} vs {y.shape}")
    m_x = _window_filter(x)
    m_y = _window_filter(y)
    m_xx = _window_filter(x * x)
    m_yy = _window_filter(y * y)
    m_xy = _window_filter(x * y)
    a1 = 2.0 * m_x * m_y + SSIM_C1
    a2 = 2.0 * (m_xy - m_x * m_y) + SSIM_C2
    b1 = m_x * m_x + m_y * m_y + SSIM_C1
    b2 = (m_xx - m_x * m_x) + (m_yy - m_y * m_y) + SSIM_C2
    s = (a1 * a2) / (b1 * b2)
    cache = (x, y, m_x, m_y, a1, a2, b1, b2, s)
    return float(s.mean()), cache


def ssim_backward(cache, upstream: float) -> np.ndarray:
    """Gradient of (upstream * mean SSIM) w.r.t. the first image."""
    x, y, m_x, m_y, a1, a2, b1, b2, s = cache
    u = upstream / s.size
    inv_bb = 1.0 / (b1 * b2)
    ds_da1 = a2 * inv_bb
    ds_da2 = a1 * inv_bb
    ds_db1 = -s / b1
    ds_db2 = -s / b2
    g_mx = u * 2.0 * (m_y * ds_da1 - m_y * ds_da2 + m_x * ds_db1 - m_x * ds_db2)
    g_mxx = u * ds_db2
    g_mxy = u * 2.0 * ds_da2
    # The window is symmetric, so the adjoint of the filter is the filter.
    return (
        _window_filter(g_mx)
        + 2.0 * x * _window_filter(g_mxx)
        + y * _window_filter(g_mxy)
    )


def photometric_loss(rendered: np.ndarray, target: np.ndarray, lambda_dssim: float):
    """(1 - l) * L1 + l * (1 - SSIM)/2 and its gradient w.r.t. `rendered`."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise DimensionMismatch(
            f"image shapes differ: {rendered.shape} vs {target.shape}"
        )
    diff = rendered - target
    l1 = float(np.abs(diff).mean())
    grad = (1.0 - lambda_dssim) * np.sign(diff) / diff.size
    loss = (1.0 - lambda_dssim) * l1
    if lambda_dssim > 0.0:
        ssim_mean, cache = ssim(rendered, target)
        loss += lambda_dssim * 0.5 * (1.0 - ssim_mean)
        grad += ssim_backward(cache, -0.5 * lambda_dssim)
    return loss, grad


def flow_loss(projection: FlowField, prior: FlowField, mask: Mask):
    """Mean squared flow residual over masked valid pixels.

    Returns (loss, gradient w.r.t. the projection flow, (H, W, 2)); an empty
    mask yields exactly zero loss and gradient.
    """
    if projection.shape != prior.shape or projection.shape != mask.shape:
        raise DimensionMismatch("flow fields and mask must share dimensions")
    include = mask.bits & projection.valid & prior.valid
    grad = np.zeros(projection.shape + (2,))
    n = int(np.count_nonzero(include))
    if n == 0:
        return 0.0, grad
    ru = np.where(include, projection.u - prior.u, 0.0)
    rv = np.where(include, projection.v - prior.v, 0.0)
    loss = float((ru * ru + rv * rv).sum() / n)
    grad[..., 0] = 2.0 * ru / n
    grad[..., 1] = 2.0 * rv / n
    return loss, grad


def depth_loss(rendered: np.ndarray, prior: np.ndarray, valid: np.ndarray):
    """Scale-and-shift-invariant MAE between rendered and prior depth.

    The prior is affinely aligned to the rendered depth by least squares over
    the valid pixels; the gradient treats the fitted (s, b) as constants.
    """
    rendered = np.asarray(rendered, dtype=np.float64)
    prior = np.asarray(prior, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if rendered.shape != prior.shape or rendered.shape != valid.shape:
        raise DimensionMismatch("depth maps and mask must share dimensions")
    n = int(np.count_nonzero(valid))
    if n < 10:
        raise InsufficientValidPixels(f"depth loss needs >= 10 valid pixels, got {n}")
    pv = prior[valid]
    rv = rendered[valid]
    design = np.stack([pv, np.ones(n)], axis=1)
    (s, b), *_ = np.linalg.lstsq(design, rv, rcond=None)
    res = rv - (s * pv + b)
    loss = float(np.abs(res).mean())
    grad = np.zeros(rendered.shape)
    grad[valid] = np.sign(res) / n
    return loss, grad


@dataclass
class PoseObjectiveResult:
    value: float
    grad_q: np.ndarray
    grad_t: np.ndarray
    rgb: float
    flow: float


def pose_objective(
    cloud,
    pose,
    k,
    target_image: np.ndarray,
    prev_pose,
    prev_depth: np.ndarray | None,
    prior_flow: FlowField | None,
    mask: Mask | None,
    weights: LossWeights,
    settings: RasterSettings = RasterSettings(),
    threads: int = 1,
    compute_grads: bool = True,
) -> PoseObjectiveResult:
    """Pose-estimation objective: lambda_rgb * L_rgb + lambda_flow * L_flow.

    The cloud stays fixed; gradients flow only into the candidate pose. The
    flow term compares the projection flow induced by the previous view's
    rendered depth against the ingested prior under the combined mask.
    """
    value = 0.0
    rgb_part = 0.0
    flow_part = 0.0
    grad_q = np.zeros(4)
    grad_t = np.zeros(3)

    if weights.lambda_rgb > 0.0:
        out = render(cloud, pose, k, settings, early_stop=True, threads=threads)
        rgb_part, d_color = photometric_loss(
            out.color, target_image, weights.lambda_dssim
        )
        value += weights.lambda_rgb * rgb_part
        if compute_grads:
            grads = render_backward(
                cloud, pose, k, out,
                d_color=weights.lambda_rgb * d_color,
                threads=threads,
            )
            grad_q += grads.pose_q
            grad_t += grads.pose_t

    if weights.lambda_flow > 0.0 and prior_flow is not None and prev_depth is not None:
        proj_flow, ctx = projection_flow_with_context(
            prev_depth, prev_pose, pose, k, z_near=settings.z_near
        )
        use_mask = mask if mask is not None else Mask.full(*prior_flow.shape)
        flow_part, d_flow = flow_loss(proj_flow, prior_flow, use_mask)
        value += weights.lambda_flow * flow_part
        if compute_grads and weights.lambda_flow > 0.0:
            gq, gt = flow_grad_to_pose(ctx, weights.lambda_flow * d_flow)
            grad_q += gq
            grad_t += gt

    return PoseObjectiveResult(
        value=value, grad_q=grad_q, grad_t=grad_t, rgb=rgb_part, flow=flow_part
    )


@dataclass
class SceneObjectiveResult:
    value: float
    grads: object
    rgb: float
    flow: float
    depth: float


def scene_objective(
    cloud,
    pose,
    k,
    target_image: np.ndarray,
    prior_depth: np.ndarray | None,
    prior_flow: FlowField | None,
    next_pose,
    rigid: Mask | None,
    weights: LossWeights,
    gamma: float = 0.9,
    settings: RasterSettings = RasterSettings(),
    threads: int = 1,
) -> SceneObjectiveResult:
    """Scene objective: lambda_rgb * L_rgb + lambda_flow * L_flow + lambda_depth * L_depth.

    The pose stays fixed; gradients flow into every Gaussian parameter. The
    flow term reuses this frame's rendered depth, so its gradient reaches the
    scene through the blended depth map. Depth supervision only consumes
    pixels whose rendered alpha exceeds gamma.
    """
    out = render(cloud, pose, k, settings, early_stop=True, threads=threads)
    value = 0.0
    rgb_part = flow_part = depth_part = 0.0
    d_color = None
    d_depth_total = np.zeros(out.depth.shape)

    if weights.lambda_rgb > 0.0:
        rgb_part, grad_rgb = photometric_loss(
            out.color, target_image, weights.lambda_dssim
        )
        value += weights.lambda_rgb * rgb_part
        d_color = weights.lambda_rgb * grad_rgb

    if weights.lambda_depth > 0.0 and prior_depth is not None:
        covered = visibility_map(out, gamma)
        valid = covered & np.isfinite(prior_depth) & (prior_depth > 0.0)
        if int(np.count_nonzero(valid)) >= 10:
            depth_part, grad_depth = depth_loss(out.depth, prior_depth, valid)
            value += weights.lambda_depth * depth_part
            d_depth_total += weights.lambda_depth * grad_depth
        else:
            # Early in training nothing clears the visibility gate yet; the
            # depth term is simply inactive until coverage appears.
            logger.debug("depth term inactive: <10 pixels clear the gate")

    if (
        weights.lambda_flow > 0.0
        and prior_flow is not None
        and next_pose is not None
    ):
        proj_flow, ctx = projection_flow_with_context(
            out.depth, pose, next_pose, k, z_near=settings.z_near
        )
        vis = Mask(visibility_map(out, gamma))
        use_mask = combine_mask(vis, rigid) if rigid is not None else vis
        flow_part, d_flow = flow_loss(proj_flow, prior_flow, use_mask)
        value += weights.lambda_flow * flow_part
        d_depth_total += flow_grad_to_depth(ctx, weights.lambda_flow * d_flow)

    grads = render_backward(
        cloud, pose, k, out,
        d_color=d_color,
        d_depth=d_depth_total,
        threads=threads,
    )
    return SceneObjectiveResult(
        value=value, grads=grads, rgb=rgb_part, flow=flow_part, depth=depth_part
    )
