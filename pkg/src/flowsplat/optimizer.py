"""First-order moment-based optimization of poses and Gaussian parameters."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import PoseSE3, quat_normalize_backward
from .losses import LossWeights, PoseObjectiveResult, pose_objective, scene_objective
from .rasterizer import RasterSettings
from .scene import GaussianCloud

logger = logging.getLogger(__name__)

POSE_LR = 4e-3
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Per-group learning rates of the scene parameters (position scaled by extent).
SCENE_LRS = {
    "positions": 1.6e-4,
    "sh_coeffs": 2.5e-3,
    "opacity_logits": 5e-2,
    "log_scales": 5e-3,
    "rotations": 1e-3,
}


@dataclass
class AdamState:
    """Bias-corrected Adam accumulator for one parameter group."""

    lr: float
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """One Adam update; returns the new parameter array.

    Non-finite gradients skip the group's update entirely (logged), leaving
    both the parameters and the moment state untouched.
    """
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != np.shape(params):
        raise ValueError("gradient shape does not match parameters")
    if not np.all(np.isfinite(grads)):
        logger.warning("non-finite gradient; skipping update for this group")
        return params
    if state.m is None:
        state.m = np.zeros_like(grads)
        state.v = np.zeros_like(grads)
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class PoseParams:
    """Optimizable pose: free 4-vector quaternion (normalized on read) + t."""

    q: np.ndarray
    t: np.ndarray

    @classmethod
    def from_pose(cls, pose: PoseSE3) -> "PoseParams":
        return cls(q=pose.q.copy(), t=pose.t.copy())

    def to_pose(self) -> PoseSE3:
        return PoseSE3(self.q, self.t)


def predict_pose_const_velocity(
    pose_prev2: PoseSE3 | None, pose_prev: PoseSE3
) -> PoseSE3:
    """Componentwise linear extrapolation of the previous two poses.

    The older quaternion is sign-aligned to the newer one before the
    extrapolation; the result is re-normalized. With a single predecessor the
    previous pose is returned unchanged.
    """
    if pose_prev2 is None:
        return pose_prev.copy()
    q2 = pose_prev2.q
    q1 = pose_prev.q
    if float(np.dot(q1, q2)) < 0.0:
        q2 = -q2
    q = q1 + (q1 - q2)
    if np.linalg.norm(q) < 1e-12:
        q = q1
    t = pose_prev.t + (pose_prev.t - pose_prev2.t)
    return PoseSE3(q, t)


@dataclass
class PoseEstimationContext:
    """Inputs that stay fixed while one frame's pose is optimized."""

    target_image: np.ndarray
    prev_pose: PoseSE3
    prev_depth: np.ndarray | None
    prior_flow: object | None
    mask: object | None


def estimate_pose(
    ctx: PoseEstimationContext,
    cloud: GaussianCloud,
    init: PoseSE3,
    k,
    iters: int,
    weights: LossWeights,
    settings: RasterSettings = RasterSettings(),
    lr: float = POSE_LR,
    threads: int = 1,
    on_iteration=None,
) -> tuple[PoseSE3, float]:
    """Minimize the pose objective for `iters` Adam steps; best iterate wins.

    Returns (pose, objective) for the lowest objective seen across the
    initial pose, every intermediate iterate, and the final one.
    """
    if iters <= 0:
        res = _eval_pose(ctx, cloud, init, k, weights, settings, threads, grads=False)
        return init.copy(), res.value

    params = PoseParams.from_pose(init)
    state_q = AdamState(lr=lr)
    state_t = AdamState(lr=lr)
    best_value = np.inf
    best_pose = init.copy()

    for i in range(iters):
        pose = params.to_pose()
        res = _eval_pose(ctx, cloud, pose, k, weights, settings, threads, grads=True)
        if not np.isfinite(res.value):
            raise FloatingPointError(
                f"pose objective became non-finite at iteration {i}"
            )
        if res.value < best_value:
            best_value = res.value
            best_pose = pose
        if on_iteration is not None:
            on_iteration(i, res)
        grad_q_raw = quat_normalize_backward(params.q, res.grad_q)
        params.q = adam_step(state_q, params.q, grad_q_raw)
        params.t = adam_step(state_t, params.t, res.grad_t)

    final_pose = params.to_pose()
    final = _eval_pose(ctx, cloud, final_pose, k, weights, settings, threads, grads=False)
    if np.isfinite(final.value) and final.value < best_value:
        best_value = final.value
        best_pose = final_pose
    return best_pose, float(best_value)


def _eval_pose(ctx, cloud, pose, k, weights, settings, threads, grads) -> PoseObjectiveResult:
    return pose_objective(
        cloud,
        pose,
        k,
        ctx.target_image,
        ctx.prev_pose,
        ctx.prev_depth,
        ctx.prior_flow,
        ctx.mask,
        weights,
        settings=settings,
        threads=threads,
        compute_grads=grads,
    )


@dataclass
class SceneOptimizer:
    """Owns the per-group Adam states and densification statistics."""

    cloud: GaussianCloud
    position_lr_scale: float
    lrs: dict = field(default_factory=lambda: dict(SCENE_LRS))
    states: dict = field(default_factory=dict)
    grad_accum: np.ndarray | None = None
    grad_count: np.ndarray | None = None

    def __post_init__(self):
        self._reset_states()

    def _reset_states(self):
        self.states = {}
        for name, lr in self.lrs.items():
            if name == "positions":
                lr = lr * self.position_lr_scale
            self.states[name] = AdamState(lr=lr)
        self.reset_grad_stats()

    def reset_grad_stats(self):
        n = self.cloud.num
        self.grad_accum = np.zeros(n)
        self.grad_count = np.zeros(n)

    def mean_position_gradients(self) -> np.ndarray:
        return self.grad_accum / np.maximum(self.grad_count, 1.0)

    def replace_cloud(self, cloud: GaussianCloud):
        """Swap in a densified/pruned cloud; optimizer state restarts."""
        self.cloud = cloud
        self._reset_states()

    def step(self, grads) -> None:
        """Apply one Adam step per parameter group and record 2D grad stats."""
        cloud = self.cloud
        cloud.positions = adam_step(
            self.states["positions"], cloud.positions, grads.positions
        )
        cloud.sh_coeffs = adam_step(
            self.states["sh_coeffs"], cloud.sh_coeffs, grads.sh_coeffs
        )
        cloud.opacity_logits = adam_step(
            self.states["opacity_logits"], cloud.opacity_logits, grads.opacity_logits
        )
        cloud.log_scales = adam_step(
            self.states["log_scales"], cloud.log_scales, grads.log_scales
        )
        cloud.rotations = adam_step(
            self.states["rotations"], cloud.rotations, grads.rotations
        )
        cloud.normalize_rotations()
        self.grad_accum += grads.pos2d_norm
        self.grad_count += grads.visible.astype(np.float64)


def optimize_scene_step(
    frame,
    opt: SceneOptimizer,
    k,
    weights: LossWeights,
    next_pose=None,
    gamma: float = 0.9,
    settings: RasterSettings = RasterSettings(),
    threads: int = 1,
):
    """One scene-objective Adam step on a sampled frame (pose held fixed)."""
    result = scene_objective(
        opt.cloud,
        frame.estimated_pose,
        k,
        frame.image,
        frame.prior_depth,
        frame.flow_to_next_train,
        next_pose,
        frame.rigid,
        weights,
        gamma=gamma,
        settings=settings,
        threads=threads,
    )
    opt.step(result.grads)
    return result
