"""End-to-end progressive reconstruction and evaluation.

The loop follows the incremental recipe: initialize the cloud from the first
frame's depth prior at the identity pose, then for every subsequent training
frame predict its pose by constant velocity, refine it against the flow and
photometric objectives with the cloud frozen, and interleave scene-parameter
updates on randomly sampled processed frames with periodic density control.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import LengthMismatch, PipelineError
from .flow import FlowField, Mask, combine_mask, compose_flow, load_flow, rigid_mask
from .formats import read_intrinsics, read_png, read_poses
from .geometry import (
    CameraIntrinsics,
    PoseSE3,
    relative_pose,
    rotation_angle_deg,
)
from .losses import ssim
from .optimizer import (
    PoseEstimationContext,
    SceneOptimizer,
    estimate_pose,
    optimize_scene_step,
    predict_pose_const_velocity,
)
from .rasterizer import render, visibility_map
from .scene import GaussianCloud, densify_and_prune, init_from_depth

logger = logging.getLogger(__name__)


@dataclass
class FrameRecord:
    """One input frame with its priors and reconstruction state."""

    index: int
    image: np.ndarray
    prior_depth: np.ndarray | None = None
    prior_flow_forward: FlowField | None = None  # toward the next sequence frame
    role: str = "train"
    estimated_pose: PoseSE3 | None = None
    rigid: Mask | None = None
    flow_to_next_train: FlowField | None = None


@dataclass
class TrajectoryMetrics:
    ate: float
    rpe_t: float
    rpe_r: float


@dataclass
class ReconstructionResult:
    cloud: GaussianCloud
    trajectory: list  # (frame index, PoseSE3) for every training frame
    count_history: list = field(default_factory=list)  # (iteration, N, cause)
    pose_history: list = field(default_factory=list)

    @property
    def poses(self):
        return [p for _, p in self.trajectory]


# ---------------------------------------------------------------------------
# Dataset ingestion
# ---------------------------------------------------------------------------

def assign_roles(records: list[FrameRecord], test_every: int):
    """Hold out every test_every-th frame, keeping frame 0 in the train split."""
    for rec in records:
        is_test = test_every > 0 and (rec.index + 1) % test_every == 0
        rec.role = "test" if is_test else "train"


def prepare_training_flows(records: list[FrameRecord]):
    """Fill flow_to_next_train on train frames, chaining across held-out ones.

    This is an ingestion step: after it runs, reconstruction reads nothing
    from non-training records.
    """
    by_index = {rec.index: rec for rec in records}
    train = [rec for rec in records if rec.role == "train"]
    for a, b in zip(train, train[1:]):
        flow = a.prior_flow_forward
        idx = a.index + 1
        while flow is not None and idx < b.index:
            mid = by_index.get(idx)
            nxt = mid.prior_flow_forward if mid is not None else None
            flow = compose_flow(flow, nxt) if nxt is not None else None
            idx += 1
        a.flow_to_next_train = flow
        if flow is None and a.prior_flow_forward is not None:
            logger.warning(
                "no chained flow from frame %d to %d; flow loss skipped there",
                a.index,
                b.index,
            )


def load_dataset(path, config: RunConfig):
    """Load a dataset directory into frame records.

    Layout: images/%06d.png, depth/%06d.pfm, flow/%06d_fwd.flo,
    intrinsics.txt, optional gt_poses.txt.
    """
    from .flow import load_depth

    root = Path(path)
    intr = root / "intrinsics.txt"
    if not intr.exists():
        raise FileNotFoundError(f"missing intrinsics file: {intr}")
    k = read_intrinsics(intr)

    records = []
    i = 0
    while True:
        img_path = root / "images" / f"{i:06d}.png"
        if not img_path.exists():
            break
        image = read_png(img_path)
        depth_path = root / "depth" / f"{i:06d}.pfm"
        depth = load_depth(depth_path) if depth_path.exists() else None
        flow_path = root / "flow" / f"{i:06d}_fwd.flo"
        flow = load_flow(flow_path) if flow_path.exists() else None
        records.append(
            FrameRecord(index=i, image=image, prior_depth=depth, prior_flow_forward=flow)
        )
        i += 1
    if not records:
        raise FileNotFoundError(f"no frames found under {root / 'images'}")

    gt_path = root / "gt_poses.txt"
    gt_poses = read_poses(gt_path) if gt_path.exists() else None

    assign_roles(records, config.test_every)
    prepare_training_flows(records)
    return records, k, gt_poses


# ---------------------------------------------------------------------------
# Reconstruction
# ---------------------------------------------------------------------------

def reconstruct(
    records: list[FrameRecord], k: CameraIntrinsics, config: RunConfig
) -> ReconstructionResult:
    """Jointly recover training-frame poses and the Gaussian scene."""
    train = [rec for rec in records if rec.role == "train"]
    if len(train) < 2:
        raise PipelineError(f"need at least 2 training frames, got {len(train)}")
    first = train[0]
    if first.prior_depth is None:
        raise PipelineError("first training frame has no depth prior", first.index)
    if any(rec.flow_to_next_train is None for rec in train[:-1]):
        prepare_training_flows(records)

    rng = np.random.default_rng(config.seed)
    weights = config.weights()
    settings = config.raster_settings()
    threads = max(config.threads, 1)

    first.estimated_pose = PoseSE3.identity()
    cloud = init_from_depth(
        first.image,
        first.prior_depth,
        first.estimated_pose,
        k,
        stride=config.init_stride,
        sh_degree=config.sh_degree,
    )
    first.rigid = Mask.full(k.height, k.width, True)
    opt = SceneOptimizer(cloud, position_lr_scale=cloud.extent)
    _configure_adam(opt, config)

    result = ReconstructionResult(cloud=cloud, trajectory=[])
    result.count_history.append((0, cloud.num, "init"))
    state = {"iteration": 0}

    logger.info("initialized %d gaussians from frame %d", cloud.num, first.index)
    for _ in range(config.init_iters):
        _scene_iteration(first, None, opt, k, weights, config, settings, threads, state, result, rng)

    for j in range(1, len(train)):
        cur = train[j]
        prev = train[j - 1]
        prev2 = train[j - 2] if j >= 2 else None
        predicted = predict_pose_const_velocity(
            prev2.estimated_pose if prev2 else None, prev.estimated_pose
        )

        prev_render = render(opt.cloud, prev.estimated_pose, k, settings, threads=threads)
        vis = Mask(visibility_map(prev_render, config.gamma))
        mask = combine_mask(vis, prev.rigid) if prev.rigid is not None else vis
        ctx = PoseEstimationContext(
            target_image=cur.image,
            prev_pose=prev.estimated_pose,
            prev_depth=prev_render.depth,
            prior_flow=prev.flow_to_next_train,
            mask=mask,
        )
        try:
            pose, objective = estimate_pose(
                ctx,
                opt.cloud,
                predicted,
                k,
                config.iters_pose,
                weights,
                settings=settings,
                lr=config.pose_lr,
                threads=threads,
            )
        except FloatingPointError as exc:
            raise PipelineError(str(exc), cur.index) from exc
        cur.estimated_pose = pose
        cur.rigid = _frame_rigid_mask(prev, cur, k, config)
        result.pose_history.append(
            {"index": cur.index, "objective": objective}
        )
        logger.info(
            "frame %d posed (objective %.6g, %d gaussians)",
            cur.index,
            objective,
            opt.cloud.num,
        )

        for _ in range(config.iters_scene):
            pick = int(rng.integers(0, j + 1))
            frame = train[pick]
            nxt = train[pick + 1] if pick + 1 <= j else None
            _scene_iteration(
                frame, nxt, opt, k, weights, config, settings, threads, state, result, rng
            )

    result.cloud = opt.cloud
    result.trajectory = [(rec.index, rec.estimated_pose) for rec in train]
    return result


def _configure_adam(opt: SceneOptimizer, config: RunConfig):
    for st in opt.states.values():
        st.beta1 = config.adam_beta1
        st.beta2 = config.adam_beta2
        st.eps = config.adam_eps


def _frame_rigid_mask(prev: FrameRecord, cur: FrameRecord, k, config: RunConfig) -> Mask:
    if not config.consistency_check or prev.flow_to_next_train is None:
        return Mask.full(k.height, k.width, True)
    return rigid_mask(
        prev.flow_to_next_train,
        prev.estimated_pose,
        cur.estimated_pose,
        k,
        config.beta,
    )


def _scene_iteration(
    frame, next_frame, opt, k, weights, config, settings, threads, state, result, rng
):
    next_pose = next_frame.estimated_pose if next_frame is not None else None
    res = optimize_scene_step(
        frame,
        opt,
        k,
        weights,
        next_pose=next_pose,
        gamma=config.gamma,
        settings=settings,
        threads=threads,
    )
    if not np.isfinite(res.value):
        raise PipelineError("scene objective became non-finite", frame.index)
    state["iteration"] += 1
    if (
        config.densify_interval > 0
        and state["iteration"] % config.densify_interval == 0
    ):
        if opt.cloud.num >= config.max_gaussians:
            logger.info(
                "skipping density control at %d gaussians (cap %d)",
                opt.cloud.num,
                config.max_gaussians,
            )
            opt.reset_grad_stats()
            return
        new_cloud = densify_and_prune(
            opt.cloud,
            opt.mean_position_gradients(),
            config.opacity_floor,
            config.densify_grad_threshold,
            rng=rng,
            percent_dense=config.percent_dense,
            split_factor=config.split_factor,
        )
        if new_cloud.num != opt.cloud.num:
            result.count_history.append(
                (state["iteration"], new_cloud.num, "densify_and_prune")
            )
        opt.replace_cloud(new_cloud)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio on unit-range images, capped at 100 dB."""
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - b) ** 2))
    if mse == 0.0:
        return 100.0
    return float(min(10.0 * np.log10(1.0 / mse), 100.0))


def evaluate_nvs(
    cloud: GaussianCloud,
    frames: list[FrameRecord],
    records: list[FrameRecord],
    k: CameraIntrinsics,
    config: RunConfig,
):
    """Render each frame against the frozen cloud and score PSNR/SSIM.

    Frames without a pose (held-out views) first get one by running the pose
    objective against the frozen cloud, initialized by constant velocity from
    the nearest preceding posed frames and guided by the raw flow prior into
    the frame.
    """
    by_index = {rec.index: rec for rec in records}
    settings = config.raster_settings()
    weights = config.weights()
    threads = max(config.threads, 1)

    per_frame = []
    for frame in frames:
        pose = frame.estimated_pose
        if pose is None:
            pose = _fit_test_pose(cloud, frame, by_index, k, config, weights, settings, threads)
        out = render(cloud, pose, k, settings, threads=threads)
        value_psnr = psnr(out.color, frame.image)
        value_ssim, _ = ssim(out.color, frame.image)
        per_frame.append(
            {
                "index": frame.index,
                "psnr": value_psnr,
                "ssim": value_ssim,
                "pose": pose,
            }
        )
    mean_psnr = float(np.mean([f["psnr"] for f in per_frame])) if per_frame else 0.0
    mean_ssim = float(np.mean([f["ssim"] for f in per_frame])) if per_frame else 0.0
    return {"per_frame": per_frame, "psnr_mean": mean_psnr, "ssim_mean": mean_ssim}


def _fit_test_pose(cloud, frame, by_index, k, config, weights, settings, threads):
    prev = by_index.get(frame.index - 1)
    prev2 = by_index.get(frame.index - 2)
    posed_prev = prev is not None and prev.estimated_pose is not None
    if posed_prev:
        init = predict_pose_const_velocity(
            prev2.estimated_pose if prev2 is not None else None,
            prev.estimated_pose,
        )
    else:
        candidates = [
            r for r in by_index.values() if r.estimated_pose is not None
        ]
        if not candidates:
            raise PipelineError("no posed frames to initialize from", frame.index)
        nearest = min(candidates, key=lambda r: abs(r.index - frame.index))
        init = nearest.estimated_pose.copy()

    if posed_prev and prev.prior_flow_forward is not None:
        prev_render = render(cloud, prev.estimated_pose, k, settings, threads=threads)
        vis = Mask(visibility_map(prev_render, config.gamma))
        mask = combine_mask(vis, prev.rigid) if prev.rigid is not None else vis
        ctx = PoseEstimationContext(
            target_image=frame.image,
            prev_pose=prev.estimated_pose,
            prev_depth=prev_render.depth,
            prior_flow=prev.prior_flow_forward,
            mask=mask,
        )
    else:
        anchor = init
        ctx = PoseEstimationContext(
            target_image=frame.image,
            prev_pose=anchor,
            prev_depth=None,
            prior_flow=None,
            mask=None,
        )
    pose, _ = estimate_pose(
        ctx, cloud, init, k, config.iters_pose, weights,
        settings=settings, lr=config.pose_lr, threads=threads,
    )
    return pose


def umeyama_sim3(src: np.ndarray, dst: np.ndarray):
    """Least-squares similarity (s, R, t) with dst ~ s R src + t."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    src_c = src - mu_s
    dst_c = dst - mu_d
    cov = dst_c.T @ src_c / src.shape[0]
    u, d, vt = np.linalg.svd(cov)
    s_fix = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s_fix[2, 2] = -1.0
    rot = u @ s_fix @ vt
    var_src = float((src_c ** 2).sum() / src.shape[0])
    if var_src < 1e-18:
        scale = 1.0
    else:
        scale = float(np.trace(np.diag(d) @ s_fix) / var_src)
    trans = mu_d - scale * (rot @ mu_s)
    return scale, rot, trans


def evaluate_trajectory(estimated, ground_truth) -> TrajectoryMetrics:
    """ATE after Sim(3) alignment of camera centers plus consecutive-pair RPE."""
    if len(estimated) != len(ground_truth):
        raise LengthMismatch(
            f"trajectory lengths differ: {len(estimated)} vs {len(ground_truth)}"
        )
    if len(estimated) < 2:
        raise LengthMismatch("need at least 2 poses to evaluate")
    est_pts = np.stack([p.camera_center for p in estimated])
    gt_pts = np.stack([p.camera_center for p in ground_truth])
    scale, rot, trans = umeyama_sim3(est_pts, gt_pts)
    aligned = (scale * (rot @ est_pts.T)).T + trans
    ate = float(np.sqrt(np.mean(np.sum((aligned - gt_pts) ** 2, axis=1))))

    t_errs = []
    r_errs = []
    for i in range(len(estimated) - 1):
        delta_est = relative_pose(estimated[i], estimated[i + 1])
        delta_gt = relative_pose(ground_truth[i], ground_truth[i + 1])
        err = relative_pose(delta_gt, delta_est)
        t_errs.append(float(np.linalg.norm(err.t)))
        r_errs.append(rotation_angle_deg(err.q))
    return TrajectoryMetrics(
        ate=ate, rpe_t=float(np.mean(t_errs)), rpe_r=float(np.mean(r_errs))
    )
