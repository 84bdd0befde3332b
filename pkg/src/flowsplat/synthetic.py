"""Synthetic scene, trajectory and prior generation.

Replaces the external depth/flow networks for testing: builds a textured
Gaussian surface patch, renders ground-truth images and depths with the
reference renderer along a smooth camera arc, derives the optical-flow
pseudo-ground-truth analytically from the rendered depth and pose pairs, and
optionally corrupts the priors (per-frame affine depth error, off-epipolar
outlier flow patches) to exercise the robustness machinery.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .flow import FlowField, projection_flow
from .formats import (
    write_flo,
    write_intrinsics,
    write_pfm,
    write_png,
    write_poses,
)
from .geometry import CameraIntrinsics, PoseSE3, fundamental_from_poses
from .pipeline import FrameRecord, assign_roles, prepare_training_flows
from .rasterizer import RasterSettings, naive_render
from .scene import GaussianCloud, logit

logger = logging.getLogger(__name__)


@dataclass
class SyntheticSpec:
    """Declarative description of a generated dataset."""

    n_frames: int = 20
    n_gaussians: int = 5000
    width: int = 160
    height: int = 120
    focal: float = 140.0
    seed: int = 0

    surface_depth: float = 3.0
    surface_relief: float = 0.22
    surface_margin: float = 1.45  # patch half-extent vs frustum half-extent
    texture: str = "random"  # "random" | "low"
    gaussian_opacity: float = 0.97
    scale_factor: float = 0.8  # Gaussian sigma as a fraction of grid spacing

    traj_arc_radius: float = 1.5
    traj_arc_degrees: float = 15.0
    traj_height_amp: float = 0.15
    traj_depth_amp: float = 0.25

    depth_scale_range: tuple = (1.0, 1.0)
    depth_shift_range: tuple = (0.0, 0.0)
    outlier_fraction: float = 0.0
    outlier_offset_px: float = 6.0
    outlier_patch: int = 12


@dataclass
class SyntheticDataset:
    records: list
    k: CameraIntrinsics
    gt_poses: list
    gt_cloud: GaussianCloud
    gt_depths: list
    outlier_masks: list = field(default_factory=list)  # per frame, source pixels
    spec: SyntheticSpec | None = None

    @property
    def trajectory_extent(self) -> float:
        centers = np.stack([p.camera_center for p in self.gt_poses])
        diffs = centers[None, :, :] - centers[:, None, :]
        return float(np.sqrt((diffs ** 2).sum(axis=2)).max())


def _smooth_field(rng, xs, ys, terms=4, freq_range=(0.5, 2.0)):
    """Random low-frequency cosine mixture over the patch, in [-1, 1]."""
    amps = rng.uniform(0.4, 1.0, terms)
    wx = rng.uniform(*freq_range, terms) * rng.choice([-1.0, 1.0], terms)
    wy = rng.uniform(*freq_range, terms) * rng.choice([-1.0, 1.0], terms)
    phases = rng.uniform(0.0, 2.0 * np.pi, terms)
    out = np.zeros_like(xs)
    for a, fx, fy, ph in zip(amps, wx, wy, phases):
        out += a * np.cos(fx * xs + fy * ys + ph)
    return out / amps.sum()


def _build_surface(spec: SyntheticSpec, rng) -> GaussianCloud:
    half_w = spec.surface_depth * (spec.width / 2.0) / spec.focal
    half_h = spec.surface_depth * (spec.height / 2.0) / spec.focal
    ex = half_w * spec.surface_margin + spec.traj_arc_radius * np.radians(
        spec.traj_arc_degrees
    )
    ey = half_h * spec.surface_margin + spec.traj_height_amp

    nx = int(round(np.sqrt(spec.n_gaussians * ex / ey)))
    ny = max(int(round(spec.n_gaussians / max(nx, 1))), 2)
    xs = np.linspace(-ex, ex, nx)
    ys = np.linspace(-ey, ey, ny)
    gx, gy = np.meshgrid(xs, ys)
    spacing = float(xs[1] - xs[0])
    gx = gx + rng.uniform(-0.3, 0.3, gx.shape) * spacing
    gy = gy + rng.uniform(-0.3, 0.3, gy.shape) * spacing

    relief = _smooth_field(rng, gx / ex * np.pi, gy / ey * np.pi)
    gz = spec.surface_depth + spec.surface_relief * relief

    n = gx.size
    positions = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    sigma = spec.scale_factor * spacing
    log_scales = np.full((n, 3), np.log(sigma))
    opacity = np.full(n, logit(spec.gaussian_opacity))

    if spec.texture == "low":
        base = 0.55
        albedo = np.stack(
            [
                base + 0.05 * gx.ravel() / ex + 0.02 * gy.ravel() / ey,
                base + 0.04 * gx.ravel() / ex,
                base + 0.03 * gx.ravel() / ex - 0.02 * gy.ravel() / ey,
            ],
            axis=1,
        )
    else:
        channels = []
        for _ in range(3):
            tex = _smooth_field(rng, gx / ex * 2 * np.pi, gy / ey * 2 * np.pi, terms=5)
            channels.append(0.5 + 0.32 * tex)
        albedo = np.stack([c.ravel() for c in channels], axis=1)
    albedo = np.clip(albedo, 0.08, 0.92)

    from .scene import SH_C0

    sh = np.zeros((n, 1, 3))
    sh[:, 0, :] = (albedo - 0.5) / SH_C0
    return GaussianCloud(positions, rotations, log_scales, opacity, sh)


def _look_at_pose(center: np.ndarray, target: np.ndarray) -> PoseSE3:
    """World-to-camera pose looking from `center` toward `target` (y down)."""
    fwd = target - center
    fwd = fwd / np.linalg.norm(fwd)
    world_up = np.array([0.0, 1.0, 0.0])
    right = np.cross(world_up, fwd)
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    # Rotation matrix -> quaternion (Shepperd's method)
    tr = np.trace(rot)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [
                0.25 * s,
                (rot[2, 1] - rot[1, 2]) / s,
                (rot[0, 2] - rot[2, 0]) / s,
                (rot[1, 0] - rot[0, 1]) / s,
            ]
        )
    else:
        i = int(np.argmax(np.diag(rot)))
        j, l = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(1.0 + rot[i, i] - rot[j, j] - rot[l, l], 0.0)) * 2.0
        q = np.empty(4)
        q[0] = (rot[l, j] - rot[j, l]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (rot[j, i] + rot[i, j]) / s
        q[1 + l] = (rot[l, i] + rot[i, l]) / s
    return PoseSE3(q, -(rot @ center))


def _trajectory(spec: SyntheticSpec) -> list[PoseSE3]:
    target = np.array([0.0, 0.0, spec.surface_depth])
    theta_max = np.radians(spec.traj_arc_degrees)
    poses = []
    for t in range(spec.n_frames):
        theta = theta_max * t / max(spec.n_frames - 1, 1)
        center = np.array(
            [
                spec.traj_arc_radius * np.sin(theta),
                spec.traj_height_amp * (1.0 - np.cos(theta)),
                spec.traj_depth_amp * (1.0 - np.cos(theta)),
            ]
        )
        if t == 0:
            poses.append(PoseSE3.identity())
        else:
            poses.append(_look_at_pose(center, target))
    return poses


def _inject_outliers(flow: FlowField, pose_a, pose_b, k, spec, rng):
    """Displace rectangular flow patches perpendicular to their epipolar lines."""
    h, w = flow.shape
    total = h * w
    patch = spec.outlier_patch
    n_patches = int(round(spec.outlier_fraction * total / (patch * patch)))
    mask = np.zeros((h, w), dtype=bool)
    if n_patches == 0:
        return flow, mask
    f = fundamental_from_poses(pose_a, pose_b, k).f
    u = flow.u.copy()
    v = flow.v.copy()
    for _ in range(n_patches):
        y0 = int(rng.integers(0, h - patch))
        x0 = int(rng.integers(0, w - patch))
        cx, cy = x0 + patch / 2.0, y0 + patch / 2.0
        line = f @ np.array([cx, cy, 1.0])
        n_vec = np.array([line[0], line[1]])
        norm = np.linalg.norm(n_vec)
        if norm < 1e-12:
            n_vec = np.array([1.0, 0.0])
        else:
            n_vec = n_vec / norm
        sign = 1.0 if rng.random() < 0.5 else -1.0
        u[y0 : y0 + patch, x0 : x0 + patch] += sign * spec.outlier_offset_px * n_vec[0]
        v[y0 : y0 + patch, x0 : x0 + patch] += sign * spec.outlier_offset_px * n_vec[1]
        mask[y0 : y0 + patch, x0 : x0 + patch] = True
    return FlowField(u=u, v=v, valid=flow.valid.copy()), mask


def generate_synthetic(
    spec: SyntheticSpec, test_every: int = 0, settings: RasterSettings = RasterSettings()
) -> SyntheticDataset:
    """Build the ground-truth scene, render priors, and bundle frame records."""
    rng = np.random.default_rng(spec.seed)
    cloud = _build_surface(spec, rng)
    poses = _trajectory(spec)
    k = CameraIntrinsics(
        fx=spec.focal,
        fy=spec.focal,
        cx=spec.width / 2.0,
        cy=spec.height / 2.0,
        width=spec.width,
        height=spec.height,
    )

    renders = [naive_render(cloud, pose, k, settings) for pose in poses]
    gt_depths = [out.depth.copy() for out in renders]

    records = []
    outlier_masks = []
    scale_lo, scale_hi = spec.depth_scale_range
    shift_lo, shift_hi = spec.depth_shift_range
    for t, (pose, out) in enumerate(zip(poses, renders)):
        depth_valid = out.alpha > 0.98
        scale = float(rng.uniform(scale_lo, scale_hi))
        shift = float(rng.uniform(shift_lo, shift_hi))
        prior_depth = np.where(depth_valid, scale * out.depth + shift, 0.0)

        flow = None
        mask = np.zeros((spec.height, spec.width), dtype=bool)
        if t + 1 < len(poses):
            flow = projection_flow(
                np.where(depth_valid, out.depth, 0.0), pose, poses[t + 1], k
            )
            if spec.outlier_fraction > 0.0:
                flow, mask = _inject_outliers(flow, pose, poses[t + 1], k, spec, rng)
        outlier_masks.append(mask)
        records.append(
            FrameRecord(
                index=t,
                image=out.color.copy(),
                prior_depth=prior_depth,
                prior_flow_forward=flow,
            )
        )

    assign_roles(records, test_every)
    prepare_training_flows(records)
    logger.info(
        "synthetic dataset: %d frames, %d gaussians, extent %.3f",
        spec.n_frames,
        cloud.num,
        SyntheticDataset(records, k, poses, cloud, gt_depths).trajectory_extent,
    )
    return SyntheticDataset(
        records=records,
        k=k,
        gt_poses=poses,
        gt_cloud=cloud,
        gt_depths=gt_depths,
        outlier_masks=outlier_masks,
        spec=spec,
    )


def write_dataset(dataset: SyntheticDataset, out_dir):
    """Serialize a synthetic dataset in the ingestion layout."""
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(exist_ok=True)
    (root / "flow").mkdir(exist_ok=True)
    write_intrinsics(root / "intrinsics.txt", dataset.k)
    write_poses(root / "gt_poses.txt", dataset.gt_poses)
    for rec in dataset.records:
        write_png(root / "images" / f"{rec.index:06d}.png", rec.image)
        write_pfm(root / "depth" / f"{rec.index:06d}.pfm", rec.prior_depth)
        if rec.prior_flow_forward is not None:
            write_flo(
                root / "flow" / f"{rec.index:06d}_fwd.flo",
                rec.prior_flow_forward.u,
                rec.prior_flow_forward.v,
                rec.prior_flow_forward.valid,
            )
    dataset.gt_cloud.save(root / "gt_scene.fsgs")
    meta = {"spec": asdict(dataset.spec)} if dataset.spec else {}
    meta["n_gaussians_actual"] = dataset.gt_cloud.num
    (root / "generator_meta.json").write_text(json.dumps(meta, indent=2) + "\n")
