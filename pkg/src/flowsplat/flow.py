"""Projection flow, flow masking, and ingestion of external flow/depth priors.

The projection flow unprojects every source pixel with the rendered depth at
the source pose and reprojects it into the target pose; comparing it against
an ingested optical-flow prior is what drives pose estimation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateBaseline, DimensionMismatch
from .formats import read_flo, read_pfm
from .geometry import (
    CameraIntrinsics,
    PoseSE3,
    fundamental_from_poses,
    quat_tangent_project,
    quat_to_matrix_jac,
    sampson_distances,
)

DEFAULT_Z_NEAR = 1e-4


@dataclass
class FlowField:
    """Dense per-pixel displacement (target minus source), with validity."""

    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        if self.u.shape != self.v.shape or self.u.shape != self.valid.shape:
            raise DimensionMismatch("flow components must share one shape")

    @property
    def shape(self):
        return self.u.shape

    @classmethod
    def zeros(cls, height, width):
        return cls(
            np.zeros((height, width)),
            np.zeros((height, width)),
            np.ones((height, width), dtype=bool),
        )


@dataclass
class Mask:
    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)

    @property
    def shape(self):
        return self.bits.shape

    @classmethod
    def full(cls, height, width, value=True):
        return cls(np.full((height, width), value, dtype=bool))


def combine_mask(m_v: Mask, m_r: Mask) -> Mask:
    """Elementwise conjunction of the visibility and rigidity masks."""
    if m_v.shape != m_r.shape:
        raise DimensionMismatch(
            f"mask shapes differ: {m_v.shape} vs {m_r.shape}"
        )
    return Mask(m_v.bits & m_r.bits)


@dataclass
class ProjectionFlowContext:
    """Intermediates of projection_flow needed for its analytic gradients."""

    rays: np.ndarray  # (H, W, 3) camera-frame rays of the source view
    points: np.ndarray  # (H, W, 3) world points
    p_cam2: np.ndarray  # (H, W, 3) points in the target camera frame
    valid: np.ndarray
    pose_t: PoseSE3
    pose_next: PoseSE3
    k: CameraIntrinsics


def projection_flow_with_context(
    rendered_depth: np.ndarray,
    pose_t: PoseSE3,
    pose_next: PoseSE3,
    k: CameraIntrinsics,
    z_near: float = DEFAULT_Z_NEAR,
):
    depth = np.asarray(rendered_depth, dtype=np.float64)
    h, w = depth.shape
    valid = np.isfinite(depth) & (depth > 0.0)
    us = np.arange(w, dtype=np.float64)
    vs = np.arange(h, dtype=np.float64)
    uu, vv = np.meshgrid(us, vs)
    rays = np.empty((h, w, 3))
    rays[..., 0] = (uu - k.cx) / k.fx
    rays[..., 1] = (vv - k.cy) / k.fy
    rays[..., 2] = 1.0

    safe_depth = np.where(valid, depth, 1.0)
    p_cam1 = rays * safe_depth[..., None]
    r1 = pose_t.rotation
    points = (p_cam1 - pose_t.t) @ r1  # R^T (p - t) batched over pixels
    r2 = pose_next.rotation
    p_cam2 = points @ r2.T + pose_next.t
    z2 = p_cam2[..., 2]
    valid = valid & (z2 > z_near)
    safe_z2 = np.where(valid, z2, 1.0)
    u2 = k.fx * p_cam2[..., 0] / safe_z2 + k.cx
    v2 = k.fy * p_cam2[..., 1] / safe_z2 + k.cy

    flow = FlowField(
        u=np.where(valid, u2 - uu, 0.0),
        v=np.where(valid, v2 - vv, 0.0),
        valid=valid,
    )
    ctx = ProjectionFlowContext(
        rays=rays,
        points=points,
        p_cam2=p_cam2,
        valid=valid,
        pose_t=pose_t,
        pose_next=pose_next,
        k=k,
    )
    return flow, ctx


def projection_flow(
    rendered_depth: np.ndarray,
    pose_t: PoseSE3,
    pose_next: PoseSE3,
    k: CameraIntrinsics,
    z_near: float = DEFAULT_Z_NEAR,
) -> FlowField:
    """Per-pixel displacement induced by the scene depth and the pose pair."""
    flow, _ = projection_flow_with_context(rendered_depth, pose_t, pose_next, k, z_near)
    return flow


def _target_jacobians(ctx: ProjectionFlowContext, g_flow: np.ndarray):
    """Gradient of the flow w.r.t. the target camera point, per valid pixel.

    Returns (g_pcam2 (M, 3), sel (row, col) index arrays).
    """
    valid = ctx.valid
    iy, ix = np.nonzero(valid)
    p2 = ctx.p_cam2[iy, ix]
    z = p2[:, 2]
    inv_z = 1.0 / z
    gu = g_flow[iy, ix, 0]
    gv = g_flow[iy, ix, 1]
    k = ctx.k
    g_pcam2 = np.empty((iy.size, 3))
    g_pcam2[:, 0] = gu * k.fx * inv_z
    g_pcam2[:, 1] = gv * k.fy * inv_z
    g_pcam2[:, 2] = -(
        gu * k.fx * p2[:, 0] + gv * k.fy * p2[:, 1]
    ) * inv_z * inv_z
    return g_pcam2, iy, ix


def flow_grad_to_pose(ctx: ProjectionFlowContext, g_flow: np.ndarray):
    """Chain a flow-field gradient into the target pose (q tangent, t)."""
    if not np.any(ctx.valid):
        return np.zeros(4), np.zeros(3)
    g_pcam2, iy, ix = _target_jacobians(ctx, g_flow)
    g_t = g_pcam2.sum(axis=0)
    g_w = np.einsum("ni,nj->ij", g_pcam2, ctx.points[iy, ix])
    q = ctx.pose_next.q
    g_q = np.einsum("kij,ij->k", quat_to_matrix_jac(q), g_w)
    return quat_tangent_project(q, g_q), g_t


def flow_grad_to_depth(ctx: ProjectionFlowContext, g_flow: np.ndarray) -> np.ndarray:
    """Chain a flow-field gradient into the source rendered depth map."""
    out = np.zeros(ctx.valid.shape)
    if not np.any(ctx.valid):
        return out
    g_pcam2, iy, ix = _target_jacobians(ctx, g_flow)
    # d p_cam2 / d depth = R2 R1^T ray
    r_rel = ctx.pose_next.rotation @ ctx.pose_t.rotation.T
    dirs = ctx.rays[iy, ix] @ r_rel.T
    out[iy, ix] = np.einsum("ni,ni->n", g_pcam2, dirs)
    return out


def rigid_mask(
    flow_prev: FlowField,
    pose_prev: PoseSE3,
    pose_t: PoseSE3,
    k: CameraIntrinsics,
    beta: float,
) -> Mask:
    """Epipolar-consistency mask on frame-t pixels.

    Each valid flow vector of the previous pair is scored with the Sampson
    distance against the pose-induced epipolar geometry; its (rounded)
    landing pixel in frame t is marked rigid when the distance is below beta.
    Pixels nothing lands on stay unfiltered (True); conflicting landings are
    conjoined. A degenerate (pure-rotation) baseline disables filtering.
    """
    h, w = flow_prev.shape
    try:
        f = fundamental_from_poses(pose_prev, pose_t, k)
    except DegenerateBaseline:
        return Mask.full(h, w, True)

    iy, ix = np.nonzero(flow_prev.valid)
    if iy.size == 0:
        return Mask.full(h, w, True)
    x = np.stack([ix.astype(np.float64), iy.astype(np.float64)], axis=1)
    xp = x + np.stack([flow_prev.u[iy, ix], flow_prev.v[iy, ix]], axis=1)
    dist = sampson_distances(x, xp, f)
    inlier = dist < beta

    land_x = np.rint(xp[:, 0]).astype(np.int64)
    land_y = np.rint(xp[:, 1]).astype(np.int64)
    landed = (land_x >= 0) & (land_x < w) & (land_y >= 0) & (land_y < h)
    bits = np.ones((h, w), dtype=bool)
    np.logical_and.at(bits, (land_y[landed], land_x[landed]), inlier[landed])
    return Mask(bits)


def compose_flow(f_ab: FlowField, f_bc: FlowField) -> FlowField:
    """Chain two flow fields: a->b then b->c, with bilinear lookup in f_bc.

    A pixel stays valid only when its landing point falls inside f_bc and all
    four bilinear neighbors are valid.
    """
    if f_ab.shape != f_bc.shape:
        raise DimensionMismatch("flow fields to compose must share dimensions")
    h, w = f_ab.shape
    us = np.arange(w, dtype=np.float64)
    vs = np.arange(h, dtype=np.float64)
    uu, vv = np.meshgrid(us, vs)
    lx = uu + f_ab.u
    ly = vv + f_ab.v

    x0 = np.floor(lx).astype(np.int64)
    y0 = np.floor(ly).astype(np.int64)
    inside = (x0 >= 0) & (x0 + 1 <= w - 1) & (y0 >= 0) & (y0 + 1 <= h - 1)
    valid = f_ab.valid & inside
    x0c = np.clip(x0, 0, w - 2)
    y0c = np.clip(y0, 0, h - 2)
    fx = lx - x0c
    fy = ly - y0c

    def sample(field):
        return (
            field[y0c, x0c] * (1 - fx) * (1 - fy)
            + field[y0c, x0c + 1] * fx * (1 - fy)
            + field[y0c + 1, x0c] * (1 - fx) * fy
            + field[y0c + 1, x0c + 1] * fx * fy
        )

    nb_valid = (
        f_bc.valid[y0c, x0c]
        & f_bc.valid[y0c, x0c + 1]
        & f_bc.valid[y0c + 1, x0c]
        & f_bc.valid[y0c + 1, x0c + 1]
    )
    valid = valid & nb_valid
    u = np.where(valid, f_ab.u + sample(f_bc.u), 0.0)
    v = np.where(valid, f_ab.v + sample(f_bc.v), 0.0)
    return FlowField(u=u, v=v, valid=valid)


def load_flow(path) -> FlowField:
    """Read a Middlebury .flo file into a FlowField."""
    u, v, valid = read_flo(path)
    return FlowField(u=u, v=v, valid=valid)


def load_depth(path) -> np.ndarray:
    """Read a PFM depth map (non-positive values act as invalid downstream)."""
    return read_pfm(path)
