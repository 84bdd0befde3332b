"""Differentiable forward rendering of color, depth and visibility.

Both renderers composite depth-sorted splats front to back:

    C = sum_i c_i * a_i * prod_{j<i} (1 - a_j)

with a_i = min(alpha_i * exp(-0.5 * d^T Sigma2d^{-1} d), alpha_clamp) and the
same weights for depth and accumulated alpha. ``render`` walks per-pixel
contribution lists built from per-Gaussian footprints (vectorized over equal
ranks, partitioned into 16-row tile bands); ``naive_render`` iterates every
Gaussian over the full image with no early termination and serves as the
reference oracle. Per-pixel arithmetic is identical in both, so they agree
bitwise whenever early termination never fires.

``render_backward`` propagates exact analytic gradients of the blended
outputs to every Gaussian parameter and to the camera pose, chaining through
the blend weights, the projected covariance (incl. the perspective Jacobian
and the pose rotation), the projected mean, the SH color and the
transmittance products.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DepthBehindCamera, EmptyScene, StaleRenderState
from .geometry import (
    CameraIntrinsics,
    PoseSE3,
    quat_tangent_project,
    quat_to_matrix,
    quat_to_matrix_jac,
    quats_to_matrices,
    quats_to_matrix_jac,
)
from .scene import GaussianCloud, build_covariances, eval_sh_batch, sh_basis_jacobian

BAND_ROWS = 16


@dataclass(frozen=True)
class RasterSettings:
    """Numerical guards of the compositing model."""

    z_near: float = 1e-4
    dilation: float = 0.3
    alpha_clamp: float = 0.99
    stop_transmittance: float = 1e-4
    footprint_sigma: float = 3.0

    def key(self):
        return (
            self.z_near,
            self.dilation,
            self.alpha_clamp,
            self.stop_transmittance,
            self.footprint_sigma,
        )


@dataclass
class ProjectedGaussian:
    """One Gaussian after projection into a view."""

    mean2d: np.ndarray
    cov2d: np.ndarray  # post-dilation, 2x2
    depth: float
    view_color: np.ndarray
    alpha: float


@dataclass
class SceneGradients:
    """Gradients of a rendered view w.r.t. cloud parameters and the pose."""

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray
    pose_q: np.ndarray
    pose_t: np.ndarray
    pos2d_norm: np.ndarray  # half-viewport-scaled 2D positional gradient norms
    visible: np.ndarray


@dataclass
class RenderOutput:
    color: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    records: "_RenderRecords | None" = field(default=None, repr=False)

    def save_color_png(self, path):
        from .formats import write_png

        write_png(path, self.color)

    def save_depth_pfm(self, path):
        from .formats import write_pfm

        write_pfm(path, self.depth)

    def save_alpha_pfm(self, path):
        from .formats import write_pfm

        write_pfm(path, self.alpha)


@dataclass
class _ProjectedCloud:
    """Per-Gaussian view-dependent quantities shared by both renderers."""

    visible: np.ndarray
    p_cam: np.ndarray
    z: np.ndarray
    mean2d: np.ndarray
    cov2d: np.ndarray
    inv_pack: np.ndarray  # (A, B, C) of the 2x2 inverse covariance
    perspective_jac: np.ndarray  # (N, 2, 3)
    cam_cov: np.ndarray  # W Sigma W^T
    world_cov: np.ndarray
    rot_mats: np.ndarray
    rot_unit: np.ndarray
    s2: np.ndarray
    alpha: np.ndarray
    color: np.ndarray
    sh_pre: np.ndarray
    basis: np.ndarray
    view_dir: np.ndarray
    view_r: np.ndarray
    radius: np.ndarray
    r2: np.ndarray
    w_rot: np.ndarray  # pose rotation matrix
    q_pose: np.ndarray


@dataclass
class _RenderRecords:
    settings: RasterSettings
    early_stop: bool
    fingerprint: tuple
    proj: _ProjectedCloud
    width: int
    height: int
    # entry arrays, sorted by (pixel, depth rank)
    pix: np.ndarray
    gidx: np.ndarray
    dx: np.ndarray
    dy: np.ndarray
    gauss_w: np.ndarray  # exp(-0.5 q), before opacity
    a_eff: np.ndarray
    clamped: np.ndarray
    t_before: np.ndarray
    contributed: np.ndarray
    seg_starts: np.ndarray
    seg_lens: np.ndarray


def _fingerprint(cloud, pose, k, settings, early_stop):
    return (
        cloud.num,
        cloud.sh_bands,
        float(cloud.positions.sum()),
        float(np.abs(cloud.positions).sum()),
        float(cloud.rotations.sum()),
        float(cloud.log_scales.sum()),
        float(np.abs(cloud.log_scales).sum()),
        float(cloud.opacity_logits.sum()),
        float(cloud.sh_coeffs.sum()),
        float(np.abs(cloud.sh_coeffs).sum()),
        tuple(pose.q.tolist()),
        tuple(pose.t.tolist()),
        (k.fx, k.fy, k.cx, k.cy, k.width, k.height),
        settings.key(),
        bool(early_stop),
    )


def project_cloud(
    cloud: GaussianCloud,
    pose: PoseSE3,
    k: CameraIntrinsics,
    settings: RasterSettings = RasterSettings(),
) -> _ProjectedCloud:
    """Project every Gaussian into the view; invisible rows hold safe dummies."""
    w_rot = quat_to_matrix(pose.q)
    p_cam = cloud.positions @ w_rot.T + pose.t
    z = p_cam[:, 2]
    visible = z > settings.z_near
    safe_z = np.where(visible, z, 1.0)

    mean2d = np.empty((cloud.num, 2))
    mean2d[:, 0] = k.fx * p_cam[:, 0] / safe_z + k.cx
    mean2d[:, 1] = k.fy * p_cam[:, 1] / safe_z + k.cy

    rot_norms = np.linalg.norm(cloud.rotations, axis=1, keepdims=True)
    rot_unit = cloud.rotations / rot_norms
    rot_mats = quats_to_matrices(rot_unit)
    s2 = np.exp(2.0 * cloud.log_scales)
    world_cov = np.einsum("nij,nj,nkj->nik", rot_mats, s2, rot_mats)
    cam_cov = np.einsum("ij,njk,lk->nil", w_rot, world_cov, w_rot)

    jac = np.zeros((cloud.num, 2, 3))
    inv_z = 1.0 / safe_z
    jac[:, 0, 0] = k.fx * inv_z
    jac[:, 0, 2] = -k.fx * p_cam[:, 0] * inv_z * inv_z
    jac[:, 1, 1] = k.fy * inv_z
    jac[:, 1, 2] = -k.fy * p_cam[:, 1] * inv_z * inv_z

    cov2d = np.einsum("nij,njk,nlk->nil", jac, cam_cov, jac)
    cov2d[:, 0, 0] += settings.dilation
    cov2d[:, 1, 1] += settings.dilation

    ca = cov2d[:, 0, 0]
    cb = cov2d[:, 0, 1]
    cc = cov2d[:, 1, 1]
    det = ca * cc - cb * cb
    safe_det = np.where(det > 0.0, det, 1.0)
    inv_pack = np.stack([cc / safe_det, -cb / safe_det, ca / safe_det], axis=1)
    lam_max = 0.5 * (ca + cc) + np.sqrt(np.maximum(0.25 * (ca - cc) ** 2 + cb * cb, 0.0))
    radius = settings.footprint_sigma * np.sqrt(np.maximum(lam_max, 0.0))
    # Clipped bounding boxes make anything beyond the image diagonal moot.
    radius = np.minimum(radius, float(np.hypot(k.width, k.height)))
    r2 = radius * radius

    cam_center = -(w_rot.T @ pose.t)
    dir_raw = cloud.positions - cam_center
    view_r = np.linalg.norm(dir_raw, axis=1)
    safe_r = np.where(view_r > 1e-12, view_r, 1.0)
    view_dir = dir_raw / safe_r[:, None]

    color, sh_pre, basis = eval_sh_batch(cloud.sh_coeffs, view_dir)
    alpha = 1.0 / (1.0 + np.exp(-cloud.opacity_logits))

    return _ProjectedCloud(
        visible=visible,
        p_cam=p_cam,
        z=z,
        mean2d=mean2d,
        cov2d=cov2d,
        inv_pack=inv_pack,
        perspective_jac=jac,
        cam_cov=cam_cov,
        world_cov=world_cov,
        rot_mats=rot_mats,
        rot_unit=rot_unit,
        s2=s2,
        alpha=alpha,
        color=color,
        sh_pre=sh_pre,
        basis=basis,
        view_dir=view_dir,
        view_r=view_r,
        radius=radius,
        r2=r2,
        w_rot=w_rot,
        q_pose=pose.q.copy(),
    )


def project_gaussian(
    cloud: GaussianCloud,
    index: int,
    pose: PoseSE3,
    k: CameraIntrinsics,
    settings: RasterSettings = RasterSettings(),
) -> ProjectedGaussian:
    """Project a single Gaussian; raises DepthBehindCamera when culled."""
    proj = project_cloud(cloud, pose, k, settings)
    if not proj.visible[index]:
        raise DepthBehindCamera(
            f"gaussian {index} has camera depth {proj.z[index]} <= z_near"
        )
    return ProjectedGaussian(
        mean2d=proj.mean2d[index].copy(),
        cov2d=proj.cov2d[index].copy(),
        depth=float(proj.z[index]),
        view_color=proj.color[index].copy(),
        alpha=float(proj.alpha[index]),
    )


def _depth_order(proj: _ProjectedCloud) -> np.ndarray:
    """Stable global front-to-back order: depth ascending, index tie-break."""
    n = proj.z.shape[0]
    keyed = np.where(proj.visible, proj.z, np.inf)
    return np.lexsort((np.arange(n), keyed))


def _build_entries(proj: _ProjectedCloud, width: int, height: int):
    """Expand per-Gaussian footprints into (pixel, gaussian) entries sorted by
    (pixel, depth rank)."""
    vis_idx = np.flatnonzero(proj.visible)
    empty = (
        np.empty(0, dtype=np.int64),
        np.empty(0, dtype=np.int64),
        np.empty(0),
        np.empty(0),
    )
    if vis_idx.size == 0:
        return empty

    u = proj.mean2d[vis_idx, 0]
    v = proj.mean2d[vis_idx, 1]
    rad = proj.radius[vis_idx]
    x0 = np.maximum(np.ceil(u - rad), 0.0).astype(np.int64)
    x1 = np.minimum(np.floor(u + rad), width - 1.0).astype(np.int64)
    y0 = np.maximum(np.ceil(v - rad), 0.0).astype(np.int64)
    y1 = np.minimum(np.floor(v + rad), height - 1.0).astype(np.int64)
    bw = x1 - x0 + 1
    bh = y1 - y0 + 1
    ok = (bw > 0) & (bh > 0)
    if not np.any(ok):
        return empty
    vis_idx, x0, y0, bw, bh = vis_idx[ok], x0[ok], y0[ok], bw[ok], bh[ok]
    u, v = u[ok], v[ok]
    counts = bw * bh
    total = int(counts.sum())
    local = np.repeat(np.arange(vis_idx.size), counts)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    within = np.arange(total, dtype=np.int64) - np.repeat(offsets, counts)
    ex = x0[local] + within % bw[local]
    ey = y0[local] + within // bw[local]
    dx = ex - u[local]
    dy = ey - v[local]
    inside = dx * dx + dy * dy <= proj.r2[vis_idx][local]
    local = local[inside]
    gidx = vis_idx[local]
    pix = ey[inside] * width + ex[inside]
    return pix, gidx, dx[inside], dy[inside]


def _sort_entries(proj: _ProjectedCloud, pix, gidx, dx, dy):
    n = proj.z.shape[0]
    order_global = _depth_order(proj)
    rank = np.empty(n, dtype=np.int64)
    rank[order_global] = np.arange(n)
    # Single fused integer key: (pixel, depth rank); stable and fast to sort.
    order = np.argsort(pix * n + rank[gidx], kind="stable")
    return pix[order], gidx[order], dx[order], dy[order]


def _segments(pix_sorted: np.ndarray):
    if pix_sorted.size == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    change = np.flatnonzero(np.diff(pix_sorted)) + 1
    starts = np.concatenate([[0], change])
    lens = np.diff(np.concatenate([starts, [pix_sorted.size]]))
    return starts, lens


def _segment_range(rec: _RenderRecords, lo: int, hi: int):
    """Global segment starts/lens restricted to the entry range [lo, hi)."""
    si = np.searchsorted(rec.seg_starts, lo)
    sj = np.searchsorted(rec.seg_starts, hi)
    return rec.seg_starts[si:sj], rec.seg_lens[si:sj]


def _forward_band(rec: _RenderRecords, lo, hi, px_lo, px_hi, planes):
    """Composite the entry range [lo, hi) over the pixel range [px_lo, px_hi).

    Per-pixel transmittances come from per-segment prefix sums of
    log1p(-a): the transmittance is monotone along a segment, so thresholding
    it reproduces exactly the entry set a sequential front-to-back walk with
    early termination would composite.
    """
    if hi <= lo:
        return
    sl = slice(lo, hi)
    pix = rec.pix[sl]
    g = rec.gidx[sl]
    a = rec.a_eff[sl]
    starts, lens = _segment_range(rec, lo, hi)

    log_om = np.log1p(-a)
    excl = np.cumsum(log_om) - log_om
    base = excl[starts - lo]
    seg_id = np.repeat(np.arange(starts.size), lens)
    t = np.exp(excl - base[seg_id])
    if rec.early_stop:
        contributed = t >= rec.settings.stop_transmittance
        w = np.where(contributed, a * t, 0.0)
    else:
        contributed = np.ones(t.shape, dtype=bool)
        w = a * t
    rec.t_before[sl] = t
    rec.contributed[sl] = contributed

    local_pix = pix - px_lo
    n_local = px_hi - px_lo
    color0, color1, color2, depth_out, alpha_out = planes
    cplanes = rec.color_planes
    color0[px_lo:px_hi] = np.bincount(
        local_pix, weights=w * cplanes[0][g], minlength=n_local
    )
    color1[px_lo:px_hi] = np.bincount(
        local_pix, weights=w * cplanes[1][g], minlength=n_local
    )
    color2[px_lo:px_hi] = np.bincount(
        local_pix, weights=w * cplanes[2][g], minlength=n_local
    )
    depth_out[px_lo:px_hi] = np.bincount(
        local_pix, weights=w * rec.proj.z[g], minlength=n_local
    )
    alpha_out[px_lo:px_hi] = np.bincount(local_pix, weights=w, minlength=n_local)


def render(
    cloud: GaussianCloud,
    pose: PoseSE3,
    k: CameraIntrinsics,
    settings: RasterSettings = RasterSettings(),
    early_stop: bool = True,
    threads: int = 1,
) -> RenderOutput:
    """Rasterize the cloud into color / depth / alpha maps with blend records."""
    if cloud.num < 1:
        raise EmptyScene("cannot render an empty cloud")
    width, height = k.width, k.height
    proj = project_cloud(cloud, pose, k, settings)
    pix, gidx, dx, dy = _build_entries(proj, width, height)
    pix, gidx, dx, dy = _sort_entries(proj, pix, gidx, dx, dy)

    inv = proj.inv_pack[gidx]
    quad = inv[:, 0] * dx * dx + 2.0 * inv[:, 1] * dx * dy + inv[:, 2] * dy * dy
    gauss_w = np.exp(-0.5 * quad)
    a_pre = proj.alpha[gidx] * gauss_w
    a_eff = np.minimum(a_pre, settings.alpha_clamp)
    clamped = a_pre > settings.alpha_clamp

    seg_starts, seg_lens = _segments(pix)
    rec = _RenderRecords(
        settings=settings,
        early_stop=early_stop,
        fingerprint=_fingerprint(cloud, pose, k, settings, early_stop),
        proj=proj,
        width=width,
        height=height,
        pix=pix,
        gidx=gidx,
        dx=dx,
        dy=dy,
        gauss_w=gauss_w,
        a_eff=a_eff,
        clamped=clamped,
        t_before=np.zeros(pix.size),
        contributed=np.zeros(pix.size, dtype=bool),
        seg_starts=seg_starts,
        seg_lens=seg_lens,
    )

    color = np.zeros((height * width, 3))
    depth = np.zeros(height * width)
    alpha = np.zeros(height * width)
    trans = np.ones(height * width)

    bounds = _band_bounds(pix, width, height)
    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [
                pool.submit(_forward_band, rec, lo, hi, color, depth, alpha, trans)
                for lo, hi in bounds
            ]
            for fut in futures:
                fut.result()
    else:
        for lo, hi in bounds:
            _forward_band(rec, lo, hi, color, depth, alpha, trans)

    return RenderOutput(
        color=color.reshape(height, width, 3),
        depth=depth.reshape(height, width),
        alpha=alpha.reshape(height, width),
        records=rec,
    )


def _band_bounds(pix: np.ndarray, width: int, height: int):
    """Entry-range bounds of each 16-row tile band (bands touch disjoint pixels)."""
    n_bands = (height + BAND_ROWS - 1) // BAND_ROWS
    if pix.size == 0:
        return [(0, 0)]
    edges = [min(b * BAND_ROWS, height) * width for b in range(n_bands + 1)]
    cuts = np.searchsorted(pix, edges)
    return [(int(cuts[i]), int(cuts[i + 1])) for i in range(n_bands)]


def naive_render(
    cloud: GaussianCloud,
    pose: PoseSE3,
    k: CameraIntrinsics,
    settings: RasterSettings = RasterSettings(),
) -> RenderOutput:
    """Reference renderer: per-pixel iteration over every Gaussian in global
    depth order, full transmittance product, no tiling, no early termination."""
    if cloud.num < 1:
        raise EmptyScene("cannot render an empty cloud")
    width, height = k.width, k.height
    proj = project_cloud(cloud, pose, k, settings)
    order = _depth_order(proj)

    color = np.zeros((height, width, 3))
    depth = np.zeros((height, width))
    alpha = np.zeros((height, width))
    trans = np.ones((height, width))

    for g in order:
        if not proj.visible[g]:
            continue
        u, v = proj.mean2d[g]
        rad = proj.radius[g]
        x0 = max(int(np.ceil(u - rad)), 0)
        x1 = min(int(np.floor(u + rad)), width - 1)
        y0 = max(int(np.ceil(v - rad)), 0)
        y1 = min(int(np.floor(v + rad)), height - 1)
        if x1 < x0 or y1 < y0:
            continue
        xs = np.arange(x0, x1 + 1, dtype=np.float64)
        ys = np.arange(y0, y1 + 1, dtype=np.float64)
        dx = xs[None, :] - u
        dy = ys[:, None] - v
        inside = dx * dx + dy * dy <= proj.r2[g]
        if not np.any(inside):
            continue
        iy, ix = np.nonzero(inside)
        dxs = np.broadcast_to(dx, inside.shape)[iy, ix]
        dys = np.broadcast_to(dy, inside.shape)[iy, ix]
        ia, ib, ic = proj.inv_pack[g]
        quad = ia * dxs * dxs + 2.0 * ib * dxs * dys + ic * dys * dys
        gauss_w = np.exp(-0.5 * quad)
        a = np.minimum(proj.alpha[g] * gauss_w, settings.alpha_clamp)
        yy = iy + y0
        xx = ix + x0
        t = trans[yy, xx]
        w = a * t
        color[yy, xx] += w[:, None] * proj.color[g]
        depth[yy, xx] += w * proj.z[g]
        alpha[yy, xx] += w
        trans[yy, xx] = t * (1.0 - a)

    return RenderOutput(color=color, depth=depth, alpha=alpha, records=None)


def visibility_map(output: RenderOutput, gamma: float) -> np.ndarray:
    """Boolean mask of pixels whose accumulated opacity strictly exceeds gamma."""
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    return output.alpha > gamma


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def _suffix_excl(values: np.ndarray, ends: np.ndarray, seg_id: np.ndarray):
    """Exclusive per-segment suffix sums via cumulative-sum differences."""
    cs = np.cumsum(values)
    return cs[ends][seg_id] - cs


def _backward_band(
    rec: _RenderRecords, lo, hi, color_planes, d_planes, d_depth, d_alpha, n_params
):
    """Per-entry blend gradients for one band; returns a dense (N, 10) buffer.

    Column layout: color gradient (3), blended-depth gradient (1), opacity
    gradient (1), 2D mean gradient (2), inverse-covariance gradient (3).

    Suffix sums over each pixel's later contributions come from cumulative
    sums differenced against the segment end, which keeps the whole pass
    loop-free; non-contributing entries carry zero weight so they drop out.
    All entry-level math runs on contiguous 1-D component arrays.
    """
    buf = np.zeros((n_params, 10))
    if hi <= lo:
        return buf
    sl = slice(lo, hi)
    pix = rec.pix[sl]
    proj = rec.proj
    g = rec.gidx[sl]
    contributed = rec.contributed[sl]
    a = rec.a_eff[sl]
    t = np.where(contributed, rec.t_before[sl], 0.0)
    w = a * t

    starts, lens = _segment_range(rec, lo, hi)
    ends = starts + lens - 1 - lo
    seg_id = np.repeat(np.arange(starts.size), lens)

    dep = proj.z[g]
    c0, c1, c2 = (plane[g] for plane in color_planes)
    dc0, dc1, dc2 = (plane[pix] for plane in d_planes)
    dd = d_depth[pix]
    da = d_alpha[pix]
    inv_om = 1.0 / (1.0 - a)

    ga = dc0 * (c0 * t - _suffix_excl(w * c0, ends, seg_id) * inv_om)
    ga += dc1 * (c1 * t - _suffix_excl(w * c1, ends, seg_id) * inv_om)
    ga += dc2 * (c2 * t - _suffix_excl(w * c2, ends, seg_id) * inv_om)
    ga += dd * (dep * t - _suffix_excl(w * dep, ends, seg_id) * inv_om)
    ga += da * (t - _suffix_excl(w, ends, seg_id) * inv_om)
    ga = np.where(contributed, ga, 0.0)

    gate = np.where(contributed & ~rec.clamped[sl], rec.gauss_w[sl], 0.0)
    gq = ga * proj.alpha[g] * gate * -0.5
    dx = rec.dx[sl]
    dy = rec.dy[sl]
    inv = proj.inv_pack[g]
    mdx = inv[:, 0] * dx + inv[:, 1] * dy
    mdy = inv[:, 1] * dx + inv[:, 2] * dy
    cols = (
        w * dc0,
        w * dc1,
        w * dc2,
        w * dd,
        ga * gate,
        -2.0 * gq * mdx,
        -2.0 * gq * mdy,
        gq * dx * dx,
        gq * dx * dy,
        gq * dy * dy,
    )
    for c, vals in enumerate(cols):
        buf[:, c] = np.bincount(g, weights=vals, minlength=n_params)
    return buf


def render_backward(
    cloud: GaussianCloud,
    pose: PoseSE3,
    k: CameraIntrinsics,
    output: RenderOutput,
    d_color: np.ndarray | None = None,
    d_depth: np.ndarray | None = None,
    d_alpha: np.ndarray | None = None,
    threads: int = 1,
) -> SceneGradients:
    """Backpropagate upstream image gradients through the blend records."""
    rec = output.records
    if rec is None:
        raise StaleRenderState("output carries no blend records (oracle render?)")
    if rec.fingerprint != _fingerprint(cloud, pose, k, rec.settings, rec.early_stop):
        raise StaleRenderState("blend records do not match cloud/pose/intrinsics")

    height, width = rec.height, rec.width
    n = cloud.num
    d_color = (
        np.zeros((height * width, 3))
        if d_color is None
        else np.asarray(d_color, dtype=np.float64).reshape(height * width, 3)
    )
    d_depth = (
        np.zeros(height * width)
        if d_depth is None
        else np.asarray(d_depth, dtype=np.float64).reshape(height * width)
    )
    d_alpha = (
        np.zeros(height * width)
        if d_alpha is None
        else np.asarray(d_alpha, dtype=np.float64).reshape(height * width)
    )

    color_planes = tuple(
        np.ascontiguousarray(rec.proj.color[:, c]) for c in range(3)
    )
    d_planes = tuple(np.ascontiguousarray(d_color[:, c]) for c in range(3))
    # Band buffers always merge in band order, so the result is bitwise
    # independent of the thread count.
    bounds = _band_bounds(rec.pix, width, height)
    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [
                pool.submit(
                    _backward_band, rec, lo, hi, color_planes, d_planes,
                    d_depth, d_alpha, n,
                )
                for lo, hi in bounds
            ]
            buffers = [f.result() for f in futures]
    else:
        buffers = [
            _backward_band(rec, lo, hi, color_planes, d_planes, d_depth, d_alpha, n)
            for lo, hi in bounds
        ]
    acc = buffers[0]
    for b in buffers[1:]:
        acc = acc + b

    g_color_param = acc[:, 0:3]
    g_depth_param = acc[:, 3]
    g_alpha_param = acc[:, 4]
    g_mean2d = acc[:, 5:7]
    g_m_pack = acc[:, 7:10]

    proj = rec.proj
    grads = SceneGradients(
        positions=np.zeros((n, 3)),
        rotations=np.zeros((n, 4)),
        log_scales=np.zeros((n, 3)),
        opacity_logits=np.zeros(n),
        sh_coeffs=np.zeros_like(cloud.sh_coeffs),
        pose_q=np.zeros(4),
        pose_t=np.zeros(3),
        pos2d_norm=np.zeros(n),
        visible=np.zeros(n, dtype=bool),
    )
    if rec.pix.size:
        hits = np.bincount(rec.gidx[rec.contributed], minlength=n)
        grads.visible = hits > 0

    vis = np.flatnonzero(proj.visible)
    if vis.size == 0:
        return grads

    # Work on the visible subset; invisible rows keep zero gradients.
    w_rot = proj.w_rot
    z = proj.z[vis]
    p_cam = proj.p_cam[vis]
    jac = proj.perspective_jac[vis]
    cam_cov = proj.cam_cov[vis]
    world_cov = proj.world_cov[vis]
    rot_mats = proj.rot_mats[vis]
    s2 = proj.s2[vis]
    alpha = proj.alpha[vis]

    gm2 = g_mean2d[vis]
    g_m_full = np.empty((vis.size, 2, 2))
    g_m_full[:, 0, 0] = g_m_pack[vis, 0]
    g_m_full[:, 0, 1] = g_m_pack[vis, 1]
    g_m_full[:, 1, 0] = g_m_pack[vis, 1]
    g_m_full[:, 1, 1] = g_m_pack[vis, 2]

    m_inv = np.empty((vis.size, 2, 2))
    m_inv[:, 0, 0] = proj.inv_pack[vis, 0]
    m_inv[:, 0, 1] = proj.inv_pack[vis, 1]
    m_inv[:, 1, 0] = proj.inv_pack[vis, 1]
    m_inv[:, 1, 1] = proj.inv_pack[vis, 2]

    jac_t = np.transpose(jac, (0, 2, 1))
    g_cov2d = -(m_inv @ g_m_full @ m_inv)
    g_jac = 2.0 * (g_cov2d @ jac @ cam_cov)
    g_cam_cov = jac_t @ g_cov2d @ jac
    g_world_cov = w_rot.T @ g_cam_cov @ w_rot
    g_w_from_cov = 2.0 * (g_cam_cov @ w_rot @ world_cov)

    g_rot_mat = 2.0 * (g_world_cov @ rot_mats) * s2[:, None, :]
    rtgr = np.transpose(rot_mats, (0, 2, 1)) @ g_world_cov @ rot_mats
    g_log_scales = 2.0 * s2 * np.einsum("nii->ni", rtgr)

    rot_jac = quats_to_matrix_jac(proj.rot_unit[vis])
    g_rot_q = np.einsum("nkij,nij->nk", rot_jac, g_rot_mat)
    # Project onto the tangent of the unit sphere (rotations normalize on read).
    g_rot_q -= proj.rot_unit[vis] * np.einsum(
        "ni,ni->n", proj.rot_unit[vis], g_rot_q
    )[:, None]

    # Camera-frame point gradient: projected mean + perspective Jacobian + depth.
    g_pcam = np.einsum("nji,nj->ni", jac, gm2)
    inv_z = 1.0 / z
    inv_z2 = inv_z * inv_z
    g_pcam[:, 0] += g_jac[:, 0, 2] * (-k.fx * inv_z2)
    g_pcam[:, 1] += g_jac[:, 1, 2] * (-k.fy * inv_z2)
    g_pcam[:, 2] += (
        g_jac[:, 0, 0] * (-k.fx * inv_z2)
        + g_jac[:, 1, 1] * (-k.fy * inv_z2)
        + g_jac[:, 0, 2] * (2.0 * k.fx * p_cam[:, 0] * inv_z2 * inv_z)
        + g_jac[:, 1, 2] * (2.0 * k.fy * p_cam[:, 1] * inv_z2 * inv_z)
    )
    g_pcam[:, 2] += g_depth_param[vis]

    # SH color chain: coefficients, then view direction into position and pose.
    interior = (proj.sh_pre[vis] > 0.0) & (proj.sh_pre[vis] < 1.0)
    g_color_gated = np.where(interior, g_color_param[vis], 0.0)
    basis = proj.basis[vis]
    grads.sh_coeffs[vis] = basis[:, :, None] * g_color_gated[:, None, :]
    basis_jac = sh_basis_jacobian(proj.view_dir[vis], cloud.sh_bands)
    g_dir = np.einsum("nc,nbc,nbk->nk", g_color_gated, cloud.sh_coeffs[vis], basis_jac)
    safe_r = np.where(proj.view_r[vis] > 1e-12, proj.view_r[vis], 1.0)
    vdir = proj.view_dir[vis]
    g_dir_raw = (g_dir - vdir * np.einsum("ni,ni->n", vdir, g_dir)[:, None]) / safe_r[
        :, None
    ]

    grads.positions[vis] = g_pcam @ w_rot + g_dir_raw
    grads.log_scales[vis] = g_log_scales
    grads.rotations[vis] = g_rot_q
    grads.opacity_logits[vis] = g_alpha_param[vis] * alpha * (1.0 - alpha)
    gm2_scaled = gm2 * np.array([k.width * 0.5, k.height * 0.5])
    grads.pos2d_norm[vis] = np.linalg.norm(gm2_scaled, axis=1)

    # Pose gradients: every path runs through p_cam = W mu + t, the camera-frame
    # covariance W Sigma W^T, and the camera center in the view direction.
    g_w = g_w_from_cov.sum(axis=0)
    g_w += np.einsum("ni,nj->ij", g_pcam, cloud.positions[vis])
    g_w += np.outer(pose.t, g_dir_raw.sum(axis=0))
    grads.pose_t = g_pcam.sum(axis=0) + w_rot @ g_dir_raw.sum(axis=0)
    pose_jac = quat_to_matrix_jac(proj.q_pose)
    g_q = np.einsum("kij,ij->k", pose_jac, g_w)
    grads.pose_q = quat_tangent_project(proj.q_pose, g_q)
    return grads
