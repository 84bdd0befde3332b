"""Storage and differentiable parameter math for the 3D Gaussian cloud.

Each Gaussian carries a position, a unit-quaternion orientation, per-axis
log-scales, an opacity logit, and spherical-harmonic color coefficients.
The world-space covariance is R diag(exp(2*log_scale)) R^T.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyInit, FormatError
from .geometry import CameraIntrinsics, PoseSE3, quat_to_matrix, quats_to_matrices

logger = logging.getLogger(__name__)

SCENE_MAGIC = b"FSGS"
SCENE_VERSION = 1

# Real spherical-harmonic constants, bands 0..3.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

INIT_OPACITY = 0.1


def num_sh_bands(degree: int) -> int:
    return (degree + 1) ** 2


def degree_from_bands(bands: int) -> int:
    degree = int(round(np.sqrt(bands))) - 1
    if num_sh_bands(degree) != bands:
        raise ValueError(f"{bands} is not a valid SH band count")
    return degree


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    return np.log(p / (1.0 - p))


# ---------------------------------------------------------------------------
# Cloud container
# ---------------------------------------------------------------------------

class GaussianCloud:
    """Mutable column store of Gaussian parameters.

    All arrays are float64 and share leading dimension N >= 1. Rotations are
    kept unit-norm; call normalize_rotations() after mutating them.
    """

    def __init__(self, positions, rotations, log_scales, opacity_logits, sh_coeffs):
        self.positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        self.rotations = np.atleast_2d(np.asarray(rotations, dtype=np.float64))
        self.log_scales = np.atleast_2d(np.asarray(log_scales, dtype=np.float64))
        self.opacity_logits = np.atleast_1d(
            np.asarray(opacity_logits, dtype=np.float64)
        )
        self.sh_coeffs = np.asarray(sh_coeffs, dtype=np.float64)
        if self.sh_coeffs.ndim != 3 or self.sh_coeffs.shape[2] != 3:
            raise ValueError("sh_coeffs must have shape (N, bands, 3)")
        n = self.positions.shape[0]
        if n < 1:
            raise ValueError("a cloud must hold at least one Gaussian")
        shapes = (
            self.rotations.shape[0],
            self.log_scales.shape[0],
            self.opacity_logits.shape[0],
            self.sh_coeffs.shape[0],
        )
        if any(s != n for s in shapes):
            raise ValueError("parameter arrays disagree on N")
        self.normalize_rotations()

    @property
    def num(self) -> int:
        return self.positions.shape[0]

    @property
    def sh_bands(self) -> int:
        return self.sh_coeffs.shape[1]

    @property
    def sh_degree(self) -> int:
        return degree_from_bands(self.sh_bands)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def extent(self) -> float:
        """Radius of the bounding sphere around the position centroid."""
        center = self.positions.mean(axis=0)
        return float(np.max(np.linalg.norm(self.positions - center, axis=1)))

    def normalize_rotations(self):
        norms = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        if np.any(norms == 0.0) or not np.all(np.isfinite(norms)):
            raise ValueError("rotations must be finite and nonzero")
        np.divide(self.rotations, norms, out=self.rotations)

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            self.positions.copy(),
            self.rotations.copy(),
            self.log_scales.copy(),
            self.opacity_logits.copy(),
            self.sh_coeffs.copy(),
        )

    def validate(self):
        for name in ("positions", "rotations", "log_scales", "opacity_logits", "sh_coeffs"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite values")
        if np.max(np.abs(np.linalg.norm(self.rotations, axis=1) - 1.0)) > 1e-9:
            raise ValueError("rotations drifted from unit norm")

    # -- persistence --------------------------------------------------------

    def save(self, path):
        """Binary container: magic, u32 version, u64 N, float32 column-major arrays."""
        with open(path, "wb") as fh:
            fh.write(SCENE_MAGIC)
            fh.write(struct.pack("<IQ", SCENE_VERSION, self.num))
            for arr in (
                self.positions,
                self.rotations,
                self.log_scales,
                self.opacity_logits,
                self.sh_coeffs.reshape(self.num, -1),
            ):
                fh.write(np.asarray(arr, dtype="<f4").flatten(order="F").tobytes())

    @classmethod
    def load(cls, path) -> "GaussianCloud":
        raw = Path(path).read_bytes()
        if len(raw) < 16:
            raise FormatError(f"{path}: truncated scene header", offset=len(raw))
        if raw[:4] != SCENE_MAGIC:
            raise FormatError(f"{path}: bad scene magic {raw[:4]!r}", offset=0)
        version, n = struct.unpack_from("<IQ", raw, 4)
        if version != SCENE_VERSION:
            raise FormatError(f"{path}: unsupported scene version {version}", offset=4)
        if n < 1:
            raise FormatError(f"{path}: scene holds no Gaussians", offset=8)
        payload = len(raw) - 16
        if payload % 4 != 0:
            raise FormatError(f"{path}: payload not float32-aligned", offset=16)
        total = payload // 4
        fixed = 3 + 4 + 3 + 1  # position, rotation, log-scale, opacity columns
        rem = total - fixed * n
        # The header does not carry the SH band count; infer it from the size.
        if rem < 0 or rem % (3 * n) != 0:
            raise FormatError(
                f"{path}: payload size {payload} inconsistent with N={n}", offset=16
            )
        bands = rem // (3 * n)
        if bands < 1:
            raise FormatError(f"{path}: no SH coefficients present", offset=16)
        degree_from_bands(bands)  # validates the count
        vals = np.frombuffer(raw, dtype="<f4", count=total, offset=16).astype(
            np.float64
        )
        off = 0

        def take(cols):
            nonlocal off
            block = vals[off : off + n * cols].reshape(n, cols, order="F")
            off += n * cols
            return block

        positions = take(3)
        rotations = take(4)
        log_scales = take(3)
        opacity = take(1)[:, 0]
        sh = take(3 * bands).reshape(n, bands, 3)
        return cls(positions, rotations, log_scales, opacity, sh)

    def export_ply(self, path):
        """ASCII PLY with positions and the degree-0 RGB for external viewers."""
        rgb = np.clip(SH_C0 * self.sh_coeffs[:, 0, :] + 0.5, 0.0, 1.0)
        rgb8 = np.round(rgb * 255.0).astype(np.uint8)
        with open(path, "w") as fh:
            fh.write("ply\nformat ascii 1.0\n")
            fh.write(f"element vertex {self.num}\n")
            for prop in ("x", "y", "z"):
                fh.write(f"property float {prop}\n")
            for prop in ("red", "green", "blue"):
                fh.write(f"property uchar {prop}\n")
            fh.write("end_header\n")
            for p, c in zip(self.positions, rgb8):
                fh.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {c[0]} {c[1]} {c[2]}\n")


# ---------------------------------------------------------------------------
# Parameter math
# ---------------------------------------------------------------------------

def build_covariance(rotation: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    """World covariance R S S^T R^T; eigenvalues are exp(2*log_scale)."""
    q = np.asarray(rotation, dtype=np.float64)
    q = q / np.linalg.norm(q)
    r = quat_to_matrix(q)
    s2 = np.exp(2.0 * np.asarray(log_scale, dtype=np.float64))
    cov = (r * s2) @ r.T
    return 0.5 * (cov + cov.T)


def build_covariances(rotations: np.ndarray, log_scales: np.ndarray) -> np.ndarray:
    """Batched build_covariance: (N, 4), (N, 3) -> (N, 3, 3)."""
    norms = np.linalg.norm(rotations, axis=1, keepdims=True)
    r = quats_to_matrices(rotations / norms)
    s2 = np.exp(2.0 * log_scales)
    cov = np.einsum("nij,nj,nkj->nik", r, s2, r)
    return 0.5 * (cov + np.transpose(cov, (0, 2, 1)))


def sh_basis(dirs: np.ndarray, bands: int) -> np.ndarray:
    """Real SH basis values for unit directions: (N, 3) -> (N, bands)."""
    n = dirs.shape[0]
    out = np.empty((n, bands))
    out[:, 0] = SH_C0
    if bands == 1:
        return out
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    out[:, 1] = -SH_C1 * y
    out[:, 2] = SH_C1 * z
    out[:, 3] = -SH_C1 * x
    if bands == 4:
        return out
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    out[:, 4] = SH_C2[0] * xy
    out[:, 5] = SH_C2[1] * yz
    out[:, 6] = SH_C2[2] * (2.0 * zz - xx - yy)
    out[:, 7] = SH_C2[3] * xz
    out[:, 8] = SH_C2[4] * (xx - yy)
    if bands == 9:
        return out
    out[:, 9] = SH_C3[0] * y * (3.0 * xx - yy)
    out[:, 10] = SH_C3[1] * xy * z
    out[:, 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
    out[:, 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    out[:, 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
    out[:, 14] = SH_C3[5] * z * (xx - yy)
    out[:, 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return out


def sh_basis_jacobian(dirs: np.ndarray, bands: int) -> np.ndarray:
    """d(basis)/d(direction) for unit directions: (N, bands, 3)."""
    n = dirs.shape[0]
    jac = np.zeros((n, bands, 3))
    if bands == 1:
        return jac
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    jac[:, 1, 1] = -SH_C1
    jac[:, 2, 2] = SH_C1
    jac[:, 3, 0] = -SH_C1
    if bands == 4:
        return jac
    jac[:, 4, 0] = SH_C2[0] * y
    jac[:, 4, 1] = SH_C2[0] * x
    jac[:, 5, 1] = SH_C2[1] * z
    jac[:, 5, 2] = SH_C2[1] * y
    jac[:, 6, 0] = SH_C2[2] * (-2.0 * x)
    jac[:, 6, 1] = SH_C2[2] * (-2.0 * y)
    jac[:, 6, 2] = SH_C2[2] * (4.0 * z)
    jac[:, 7, 0] = SH_C2[3] * z
    jac[:, 7, 2] = SH_C2[3] * x
    jac[:, 8, 0] = SH_C2[4] * (2.0 * x)
    jac[:, 8, 1] = SH_C2[4] * (-2.0 * y)
    if bands == 9:
        return jac
    xx, yy, zz = x * x, y * y, z * z
    jac[:, 9, 0] = SH_C3[0] * 6.0 * x * y
    jac[:, 9, 1] = SH_C3[0] * (3.0 * xx - 3.0 * yy)
    jac[:, 10, 0] = SH_C3[1] * y * z
    jac[:, 10, 1] = SH_C3[1] * x * z
    jac[:, 10, 2] = SH_C3[1] * x * y
    jac[:, 11, 0] = SH_C3[2] * (-2.0 * x * y)
    jac[:, 11, 1] = SH_C3[2] * (4.0 * zz - xx - 3.0 * yy)
    jac[:, 11, 2] = SH_C3[2] * 8.0 * y * z
    jac[:, 12, 0] = SH_C3[3] * (-6.0 * x * z)
    jac[:, 12, 1] = SH_C3[3] * (-6.0 * y * z)
    jac[:, 12, 2] = SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
    jac[:, 13, 0] = SH_C3[4] * (4.0 * zz - 3.0 * xx - yy)
    jac[:, 13, 1] = SH_C3[4] * (-2.0 * x * y)
    jac[:, 13, 2] = SH_C3[4] * 8.0 * x * z
    jac[:, 14, 0] = SH_C3[5] * 2.0 * x * z
    jac[:, 14, 1] = SH_C3[5] * (-2.0 * y * z)
    jac[:, 14, 2] = SH_C3[5] * (xx - yy)
    jac[:, 15, 0] = SH_C3[6] * (3.0 * xx - 3.0 * yy)
    jac[:, 15, 1] = SH_C3[6] * (-6.0 * x * y)
    return jac


def eval_sh(sh_coeffs: np.ndarray, view_dir: np.ndarray) -> np.ndarray:
    """Evaluate SH color for one Gaussian: (bands, 3) x unit dir -> RGB in [0,1]."""
    view_dir = np.asarray(view_dir, dtype=np.float64)
    if abs(np.linalg.norm(view_dir) - 1.0) > 1e-6:
        raise ValueError("view_dir must be unit-norm")
    basis = sh_basis(view_dir[None, :], sh_coeffs.shape[0])[0]
    return np.clip(basis @ sh_coeffs + 0.5, 0.0, 1.0)


def eval_sh_batch(sh_coeffs: np.ndarray, view_dirs: np.ndarray):
    """Batched SH color evaluation.

    Returns (colors (N, 3), pre-clamp values (N, 3), basis (N, bands)); the
    pre-clamp values let the backward pass zero gradients at the clamp.
    """
    basis = sh_basis(view_dirs, sh_coeffs.shape[1])
    pre = np.einsum("nb,nbc->nc", basis, sh_coeffs) + 0.5
    return np.clip(pre, 0.0, 1.0), pre, basis


# ---------------------------------------------------------------------------
# Initialization and density control
# ---------------------------------------------------------------------------

def init_from_depth(
    image: np.ndarray,
    depth: np.ndarray,
    pose: PoseSE3,
    k: CameraIntrinsics,
    stride: int = 2,
    sh_degree: int = 1,
) -> GaussianCloud:
    """Unproject every stride-th valid-depth pixel into an initial cloud.

    Degree-0 SH is set so the evaluated color reproduces the source pixel;
    scales follow the mean distance to the 3 nearest initialized neighbors.
    """
    image = np.asarray(image, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if image.shape[:2] != depth.shape:
        raise ValueError("image and depth dimensions differ")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    h, w = depth.shape
    rows = np.arange(0, h, stride)
    cols = np.arange(0, w, stride)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    rr = rr.ravel()
    cc = cc.ravel()
    d = depth[rr, cc]
    ok = np.isfinite(d) & (d > 0.0)
    if not np.any(ok):
        raise EmptyInit("no valid-depth pixels to initialize from")
    rr, cc, d = rr[ok], cc[ok], d[ok]
    n = rr.shape[0]

    rays = np.stack(
        [(cc - k.cx) / k.fx, (rr - k.cy) / k.fy, np.ones(n)], axis=1
    )
    p_cam = rays * d[:, None]
    positions = (p_cam - pose.t) @ pose.rotation

    colors = image[rr, cc]
    bands = num_sh_bands(sh_degree)
    sh = np.zeros((n, bands, 3))
    sh[:, 0, :] = (colors - 0.5) / SH_C0

    log_scales = np.repeat(
        np.log(_mean_knn_distance(positions))[:, None], 3, axis=1
    )

    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    opacity = np.full(n, logit(INIT_OPACITY))
    return GaussianCloud(positions, rotations, log_scales, opacity, sh)


def _mean_knn_distance(points: np.ndarray, neighbors: int = 3) -> np.ndarray:
    """Mean distance to the nearest `neighbors` points, floored at 1e-7."""
    n = points.shape[0]
    if n == 1:
        return np.full(1, 1e-3)
    kq = min(neighbors + 1, n)
    tree = cKDTree(points)
    dists, _ = tree.query(points, k=kq)
    mean = dists[:, 1:].mean(axis=1)
    return np.maximum(mean, 1e-7)


def densify_and_prune(
    cloud: GaussianCloud,
    grad_accum: np.ndarray,
    opacity_floor: float,
    grad_threshold: float,
    rng: np.random.Generator | None = None,
    extent: float | None = None,
    percent_dense: float = 0.01,
    split_factor: float = 1.6,
) -> GaussianCloud:
    """Adaptive density control: clone small / split large high-gradient
    Gaussians, then drop those below the opacity floor.

    Untouched rows are copied bitwise; split children sample positions from
    the parent distribution using `rng`.
    """
    grad_accum = np.asarray(grad_accum, dtype=np.float64)
    if grad_accum.shape[0] != cloud.num:
        raise ValueError("grad_accum length must match the cloud")
    if rng is None:
        rng = np.random.default_rng(0)
    if extent is None:
        extent = cloud.extent
    size_limit = percent_dense * max(extent, 1e-12)

    max_scale = np.exp(cloud.log_scales).max(axis=1)
    hot = grad_accum > grad_threshold
    clone = hot & (max_scale <= size_limit)
    split = hot & (max_scale > size_limit)
    alive = sigmoid(cloud.opacity_logits) >= opacity_floor
    keep = alive & ~split

    parts = {
        "positions": [cloud.positions[keep]],
        "rotations": [cloud.rotations[keep]],
        "log_scales": [cloud.log_scales[keep]],
        "opacity_logits": [cloud.opacity_logits[keep]],
        "sh_coeffs": [cloud.sh_coeffs[keep]],
    }

    clone_src = clone & alive
    if np.any(clone_src):
        parts["positions"].append(cloud.positions[clone_src].copy())
        parts["rotations"].append(cloud.rotations[clone_src].copy())
        parts["log_scales"].append(cloud.log_scales[clone_src].copy())
        parts["opacity_logits"].append(cloud.opacity_logits[clone_src].copy())
        parts["sh_coeffs"].append(cloud.sh_coeffs[clone_src].copy())

    split_src = split & alive
    n_split = int(np.count_nonzero(split_src))
    if n_split:
        idx = np.flatnonzero(split_src)
        rep = np.repeat(idx, 2)
        rot = quats_to_matrices(cloud.rotations[rep])
        local = rng.standard_normal((2 * n_split, 3)) * np.exp(
            cloud.log_scales[rep]
        )
        parts["positions"].append(
            cloud.positions[rep] + np.einsum("nij,nj->ni", rot, local)
        )
        parts["rotations"].append(cloud.rotations[rep].copy())
        parts["log_scales"].append(cloud.log_scales[rep] - np.log(split_factor))
        parts["opacity_logits"].append(cloud.opacity_logits[rep].copy())
        parts["sh_coeffs"].append(cloud.sh_coeffs[rep].copy())

    positions = np.concatenate(parts["positions"], axis=0)
    if positions.shape[0] == 0:
        # Never empty the cloud; keep the most opaque Gaussian.
        best = int(np.argmax(cloud.opacity_logits))
        sel = np.array([best])
        logger.warning("density control would empty the cloud; keeping 1 Gaussian")
        return GaussianCloud(
            cloud.positions[sel],
            cloud.rotations[sel],
            cloud.log_scales[sel],
            cloud.opacity_logits[sel],
            cloud.sh_coeffs[sel],
        )

    result = GaussianCloud(
        positions,
        np.concatenate(parts["rotations"], axis=0),
        np.concatenate(parts["log_scales"], axis=0),
        np.concatenate(parts["opacity_logits"], axis=0),
        np.concatenate(parts["sh_coeffs"], axis=0),
    )
    logger.info(
        "density control: %d -> %d (cloned %d, split %d, pruned %d)",
        cloud.num,
        result.num,
        int(np.count_nonzero(clone_src)),
        n_split,
        int(np.count_nonzero(~alive)),
    )
    return result
