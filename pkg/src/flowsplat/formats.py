"""Bit-exact readers/writers for the on-disk formats the pipeline consumes.

Formats:

* Middlebury ``.flo`` optical flow (magic 202021.25, little-endian float32,
  interleaved u, v; |value| > 1e9 marks an invalid pixel).
* PFM depth maps (grayscale ``Pf``, scale -1.0 = little-endian, rows stored
  bottom-up per the format convention).
* 8-bit RGB PNG via Pillow.
* Plain-text intrinsics (``fx fy cx cy width height``) and pose lists
  (``qw qx qy qz tx ty tz`` per line).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError

FLO_MAGIC = 202021.25
FLO_INVALID = 1e9


def write_flo(path, u: np.ndarray, v: np.ndarray, valid: np.ndarray | None = None):
    """Write a flow field; invalid pixels are stored as the 1e10 sentinel."""
    u = np.asarray(u, dtype=np.float32)
    v = np.asarray(v, dtype=np.float32)
    if u.shape != v.shape or u.ndim != 2:
        raise ValueError("u and v must be equal-shaped 2-D arrays")
    h, w = u.shape
    data = np.empty((h, w, 2), dtype="<f4")
    data[..., 0] = u
    data[..., 1] = v
    if valid is not None:
        data[~np.asarray(valid, dtype=bool)] = 1e10
    with open(path, "wb") as fh:
        fh.write(struct.pack("<f", FLO_MAGIC))
        fh.write(struct.pack("<ii", w, h))
        fh.write(data.tobytes())


def read_flo(path):
    """Read a .flo file -> (u, v, valid) float64/bool arrays."""
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated .flo header", offset=len(raw))
    (magic,) = struct.unpack_from("<f", raw, 0)
    if abs(magic - FLO_MAGIC) > 1e-3:
        raise FormatError(f"{path}: bad .flo magic {magic!r}", offset=0)
    w, h = struct.unpack_from("<ii", raw, 4)
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: bad .flo dimensions {w}x{h}", offset=4)
    need = 12 + 8 * w * h
    if len(raw) < need:
        raise FormatError(
            f"{path}: .flo payload truncated ({len(raw)} of {need} bytes)",
            offset=len(raw),
        )
    data = np.frombuffer(raw, dtype="<f4", count=2 * w * h, offset=12)
    data = data.reshape(h, w, 2).astype(np.float64)
    valid = np.all(np.abs(data) <= FLO_INVALID, axis=2) & np.all(
        np.isfinite(data), axis=2
    )
    u = np.where(valid, data[..., 0], 0.0)
    v = np.where(valid, data[..., 1], 0.0)
    return u, v, valid


def write_pfm(path, data: np.ndarray, scale: float = -1.0):
    """Write a grayscale PFM (little-endian for negative scale, rows bottom-up)."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise ValueError("only grayscale PFM is supported")
    if scale >= 0:
        raise ValueError("only little-endian output (negative scale) is supported")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(f"{scale:.1f}\n".encode("ascii"))
        fh.write(data[::-1].astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a grayscale PFM into a float64 (H, W) array (top-down rows)."""
    raw = Path(path).read_bytes()

    def next_token(pos):
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PFM header", offset=start)
        return raw[start:pos], pos

    header, pos = next_token(0)
    if header == b"PF":
        raise FormatError(f"{path}: color PFM not supported", offset=0)
    if header != b"Pf":
        raise FormatError(f"{path}: bad PFM magic {header!r}", offset=0)
    wtok, pos = next_token(pos)
    htok, pos = next_token(pos)
    stok, pos = next_token(pos)
    try:
        w, h, scale = int(wtok), int(htok), float(stok)
    except ValueError as exc:
        raise FormatError(f"{path}: bad PFM header field: {exc}", offset=pos) from exc
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: bad PFM dimensions {w}x{h}", offset=pos)
    pos += 1  # single whitespace byte after the scale line
    need = pos + 4 * w * h
    if len(raw) < need:
        raise FormatError(
            f"{path}: PFM payload truncated ({len(raw)} of {need} bytes)",
            offset=len(raw),
        )
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos)
    return data.reshape(h, w)[::-1].astype(np.float64)


def write_png(path, image: np.ndarray):
    """Write a float image in [0, 1] (H, W, 3) as 8-bit RGB PNG."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="RGB").save(path)


def read_png(path) -> np.ndarray:
    """Read an RGB PNG into a float64 (H, W, 3) array in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_intrinsics(path, k):
    with open(path, "w") as fh:
        fh.write(
            f"{k.fx:.17g} {k.fy:.17g} {k.cx:.17g} {k.cy:.17g} {k.width} {k.height}\n"
        )


def read_intrinsics(path):
    from .geometry import CameraIntrinsics

    text = Path(path).read_text().strip()
    parts = text.split()
    if len(parts) != 6:
        raise FormatError(f"{path}: expected 6 intrinsics fields, got {len(parts)}")
    try:
        fx, fy, cx, cy = (float(p) for p in parts[:4])
        width, height = int(parts[4]), int(parts[5])
    except ValueError as exc:
        raise FormatError(f"{path}: bad intrinsics field: {exc}") from exc
    return CameraIntrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height)


def write_poses(path, poses):
    """Write poses as 'qw qx qy qz tx ty tz' lines (full precision)."""
    with open(path, "w") as fh:
        for pose in poses:
            vals = list(pose.q) + list(pose.t)
            fh.write(" ".join(f"{v:.17g}" for v in vals) + "\n")


def read_poses(path):
    from .geometry import PoseSE3

    poses = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 7:
            raise FormatError(
                f"{path}:{lineno}: expected 7 pose fields, got {len(parts)}"
            )
        vals = [float(p) for p in parts]
        poses.append(PoseSE3(np.array(vals[:4]), np.array(vals[4:])))
    return poses
