"""Scratch validation of forward equivalence and backward gradients."""
import numpy as np

from flowsplat.geometry import CameraIntrinsics, PoseSE3
from flowsplat.scene import GaussianCloud, logit
from flowsplat.rasterizer import (
    RasterSettings, render, naive_render, render_backward,
)


def random_cloud(rng, n=8, bands=4):
    positions = rng.uniform([-0.8, -0.8, 2.0], [0.8, 0.8, 4.0], (n, 3))
    rotations = rng.standard_normal((n, 4))
    log_scales = rng.uniform(np.log(0.05), np.log(0.25), (n, 3))
    opacity = rng.uniform(logit(0.1), logit(0.8), n)
    sh = rng.uniform(-0.4, 0.4, (n, bands, 3))
    return GaussianCloud(positions, rotations, log_scales, opacity, sh)


def random_pose(rng, mag=0.1):
    q = np.array([1.0, 0, 0, 0]) + mag * rng.standard_normal(4)
    t = mag * rng.standard_normal(3)
    return PoseSE3(q, t)


def main():
    k = CameraIntrinsics(fx=60.0, fy=55.0, cx=16.0, cy=12.0, width=32, height=24)
    settings = RasterSettings()
    rng = np.random.default_rng(0)

    # 1. forward equivalence
    worst = 0.0
    for s in range(10):
        r = np.random.default_rng(100 + s)
        cloud = random_cloud(r)
        pose = random_pose(r)
        a = render(cloud, pose, k, settings, early_stop=False)
        b = naive_render(cloud, pose, k, settings)
        d = max(np.abs(a.color - b.color).max(), np.abs(a.depth - b.depth).max(),
                np.abs(a.alpha - b.alpha).max())
        worst = max(worst, d)
    print("forward max |render - naive| over 10 scenes:", worst)

    # 2. gradient check via JVP
    h = 1e-5
    r = np.random.default_rng(7)
    cloud = random_cloud(r, n=6)
    pose = random_pose(r)

    up_rng = np.random.default_rng(99)
    H, W = k.height, k.width
    d_color = up_rng.standard_normal((H, W, 3))
    d_depth = 0.1 * up_rng.standard_normal((H, W))
    d_alpha = 0.1 * up_rng.standard_normal((H, W))

    def loss_of(c, p):
        out = naive_render(c, p, k, settings)
        return float((out.color * d_color).sum() + (out.depth * d_depth).sum()
                     + (out.alpha * d_alpha).sum())

    out = render(cloud, pose, k, settings, early_stop=False)
    g = render_backward(cloud, pose, k, out, d_color, d_depth, d_alpha)

    def check(name, get, setv, analytic):
        v = np.random.default_rng(hash(name) % 2**31).standard_normal(analytic.shape)
        base = get()
        setv(base + h * v)
        lp = loss_of(cloud, pose)
        setv(base - h * v)
        lm = loss_of(cloud, pose)
        setv(base)
        fd = (lp - lm) / (2 * h)
        an = float((analytic * v).sum())
        rel = abs(fd - an) / max(abs(fd), abs(an), 1e-9)
        print(f"{name:16s} fd={fd: .8e} an={an: .8e} rel={rel:.2e}")
        return rel

    rels = []
    rels.append(check("positions",
        lambda: cloud.positions.copy(),
        lambda vv: setattr(cloud, "positions", vv), g.positions))
    rels.append(check("log_scales",
        lambda: cloud.log_scales.copy(),
        lambda vv: setattr(cloud, "log_scales", vv), g.log_scales))
    rels.append(check("opacity",
        lambda: cloud.opacity_logits.copy(),
        lambda vv: setattr(cloud, "opacity_logits", vv), g.opacity_logits))
    rels.append(check("sh",
        lambda: cloud.sh_coeffs.copy(),
        lambda vv: setattr(cloud, "sh_coeffs", vv), g.sh_coeffs))
    rels.append(check("rotations",
        lambda: cloud.rotations.copy(),
        lambda vv: setattr(cloud, "rotations", vv), g.rotations))

    # pose: perturb q/t through new PoseSE3 (normalizes on read)
    base_q, base_t = pose.q.copy(), pose.t.copy()
    vq = np.random.default_rng(5).standard_normal(4)
    lp = loss_of(cloud, PoseSE3(base_q + h * vq, base_t))
    lm = loss_of(cloud, PoseSE3(base_q - h * vq, base_t))
    fd = (lp - lm) / (2 * h)
    an = float((g.pose_q * vq).sum())
    print(f"{'pose_q':16s} fd={fd: .8e} an={an: .8e} rel={abs(fd-an)/max(abs(fd),abs(an),1e-9):.2e}")
    vt = np.random.default_rng(6).standard_normal(3)
    lp = loss_of(cloud, PoseSE3(base_q, base_t + h * vt))
    lm = loss_of(cloud, PoseSE3(base_q, base_t - h * vt))
    fd = (lp - lm) / (2 * h)
    an = float((g.pose_t * vt).sum())
    print(f"{'pose_t':16s} fd={fd: .8e} an={an: .8e} rel={abs(fd-an)/max(abs(fd),abs(an),1e-9):.2e}")


if __name__ == "__main__":
    main()
