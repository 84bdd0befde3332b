"""Scratch validation of flow/loss gradients."""
import numpy as np

from flowsplat.geometry import CameraIntrinsics, PoseSE3
from flowsplat.flow import (
    FlowField, Mask, projection_flow, projection_flow_with_context,
    flow_grad_to_pose, flow_grad_to_depth,
)
from flowsplat.losses import photometric_loss, depth_loss, flow_loss, ssim


def rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


def main():
    k = CameraIntrinsics(fx=60.0, fy=55.0, cx=16.0, cy=12.0, width=32, height=24)
    rng = np.random.default_rng(3)
    h = 1e-6

    # --- projection-flow chain to pose and depth ---
    depth = rng.uniform(2.0, 4.0, (24, 32))
    pose_t = PoseSE3(np.array([1.0, 0.02, -0.03, 0.01]), np.array([0.05, -0.02, 0.0]))
    pose_n = PoseSE3(np.array([1.0, -0.01, 0.04, 0.02]), np.array([-0.03, 0.01, 0.06]))
    gf = rng.standard_normal((24, 32, 2))

    def loss_for(pn, dd):
        f = projection_flow(dd, pose_t, pn, k)
        return float((f.u * gf[..., 0] + f.v * gf[..., 1]).sum())

    _, ctx = projection_flow_with_context(depth, pose_t, pose_n, k)
    gq, gt = flow_grad_to_pose(ctx, gf)
    gd = flow_grad_to_depth(ctx, gf)

    vq = rng.standard_normal(4)
    fd = (loss_for(PoseSE3(pose_n.q + h * vq, pose_n.t), depth)
          - loss_for(PoseSE3(pose_n.q - h * vq, pose_n.t), depth)) / (2 * h)
    print("flow->pose_q rel:", rel(fd, float(gq @ vq)))
    vt = rng.standard_normal(3)
    fd = (loss_for(PoseSE3(pose_n.q, pose_n.t + h * vt), depth)
          - loss_for(PoseSE3(pose_n.q, pose_n.t - h * vt), depth)) / (2 * h)
    print("flow->pose_t rel:", rel(fd, float(gt @ vt)))
    vd = rng.standard_normal(depth.shape)
    fd = (loss_for(pose_n, depth + h * vd) - loss_for(pose_n, depth - h * vd)) / (2 * h)
    print("flow->depth rel:", rel(fd, float((gd * vd).sum())))

    # --- photometric loss ---
    x = rng.uniform(0.1, 0.9, (20, 24, 3))
    y = np.clip(x + 0.07 * rng.standard_normal(x.shape), 0.02, 0.98)
    loss, grad = photometric_loss(x, y, 0.2)
    v = rng.standard_normal(x.shape)
    fd = (photometric_loss(x + h * v, y, 0.2)[0] - photometric_loss(x - h * v, y, 0.2)[0]) / (2 * h)
    print("photometric rel:", rel(fd, float((grad * v).sum())), "loss:", loss)
    s_self, _ = ssim(x, x)
    print("ssim(x,x):", s_self)

    # --- depth loss ---
    rendered = rng.uniform(2.0, 4.0, (20, 24))
    prior = 0.7 * rendered + 0.3 + 0.1 * rng.standard_normal(rendered.shape)
    valid = rng.random(rendered.shape) > 0.2
    loss, grad = depth_loss(rendered, prior, valid)
    v = rng.standard_normal(rendered.shape)
    fd = (depth_loss(rendered + h * v, prior, valid)[0]
          - depth_loss(rendered - h * v, prior, valid)[0]) / (2 * h)
    print("depth_loss rel:", rel(fd, float((grad * v).sum())), "loss:", loss)
    # exact affine prior -> 0
    l0, _ = depth_loss(rendered, 1.7 * rendered - 0.4, valid)
    print("depth_loss affine prior:", l0)

    # --- flow loss ---
    fa = FlowField(rng.standard_normal((20, 24)), rng.standard_normal((20, 24)),
                   np.ones((20, 24), bool))
    fb = FlowField(fa.u + rng.standard_normal((20, 24)) * 0.3,
                   fa.v + rng.standard_normal((20, 24)) * 0.3,
                   np.ones((20, 24), bool))
    m = Mask(rng.random((20, 24)) > 0.3)
    loss, grad = flow_loss(fa, fb, m)
    vu = rng.standard_normal((20, 24))
    vv = rng.standard_normal((20, 24))
    fd = (flow_loss(FlowField(fa.u + h * vu, fa.v + h * vv, fa.valid), fb, m)[0]
          - flow_loss(FlowField(fa.u - h * vu, fa.v - h * vv, fa.valid), fb, m)[0]) / (2 * h)
    an = float((grad[..., 0] * vu).sum() + (grad[..., 1] * vv).sum())
    print("flow_loss rel:", rel(fd, an), "loss:", loss)


if __name__ == "__main__":
    main()
