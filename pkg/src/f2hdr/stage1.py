"""Coarse fusion stage: flow adapter, backward warping, five-frame fusion.

Image-domain entry points take (H, W, C) images / (H, W, 2) flows; the
batched NCHW cores carry the training path and its explicit backward.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import coarseflow, motionphys, nnkit
from .errors import DimMismatch
from .exposure import exposure_normalize, ldr_to_hdr
from .tensorio import as_flow_field, as_image_plane

FUSE_EPS = 1e-8
FLOW_LAMBDA = 20.0


@dataclass(frozen=True)
class AdapterConfig:
    """Residual flow adapter: Conv-PReLU blocks over [3 LDRs, 2 flows/lambda]."""

    blocks: tuple = ((32, 1), (32, 2), (32, 4), (32, 2), (32, 1))
    in_channels: int = 13
    out_channels: int = 4
    lam: float = FLOW_LAMBDA


@dataclass(frozen=True)
class FusionNetConfig:
    """U-Net emitting five softplus weight maps for the HDR frame stack."""

    channels: tuple = (32, 64, 128)
    res_blocks: int = 2
    in_channels: int = 15
    out_channels: int = 5


# ---------------------------------------------------------------------------
# layer tables
# ---------------------------------------------------------------------------

def adapter_defs(cfg: AdapterConfig = AdapterConfig()):
    defs = []
    prev = cfg.in_channels
    for i, (ch, dil) in enumerate(cfg.blocks):
        defs.append(nnkit.ConvDef(
            f"adapter.block{i}", nnkit.ConvSpec(prev, ch, 3, dilation=dil)))
        prev = ch
    defs.append(nnkit.ConvDef(
        "adapter.head", nnkit.ConvSpec(prev, cfg.out_channels, 3),
        act="none", zero_init=True))
    return defs


def _res_defs(scope, ch, count):
    out = []
    for i in range(count):
        out.append((
            nnkit.ConvDef(f"{scope}.res{i}.conv1", nnkit.ConvSpec(ch, ch, 3)),
            nnkit.ConvDef(f"{scope}.res{i}.conv2", nnkit.ConvSpec(ch, ch, 3),
                          act="none"),
        ))
    return out


def fusion_defs(cfg: FusionNetConfig = FusionNetConfig()):
    c0, c1, c2 = cfg.channels
    return {
        "stem": nnkit.ConvDef("fusion.stem", nnkit.ConvSpec(cfg.in_channels, c0, 3)),
        "enc0": _res_defs("fusion.enc0", c0, cfg.res_blocks),
        "down0": nnkit.ConvDef("fusion.down0", nnkit.ConvSpec(c0, c1, 3, stride=2)),
        "enc1": _res_defs("fusion.enc1", c1, cfg.res_blocks),
        "down1": nnkit.ConvDef("fusion.down1", nnkit.ConvSpec(c1, c2, 3, stride=2)),
        "enc2": _res_defs("fusion.enc2", c2, cfg.res_blocks),
        "dec1_fuse": nnkit.ConvDef("fusion.dec1.fuse", nnkit.ConvSpec(c2 + c1, c1, 3)),
        "dec1": _res_defs("fusion.dec1", c1, 1),
        "dec0_fuse": nnkit.ConvDef("fusion.dec0.fuse", nnkit.ConvSpec(c1 + c0, c0, 3)),
        "dec0": _res_defs("fusion.dec0", c0, 1),
        "head": nnkit.ConvDef("fusion.head", nnkit.ConvSpec(c0, cfg.out_channels, 3),
                              act="softplus"),
    }


def all_stage1_defs():
    defs = list(adapter_defs())
    table = fusion_defs()
    defs.append(table["stem"])
    for key in ("enc0", "enc1", "enc2", "dec1", "dec0"):
        for conv1, conv2 in table[key]:
            defs.extend([conv1, conv2])
    defs.extend([table["down0"], table["down1"], table["dec1_fuse"],
                 table["dec0_fuse"], table["head"]])
    return defs


# ---------------------------------------------------------------------------
# adapter
# ---------------------------------------------------------------------------

def hwc_to_nchw(image):
    return np.ascontiguousarray(np.moveaxis(image, 2, 0))[None]


def nchw_to_hwc(x):
    return np.ascontiguousarray(np.moveaxis(x[0], 0, 2))


def adapter_input_batch(l_prev, l_ref, l_next, f_prev, f_next, lam=FLOW_LAMBDA):
    """13-channel adapter input [L_prev, L_ref, L_next, f_prev/lam, f_next/lam]."""
    shapes = {a.shape[-2:] for a in (l_prev, l_ref, l_next, f_prev, f_next)}
    if len(shapes) != 1:
        raise DimMismatch(f"adapter inputs disagree on spatial dims: {shapes}")
    lam = np.asarray(lam, dtype=l_ref.dtype)
    return np.concatenate(
        [l_prev, l_ref, l_next, f_prev / lam, f_next / lam], axis=1
    )


def adapter_input(l_prev, l_ref, l_next, f_prev, f_next, lam=FLOW_LAMBDA):
    """Single-window variant over (H,W,C) images and (H,W,2) flows."""
    return adapter_input_batch(
        hwc_to_nchw(as_image_plane(l_prev)),
        hwc_to_nchw(as_image_plane(l_ref)),
        hwc_to_nchw(as_image_plane(l_next)),
        hwc_to_nchw(as_flow_field(f_prev)),
        hwc_to_nchw(as_flow_field(f_next)),
        lam,
    )


def adapter_forward(params, x):
    """Predict the two 2-channel residual flows; returns (d_prev, d_next, cache)."""
    delta, caches = nnkit.chain_forward(params, adapter_defs(), x)
    return delta[:, 0:2], delta[:, 2:4], caches


def adapter_backward(params, caches, g_prev, g_next, grads):
    grad_delta = np.concatenate([g_prev, g_next], axis=1)
    nnkit.chain_backward(params, adapter_defs(), caches, grad_delta, grads,
                         need_input_grad=False)


def adapt_flows(x_t, params, lam=FLOW_LAMBDA):
    """Run the adapter on a 13-channel input; returns the two residual fields."""
    d_prev, d_next, _ = adapter_forward(params, x_t)
    return d_prev, d_next


def refine_flow(flow, delta, lam=FLOW_LAMBDA):
    """Residual correction: refined = flow + lam * delta."""
    return flow + np.asarray(lam, dtype=flow.dtype) * delta


# ---------------------------------------------------------------------------
# backward warping (bilinear, border-replicating), with explicit VJP
# ---------------------------------------------------------------------------

def warp_forward(x, flow):
    """Backward-warp a batch: out(p) = bilinear sample of x at p + flow(p).

    x (N,C,H,W), flow (N,2,H,W) with channel 0 = u (rightward) and
    channel 1 = v (downward). Sample coordinates are clamped to the image
    rectangle. Returns (y, cache) for warp_vjp.
    """
    n, c, h, w = x.shape
    if flow.shape != (n, 2, h, w):
        raise DimMismatch(f"flow shape {flow.shape} does not match image {x.shape}")
    gx = np.arange(w, dtype=x.dtype).reshape(1, 1, w)
    gy = np.arange(h, dtype=x.dtype).reshape(1, h, 1)
    xs_raw = gx + flow[:, 0]
    ys_raw = gy + flow[:, 1]
    xs = np.clip(xs_raw, 0.0, w - 1.0)
    ys = np.clip(ys_raw, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0).astype(x.dtype)[:, None]
    fy = (ys - y0).astype(x.dtype)[:, None]

    xf = x.reshape(n, c, h * w)

    def _gather(iy, ix):
        idx = (iy * w + ix).reshape(n, 1, h * w)
        return np.take_along_axis(xf, idx, axis=2).reshape(n, c, h, w)

    v00 = _gather(y0, x0)
    v01 = _gather(y0, x1)
    v10 = _gather(y1, x0)
    v11 = _gather(y1, x1)
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    y = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11
    cache = (x.shape, x.dtype, (x0, x1, y0, y1), (fx, fy),
             (v00, v01, v10, v11), (xs_raw, ys_raw))
    return y, cache


def warp_vjp(grad_y, cache, need_image_grad=True, need_flow_grad=True):
    """Gradients of warp_forward w.r.t. the image and the flow."""
    (xshape, dtype, (x0, x1, y0, y1), (fx, fy),
     (v00, v01, v10, v11), (xs_raw, ys_raw)) = cache
    n, c, h, w = xshape
    gx_img = None
    if need_image_grad:
        flat = np.zeros((n * h * w, c), dtype=dtype)
        base = (np.arange(n).reshape(n, 1, 1) * h) * w
        g2 = np.moveaxis(grad_y, 1, 3).reshape(-1, c)
        w00 = ((1 - fy) * (1 - fx))[:, 0].reshape(-1, 1)
        w01 = ((1 - fy) * fx)[:, 0].reshape(-1, 1)
        w10 = (fy * (1 - fx))[:, 0].reshape(-1, 1)
        w11 = (fy * fx)[:, 0].reshape(-1, 1)
        for iy, ix, wgt in ((y0, x0, w00), (y0, x1, w01),
                            (y1, x0, w10), (y1, x1, w11)):
            idx = (base + iy * w + ix).reshape(-1)
            flat = nnkit.scatter_add_rows(flat, idx, g2 * wgt)
        gx_img = np.moveaxis(flat.reshape(n, h, w, c), 3, 1)
    gflow = None
    if need_flow_grad:
        # d out / d xs = (1-fy)(v01-v00) + fy(v11-v10); zero where clamp active
        dx = (1 - fy) * (v01 - v00) + fy * (v11 - v10)
        dy = (1 - fx) * (v10 - v00) + fx * (v11 - v01)
        mask_x = ((xs_raw >= 0) & (xs_raw <= w - 1)).astype(dtype)[:, None]
        mask_y = ((ys_raw >= 0) & (ys_raw <= h - 1)).astype(dtype)[:, None]
        gu = (grad_y * dx * mask_x).sum(axis=1)
        gv = (grad_y * dy * mask_y).sum(axis=1)
        gflow = np.stack([gu, gv], axis=1)
    return gx_img, gflow


def backward_warp(image, flow):
    """Warp an (H,W,C) image by an (H,W,2) flow (backward-warp convention)."""
    image = as_image_plane(image) if image.ndim != 3 or image.dtype != np.float32 \
        else image
    if image.shape[:2] != flow.shape[:2]:
        raise DimMismatch(
            f"image {image.shape[:2]} vs flow {flow.shape[:2]} dims differ")
    y, _ = warp_forward(hwc_to_nchw(image), hwc_to_nchw(flow))
    return nchw_to_hwc(y)


# ---------------------------------------------------------------------------
# weighted fusion
# ---------------------------------------------------------------------------

def fuse_forward(frames, weights):
    """H = sum_i W_i * I_i / (sum_i W_i + eps) over five (N,3,H,W) frames.

    `weights` is (N,5,H,W), nonnegative. Returns (h, cache).
    """
    if len(frames) != weights.shape[1]:
        raise DimMismatch(f"{len(frames)} frames vs {weights.shape[1]} weights")
    den = weights.sum(axis=1, keepdims=True) + np.asarray(FUSE_EPS, weights.dtype)
    num = np.zeros_like(frames[0])
    for i, frame in enumerate(frames):
        num = num + weights[:, i : i + 1] * frame
    h = num / den
    return h, (frames, weights, num, den)


def fuse_vjp(grad_h, cache, need_frame_grads):
    """Gradients w.r.t. the weight maps and (selected) frames."""
    frames, weights, num, den = cache
    gnum = grad_h / den
    gden = -(grad_h * num / (den * den)).sum(axis=1, keepdims=True)
    gweights = np.empty_like(weights)
    for i, frame in enumerate(frames):
        gweights[:, i : i + 1] = (gnum * frame).sum(axis=1, keepdims=True) + gden
    gframes = [
        gnum * weights[:, i : i + 1] if need else None
        for i, need in enumerate(need_frame_grads)
    ]
    return gweights, gframes


def fuse_weighted(frames, weights):
    """Single-window fusion: five (H,W,C) frames, five (H,W) weight maps."""
    if len(frames) != len(weights):
        raise DimMismatch("frames and weights count differ")
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise DimMismatch(f"frame shapes differ: {shapes}")
    fr = [hwc_to_nchw(np.asarray(f, dtype=np.float32)) for f in frames]
    wt = np.stack([np.asarray(w, dtype=np.float32) for w in weights], axis=0)[None]
    h, _ = fuse_forward(fr, wt)
    return nchw_to_hwc(h)


# ---------------------------------------------------------------------------
# fusion U-Net
# ---------------------------------------------------------------------------

def _res_forward(params, pair, x):
    conv1, conv2 = pair
    h1, c1 = nnkit.conv_layer_forward(params, conv1, x)
    h2, c2 = nnkit.conv_layer_forward(params, conv2, h1)
    return x + h2, (c1, c2)


def _res_backward(params, pair, cache, gy, grads):
    conv1, conv2 = pair
    c1, c2 = cache
    g = nnkit.conv_layer_backward(params, conv2, c2, gy, grads)
    g = nnkit.conv_layer_backward(params, conv1, c1, g, grads)
    return gy + g


def _res_stack_forward(params, pairs, x):
    caches = []
    for pair in pairs:
        x, cache = _res_forward(params, pair, x)
        caches.append(cache)
    return x, caches


def _res_stack_backward(params, pairs, caches, gy, grads):
    for pair, cache in zip(reversed(pairs), reversed(caches)):
        gy = _res_backward(params, pair, cache, gy, grads)
    return gy


def _pad_to_multiple(x, m):
    h, w = x.shape[2:]
    ph = (-h) % m
    pw = (-w) % m
    if ph == 0 and pw == 0:
        return x, (h, w)
    return np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge"), (h, w)


def fusion_forward(params, u, cfg: FusionNetConfig = FusionNetConfig()):
    """U-Net producing 5 nonnegative weight maps; returns (weights, cache)."""
    table = fusion_defs(cfg)
    up, orig_hw = _pad_to_multiple(u, 4)
    s0, c_stem = nnkit.conv_layer_forward(params, table["stem"], up)
    e0, c_e0 = _res_stack_forward(params, table["enc0"], s0)
    d0, c_d0 = nnkit.conv_layer_forward(params, table["down0"], e0)
    e1, c_e1 = _res_stack_forward(params, table["enc1"], d0)
    d1, c_d1 = nnkit.conv_layer_forward(params, table["down1"], e1)
    e2, c_e2 = _res_stack_forward(params, table["enc2"], d1)

    u1 = nnkit.bilinear_resize(e2, e1.shape[2], e1.shape[3])
    cat1 = np.concatenate([u1, e1], axis=1)
    f1, c_f1 = nnkit.conv_layer_forward(params, table["dec1_fuse"], cat1)
    r1, c_r1 = _res_stack_forward(params, table["dec1"], f1)

    u0 = nnkit.bilinear_resize(r1, e0.shape[2], e0.shape[3])
    cat0 = np.concatenate([u0, e0], axis=1)
    f0, c_f0 = nnkit.conv_layer_forward(params, table["dec0_fuse"], cat0)
    r0, c_r0 = _res_stack_forward(params, table["dec0"], f0)

    w5, c_head = nnkit.conv_layer_forward(params, table["head"], r0)
    w5 = w5[:, :, : orig_hw[0], : orig_hw[1]]
    cache = (table, orig_hw, up.shape, c_stem, c_e0, c_d0, c_e1, c_d1, c_e2,
             e2.shape, c_f1, c_r1, r1.shape, c_f0, c_r0, c_head, cfg)
    return w5, cache


def fusion_backward(params, cache, grad_w, grads):
    (table, orig_hw, up_shape, c_stem, c_e0, c_d0, c_e1, c_d1, c_e2,
     e2_shape, c_f1, c_r1, r1_shape, c_f0, c_r0, c_head, cfg) = cache
    if (orig_hw[0], orig_hw[1]) != up_shape[2:]:
        padded = np.zeros(
            (grad_w.shape[0], grad_w.shape[1], up_shape[2], up_shape[3]),
            dtype=grad_w.dtype)
        padded[:, :, : orig_hw[0], : orig_hw[1]] = grad_w
        grad_w = padded
    g = nnkit.conv_layer_backward(params, table["head"], c_head, grad_w, grads)
    g = _res_stack_backward(params, table["dec0"], c_r0, g, grads)
    g = nnkit.conv_layer_backward(params, table["dec0_fuse"], c_f0, g, grads)
    c1 = cfg.channels[1]
    g_u0, g_e0 = g[:, :c1], g[:, c1:]
    g_r1 = nnkit.bilinear_resize_vjp(g_u0, r1_shape[2], r1_shape[3])
    g = _res_stack_backward(params, table["dec1"], c_r1, g_r1, grads)
    g = nnkit.conv_layer_backward(params, table["dec1_fuse"], c_f1, g, grads)
    c2 = cfg.channels[2]
    g_u1, g_e1 = g[:, :c2], g[:, c2:]
    g_e2 = nnkit.bilinear_resize_vjp(g_u1, e2_shape[2], e2_shape[3])
    g = _res_stack_backward(params, table["enc2"], c_e2, g_e2, grads)
    g = nnkit.conv_layer_backward(params, table["down1"], c_d1, g, grads)
    g = g + g_e1
    g = _res_stack_backward(params, table["enc1"], c_e1, g, grads)
    g = nnkit.conv_layer_backward(params, table["down0"], c_d0, g, grads)
    g = g + g_e0
    g = _res_stack_backward(params, table["enc0"], c_e0, g, grads)
    g = nnkit.conv_layer_backward(params, table["stem"], c_stem, g, grads)
    if (orig_hw[0], orig_hw[1]) != up_shape[2:]:
        # adjoint of the edge pad-to-multiple: fold padded bands back
        h0, w0 = orig_hw
        g[:, :, h0 - 1, :] += g[:, :, h0:, :].sum(axis=2)
        g = g[:, :, :h0, :]
        g[:, :, :, w0 - 1] += g[:, :, :, w0:].sum(axis=3)
        g = g[:, :, :, :w0]
    return g


# ---------------------------------------------------------------------------
# stage-1 driver
# ---------------------------------------------------------------------------

@dataclass
class Stage1Result:
    """Everything stage 2 and the evaluators need from the coarse stage."""

    h_coarse: np.ndarray          # (H,W,3) linear HDR
    flow_prev: np.ndarray         # refined flow to t-1, (H,W,2)
    flow_next: np.ndarray
    mask_prev: "motionphys.MotionMask"
    mask_next: "motionphys.MotionMask"
    coarse_prev: np.ndarray       # pre-adapter flows
    coarse_next: np.ndarray
    hdr_frames: list = field(default_factory=list)  # [I_prev, I_ref, I_next]
    warped_prev: np.ndarray = None
    warped_next: np.ndarray = None


def run_stage1(window, flow_src, params, tag="", lam=FLOW_LAMBDA) -> Stage1Result:
    """Run the full coarse stage on a 3-frame window of ExposureFrames."""
    prev, ref, nxt = window
    norm_prev = exposure_normalize(ref, prev.exposure)
    norm_next = exposure_normalize(ref, nxt.exposure)
    f_prev = coarseflow.estimate_coarse_pair(
        norm_prev, prev.image, flow_src, tag=f"{tag}_prev" if tag else "prev")
    f_next = coarseflow.estimate_coarse_pair(
        norm_next, nxt.image, flow_src, tag=f"{tag}_next" if tag else "next")

    x_t = adapter_input(prev.image, ref.image, nxt.image, f_prev, f_next, lam)
    d_prev, d_next, _ = adapter_forward(params, x_t)
    ft_prev = refine_flow(hwc_to_nchw(f_prev), d_prev, lam)
    ft_next = refine_flow(hwc_to_nchw(f_next), d_next, lam)

    i_prev = ldr_to_hdr(prev)
    i_ref = ldr_to_hdr(ref)
    i_next = ldr_to_hdr(nxt)
    warped_prev, _ = warp_forward(hwc_to_nchw(i_prev), ft_prev)
    warped_next, _ = warp_forward(hwc_to_nchw(i_next), ft_next)

    frames = [warped_prev, warped_next, hwc_to_nchw(i_ref),
              hwc_to_nchw(i_next), hwc_to_nchw(i_prev)]
    u = np.concatenate(frames, axis=1)
    w5, _ = fusion_forward(params, u)
    h, _ = fuse_forward(frames, w5)

    mask_prev = motionphys.build_mask(nchw_to_hwc(ft_prev), params)
    mask_next = motionphys.build_mask(nchw_to_hwc(ft_next), params)
    return Stage1Result(
        h_coarse=nchw_to_hwc(h),
        flow_prev=nchw_to_hwc(ft_prev),
        flow_next=nchw_to_hwc(ft_next),
        mask_prev=mask_prev,
        mask_next=mask_next,
        coarse_prev=f_prev,
        coarse_next=f_next,
        hdr_frames=[i_prev, i_ref, i_next],
        warped_prev=nchw_to_hwc(warped_prev),
        warped_next=nchw_to_hwc(warped_next),
    )
