"""Refinement stage: shared LDR/HDR feature encoder, flow-aligned features,
motion-gated modulation, dilated enhancement, and residual decoding on top
of the coarse HDR result.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nnkit
from .errors import DimMismatch
from .exposure import ldr_to_hdr
from .motionphys import MotionMask
from .stage1 import (
    Stage1Result,
    hwc_to_nchw,
    nchw_to_hwc,
    warp_forward,
    warp_vjp,
)

FLOW_MAG_FLOOR = 1e-6


@dataclass(frozen=True)
class RefineConfig:
    encoder_channels: int = 32
    dilations: tuple = (1, 2, 4)
    decoder_layers: int = 3


def stage2_defs(cfg: RefineConfig = RefineConfig()):
    c = cfg.encoder_channels
    defs = {
        "enc": [
            nnkit.ConvDef("refine.enc.conv0", nnkit.ConvSpec(3, c, 3)),
            nnkit.ConvDef("refine.enc.conv1", nnkit.ConvSpec(c, c, 3)),
        ],
        "li_fuse": nnkit.ConvDef(
            "refine.li.fuse", nnkit.ConvSpec(2 * c, c, 1), act="none"),
        "gate": nnkit.ConvDef(
            "refine.gate.conv", nnkit.ConvSpec(3, c, 3), act="sigmoid"),
        "branches": [
            nnkit.ConvDef(f"refine.enh.branch{d}",
                          nnkit.ConvSpec(3 * c, c, 3, dilation=d))
            for d in cfg.dilations
        ],
        "enh_fuse": nnkit.ConvDef(
            "refine.enh.fuse", nnkit.ConvSpec(3 * c, c, 1), act="none"),
        "henc": [
            nnkit.ConvDef("refine.henc.conv0", nnkit.ConvSpec(3, c, 3)),
            nnkit.ConvDef("refine.henc.conv1", nnkit.ConvSpec(c, c, 3)),
        ],
        "dec": [
            nnkit.ConvDef("refine.dec.conv0", nnkit.ConvSpec(2 * c, c, 3)),
            nnkit.ConvDef("refine.dec.conv1", nnkit.ConvSpec(c, 16, 3)),
            nnkit.ConvDef("refine.dec.head", nnkit.ConvSpec(16, 3, 3),
                          act="none", zero_init=True),
        ],
    }
    return defs


def all_stage2_defs():
    table = stage2_defs()
    defs = []
    defs.extend(table["enc"])
    defs.append(table["li_fuse"])
    defs.append(table["gate"])
    defs.extend(table["branches"])
    defs.append(table["enh_fuse"])
    defs.extend(table["henc"])
    defs.extend(table["dec"])
    return defs


# ---------------------------------------------------------------------------
# building blocks (batched)
# ---------------------------------------------------------------------------

def encode_li_forward(params, l, i, table):
    """Shared encoder on L and I, fused by the 1x1 conv: returns (F_LI, cache)."""
    fl, c_l = nnkit.chain_forward(params, table["enc"], l)
    fi, c_i = nnkit.chain_forward(params, table["enc"], i)
    cat = np.concatenate([fl, fi], axis=1)
    fli, c_fuse = nnkit.conv_layer_forward(params, table["li_fuse"], cat)
    return fli, (c_l, c_i, c_fuse, fl.shape[1])


def encode_li_backward(params, cache, g_fli, table, grads):
    c_l, c_i, c_fuse, c = cache
    g_cat = nnkit.conv_layer_backward(params, table["li_fuse"], c_fuse, g_fli, grads)
    # both encoder streams share parameters; L and I are inputs with no
    # upstream parameters, so their input grads are dropped
    nnkit.chain_backward(params, table["enc"], c_l, g_cat[:, :c], grads,
                         need_input_grad=False)
    nnkit.chain_backward(params, table["enc"], c_i, g_cat[:, c:], grads,
                         need_input_grad=False)


def flow_magnitude_forward(flow):
    """Per-pixel |f| normalized by the per-sample max (floored, constant)."""
    u, v = flow[:, 0:1], flow[:, 1:2]
    mag = np.sqrt(u * u + v * v)
    fmax = np.maximum(mag.max(axis=(2, 3), keepdims=True),
                      np.asarray(FLOW_MAG_FLOOR, flow.dtype))
    return mag / fmax, (flow, mag, fmax)


def flow_magnitude_vjp(g_norm, cache):
    flow, mag, fmax = cache
    g_mag = g_norm / fmax
    safe = np.maximum(mag, np.asarray(1e-12, flow.dtype))
    gu = g_mag * flow[:, 0:1] / safe
    gv = g_mag * flow[:, 1:2] / safe
    return np.concatenate([gu, gv], axis=1)


def gate_forward(params, flow, mask, table):
    """Motion gate G = sigmoid(conv([|f|/f_max, M, 1])); returns (G, cache)."""
    norm_mag, mag_cache = flow_magnitude_forward(flow)
    ones = np.ones_like(norm_mag)
    gin = np.concatenate([norm_mag, mask, ones], axis=1)
    g, c_conv = nnkit.conv_layer_forward(params, table["gate"], gin)
    return g, (mag_cache, c_conv)


def gate_backward(params, cache, g_gate, table, grads):
    mag_cache, c_conv = cache
    g_in = nnkit.conv_layer_backward(params, table["gate"], c_conv, g_gate, grads)
    g_flow = flow_magnitude_vjp(g_in[:, 0:1], mag_cache)
    g_mask = g_in[:, 1:2]
    return g_flow, g_mask


def enhance_forward(params, features, table):
    """Three dilated branches over the 96-channel stack, fused 1x1 to 32."""
    outs, caches = [], []
    for cdef in table["branches"]:
        y, c = nnkit.conv_layer_forward(params, cdef, features)
        outs.append(y)
        caches.append(c)
    cat = np.concatenate(outs, axis=1)
    fused, c_fuse = nnkit.conv_layer_forward(params, table["enh_fuse"], cat)
    return fused, (caches, c_fuse, outs[0].shape[1])


def enhance_backward(params, cache, g_out, table, grads):
    caches, c_fuse, c = cache
    g_cat = nnkit.conv_layer_backward(params, table["enh_fuse"], c_fuse, g_out, grads)
    g_features = None
    for idx, cdef in enumerate(table["branches"]):
        g = nnkit.conv_layer_backward(
            params, cdef, caches[idx], g_cat[:, idx * c : (idx + 1) * c], grads)
        g_features = g if g_features is None else g_features + g
    return g_features


# ---------------------------------------------------------------------------
# full refinement network
# ---------------------------------------------------------------------------

def stage2_forward(params, l_frames, i_frames, flow_prev, flow_next,
                   mask_prev, mask_next, h_coarse, gate_enabled=True):
    """Batched refinement forward; returns (h_final, cache).

    l_frames/i_frames are [prev, ref, next] lists of (N,3,H,W) arrays;
    flows are (N,2,H,W); masks are (N,1,H,W); h_coarse is (N,3,H,W).
    The six encoder streams, the two gates, and the two neighbor warps are
    each folded into one batched kernel call.
    """
    table = stage2_defs()
    n = l_frames[0].shape[0]
    streams = np.concatenate(list(l_frames) + list(i_frames), axis=0)
    feats, c_enc = nnkit.chain_forward(params, table["enc"], streams)
    pairs = np.concatenate(
        [np.concatenate([feats[k * n : (k + 1) * n],
                         feats[(3 + k) * n : (4 + k) * n]], axis=1)
         for k in range(3)], axis=0)
    fli_all, c_lifuse = nnkit.conv_layer_forward(params, table["li_fuse"], pairs)
    f_prev, f_ref, f_next = (fli_all[k * n : (k + 1) * n] for k in range(3))

    flows2 = np.concatenate([flow_prev, flow_next], axis=0)
    w_both, c_warp = warp_forward(np.concatenate([f_prev, f_next], axis=0), flows2)
    w_prev, w_next = w_both[:n], w_both[n:]

    if gate_enabled:
        masks2 = np.concatenate([mask_prev, mask_next], axis=0)
        g_both, c_gate = gate_forward(params, flows2, masks2, table)
        m_both = g_both * w_both
        m_prev, m_next = m_both[:n], m_both[n:]
    else:
        g_both = c_gate = None
        m_prev, m_next = w_prev, w_next

    enh_in = np.concatenate([m_prev, f_ref, m_next], axis=1)
    enhanced, c_enh = enhance_forward(params, enh_in, table)

    f_h, c_henc = nnkit.chain_forward(params, table["henc"], h_coarse)
    dec_in = np.concatenate([enhanced, f_h], axis=1)
    residual, c_dec = nnkit.chain_forward(params, table["dec"], dec_in)
    pre_clamp = h_coarse + residual
    h_final = np.clip(pre_clamp, 0.0, 1.0)
    cache = (table, n, c_enc, c_lifuse, w_both, c_warp,
             (g_both, c_gate), gate_enabled, c_enh,
             c_henc, c_dec, pre_clamp, f_ref.shape[1])
    return h_final, cache


def stage2_backward(params, cache, g_hfinal, grads):
    """Backward of stage2_forward.

    Returns (g_hcoarse, g_flow_prev, g_flow_next, g_mask_prev, g_mask_next).
    """
    (table, n, c_enc, c_lifuse, w_both, c_warp,
     (g_both, c_gate), gate_enabled, c_enh,
     c_henc, c_dec, pre_clamp, c) = cache

    pass_mask = ((pre_clamp >= 0.0) & (pre_clamp <= 1.0)).astype(g_hfinal.dtype)
    g_pre = g_hfinal * pass_mask
    g_hcoarse = g_pre.copy()
    g_dec_in = nnkit.chain_backward(params, table["dec"], c_dec, g_pre, grads)
    g_enhanced, g_fh = g_dec_in[:, :c], g_dec_in[:, c:]
    g_hcoarse += nnkit.chain_backward(params, table["henc"], c_henc, g_fh, grads)

    g_enh_in = enhance_backward(params, c_enh, g_enhanced, table, grads)
    g_mboth = np.concatenate([g_enh_in[:, :c], g_enh_in[:, 2 * c :]], axis=0)
    g_fref = g_enh_in[:, c : 2 * c]

    if gate_enabled:
        g_wboth = g_mboth * g_both
        g_gate = g_mboth * w_both
        gf_gate, g_mask_both = gate_backward(params, c_gate, g_gate, table, grads)
    else:
        g_wboth = g_mboth
        gf_gate = g_mask_both = None

    g_fboth, g_flow_both = warp_vjp(g_wboth, c_warp)
    if gf_gate is not None:
        g_flow_both = g_flow_both + gf_gate

    g_pairs = np.concatenate([g_fboth[:n], g_fref, g_fboth[n:]], axis=0)
    g_cat = nnkit.conv_layer_backward(params, table["li_fuse"], c_lifuse,
                                      g_pairs, grads)
    g_streams = np.concatenate(
        [g_cat[k * n : (k + 1) * n, :c] for k in range(3)]
        + [g_cat[k * n : (k + 1) * n, c:] for k in range(3)], axis=0)
    nnkit.chain_backward(params, table["enc"], c_enc, g_streams, grads,
                         need_input_grad=False)

    g_mask_prev = g_mask_next = None
    if g_mask_both is not None:
        g_mask_prev, g_mask_next = g_mask_both[:n], g_mask_both[n:]
    return (g_hcoarse, g_flow_both[:n], g_flow_both[n:],
            g_mask_prev, g_mask_next)


# ---------------------------------------------------------------------------
# public single-window operations
# ---------------------------------------------------------------------------

def encode_frame(l_image, i_image, params):
    """F_LI feature of one frame from its LDR and linear-HDR views."""
    if l_image.shape != i_image.shape:
        raise DimMismatch(f"L {l_image.shape} vs I {i_image.shape}")
    table = stage2_defs()
    f, _ = encode_li_forward(
        params, hwc_to_nchw(l_image), hwc_to_nchw(i_image), table)
    return f


def warp_features(features, flow):
    """Channel-wise backward warp of a (N,C,H,W) feature map by an (H,W,2) flow."""
    flow_b = np.repeat(hwc_to_nchw(flow), features.shape[0], axis=0)
    y, _ = warp_forward(features, flow_b.astype(features.dtype))
    return y


def motion_gate(flow, mask, params):
    """Sigmoid gate over [|f|/f_max, M, 1] for one (H, W, 2) flow."""
    values = mask.values if isinstance(mask, MotionMask) else np.asarray(mask)
    table = stage2_defs()
    g, _ = gate_forward(
        params,
        hwc_to_nchw(flow),
        values[None, None].astype(np.float32),
        table,
    )
    return g


def modulate(features, gate):
    """Elementwise feature modulation F_bar = G * F."""
    return features * gate


def enhance(features, params):
    """Dilated three-branch enhancement over a (N,96,H,W) stack."""
    table = stage2_defs()
    y, _ = enhance_forward(params, features, table)
    return y


def fuse_and_decode(enhanced, h_coarse, params):
    """Decode enhanced + coarse-HDR features into the final HDR (clamped)."""
    table = stage2_defs()
    hc = hwc_to_nchw(h_coarse)
    f_h, _ = nnkit.chain_forward(params, table["henc"], hc)
    dec_in = np.concatenate([enhanced, f_h], axis=1)
    residual, _ = nnkit.chain_forward(params, table["dec"], dec_in)
    return nchw_to_hwc(np.clip(hc + residual, 0.0, 1.0))


def run_stage2(window, s1: Stage1Result, params, gate_enabled=True):
    """Full refinement pass over one 3-frame window; returns H_final (H,W,3)."""
    prev, ref, nxt = window
    l_frames = [hwc_to_nchw(f.image) for f in (prev, ref, nxt)]
    i_frames = [hwc_to_nchw(i) for i in s1.hdr_frames]
    h_final, _ = stage2_forward(
        params,
        l_frames,
        i_frames,
        hwc_to_nchw(s1.flow_prev),
        hwc_to_nchw(s1.flow_next),
        s1.mask_prev.values[None, None].astype(np.float32),
        s1.mask_next.values[None, None].astype(np.float32),
        hwc_to_nchw(s1.h_coarse),
        gate_enabled=gate_enabled,
    )
    return nchw_to_hwc(h_final)
