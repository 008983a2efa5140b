"""Physical motion modeling: flow decomposition into translation/divergence/
curl/shear, adaptive motion energy, multi-scale contrast, Otsu-style
thresholding, and the soft tanh motion mask.

The histogram threshold and the contrast normalizer are treated as
constants in the backward pass; the tanh gate stays differentiable through
the salient energy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nnkit

ENERGY_EPS = 1e-8
CONTRAST_EPS = 1e-8
CONTRAST_SCALES = (1, 2, 4)
MASK_GAIN = 8.0
OTSU_BINS = 256

# Sobel kernels normalized by 1/8 so a linear ramp of slope s reports s
SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64) / 8.0
SOBEL_Y = SOBEL_X.T.copy()


@dataclass
class MotionComponents:
    translation: np.ndarray
    divergence: np.ndarray
    curl: np.ndarray
    shear: np.ndarray


@dataclass
class EnergyWeights:
    w_t: np.ndarray
    w_d: np.ndarray
    w_c: np.ndarray
    w_s: np.ndarray


@dataclass
class MotionMask:
    values: np.ndarray
    threshold_used: float


def weight_head_defs():
    """Two-layer conv block mapping a 2-channel flow to 4 softplus weights."""
    return [
        nnkit.ConvDef("mask.conv0", nnkit.ConvSpec(2, 16, 3)),
        nnkit.ConvDef("mask.head", nnkit.ConvSpec(16, 4, 3), act="softplus"),
    ]


# ---------------------------------------------------------------------------
# batched differentiable pipeline (flow (N,2,H,W) -> mask (N,1,H,W))
# ---------------------------------------------------------------------------

def _box_kernel(radius):
    k = 2 * radius + 1
    return np.full((k, k), 1.0 / (k * k), dtype=np.float64)


_BOXES = {s: _box_kernel(s) for s in CONTRAST_SCALES}


def components_forward(flow):
    """Translation/divergence/curl/shear of a batched flow via Sobel stencils."""
    dx = nnkit.fixed_filter2d(flow, SOBEL_X.astype(flow.dtype))
    dy = nnkit.fixed_filter2d(flow, SOBEL_Y.astype(flow.dtype))
    ux, vx = dx[:, 0:1], dx[:, 1:2]
    uy, vy = dy[:, 0:1], dy[:, 1:2]
    u, v = flow[:, 0:1], flow[:, 1:2]
    trans = np.sqrt(u * u + v * v)
    div = ux + vy
    curl = vx - uy
    shear = 0.5 * (uy + vx)
    return trans, div, curl, shear


def mask_forward(flow, params, frozen_stats=None):
    """Full soft-mask pipeline on a batched flow; returns (mask, taus, cache).

    `frozen_stats` = (taus, norm) pins the threshold and the contrast
    normalizer (both are stop-gradient constants); finite-difference checks
    use it to probe exactly the function the backward differentiates.
    """
    trans, div, curl, shear = components_forward(flow)
    weights, w_caches = nnkit.chain_forward(params, weight_head_defs(), flow)
    comps = np.concatenate([trans, np.abs(div), np.abs(curl), np.abs(shear)], axis=1)
    num = (weights * comps).sum(axis=1, keepdims=True)
    den = weights.sum(axis=1, keepdims=True) + np.asarray(ENERGY_EPS, flow.dtype)
    e_m = num / den

    diffs = []
    contrast = np.zeros_like(e_m)
    for s in CONTRAST_SCALES:
        blurred = nnkit.fixed_filter2d(e_m, _BOXES[s].astype(flow.dtype))
        d = e_m - blurred
        diffs.append(d)
        contrast = contrast + np.abs(d)
    contrast = contrast / len(CONTRAST_SCALES)
    if frozen_stats is None:
        norm = contrast.max(axis=(2, 3), keepdims=True)  # constant in backward
    else:
        norm = frozen_stats[1]
    s_multi = contrast / (norm + np.asarray(CONTRAST_EPS, flow.dtype))

    e_s = e_m * (1.0 + 2.0 * s_multi)
    if frozen_stats is None:
        taus = np.array(
            [otsu_threshold(e_s[i, 0]) for i in range(e_s.shape[0])],
            dtype=np.float64,
        )
    else:
        taus = frozen_stats[0]
    t = np.tanh(MASK_GAIN * (e_s - taus.reshape(-1, 1, 1, 1).astype(flow.dtype)))
    mask = 0.5 * (1.0 + t)
    cache = (flow, trans, div, curl, shear, weights, w_caches, comps, num, den,
             e_m, diffs, norm, s_multi, t)
    return mask, taus, cache


def mask_backward(grad_mask, cache, params, grads):
    """Backward of mask_forward; returns the flow gradient."""
    (flow, trans, div, curl, shear, weights, w_caches, comps, num, den,
     e_m, diffs, norm, s_multi, t) = cache
    dtype = flow.dtype
    g_es = grad_mask * (0.5 * MASK_GAIN) * (1.0 - t * t)
    g_em = g_es * (1.0 + 2.0 * s_multi)
    g_smulti = g_es * (2.0 * e_m)

    g_contrast = g_smulti / (norm + np.asarray(CONTRAST_EPS, dtype))
    g_per_scale = g_contrast / len(CONTRAST_SCALES)
    for s, d in zip(CONTRAST_SCALES, diffs):
        gd = np.sign(d) * g_per_scale
        g_em = g_em + gd - nnkit.fixed_filter2d_vjp(gd, _BOXES[s].astype(dtype))

    g_num = g_em / den
    g_den = -(g_em * num) / (den * den)
    g_weights = g_num * comps + g_den
    g_comps = g_num * weights
    g_flow = nnkit.chain_backward(
        params, weight_head_defs(), w_caches, g_weights, grads,
        need_input_grad=True,
    )

    g_trans = g_comps[:, 0:1]
    g_div = g_comps[:, 1:2] * np.sign(div)
    g_curl = g_comps[:, 2:3] * np.sign(curl)
    g_shear = g_comps[:, 3:4] * np.sign(shear)

    u, v = flow[:, 0:1], flow[:, 1:2]
    safe = np.maximum(trans, np.asarray(1e-12, dtype))
    g_flow = g_flow + np.concatenate(
        [g_trans * u / safe, g_trans * v / safe], axis=1
    )
    # adjoint of the Sobel stencils feeding div/curl/shear
    g_ux = g_div
    g_vy = g_div
    g_vx = g_curl + 0.5 * g_shear
    g_uy = -g_curl + 0.5 * g_shear
    g_flow = g_flow + nnkit.fixed_filter2d_vjp(
        np.concatenate([g_ux, g_vx], axis=1), SOBEL_X.astype(dtype))
    g_flow = g_flow + nnkit.fixed_filter2d_vjp(
        np.concatenate([g_uy, g_vy], axis=1), SOBEL_Y.astype(dtype))
    return g_flow


# ---------------------------------------------------------------------------
# single-field public operations
# ---------------------------------------------------------------------------

def _flow_to_batch(flow):
    flow = np.asarray(flow)
    return np.ascontiguousarray(np.moveaxis(flow, 2, 0))[None]


def sobel_gradients(flow):
    """(u_x, u_y, v_x, v_y) of an (H, W, 2) flow, replicate-padded Sobel."""
    batch = _flow_to_batch(flow)
    dx = nnkit.fixed_filter2d(batch, SOBEL_X.astype(batch.dtype))
    dy = nnkit.fixed_filter2d(batch, SOBEL_Y.astype(batch.dtype))
    return dx[0, 0], dy[0, 0], dx[0, 1], dy[0, 1]


def motion_components(flow) -> MotionComponents:
    """Translation / divergence / curl / shear maps of an (H, W, 2) flow."""
    trans, div, curl, shear = components_forward(_flow_to_batch(flow))
    return MotionComponents(
        translation=trans[0, 0], divergence=div[0, 0],
        curl=curl[0, 0], shear=shear[0, 0],
    )


def energy_weights(flow, params) -> EnergyWeights:
    """Adaptive per-pixel weights from the learned conv block (softplus > 0)."""
    w, _ = nnkit.chain_forward(params, weight_head_defs(), _flow_to_batch(flow))
    return EnergyWeights(w_t=w[0, 0], w_d=w[0, 1], w_c=w[0, 2], w_s=w[0, 3])


def motion_energy(components: MotionComponents, weights: EnergyWeights):
    """Weighted-mean motion energy of the four components."""
    num = (weights.w_t * components.translation
           + weights.w_d * np.abs(components.divergence)
           + weights.w_c * np.abs(components.curl)
           + weights.w_s * np.abs(components.shear))
    den = weights.w_t + weights.w_d + weights.w_c + weights.w_s + ENERGY_EPS
    return num / den


def multiscale_contrast(e_m):
    """Scale-averaged |center - surround| of the energy, max-normalized."""
    batch = np.asarray(e_m)[None, None]
    contrast = np.zeros_like(batch)
    for s in CONTRAST_SCALES:
        blurred = nnkit.fixed_filter2d(batch, _BOXES[s].astype(batch.dtype))
        contrast = contrast + np.abs(batch - blurred)
    contrast = contrast / len(CONTRAST_SCALES)
    return (contrast / (contrast.max() + CONTRAST_EPS))[0, 0]


def salient_energy(e_m, s_multi):
    """E_s = E_m * (1 + 2 * S_multi), bounded by [E_m, 3 E_m]."""
    return np.asarray(e_m) * (1.0 + 2.0 * np.asarray(s_multi))


def otsu_threshold(values, bins=OTSU_BINS):
    """Histogram threshold maximizing between-class variance.

    Candidates are the `bins` bin centers over [min, max]; ties resolve to
    the smallest threshold; a constant field returns its own value.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    mn, mx = float(v.min()), float(v.max())
    if mn == mx:
        return mn
    counts, edges = np.histogram(v, bins=bins, range=(mn, mx))
    centers = 0.5 * (edges[:-1] + edges[1:])
    c0 = np.cumsum(counts, dtype=np.float64)
    total = c0[-1]
    m0 = np.cumsum(counts * centers)
    c1 = total - c0
    valid = (c0 > 0) & (c1 > 0)
    mu0 = np.divide(m0, c0, out=np.zeros_like(m0), where=c0 > 0)
    mu1 = np.divide(m0[-1] - m0, c1, out=np.zeros_like(m0), where=c1 > 0)
    score = np.where(valid, (c0 / total) * (c1 / total) * (mu0 - mu1) ** 2, 0.0)
    return float(centers[int(np.argmax(score))])


def soft_mask(e_s, tau) -> MotionMask:
    """M = 0.5 * (1 + tanh(8 * (E_s - tau))), a differentiable (0,1) field."""
    values = 0.5 * (1.0 + np.tanh(MASK_GAIN * (np.asarray(e_s) - tau)))
    return MotionMask(values=values, threshold_used=float(tau))


def build_mask(flow, params) -> MotionMask:
    """Compose the full pipeline for one (H, W, 2) flow field."""
    mask, taus, _ = mask_forward(_flow_to_batch(flow), params)
    return MotionMask(values=mask[0, 0], threshold_used=float(taus[0]))
