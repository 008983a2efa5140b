"""Coarse flow sources: ingest of precomputed flow files, or a built-in
classical pyramidal Horn-Schunck estimator, plus flow-accuracy metrics.

Flow convention (pipeline-wide): the field points from the reference frame
to the neighbor, so bilinear-sampling the neighbor at p + f(p) reconstructs
the reference at p.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimMismatch, IngestFileMissing
from .tensorio import read_flow_file

LUMA_WEIGHTS = (0.299, 0.587, 0.114)

# 3x3 neighborhood average used by the Jacobi update
_HS_AVG = np.array(
    [[1 / 12, 1 / 6, 1 / 12], [1 / 6, 0.0, 1 / 6], [1 / 12, 1 / 6, 1 / 12]],
    dtype=np.float64,
)


@dataclass(frozen=True)
class ClassicalSource:
    """Pyramidal Horn-Schunck configuration."""

    levels: int = 3
    iterations: int = 100
    alpha: float = 15.0

    def __post_init__(self):
        if self.levels < 1 or self.iterations < 1 or self.alpha <= 0:
            raise ValueError("levels/iterations >= 1 and alpha > 0 required")


@dataclass(frozen=True)
class IngestSource:
    """Reads coarse flow from `<directory>/coarse_<tag>.flo`."""

    directory: Path

    def flow_path(self, tag):
        return Path(self.directory) / f"coarse_{tag}.flo"


def luma(image):
    """Rec.601 luma of an (H,W,3) image; single-channel images pass through."""
    image = np.asarray(image)
    if image.ndim == 2:
        return image.astype(np.float64)
    if image.shape[2] == 1:
        return image[:, :, 0].astype(np.float64)
    r, g, b = LUMA_WEIGHTS
    return (r * image[:, :, 0] + g * image[:, :, 1] + b * image[:, :, 2]).astype(
        np.float64
    )


def _filter2(x, kernel):
    """2-D correlation with replicate padding (scalar fields, float64)."""
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((ph, ph), (pw, pw)), mode="edge")
    out = np.zeros_like(x)
    for i in range(kh):
        for j in range(kw):
            k = kernel[i, j]
            if k != 0.0:
                out += k * xp[i : i + x.shape[0], j : j + x.shape[1]]
    return out


def _gaussian_kernel5(sigma=1.0):
    ax = np.arange(5, dtype=np.float64) - 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


_GAUSS5 = _gaussian_kernel5()


def _downsample(x):
    return _filter2(x, _GAUSS5)[::2, ::2]


def _central_diff_x(x):
    xp = np.pad(x, ((0, 0), (1, 1)), mode="edge")
    return 0.5 * (xp[:, 2:] - xp[:, :-2])


def _central_diff_y(x):
    xp = np.pad(x, ((1, 1), (0, 0)), mode="edge")
    return 0.5 * (xp[2:, :] - xp[:-2, :])


def _warp_scalar(img, u, v):
    """Bilinear backward warp of a scalar field with clamped coordinates."""
    h, w = img.shape
    xs = np.clip(np.arange(w, dtype=np.float64)[None, :] + u, 0, w - 1)
    ys = np.clip(np.arange(h, dtype=np.float64)[:, None] + v, 0, h - 1)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    return ((1 - fy) * (1 - fx) * img[y0, x0] + (1 - fy) * fx * img[y0, x1]
            + fy * (1 - fx) * img[y1, x0] + fy * fx * img[y1, x1])


def hs_energy(u, v, ix, iy, it, alpha):
    """Objective the Jacobi iteration descends: data term + smoothness.

    Smoothness is the weighted pairwise form matching the 3x3 averaging
    kernel, 0.5 * sum_p sum_q w_q (z_p - z_q)^2 for z in {u, v}.
    """
    data = ix * u + iy * v + it
    total = float((data * data).sum())
    smooth = 0.0
    for (di, dj), wq in (((0, 1), 1 / 6), ((1, 0), 1 / 6),
                         ((1, 1), 1 / 12), ((1, -1), 1 / 12)):
        for z in (u, v):
            a = z[max(di, 0) : z.shape[0] + min(di, 0),
                  max(dj, 0) : z.shape[1] + min(dj, 0)]
            b = z[max(-di, 0) : z.shape[0] + min(-di, 0),
                  max(-dj, 0) : z.shape[1] + min(-dj, 0)]
            diff = a - b
            smooth += wq * float((diff * diff).sum())
    return total + alpha * alpha * smooth


def hs_iterate(a, b_warped, u, v, alpha, iterations, energy_trace=None):
    """Jacobi iterations of Horn-Schunck on an increment flow (u, v)."""
    avg = 0.5 * (a + b_warped)
    ix = _central_diff_x(avg)
    iy = _central_diff_y(avg)
    it = b_warped - a
    den = alpha * alpha + ix * ix + iy * iy
    for _ in range(iterations):
        ubar = _filter2(u, _HS_AVG)
        vbar = _filter2(v, _HS_AVG)
        shared = (ix * ubar + iy * vbar + it) / den
        u = ubar - ix * shared
        v = vbar - iy * shared
        if energy_trace is not None:
            energy_trace.append(hs_energy(u, v, ix, iy, it, alpha))
    return u, v


def classical_flow(a, b, cfg: ClassicalSource = ClassicalSource()):
    """Pyramidal Horn-Schunck flow from reference `a` to neighbor `b`.

    Inputs are [0,1] images (any channel count; converted to luma). Returns
    an (H, W, 2) float32 field in the backward-warp convention.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise DimMismatch(f"image dims differ: {a.shape} vs {b.shape}")
    ga, gb = luma(a), luma(b)
    pyr_a, pyr_b = [ga], [gb]
    for _ in range(cfg.levels - 1):
        if min(pyr_a[-1].shape) < 8:
            break
        pyr_a.append(_downsample(pyr_a[-1]))
        pyr_b.append(_downsample(pyr_b[-1]))

    u = np.zeros_like(pyr_a[-1])
    v = np.zeros_like(pyr_a[-1])
    for level in range(len(pyr_a) - 1, -1, -1):
        la, lb = pyr_a[level], pyr_b[level]
        if u.shape != la.shape:
            scale_x = la.shape[1] / u.shape[1]
            scale_y = la.shape[0] / u.shape[0]
            u = _resize_field(u, la.shape) * scale_x
            v = _resize_field(v, la.shape) * scale_y
        lb_w = _warp_scalar(lb, u, v)
        du, dv = hs_iterate(la, lb_w, np.zeros_like(u), np.zeros_like(v),
                            cfg.alpha, cfg.iterations)
        u = u + du
        v = v + dv
    flow = np.stack([u, v], axis=2).astype(np.float32)
    return flow + np.float32(0.0)  # canonicalize any -0.0 to +0.0


def _resize_field(x, shape):
    from .nnkit import bilinear_resize

    out = bilinear_resize(x[None, None].astype(np.float64), shape[0], shape[1])
    return out[0, 0]


def estimate_coarse_pair(ref_norm, neighbor, src, tag=""):
    """Coarse flow for one (exposure-matched reference, neighbor) pair."""
    ref_norm = np.asarray(ref_norm)
    neighbor = np.asarray(neighbor)
    if ref_norm.shape[:2] != neighbor.shape[:2]:
        raise DimMismatch(
            f"pair dims differ: {ref_norm.shape[:2]} vs {neighbor.shape[:2]}")
    if isinstance(src, IngestSource):
        path = src.flow_path(tag)
        if not path.exists():
            raise IngestFileMissing(f"no ingested flow at {path}")
        flow = read_flow_file(path)
        if flow.shape[:2] != ref_norm.shape[:2]:
            raise DimMismatch(
                f"ingested flow {flow.shape[:2]} vs frames {ref_norm.shape[:2]}")
        return flow
    return classical_flow(ref_norm, neighbor, src)


def endpoint_error(flow, gt):
    """Mean end-point error between two (H, W, 2) flow fields."""
    flow = np.asarray(flow)
    gt = np.asarray(gt)
    if flow.shape != gt.shape:
        raise DimMismatch(f"flow dims differ: {flow.shape} vs {gt.shape}")
    diff = flow.astype(np.float64) - gt.astype(np.float64)
    return float(np.sqrt((diff**2).sum(axis=2)).mean())
