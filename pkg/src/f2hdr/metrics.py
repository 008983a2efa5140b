"""Quantitative evaluation: PSNR/SSIM in mu-law and linear HDR domains,
warping quality, and sliding-window sequence reports.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimMismatch, MissingFrameFile
from .exposure import TonemapConfig, tonemap_mu
from .tensorio import SequenceManifest, load_frame, read_pfm

PSNR_CAP = 99.0
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
WARP_BORDER = 8


def psnr(a, b, peak=1.0):
    """10 log10(peak^2 / MSE) in dB, capped at 99.0 (zero-MSE sentinel)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise DimMismatch(f"psnr shapes differ: {a.shape} vs {b.shape}")
    if peak <= 0:
        raise DimMismatch(f"peak must be > 0, got {peak}")
    mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
    if mse == 0.0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(peak * peak / mse), PSNR_CAP))


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


_SSIM_WIN = _gaussian_window()


def _filter_valid(x, kernel):
    """2-D correlation, 'valid' positions only (no padding)."""
    kh, kw = kernel.shape
    oh, ow = x.shape[0] - kh + 1, x.shape[1] - kw + 1
    out = np.zeros((oh, ow), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            out += kernel[i, j] * x[i : i + oh, j : j + ow]
    return out


def ssim(a, b, peak=1.0):
    """Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), K1/K2 = .01/.03,
    averaged over valid window positions, per channel then across channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimMismatch(f"ssim shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise DimMismatch(f"ssim needs >= {SSIM_WINDOW}px per side, got {a.shape}")
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    values = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mu_x = _filter_valid(x, _SSIM_WIN)
        mu_y = _filter_valid(y, _SSIM_WIN)
        var_x = _filter_valid(x * x, _SSIM_WIN) - mu_x**2
        var_y = _filter_valid(y * y, _SSIM_WIN) - mu_y**2
        cov = _filter_valid(x * y, _SSIM_WIN) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
        den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
        values.append(float((num / den).mean()))
    return float(np.mean(values))


def warping_quality(warped_ldr, target_ldr, border=WARP_BORDER):
    """(PSNR, SSIM) of an exposure-matched warp, excluding a border band."""
    warped_ldr = np.asarray(warped_ldr)
    target_ldr = np.asarray(target_ldr)
    if warped_ldr.shape != target_ldr.shape:
        raise DimMismatch(
            f"shapes differ: {warped_ldr.shape} vs {target_ldr.shape}")
    w = warped_ldr[border:-border, border:-border]
    t = target_ldr[border:-border, border:-border]
    return psnr(w, t), ssim(w, t)


@dataclass
class FrameRecord:
    index: int
    psnr_t: float
    ssim_t: float
    psnr_l: float
    ssim_l: float
    epe: float = None
    warp_psnr: float = None


@dataclass
class MetricReport:
    records: list = field(default_factory=list)

    def aggregate(self):
        """Arithmetic means of the finite per-frame values, keyed by metric."""
        out = {}
        for key in ("psnr_t", "ssim_t", "psnr_l", "ssim_l", "epe", "warp_psnr"):
            vals = [getattr(r, key) for r in self.records
                    if getattr(r, key) is not None]
            if vals:
                out[key] = float(np.mean(vals))
        return out

    def write(self, path):
        """Tab-separated records plus a `# mean` trailer line."""
        agg = self.aggregate()
        keys = ("psnr_t", "ssim_t", "psnr_l", "ssim_l", "epe", "warp_psnr")
        with open(path, "w") as f:
            f.write("# frame\t" + "\t".join(keys) + "\n")
            f.write(f"# psnr cap {PSNR_CAP} dB; hdr-vdp-2 not computed\n")
            for r in self.records:
                cells = [str(r.index)]
                for key in keys:
                    v = getattr(r, key)
                    cells.append("" if v is None else f"{v:.6f}")
                f.write("\t".join(cells) + "\n")
            cells = ["# mean"]
            for key in keys:
                cells.append(f"{agg[key]:.6f}" if key in agg else "")
            f.write("\t".join(cells) + "\n")


def compare_hdr(result, gt, mu=5000.0):
    """PSNR/SSIM in the tonemapped and linear domains for one frame pair."""
    cfg = TonemapConfig(mu=mu)
    tm_r = tonemap_mu(result, cfg)
    tm_g = tonemap_mu(gt, cfg)
    return (psnr(tm_r, tm_g), ssim(tm_r, tm_g), psnr(result, gt),
            ssim(result, gt))


def evaluate_sequence(manifest: SequenceManifest, params, flow_src, gt_dir,
                      mu=5000.0, gate_enabled=True) -> MetricReport:
    """Sliding-window evaluation of a manifest against per-frame GT HDR PFMs.

    GT files are looked up as `<gt_dir>/gt_<index:04d>.pfm`. Frames lacking
    both neighbors are skipped, not mirrored.
    """
    from .stage1 import run_stage1
    from .stage2 import run_stage2

    report = MetricReport()
    for t in manifest.reference_indices():
        gt_path = Path(gt_dir) / f"gt_{t:04d}.pfm"
        if not gt_path.exists():
            raise MissingFrameFile(f"missing ground truth {gt_path}")
        gt = read_pfm(gt_path)
        window = [load_frame(manifest, t - 1), load_frame(manifest, t),
                  load_frame(manifest, t + 1)]
        s1 = run_stage1(window, flow_src, params, tag=f"{t:04d}")
        h_final = run_stage2(window, s1, params, gate_enabled=gate_enabled)
        psnr_t, ssim_t, psnr_l, ssim_l = compare_hdr(h_final, gt, mu=mu)
        report.records.append(FrameRecord(
            index=t, psnr_t=psnr_t, ssim_t=ssim_t,
            psnr_l=psnr_l, ssim_l=ssim_l))
    return report
