"""Command-line surface: flow / mask / fuse / refine / train / metrics / viz.

Every subcommand is deterministic given identical inputs and seed, writes
its effective configuration to a sidecar JSON, and maps typed errors to
distinct exit codes with a single structured diagnostic line.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from . import metrics, motionphys, stage1, stage2, trainer
from .coarseflow import ClassicalSource, IngestSource
from .errors import F2HDRError, MissingFrameFile, diagnostic_line
from .exposure import TonemapConfig, tonemap_mu
from .tensorio import (
    load_frame,
    load_params,
    read_flow_file,
    read_manifest,
    read_pfm,
    write_flow_file,
    write_ldr_png,
    write_pfm,
)


# ---------------------------------------------------------------------------
# visualization emitters
# ---------------------------------------------------------------------------

def flow_to_color(flow, max_magnitude=None):
    """Standard flow color wheel: hue = direction, saturation = |f| / max.

    Zero flow renders white; the per-file normalizer is returned so callers
    can record it.
    """
    u = flow[:, :, 0].astype(np.float64)
    v = flow[:, :, 1].astype(np.float64)
    mag = np.sqrt(u * u + v * v)
    if max_magnitude is None:
        max_magnitude = float(mag.max())
    norm = mag / max_magnitude if max_magnitude > 0 else np.zeros_like(mag)
    hue = (np.arctan2(-v, -u) / np.pi + 1.0) / 2.0  # [0,1)
    sat = np.clip(norm, 0.0, 1.0)
    val = np.ones_like(sat)
    return _hsv_to_rgb(hue, sat, val), max_magnitude


def _hsv_to_rgb(h, s, v):
    i = np.floor(h * 6.0).astype(np.int64) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - f * s)
    t = v * (1.0 - (1.0 - f) * s)
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=2)


def save_png_with_text(rgb01, path, text=None):
    """8-bit PNG via Pillow so metadata text chunks can be attached."""
    arr = np.clip(np.rint(np.asarray(rgb01, dtype=np.float64) * 255.0),
                  0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    img = Image.fromarray(arr)
    info = PngInfo()
    for key, value in (text or {}).items():
        info.add_text(key, str(value))
    img.save(path, pnginfo=info)


def save_flow_png(flow, path):
    rgb, max_mag = flow_to_color(flow)
    save_png_with_text(rgb, path, {"f2hdr:max_magnitude": f"{max_mag:.6f}"})


def save_mask_png(mask_values, path, threshold=None):
    text = {}
    if threshold is not None:
        text["f2hdr:threshold"] = f"{threshold:.9f}"
    save_png_with_text(np.asarray(mask_values)[:, :, None], path, text)


def save_tonemapped_png(hdr, path, mu=5000.0):
    save_png_with_text(tonemap_mu(hdr, TonemapConfig(mu=mu)), path,
                       {"f2hdr:tonemap": f"mu-law mu={mu}"})


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _flow_source(args):
    spec = args.flow_src
    if spec == "classical":
        return ClassicalSource()
    if spec.startswith("ingest:"):
        return IngestSource(directory=Path(spec.split(":", 1)[1]))
    raise MissingFrameFile(f"unknown --flow-src {spec!r}")


def _load_checkpoint(args, required=True):
    if args.checkpoint is None:
        if required:
            raise MissingFrameFile("--checkpoint is required for this command")
        return trainer.build_params(args.seed)
    path = Path(args.checkpoint)
    if not path.exists():
        raise MissingFrameFile(f"checkpoint {path} does not exist")
    return load_params(path)


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_sidecar(args, out_dir):
    effective = {k: str(v) for k, v in vars(args).items() if k != "func"}
    with open(out_dir / "effective_config.json", "w") as f:
        json.dump(effective, f, indent=2, sort_keys=True)


def _jobs(args):
    if os.environ.get("F2HDR_NO_PARALLEL") == "1":
        return 1
    return max(1, args.jobs)


def _map_windows(fn, indices, jobs):
    if jobs == 1:
        for t in indices:
            fn(t)
        return
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        list(pool.map(fn, indices))


def _window(manifest, t):
    return [load_frame(manifest, t - 1), load_frame(manifest, t),
            load_frame(manifest, t + 1)]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_flow(args):
    manifest = read_manifest(args.manifest, gamma=args.gamma)
    src = _flow_source(args)
    params = _load_checkpoint(args, required=False) \
        if args.checkpoint else None
    out = _out_dir(args)
    _write_sidecar(args, out)

    def run(t):
        window = _window(manifest, t)
        if params is not None:
            s1 = stage1.run_stage1(window, src, params, tag=f"{t:04d}",
                                   lam=args.lam)
            write_flow_file(s1.coarse_prev, out / f"coarse_{t:04d}_prev.flo")
            write_flow_file(s1.coarse_next, out / f"coarse_{t:04d}_next.flo")
            write_flow_file(s1.flow_prev, out / f"refined_{t:04d}_prev.flo")
            write_flow_file(s1.flow_next, out / f"refined_{t:04d}_next.flo")
        else:
            from .coarseflow import estimate_coarse_pair
            from .exposure import exposure_normalize

            prev, ref, nxt = window
            fp = estimate_coarse_pair(exposure_normalize(ref, prev.exposure),
                                      prev.image, src, tag=f"{t:04d}_prev")
            fn = estimate_coarse_pair(exposure_normalize(ref, nxt.exposure),
                                      nxt.image, src, tag=f"{t:04d}_next")
            write_flow_file(fp, out / f"coarse_{t:04d}_prev.flo")
            write_flow_file(fn, out / f"coarse_{t:04d}_next.flo")

    _map_windows(run, manifest.reference_indices(), _jobs(args))
    return 0


def cmd_mask(args):
    flow = read_flow_file(args.flow_file)
    params = _load_checkpoint(args)
    out = _out_dir(args)
    _write_sidecar(args, out)
    mask = motionphys.build_mask(flow, params)
    stem = Path(args.flow_file).stem
    write_pfm(mask.values.astype(np.float32)[:, :, None],
              out / f"mask_{stem}.pfm")
    save_mask_png(mask.values, out / f"mask_{stem}.png",
                  threshold=mask.threshold_used)
    return 0


def _run_windows(args, refine):
    manifest = read_manifest(args.manifest, gamma=args.gamma)
    src = _flow_source(args)
    params = _load_checkpoint(args)
    out = _out_dir(args)
    _write_sidecar(args, out)
    prefix = "hfinal" if refine else "hcoarse"

    def run(t):
        window = _window(manifest, t)
        s1 = stage1.run_stage1(window, src, params, tag=f"{t:04d}",
                               lam=args.lam)
        result = s1.h_coarse
        if refine:
            result = stage2.run_stage2(window, s1, params)
        write_pfm(result, out / f"{prefix}_{t:04d}.pfm")
        save_tonemapped_png(result, out / f"{prefix}_{t:04d}.png", mu=args.mu)

    _map_windows(run, manifest.reference_indices(), _jobs(args))
    return 0


def cmd_fuse(args):
    return _run_windows(args, refine=False)


def cmd_refine(args):
    return _run_windows(args, refine=True)


def cmd_train(args):
    cfg = trainer.TrainConfig(seed=args.seed, out_dir=Path(args.out),
                              mu=args.mu)
    if args.config:
        with open(args.config) as f:
            overrides = json.load(f)
        fields = {k: overrides[k] for k in overrides
                  if k in trainer.TrainConfig.__dataclass_fields__}
        from dataclasses import replace

        cfg = replace(cfg, **fields)
        cfg.out_dir = Path(args.out)
    out = _out_dir(args)
    _write_sidecar(args, out)
    trainer.train(cfg, log_fn=lambda s: print(s, flush=True))
    return 0


def cmd_metrics(args):
    manifest = read_manifest(args.manifest, gamma=args.gamma)
    out = _out_dir(args)
    _write_sidecar(args, out)
    report = metrics.MetricReport()
    for t in manifest.reference_indices():
        result_path = Path(args.results) / f"{args.prefix}_{t:04d}.pfm"
        gt_path = Path(args.gt) / f"gt_{t:04d}.pfm"
        if not result_path.exists():
            raise MissingFrameFile(f"missing result {result_path}")
        if not gt_path.exists():
            raise MissingFrameFile(f"missing ground truth {gt_path}")
        result = read_pfm(result_path)
        gt = read_pfm(gt_path)
        psnr_t, ssim_t, psnr_l, ssim_l = metrics.compare_hdr(result, gt,
                                                             mu=args.mu)
        report.records.append(metrics.FrameRecord(
            index=t, psnr_t=psnr_t, ssim_t=ssim_t,
            psnr_l=psnr_l, ssim_l=ssim_l))
    report.write(out / "metrics.tsv")
    with open(out / "metrics_summary.json", "w") as f:
        json.dump(report.aggregate(), f, indent=2, sort_keys=True)
    return 0


def cmd_viz(args):
    out = _out_dir(args)
    _write_sidecar(args, out)
    path = Path(args.input)
    if path.suffix == ".flo":
        save_flow_png(read_flow_file(path), out / f"{path.stem}_flow.png")
    elif path.suffix == ".pfm":
        image = read_pfm(path)
        if image.shape[2] == 1:
            save_mask_png(image[:, :, 0], out / f"{path.stem}_heat.png")
        else:
            save_tonemapped_png(image, out / f"{path.stem}_tm.png", mu=args.mu)
    else:
        raise MissingFrameFile(f"unsupported viz input {path}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="f2hdr",
        description="Two-stage HDR video reconstruction pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, manifest=True, checkpoint=True):
        if manifest:
            p.add_argument("--manifest", required=True)
        if checkpoint:
            p.add_argument("--checkpoint", default=None)
        p.add_argument("--flow-src", default="classical",
                       help="classical | ingest:<dir>")
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--mu", type=float, default=5000.0)
        p.add_argument("--gamma", type=float, default=2.2)
        p.add_argument("--lambda", dest="lam", type=float,
                       default=stage1.FLOW_LAMBDA)

    p = sub.add_parser("flow", help="emit coarse (and refined) flow files")
    common(p)
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("mask", help="motion mask from a flow file")
    p.add_argument("--flow-file", required=True)
    common(p, manifest=False)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("fuse", help="stage-1 coarse HDR per window")
    common(p)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("refine", help="stage-1 + stage-2 final HDR per window")
    common(p)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("train", help="toy-scale training run")
    p.add_argument("--config", default=None, help="JSON TrainConfig overrides")
    common(p, manifest=False, checkpoint=False)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("metrics", help="compare result PFMs against GT PFMs")
    p.add_argument("--results", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--prefix", default="hfinal")
    common(p)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("viz", help="render a .flo or .pfm as PNG")
    p.add_argument("--input", required=True)
    common(p, manifest=False, checkpoint=False)
    p.set_defaults(func=cmd_viz)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except F2HDRError as err:
        print(diagnostic_line(err), file=sys.stderr)
        return err.exit_code


if __name__ == "__main__":
    sys.exit(main())
