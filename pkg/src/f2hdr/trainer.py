"""Toy-scale end-to-end training: synthetic alternating-exposure windows
with closed-form ground-truth flow, mu-law L1 loss, Adam, checkpointing.

The training graph composes the stage-1 networks (adapter + fusion U-Net),
the motion-mask pipeline, and the stage-2 refiner; its backward pass is the
explicit reverse composition of each block's VJP.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def _seed_rng(*parts):
    """Deterministic Generator from a flat tuple of ints (nested tuples ok)."""
    flat = []
    for p in parts:
        if isinstance(p, (tuple, list)):
            flat.extend(int(x) for x in p)
        else:
            flat.append(int(p))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(flat)))

from . import coarseflow, metrics, motionphys, nnkit, stage1, stage2
from .coarseflow import ClassicalSource
from .errors import DimMismatch, ShapeMismatch
from .exposure import TonemapConfig, exposure_normalize, tonemap_mu, tonemap_mu_derivative
from .tensorio import ExposureFrame, ParamStore, save_params


# ---------------------------------------------------------------------------
# model parameters
# ---------------------------------------------------------------------------

def all_model_defs():
    return (stage1.all_stage1_defs() + motionphys.weight_head_defs()
            + stage2.all_stage2_defs())


def build_params(seed=0) -> ParamStore:
    """Initialize every network parameter, fully determined by the seed."""
    rng = _seed_rng(seed, 11)
    params = ParamStore()
    for cdef in all_model_defs():
        nnkit.init_conv_params(params, rng, cdef)
    return params


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneConfig:
    exposures: tuple = (1.0, 4.0)
    noise_level: float = 0.005
    saturation_frac: float = 0.15
    max_translation: float = 2.5
    max_rotation: float = 0.02
    max_divergence: float = 0.015
    gamma: float = 2.2
    texture_blobs: int = 24
    quantize_levels: int = 255
    margin: int = 8


@dataclass
class SynthWindow:
    frames: list                 # [prev, ref, next] ExposureFrames
    gt_flow_prev: np.ndarray     # (H,W,2)
    gt_flow_next: np.ndarray
    gt_hdr: np.ndarray           # (H,W,3) in [0,1]


def _sample_bilinear(img, xs, ys):
    """Gather img (H,W,C) at float coords (clamped); xs/ys shaped (h,w)."""
    h, w = img.shape[:2]
    xs = np.clip(xs, 0, w - 1)
    ys = np.clip(ys, 0, h - 1)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    return ((1 - fy) * (1 - fx) * img[y0, x0] + (1 - fy) * fx * img[y0, x1]
            + fy * (1 - fx) * img[y1, x0] + fy * fx * img[y1, x1])


def _base_texture(rng, size, cfg: SceneConfig):
    """Smooth random multi-blob texture in [0,1], shaped so that roughly
    `saturation_frac` of the values exceed 1/e_high (long-exposure clipping)."""
    n = size + 2 * cfg.margin
    yy, xx = np.meshgrid(np.arange(n, dtype=np.float64),
                         np.arange(n, dtype=np.float64), indexing="ij")
    tex = np.zeros((n, n, 3))
    for _ in range(cfg.texture_blobs):
        cy, cx = rng.uniform(0, n, 2)
        sig = rng.uniform(2.0, 10.0)
        amp = rng.uniform(0.2, 1.0)
        color = rng.uniform(0.3, 1.0, 3)
        blob = amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig**2))
        tex += blob[..., None] * color
    for _ in range(2):
        fy, fx = rng.uniform(0.5, 2.0, 2)
        phase = rng.uniform(0, 2 * np.pi, 2)
        wave = 0.25 * np.sin(2 * np.pi * fy * yy / n + phase[0]) \
            * np.sin(2 * np.pi * fx * xx / n + phase[1])
        tex += wave[..., None] * rng.uniform(0.3, 1.0, 3)
    tex -= tex.min()
    tex /= tex.max() + 1e-12
    # push the upper quantile above the long-exposure saturation point
    e_high = max(cfg.exposures)
    q = float(np.quantile(tex, 1.0 - cfg.saturation_frac))
    if 0.0 < q < 1.0:
        power = np.log(1.0 / e_high) / np.log(q)
        tex = tex ** max(power, 0.05)
    return tex


def synth_window(seed, size, cfg: SceneConfig = SceneConfig()) -> SynthWindow:
    """Deterministic 3-frame alternating-exposure window with exact GT flow.

    The scene at offset s in {-1, 0, +1} is the base texture observed through
    the affine map phi_s(p) = c + (1 + a*s) R(w*s) (p - c) + s*d, so both the
    frames and the backward flows from the reference to its neighbors have
    closed forms.
    """
    rng = _seed_rng(seed, 5)
    cfg_m = cfg.margin
    base = _base_texture(rng, size, cfg)
    d = rng.uniform(-cfg.max_translation, cfg.max_translation, 2)
    omega = rng.uniform(-cfg.max_rotation, cfg.max_rotation)
    a = rng.uniform(-cfg.max_divergence, cfg.max_divergence)
    ref_high = bool(rng.integers(0, 2))
    e_low, e_high = min(cfg.exposures), max(cfg.exposures)
    e_ref = e_high if ref_high else e_low
    e_nb = e_low if ref_high else e_high

    center = (size - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64),
                         np.arange(size, dtype=np.float64), indexing="ij")

    def warp_matrix(s):
        scale = 1.0 + a * s
        th = omega * s
        return scale * np.array([[np.cos(th), -np.sin(th)],
                                 [np.sin(th), np.cos(th)]])

    def phi(s):
        mat = warp_matrix(s)
        px = mat[0, 0] * (xx - center) + mat[0, 1] * (yy - center) + center + s * d[0]
        py = mat[1, 0] * (xx - center) + mat[1, 1] * (yy - center) + center + s * d[1]
        return px, py

    def phi_inv(s):
        mat = np.linalg.inv(warp_matrix(s))
        qx = xx - s * d[0] - center
        qy = yy - s * d[1] - center
        px = mat[0, 0] * qx + mat[0, 1] * qy + center
        py = mat[1, 0] * qx + mat[1, 1] * qy + center
        return px, py

    hdr_frames = []
    for s in (-1, 0, 1):
        px, py = phi(s)
        hdr_frames.append(_sample_bilinear(base, px + cfg_m, py + cfg_m))

    def gt_flow(s):
        px, py = phi_inv(s)
        return np.stack([px - xx, py - yy], axis=2).astype(np.float32)

    frames = []
    for s, hdr in zip((-1, 0, 1), hdr_frames):
        e = e_ref if s == 0 else e_nb
        ldr = np.clip(hdr * e, 0.0, None) ** (1.0 / cfg.gamma)
        ldr = ldr + rng.normal(0.0, cfg.noise_level / e, ldr.shape)
        ldr = np.clip(np.rint(np.clip(ldr, 0.0, 1.0) * cfg.quantize_levels)
                      / cfg.quantize_levels, 0.0, 1.0)
        frames.append(ExposureFrame(image=ldr.astype(np.float32), exposure=e,
                                    gamma=cfg.gamma))
    return SynthWindow(
        frames=frames,
        gt_flow_prev=gt_flow(-1),
        gt_flow_next=gt_flow(1),
        gt_hdr=hdr_frames[1].astype(np.float32),
    )


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def loss_mu_l1(h_final, h_gt, cfg: TonemapConfig = TonemapConfig()):
    """Mean L1 distance between mu-law tonemapped images.

    Returns (scalar loss, gradient w.r.t. h_final); sign(0) is 0 so the
    gradient vanishes exactly where the tonemapped values agree.
    """
    h_final = np.asarray(h_final)
    h_gt = np.asarray(h_gt)
    if h_final.shape != h_gt.shape:
        raise DimMismatch(f"{h_final.shape} vs {h_gt.shape}")
    ta = tonemap_mu(h_final, cfg)
    tb = tonemap_mu(h_gt, cfg)
    diff = ta - tb
    loss = float(np.abs(diff).mean(dtype=np.float64))
    grad = (np.sign(diff) * tonemap_mu_derivative(h_final, cfg)
            / np.asarray(h_final.size, h_final.dtype))
    return loss, grad.astype(h_final.dtype)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update, in insertion order over `params`.

    Parameters without a gradient entry decay their moments (zero grad).
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name in params.names():
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ShapeMismatch(f"{name}: grad {g.shape} vs param {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m = b1 * m + (1.0 - b1) * g.astype(p.dtype)
        v = b2 * v + (1.0 - b2) * (g.astype(p.dtype) ** 2)
        state.m[name] = m
        state.v[name] = v
        m_hat = m / np.asarray(bc1, p.dtype)
        v_hat = v / np.asarray(bc2, p.dtype)
        params[name] = p - np.asarray(state.lr, p.dtype) * m_hat / (
            np.sqrt(v_hat) + np.asarray(state.eps, p.dtype))
    return params, state


# ---------------------------------------------------------------------------
# batched training graph
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    lp: np.ndarray   # (N,3,H,W) LDR frames
    lr: np.ndarray
    ln: np.ndarray
    ip: np.ndarray   # matching linear-HDR frames
    ir: np.ndarray
    inx: np.ndarray
    fp: np.ndarray   # (N,2,H,W) coarse flows
    fn: np.ndarray
    hgt: np.ndarray  # (N,3,H,W) ground-truth HDR


def pipeline_forward(params, batch: Batch, gate_enabled=True,
                     tonemap_cfg: TonemapConfig = TonemapConfig()):
    """Full two-stage forward pass; returns (loss, cache, aux)."""
    lam = stage1.FLOW_LAMBDA
    x_t = stage1.adapter_input_batch(batch.lp, batch.lr, batch.ln,
                                     batch.fp, batch.fn, lam)
    d_prev, d_next, c_adapter = stage1.adapter_forward(params, x_t)
    ftp = stage1.refine_flow(batch.fp, d_prev, lam)
    ftn = stage1.refine_flow(batch.fn, d_next, lam)
    n = ftp.shape[0]
    flows2 = np.concatenate([ftp, ftn], axis=0)

    warped, c_warp = stage1.warp_forward(
        np.concatenate([batch.ip, batch.inx], axis=0), flows2)
    warped_p, warped_n = warped[:n], warped[n:]
    frames = [warped_p, warped_n, batch.ir, batch.inx, batch.ip]
    u = np.concatenate(frames, axis=1)
    w5, c_unet = stage1.fusion_forward(params, u)
    h_coarse, c_fuse = stage1.fuse_forward(frames, w5)

    if gate_enabled:
        masks2, _, c_masks = motionphys.mask_forward(flows2, params)
        mask_p, mask_n = masks2[:n], masks2[n:]
    else:
        mask_p = mask_n = c_masks = None

    h_final, c_s2 = stage2.stage2_forward(
        params, [batch.lp, batch.lr, batch.ln],
        [batch.ip, batch.ir, batch.inx],
        ftp, ftn, mask_p, mask_n, h_coarse, gate_enabled=gate_enabled)
    loss, g_hf = loss_mu_l1(h_final, batch.hgt, tonemap_cfg)
    cache = (c_adapter, n, c_warp, c_unet, c_fuse, c_masks, c_s2,
             g_hf, gate_enabled)
    aux = {"h_coarse": h_coarse, "h_final": h_final,
           "flow_prev": ftp, "flow_next": ftn}
    return loss, cache, aux


def pipeline_backward(params, cache):
    """Explicit reverse pass of pipeline_forward; returns the gradient dict."""
    (c_adapter, n, c_warp, c_unet, c_fuse, c_masks, c_s2,
     g_hf, gate_enabled) = cache
    grads = {}
    g_hc, g_ftp, g_ftn, g_mask_p, g_mask_n = stage2.stage2_backward(
        params, c_s2, g_hf, grads)

    if gate_enabled:
        g_masks2 = np.concatenate([g_mask_p, g_mask_n], axis=0)
        g_flow_masks = motionphys.mask_backward(g_masks2, c_masks, params, grads)
        g_ftp = g_ftp + g_flow_masks[:n]
        g_ftn = g_ftn + g_flow_masks[n:]

    g_w5, g_frames = stage1.fuse_vjp(
        g_hc, c_fuse, need_frame_grads=[True, True, False, False, False])
    g_u = stage1.fusion_backward(params, c_unet, g_w5, grads)
    g_warped_p = g_frames[0] + g_u[:, 0:3]
    g_warped_n = g_frames[1] + g_u[:, 3:6]

    _, g_flow_warp = stage1.warp_vjp(
        np.concatenate([g_warped_p, g_warped_n], axis=0), c_warp,
        need_image_grad=False)
    g_ftp = g_ftp + g_flow_warp[:n]
    g_ftn = g_ftn + g_flow_warp[n:]

    lam = np.asarray(stage1.FLOW_LAMBDA, g_ftp.dtype)
    stage1.adapter_backward(params, c_adapter, lam * g_ftp, lam * g_ftn, grads)
    return grads


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------

@dataclass
class WindowTensors:
    """One synthetic window converted to NCHW training tensors."""

    ldr: list        # three (3,H,W) float32
    exposures: list
    coarse: list     # two (2,H,W) coarse flows
    gt: list         # two (2,H,W) GT flows
    hgt: np.ndarray  # (3,H,W)
    gamma: float


def window_to_tensors(win: SynthWindow, flow_cfg: ClassicalSource) -> WindowTensors:
    prev, ref, nxt = win.frames
    norm_p = exposure_normalize(ref, prev.exposure)
    norm_n = exposure_normalize(ref, nxt.exposure)
    fp = coarseflow.classical_flow(norm_p, prev.image, flow_cfg)
    fn = coarseflow.classical_flow(norm_n, nxt.image, flow_cfg)
    to_chw = lambda img: np.ascontiguousarray(np.moveaxis(img, 2, 0))
    return WindowTensors(
        ldr=[to_chw(f.image) for f in win.frames],
        exposures=[f.exposure for f in win.frames],
        coarse=[to_chw(fp), to_chw(fn)],
        gt=[to_chw(win.gt_flow_prev), to_chw(win.gt_flow_next)],
        hgt=to_chw(win.gt_hdr),
        gamma=ref.gamma,
    )


def _ldr_to_hdr_chw(ldr, exposure, gamma):
    return (ldr.astype(np.float64) ** gamma / exposure).astype(np.float32)


def _flip_image(x, horizontal, vertical):
    if horizontal:
        x = x[..., ::-1]
    if vertical:
        x = x[..., ::-1, :]
    return np.ascontiguousarray(x)


def _flip_flow(f, horizontal, vertical):
    f = _flip_image(f, horizontal, vertical)
    if horizontal:
        f = f * np.array([-1.0, 1.0], dtype=f.dtype).reshape(2, 1, 1)
    if vertical:
        f = f * np.array([1.0, -1.0], dtype=f.dtype).reshape(2, 1, 1)
    return np.ascontiguousarray(f)


def assemble_batch(windows, indices, rng=None) -> Batch:
    """Stack windows into a Batch, with optional random flip augmentation."""
    cols = {k: [] for k in ("lp", "lr", "ln", "ip", "ir", "inx",
                            "fp", "fn", "hgt")}
    for idx in indices:
        win = windows[idx]
        hflip = vflip = False
        if rng is not None:
            hflip = bool(rng.integers(0, 2))
            vflip = bool(rng.integers(0, 2))
        ldr = [_flip_image(x, hflip, vflip) for x in win.ldr]
        flows = [_flip_flow(f, hflip, vflip) for f in win.coarse]
        hgt = _flip_image(win.hgt, hflip, vflip)
        cols["lp"].append(ldr[0])
        cols["lr"].append(ldr[1])
        cols["ln"].append(ldr[2])
        for key, pos in (("ip", 0), ("ir", 1), ("inx", 2)):
            cols[key].append(
                _ldr_to_hdr_chw(ldr[pos], win.exposures[pos], win.gamma))
        cols["fp"].append(flows[0])
        cols["fn"].append(flows[1])
        cols["hgt"].append(hgt)
    return Batch(**{k: np.stack(v) for k, v in cols.items()})


# ---------------------------------------------------------------------------
# training driver
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    size: int = 64
    dataset_size: int = 500
    val_size: int = 50
    seed: int = 0
    lr: float = 1e-4
    lr_halve_epochs: int = 10
    gate_enabled: bool = True
    scene: SceneConfig = field(default_factory=SceneConfig)
    flow: ClassicalSource = field(default_factory=ClassicalSource)
    out_dir: Path = None
    mu: float = 5000.0


def build_dataset(cfg: TrainConfig, validation=False):
    """Deterministic window set; validation uses a disjoint seed stream."""
    count = cfg.val_size if validation else cfg.dataset_size
    offset = 1_000_000 if validation else 0
    out = []
    for i in range(count):
        win = synth_window((cfg.seed, offset + i), cfg.size, cfg.scene)
        out.append(window_to_tensors(win, cfg.flow))
    return out


def build_dataset_raw(cfg: TrainConfig, validation=False):
    count = cfg.val_size if validation else cfg.dataset_size
    offset = 1_000_000 if validation else 0
    return [synth_window((cfg.seed, offset + i), cfg.size, cfg.scene)
            for i in range(count)]


def train(cfg: TrainConfig, windows=None, log_fn=None):
    """Run the toy training loop; returns (params, losses).

    Writes `loss_log.txt` (step<TAB>loss), `checkpoint_init.f2hw` and
    `checkpoint_final.f2hw` into cfg.out_dir when it is set.
    """
    params = build_params(cfg.seed)
    if cfg.out_dir is not None:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_params(params, out / "checkpoint_init.f2hw")
    if windows is None:
        windows = build_dataset(cfg)
    rng = _seed_rng(cfg.seed, 23)
    state = AdamState(lr=cfg.lr)
    tcfg = TonemapConfig(mu=cfg.mu)
    steps_per_epoch = max(1, cfg.dataset_size // cfg.batch_size)
    losses = []
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        epoch = step // steps_per_epoch
        state.lr = cfg.lr * 0.5 ** (epoch // cfg.lr_halve_epochs)
        indices = rng.integers(0, len(windows), cfg.batch_size)
        batch = assemble_batch(windows, indices, rng)
        loss, cache, _ = pipeline_forward(
            params, batch, gate_enabled=cfg.gate_enabled, tonemap_cfg=tcfg)
        grads = pipeline_backward(params, cache)
        adam_step(params, grads, state)
        losses.append(loss)
        if log_fn is not None and (step % 50 == 0 or step == cfg.steps - 1):
            log_fn(f"step {step} loss {loss:.6f} "
                   f"({time.perf_counter() - t0:.1f}s)")
    if cfg.out_dir is not None:
        out = Path(cfg.out_dir)
        save_params(params, out / "checkpoint_final.f2hw")
        with open(out / "loss_log.txt", "w") as f:
            for step, loss in enumerate(losses):
                f.write(f"{step}\t{loss:.9f}\n")
    return params, losses


# ---------------------------------------------------------------------------
# held-out evaluation
# ---------------------------------------------------------------------------

@dataclass
class HeldoutReport:
    epe_coarse: float
    epe_refined: float
    warp_psnr_coarse: float
    warp_psnr_refined: float
    psnr_t_coarse: float
    psnr_t_final: float


def _interior(img, border=8):
    return img[border:-border, border:-border]


def evaluate_heldout(params, val_windows, gate_enabled=True,
                     mu=5000.0) -> HeldoutReport:
    """Flow accuracy, warping quality and mu-law PSNR on held-out windows."""
    tcfg = TonemapConfig(mu=mu)
    epe_c, epe_r, wp_c, wp_r, pt_c, pt_f = [], [], [], [], [], []
    chw_to_hwc = lambda t: np.ascontiguousarray(np.moveaxis(t, 0, 2))
    for win in val_windows:
        batch = assemble_batch([win], [0], rng=None)
        _, _, aux = pipeline_forward(params, batch, gate_enabled=gate_enabled,
                                     tonemap_cfg=tcfg)
        refined = [chw_to_hwc(aux["flow_prev"][0]), chw_to_hwc(aux["flow_next"][0])]
        coarse = [chw_to_hwc(f) for f in win.coarse]
        gt = [chw_to_hwc(f) for f in win.gt]
        for c, r, g in zip(coarse, refined, gt):
            epe_c.append(coarseflow.endpoint_error(c, g))
            epe_r.append(coarseflow.endpoint_error(r, g))
        # warping quality against the exposure-matched reference
        ldr = [chw_to_hwc(x) for x in win.ldr]
        ref_frame = ExposureFrame(image=ldr[1], exposure=win.exposures[1],
                                  gamma=win.gamma)
        for pos, c, r in ((0, coarse[0], refined[0]), (2, coarse[1], refined[1])):
            target = exposure_normalize(ref_frame, win.exposures[pos])
            warped_c = stage1.backward_warp(ldr[pos], c)
            warped_r = stage1.backward_warp(ldr[pos], r)
            wp_c.append(metrics.psnr(_interior(warped_c), _interior(target)))
            wp_r.append(metrics.psnr(_interior(warped_r), _interior(target)))
        hgt = chw_to_hwc(win.hgt)
        pt_c.append(metrics.psnr(tonemap_mu(chw_to_hwc(aux["h_coarse"][0]), tcfg),
                                 tonemap_mu(hgt, tcfg)))
        pt_f.append(metrics.psnr(tonemap_mu(chw_to_hwc(aux["h_final"][0]), tcfg),
                                 tonemap_mu(hgt, tcfg)))
    mean = lambda xs: float(np.mean(xs))
    return HeldoutReport(
        epe_coarse=mean(epe_c), epe_refined=mean(epe_r),
        warp_psnr_coarse=mean(wp_c), warp_psnr_refined=mean(wp_r),
        psnr_t_coarse=mean(pt_c), psnr_t_final=mean(pt_f),
    )
