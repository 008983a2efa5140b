"""Differentiable kernel set for the small fixed networks in the pipeline.

Tensors are numpy arrays in NCHW layout (float32 at runtime; every op is
dtype-generic so gradient checks can run a float64 twin path). Reverse-mode
gradients are provided per op and composed by explicitly coded backward
passes in the network modules; there is no autodiff graph.

The convolution forward/input-grad/weight-grad kernels are delegated to
torch's functional conv (single-threaded, no autograd), which is the only
way the toy training budget fits on one CPU core; all other ops are numpy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as _F
import torch.nn.grad as _G

torch.set_num_threads(1)  # fixed thread count keeps conv kernels bit-reproducible


@dataclass(frozen=True)
class ConvSpec:
    in_ch: int
    out_ch: int
    kernel: int = 3
    stride: int = 1
    dilation: int = 1
    pad_mode: str = "zero"  # {"zero", "replicate"}

    def __post_init__(self):
        if self.kernel % 2 != 1:
            raise ValueError(f"kernel must be odd, got {self.kernel}")
        if self.stride < 1 or self.dilation < 1:
            raise ValueError("stride and dilation must be >= 1")
        if self.pad_mode not in ("zero", "replicate"):
            raise ValueError(f"bad pad mode {self.pad_mode!r}")

    @property
    def pad(self):
        return self.dilation * (self.kernel - 1) // 2


def _t(x):
    arr = np.ascontiguousarray(x)
    if not arr.flags.writeable:
        arr = arr.copy()
    return torch.from_numpy(arr)


# ---------------------------------------------------------------------------
# padding with replicated edges (image-domain stencils) and its adjoint
# ---------------------------------------------------------------------------

def pad_replicate(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode="edge")


def fold_replicate(gxp, p):
    """Adjoint of pad_replicate: fold border gradient bands into edge pixels."""
    if p == 0:
        return gxp
    g = gxp.copy()
    g[:, :, p, :] += g[:, :, :p, :].sum(axis=2)
    g[:, :, -p - 1, :] += g[:, :, -p:, :].sum(axis=2)
    g = g[:, :, p:-p, :]
    g[:, :, :, p] += g[:, :, :, :p].sum(axis=3)
    g[:, :, :, -p - 1] += g[:, :, :, -p:].sum(axis=3)
    return np.ascontiguousarray(g[:, :, :, p:-p])


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d(x, w, b=None, stride=1, dilation=1, pad_mode="zero"):
    """Same-padding cross-correlation, x (N,Ci,H,W), w (Co,Ci,k,k), b (Co,)."""
    if x.shape[1] != w.shape[1]:
        from .errors import ShapeMismatch

        raise ShapeMismatch(f"input channels {x.shape[1]} != weight {w.shape[1]}")
    k = w.shape[-1]
    p = dilation * (k - 1) // 2
    if pad_mode == "replicate":
        x = pad_replicate(x, p)
        p = 0
    with torch.no_grad():
        y = _F.conv2d(
            _t(x), _t(w), None if b is None else _t(b),
            stride=stride, padding=p, dilation=dilation,
        )
    return y.numpy()


def conv2d_vjp(grad_y, x, w, stride=1, dilation=1, pad_mode="zero",
               need_input_grad=True):
    """Gradients of conv2d w.r.t. (x, w, b); grad_x is None when not needed."""
    k = w.shape[-1]
    p = dilation * (k - 1) // 2
    pad_arg = p
    if pad_mode == "replicate":
        x = pad_replicate(x, p)
        pad_arg = 0
    with torch.no_grad():
        gi, gw, gb = torch.ops.aten.convolution_backward(
            _t(grad_y), _t(x), _t(w), [w.shape[0]],
            [stride, stride], [pad_arg, pad_arg], [dilation, dilation],
            False, [0, 0], 1, [need_input_grad, True, True],
        )
    gx = None
    if need_input_grad:
        gx = gi.numpy()
        if pad_mode == "replicate":
            gx = fold_replicate(gx, p)
    return gx, gw.numpy(), gb.numpy()


def fixed_filter2d(x, kernel, pad_mode="replicate"):
    """Depthwise correlation of every channel with one fixed 2-D kernel."""
    n, c, h, w = x.shape
    k = kernel.shape[0]
    p = (k - 1) // 2
    if pad_mode == "replicate":
        x = pad_replicate(x, p)
        p = 0
    kern = np.broadcast_to(
        np.asarray(kernel, dtype=x.dtype)[None, None], (c, 1, k, k)
    )
    with torch.no_grad():
        y = _F.conv2d(_t(x), _t(kern), padding=p, groups=c)
    return y.numpy()


def fixed_filter2d_vjp(grad_y, kernel, pad_mode="replicate"):
    """Input gradient of fixed_filter2d (the kernel is not trainable)."""
    n, c, h, w = grad_y.shape
    k = kernel.shape[0]
    p = (k - 1) // 2
    kern = np.broadcast_to(
        np.asarray(kernel, dtype=grad_y.dtype)[None, None], (c, 1, k, k)
    )
    if pad_mode == "replicate":
        with torch.no_grad():
            gxp = _G.conv2d_input(
                (n, c, h + 2 * p, w + 2 * p), _t(kern), _t(grad_y),
                padding=0, groups=c,
            ).numpy()
        return fold_replicate(gxp, p)
    with torch.no_grad():
        gx = _G.conv2d_input(
            (n, c, h, w), _t(kern), _t(grad_y), padding=p, groups=c
        ).numpy()
    return gx


# ---------------------------------------------------------------------------
# pointwise activations
# ---------------------------------------------------------------------------

def prelu(x, slope):
    """PReLU with one learned slope per channel; slope shape (C,)."""
    with torch.no_grad():
        return torch.prelu(_t(x), _t(slope)).numpy()


def prelu_vjp(grad_y, x, slope):
    with torch.no_grad():
        x_t, gy_t = _t(x), _t(grad_y)
        neg = x_t < 0
        s = _t(slope).reshape(1, -1, 1, 1)
        gx = torch.where(neg, s * gy_t, gy_t).numpy()
        gslope = torch.where(neg, gy_t * x_t, torch.zeros((), dtype=x_t.dtype)) \
            .sum(dim=(0, 2, 3)).numpy()
    return gx, gslope.astype(slope.dtype)


def sigmoid(x):
    # tanh form is overflow-safe and exact at 0
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid_vjp(grad_y, y):
    return grad_y * y * (1.0 - y)


def tanh(x):
    return np.tanh(x)


def tanh_vjp(grad_y, y):
    return grad_y * (1.0 - y * y)


def softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus_vjp(grad_y, x):
    return grad_y * sigmoid(x)


# ---------------------------------------------------------------------------
# bilinear resize (align_corners = false)
# ---------------------------------------------------------------------------

def _resize_matrix(n_in, n_out):
    """Dense (n_in, n_out) interpolation matrix for one axis, rows sum to 1."""
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    mat = np.zeros((n_in, n_out), dtype=np.float64)
    np.add.at(mat, (i0, np.arange(n_out)), 1.0 - frac)
    np.add.at(mat, (i1, np.arange(n_out)), frac)
    return mat


def _apply_resize(x, mat_h, mat_w):
    y = np.moveaxis(np.tensordot(x, mat_h.astype(x.dtype), axes=([2], [0])), 3, 2)
    return np.tensordot(y, mat_w.astype(x.dtype), axes=([3], [0]))


def bilinear_resize(x, out_h, out_w):
    """Bilinear resize of (N,C,H,W) to (N,C,out_h,out_w)."""
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        return x.copy()
    return _apply_resize(x, _resize_matrix(h, out_h), _resize_matrix(w, out_w))


def bilinear_resize_vjp(grad_y, in_h, in_w):
    """Input gradient of bilinear_resize (transpose of the interpolation)."""
    n, c, out_h, out_w = grad_y.shape
    if (out_h, out_w) == (in_h, in_w):
        return grad_y.copy()
    return _apply_resize(
        grad_y, _resize_matrix(in_h, out_h).T, _resize_matrix(in_w, out_w).T
    )


# ---------------------------------------------------------------------------
# scatter helper (used by the warp backward)
# ---------------------------------------------------------------------------

def scatter_add_rows(target, index, src):
    """target[index[i], :] += src[i, :] with duplicate indices accumulated."""
    t = _t(target)
    with torch.no_grad():
        t.index_add_(0, torch.from_numpy(np.ascontiguousarray(index)), _t(src))
    return t.numpy()


# ---------------------------------------------------------------------------
# parameter initialization and conv-chain helpers
# ---------------------------------------------------------------------------

PRELU_INIT_SLOPE = 0.25


@dataclass(frozen=True)
class ConvDef:
    """One convolution layer plus optional activation in a named network."""

    name: str
    spec: ConvSpec
    act: str = "prelu"  # {"prelu", "none", "sigmoid", "softplus"}
    zero_init: bool = False


def init_conv_params(params, rng, cdef: ConvDef):
    """Kaiming-uniform fan-in init (adjusted for the PReLU slope), zero biases."""
    spec = cdef.spec
    shape = (spec.out_ch, spec.in_ch, spec.kernel, spec.kernel)
    if cdef.zero_init:
        w = np.zeros(shape, dtype=np.float32)
    else:
        fan_in = spec.in_ch * spec.kernel * spec.kernel
        bound = np.sqrt(6.0 / ((1.0 + PRELU_INIT_SLOPE**2) * fan_in))
        w = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    params[f"{cdef.name}.w"] = w
    params[f"{cdef.name}.b"] = np.zeros(spec.out_ch, dtype=np.float32)
    if cdef.act == "prelu":
        params[f"{cdef.name}.slope"] = np.full(
            spec.out_ch, PRELU_INIT_SLOPE, dtype=np.float32
        )


def _param(params, name):
    from .errors import MissingParams

    value = params[name] if name in params else None
    if value is None:
        raise MissingParams(f"missing parameter {name!r}")
    return value


def conv_layer_forward(params, cdef: ConvDef, x):
    """Apply one ConvDef; returns (y, cache) for the explicit backward."""
    spec = cdef.spec
    w = _param(params, f"{cdef.name}.w")
    b = _param(params, f"{cdef.name}.b")
    z = conv2d(x, w, b, stride=spec.stride, dilation=spec.dilation,
               pad_mode=spec.pad_mode)
    if cdef.act == "prelu":
        y = prelu(z, _param(params, f"{cdef.name}.slope"))
        cache = (x, z, None)
    elif cdef.act == "sigmoid":
        y = sigmoid(z)
        cache = (x, None, y)
    elif cdef.act == "softplus":
        y = softplus(z)
        cache = (x, z, None)
    else:
        y = z
        cache = (x, None, None)
    return y, cache


def conv_layer_backward(params, cdef: ConvDef, cache, grad_y, grads,
                        need_input_grad=True):
    """Backward of conv_layer_forward; accumulates parameter grads into `grads`."""
    spec = cdef.spec
    x, z, y = cache
    if cdef.act == "prelu":
        slope = _param(params, f"{cdef.name}.slope")
        grad_z, gslope = prelu_vjp(grad_y, z, slope)
        accumulate(grads, f"{cdef.name}.slope", gslope)
    elif cdef.act == "sigmoid":
        grad_z = sigmoid_vjp(grad_y, y)
    elif cdef.act == "softplus":
        grad_z = softplus_vjp(grad_y, z)
    else:
        grad_z = grad_y
    w = _param(params, f"{cdef.name}.w")
    gx, gw, gb = conv2d_vjp(
        grad_z, x, w, stride=spec.stride, dilation=spec.dilation,
        pad_mode=spec.pad_mode, need_input_grad=need_input_grad,
    )
    accumulate(grads, f"{cdef.name}.w", gw)
    accumulate(grads, f"{cdef.name}.b", gb)
    return gx


def chain_forward(params, defs, x):
    """Run a plain sequence of ConvDefs; returns (y, caches)."""
    caches = []
    for cdef in defs:
        x, cache = conv_layer_forward(params, cdef, x)
        caches.append(cache)
    return x, caches


def chain_backward(params, defs, caches, grad_y, grads, need_input_grad=True):
    for i in range(len(defs) - 1, -1, -1):
        need = need_input_grad or i > 0
        grad_y = conv_layer_backward(
            params, defs[i], caches[i], grad_y, grads, need_input_grad=need
        )
    return grad_y


def accumulate(grads, name, g):
    if name in grads:
        grads[name] += g
    else:
        grads[name] = g.copy() if isinstance(g, np.ndarray) else g
