"""Dense float64 tensors with reverse-mode automatic differentiation.

The operator set is exactly what a fully convolutional normal-estimation
network needs: 2-D convolution, leaky rectifier, corner-aligned bilinear
upsampling, area-average downsampling, elementwise max fusion, channel-wise
unit normalization and a masked cosine loss.  Arrays are float64, rank <= 4,
laid out batch x channel x height x width for image data.  Every op output
is checked finite; NaN or Inf anywhere is treated as a hard error.

The recorded graph lives on the output tensors themselves (parent references
plus a backward closure per node).  It is acyclic by construction and is
consumed by a single ``backward`` call: closures and parent links are dropped
as the sweep runs, so a second backward over the same nodes raises.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from functools import reduce

import numpy as np

__all__ = [
    "Tensor",
    "no_grad",
    "add",
    "mul",
    "scale",
    "maximum",
    "max_over_set",
    "max_over_batch",
    "concat",
    "broadcast_batch",
    "conv2d",
    "leaky_relu",
    "bilinear_upsample",
    "area_downsample",
    "l2_normalize",
    "cosine_loss",
    "interp_matrix",
    "area_matrix",
    "area_resize",
    "AdamState",
    "adam_step",
]

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array plus an optional slot in the autodiff graph.

    Leaves created with ``requires_grad=True`` receive a ``.grad`` array
    after ``backward`` runs on a scalar loss reachable from them.  A leaf
    with no path to the loss keeps ``grad is None`` (a gradient of exactly
    zero).  Tensors are treated as immutable values once created; training
    code mutates parameter ``.data`` in place only between graph lifetimes.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 4:
            raise ValueError(f"tensor rank {arr.ndim} unsupported (max 4)")
        if not np.isfinite(arr).all():
            raise FloatingPointError("non-finite values in tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def sum(self):
        """Sum of all entries as a scalar tensor."""
        xd = self.data

        def bwd(g):
            return (np.full_like(xd, float(g.reshape(()))),)

        return _record(np.asarray(xd.sum()), (self,), bwd)

    def backward(self):
        """Reverse-mode sweep from a scalar loss; consumes the graph."""
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.data.shape}")
        if self._consumed:
            raise RuntimeError("backward already ran on this graph")

        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            fn = node._backward
            if fn is None or node.grad is None:
                node._consumed = True
                continue
            grads = fn(node.grad)
            parents = node._parents
            node._backward = None
            node._parents = ()
            node._consumed = True
            for p, g in zip(parents, grads):
                if g is None or not p.requires_grad:
                    continue
                if p.grad is None:
                    p.grad = g
                else:
                    p.grad = p.grad + g
            if node is not self:
                node.grad = None  # free intermediate storage
        self._consumed = True

    # Small amount of operator sugar used by tests and the training loop.
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else _shift(self, other)

    def __radd__(self, other):
        return _shift(self, other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return _shift(self, -other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _record(out_data, parents, backward_fn):
    rg = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(out_data, rg)
    if rg:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")

    def bwd(g):
        return g, g

    return _record(a.data + b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return g * bd, g * ad

    return _record(ad * bd, (a, b), bwd)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        return (g * c,)

    return _record(x.data * c, (x,), bwd)


def _shift(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        return (g,)

    return _record(x.data + c, (x,), bwd)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max of two same-shape tensors; ties route the gradient to ``a``."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"maximum shape mismatch: {a.data.shape} vs {b.data.shape}")
    take_a = a.data >= b.data

    def bwd(g):
        return g * take_a, g * ~take_a

    return _record(np.maximum(a.data, b.data), (a, b), bwd)


def max_over_set(xs) -> Tensor:
    """Elementwise maximum over a nonempty list of same-shape tensors.

    The gradient routes to the arg-max element; exact ties go to the lowest
    list index.  The forward value is bit-identical under any permutation of
    the inputs.
    """
    xs = list(xs)
    if not xs:
        raise ValueError("max_over_set of an empty list")
    shp = xs[0].data.shape
    for x in xs[1:]:
        if x.data.shape != shp:
            raise ValueError(f"max_over_set shape mismatch: {shp} vs {x.data.shape}")
    return reduce(maximum, xs)


def max_over_batch(x: Tensor) -> Tensor:
    """Max over the batch axis of an [N,C,H,W] tensor, keeping a batch of 1.

    Same semantics as ``max_over_set`` over the N slices (first max wins the
    gradient), in one pass.
    """
    if x.data.ndim != 4:
        raise ValueError(f"max_over_batch expects [N,C,H,W], got {x.data.shape}")
    idx = x.data.argmax(axis=0)  # first occurrence == lowest batch index

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[None], g, axis=0)
        return (gx,)

    return _record(x.data.max(axis=0, keepdims=True), (x,), bwd)


def concat(xs, axis: int = 1) -> Tensor:
    """Concatenate tensors along ``axis``; backward slices the gradient back."""
    xs = list(xs)
    if not xs:
        raise ValueError("concat of an empty list")
    widths = [x.data.shape[axis] for x in xs]
    offsets = np.cumsum([0] + widths)

    def bwd(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis))
            for i in range(len(xs))
        )

    return _record(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), bwd)


def broadcast_batch(x: Tensor, n: int) -> Tensor:
    """Repeat a batch-1 tensor [1,C,H,W] to [n,C,H,W]; backward sums over the batch."""
    if x.data.ndim != 4 or x.data.shape[0] != 1:
        raise ValueError(f"broadcast_batch expects [1,C,H,W], got {x.data.shape}")

    def bwd(g):
        return (g.sum(axis=0, keepdims=True),)

    return _record(np.broadcast_to(x.data, (n,) + x.data.shape[1:]).copy(), (x,), bwd)


# ---------------------------------------------------------------------------
# Convolution


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N,C,Hp,Wp) padded input -> (N, C*k*k, ho*wo) patch matrix."""
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, k, k, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return view.reshape(n, c * k * k, ho * wo)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [N,Cin,H,W] with [Cout,Cin,k,k] weights plus bias.

    Requires odd square kernels, stride 1 or 2, and an output size that is
    exactly integral: (H + 2*padding - k) must be divisible by the stride.
    """
    if x.data.ndim != 4:
        raise ValueError(f"conv2d input must be [N,Cin,H,W], got {x.data.shape}")
    if w.data.ndim != 4:
        raise ValueError(f"conv2d weight must be [Cout,Cin,k,k], got {w.data.shape}")
    n, cin, h, wd = x.data.shape
    cout, cw, kh, kw = w.data.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d kernel must be odd and square, got {kh}x{kw}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d stride must be 1 or 2, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d padding must be >= 0, got {padding}")
    if cw != cin:
        raise ValueError(
            f"conv2d channel mismatch: input {x.data.shape} has {cin} channels, "
            f"weight {w.data.shape} expects {cw}"
        )
    if b.data.shape != (cout,):
        raise ValueError(f"conv2d bias shape {b.data.shape}, expected ({cout},)")
    rem_h = h + 2 * padding - kh
    rem_w = wd + 2 * padding - kw
    if rem_h < 0 or rem_w < 0 or rem_h % stride or rem_w % stride:
        raise ValueError(
            f"conv2d output size not integral for input {x.data.shape}, "
            f"kernel {kh}, stride {stride}, padding {padding}"
        )
    ho = rem_h // stride + 1
    wo = rem_w // stride + 1

    k = kh
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    w2 = w.data.reshape(cout, cin * k * k)
    cols = _im2col(xp, k, stride, ho, wo)
    out = np.matmul(w2[None], cols).reshape(n, cout, ho, wo) + b.data[None, :, None, None]

    def bwd(g):
        gl = g.reshape(n, cout, ho * wo)
        gb = g.sum(axis=(0, 2, 3)) if b.requires_grad else None
        gw = None
        if w.requires_grad:
            # Recompute the patch matrix rather than holding it across the forward pass.
            cols_b = _im2col(xp, k, stride, ho, wo)
            gw = np.matmul(gl, cols_b.transpose(0, 2, 1)).sum(axis=0).reshape(cout, cin, k, k)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(w2.T[None], gl).reshape(n, cin, k, k, ho, wo)
            gxp = np.zeros_like(xp)
            for ki in range(k):
                for kj in range(k):
                    gxp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += gcols[
                        :, :, ki, kj
                    ]
            gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        return gx, gw, gb

    return _record(out, (x, w, b), bwd)


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    """y = x for x >= 0 else slope * x; the subgradient at 0 is the slope."""
    slope = float(slope)
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in [0, 1), got {slope}")
    xd = x.data

    def bwd(g):
        return (g * np.where(xd > 0, 1.0, slope),)

    return _record(np.where(xd >= 0, xd, slope * xd), (x,), bwd)


# ---------------------------------------------------------------------------
# Resampling.  Both directions are separable linear maps, expressed as small
# dense row/column matrices so the backward pass is the exact adjoint.


def interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Corner-aligned linear interpolation matrix (n_out x n_in), n_out >= n_in."""
    if n_out == n_in:
        return np.eye(n_in)
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(src.astype(np.int64), n_in - 2)
    fr = src - lo
    rows = np.arange(n_out)
    m[rows, lo] = 1.0 - fr
    m[rows, lo + 1] += fr
    return m


def area_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Box-average pooling matrix (n_out x n_in), n_out <= n_in; rows sum to 1."""
    if n_out == n_in:
        return np.eye(n_in)
    edges = np.arange(n_out + 1) * (n_in / n_out)
    j = np.arange(n_in)
    lo = np.maximum(edges[:-1, None], j[None, :])
    hi = np.minimum(edges[1:, None], (j + 1)[None, :])
    return np.clip(hi - lo, 0.0, None) * (n_out / n_in)


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Corner-aligned bilinear upsampling of [N,C,H,W] to [N,C,out_h,out_w].

    Corner samples are preserved exactly; downscaling requests are an error.
    """
    if x.data.ndim != 4:
        raise ValueError(f"bilinear_upsample expects [N,C,H,W], got {x.data.shape}")
    _, _, h, w = x.data.shape
    if out_h < h or out_w < w:
        raise ValueError(f"bilinear_upsample cannot downscale {h}x{w} to {out_h}x{out_w}")
    rh = interp_matrix(out_h, h)
    rw = interp_matrix(out_w, w)

    def bwd(g):
        return (np.matmul(rh.T, np.matmul(g, rw)),)

    return _record(np.matmul(rh, np.matmul(x.data, rw.T)), (x,), bwd)


def area_downsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Area-average downsampling of [N,C,H,W]; constant maps stay constant."""
    if x.data.ndim != 4:
        raise ValueError(f"area_downsample expects [N,C,H,W], got {x.data.shape}")
    _, _, h, w = x.data.shape
    if out_h > h or out_w > w:
        raise ValueError(f"area_downsample cannot upscale {h}x{w} to {out_h}x{out_w}")
    ah = area_matrix(out_h, h)
    aw = area_matrix(out_w, w)

    def bwd(g):
        return (np.matmul(ah.T, np.matmul(g, aw)),)

    return _record(np.matmul(ah, np.matmul(x.data, aw.T)), (x,), bwd)


def area_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain-ndarray area-average resize over the two trailing axes."""
    h, w = arr.shape[-2:]
    if out_h > h or out_w > w:
        raise ValueError(f"area_resize cannot upscale {h}x{w} to {out_h}x{out_w}")
    ah = area_matrix(out_h, h)
    aw = area_matrix(out_w, w)
    return np.matmul(ah, np.matmul(arr, aw.T))


def l2_normalize(x: Tensor, eps: float = 1e-24) -> Tensor:
    """Unit-normalize the channel axis of [N,C,H,W] per spatial location."""
    if x.data.ndim != 4:
        raise ValueError(f"l2_normalize expects [N,C,H,W], got {x.data.shape}")
    xd = x.data
    inv = 1.0 / np.sqrt((xd * xd).sum(axis=1, keepdims=True) + eps)
    y = xd * inv

    def bwd(g):
        dot = (g * xd).sum(axis=1, keepdims=True)
        return (inv * g - (inv**3 * dot) * xd,)

    return _record(y, (x,), bwd)


def cosine_loss(pred: Tensor, gt: np.ndarray, mask: np.ndarray) -> Tensor:
    """1 minus the mean dot product of predicted and reference unit normals.

    ``pred`` is [1,3,H,W] (unit vectors down the channel axis), ``gt`` is an
    (H,W,3) array and ``mask`` a boolean (H,W) array selecting the pixels that
    contribute.  Range [0, 2] for unit inputs; zero at perfect alignment.
    """
    if pred.data.ndim != 4 or pred.data.shape[0] != 1 or pred.data.shape[1] != 3:
        raise ValueError(f"cosine_loss prediction must be [1,3,H,W], got {pred.data.shape}")
    h, w = pred.data.shape[2:]
    gt = np.asarray(gt, dtype=np.float64)
    if gt.shape != (h, w, 3):
        raise ValueError(f"cosine_loss reference shape {gt.shape}, expected {(h, w, 3)}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (h, w):
        raise ValueError(f"cosine_loss mask shape {mask.shape}, expected {(h, w)}")
    m = int(mask.sum())
    if m == 0:
        raise ValueError("cosine_loss with an empty mask")
    gtc = np.where(mask[None], gt.transpose(2, 0, 1), 0.0)[None]  # [1,3,H,W]
    loss = 1.0 - (pred.data * gtc).sum() / m

    def bwd(g):
        return (float(g.reshape(())) * (-1.0 / m) * gtc,)

    return _record(np.asarray(loss), (pred,), bwd)


# ---------------------------------------------------------------------------
# Optimizer


class AdamState:
    """First/second moment accumulators plus a shared step counter."""

    def __init__(self, params):
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0


def adam_step(params, grads, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ValueError("adam_step: params, grads and state must share the same keys")
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.data.shape:
            raise ValueError(
                f"adam_step shape mismatch for '{name}': param {p.data.shape}, grad {g.shape}"
            )
        if not np.isfinite(g).all():
            raise FloatingPointError(f"adam_step: non-finite gradient for '{name}'")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
