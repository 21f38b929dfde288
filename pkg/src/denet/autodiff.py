"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Everything is 64-bit: the gradient checks that gate this package need tight
tolerances, and single precision would not survive them. Tensors hold
row-major numpy arrays; activations are laid out (channels, height, width)
and batches are handled by an outer loop in the caller.

Each operation on tensors that require gradients records its parents and a
backward closure on the result, so the graph built by one forward pass is
the gradient tape for that pass. ``backward`` walks it once; calling it a
second time on the same root is a contract error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import InvalidSpecError, ShapeError, TapeError


class Tensor:
    """N-dimensional float64 grid, optionally participating in the tape.

    ``grad`` is populated (same shape as ``data``) by ``backward`` for every
    tensor in the graph with ``requires_grad``. Data is treated as immutable
    after construction; only ``grad`` is written afterwards.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self._backward_done = False

    @staticmethod
    def _from_op(data: np.ndarray, parents: tuple["Tensor", ...], backward_fn) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward_fn = backward_fn
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.item())

    def detach(self) -> "Tensor":
        """Copy of the value with no tape participation."""
        return Tensor(self.data.copy())

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, c: float) -> "Tensor":
        return scale(self, c)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 2-d convolution.

    The output extent along each axis is
    ``floor((in + 2*padding - dilation*(kernel-1) - 1) / stride) + 1``.
    """

    kernel_h: int
    kernel_w: int
    stride: int = 1
    dilation: int = 1
    padding: int = 0
    channels_in: int = 1
    channels_out: int = 1
    depthwise_separable: bool = False

    def __post_init__(self):
        for name in ("kernel_h", "kernel_w", "stride", "dilation", "channels_in", "channels_out"):
            if getattr(self, name) < 1:
                raise InvalidSpecError(f"ConvSpec.{name} must be >= 1, got {getattr(self, name)}")
        if self.padding < 0:
            raise InvalidSpecError(f"ConvSpec.padding must be >= 0, got {self.padding}")

    def out_extent(self, extent: int, axis: str = "h") -> int:
        k = self.kernel_h if axis == "h" else self.kernel_w
        out = (extent + 2 * self.padding - self.dilation * (k - 1) - 1) // self.stride + 1
        return out

    def out_extents(self, h: int, w: int) -> tuple[int, int]:
        oh, ow = self.out_extent(h, "h"), self.out_extent(w, "w")
        if oh < 1 or ow < 1:
            raise InvalidSpecError(
                f"spec {self} yields empty output {oh}x{ow} for input {h}x{w}"
            )
        return oh, ow


def _require_chw(name: str, t: Tensor) -> None:
    if t.data.ndim != 3:
        raise ShapeError(f"{name} must be (channels, height, width), got shape {t.shape}")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int,
            oh: int, ow: int) -> np.ndarray:
    """Patch matrix (C*kh*kw, oh*ow) of an already padded (C, Hp, Wp) array."""
    c = xp.shape[0]
    sc, sh, sw = xp.strides
    patches = as_strided(
        xp,
        shape=(c, kh, kw, oh, ow),
        strides=(sc, dilation * sh, dilation * sw, stride * sh, stride * sw),
    )
    return patches.reshape(c * kh * kw, oh * ow)


def _col2im(cols: np.ndarray, c: int, hp: int, wp: int, kh: int, kw: int,
            stride: int, dilation: int, oh: int, ow: int) -> np.ndarray:
    """Adjoint of ``_im2col``: scatter-add columns back onto a (C, Hp, Wp) grid."""
    out = np.zeros((c, hp, wp), dtype=np.float64)
    g = cols.reshape(c, kh, kw, oh, ow)
    for i in range(kh):
        hi = i * dilation
        for j in range(kw):
            wj = j * dilation
            out[:, hi:hi + stride * oh:stride, wj:wj + stride * ow:stride] += g[:, i, j]
    return out


def _pad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p)))


def conv2d(x: Tensor, weights: Tensor, bias: Tensor, spec: ConvSpec) -> Tensor:
    """2-d convolution (cross-correlation) of one image.

    ``x`` is (C_in, H, W), ``weights`` is (C_out, C_in, kh, kw), ``bias`` is
    (C_out,). Supports stride, dilation and symmetric zero padding per
    ``spec``; the result matches direct sliding-window summation.
    """
    _require_chw("conv2d input", x)
    cin, h, w = x.shape
    if cin != spec.channels_in:
        raise ShapeError(f"input has {cin} channels, spec expects {spec.channels_in}")
    expect_w = (spec.channels_out, spec.channels_in, spec.kernel_h, spec.kernel_w)
    if weights.shape != expect_w:
        raise ShapeError(f"conv2d weights shape {weights.shape}, expected {expect_w}")
    if bias.shape != (spec.channels_out,):
        raise ShapeError(f"conv2d bias shape {bias.shape}, expected ({spec.channels_out},)")

    oh, ow = spec.out_extents(h, w)
    xp = _pad2d(x.data, spec.padding)
    cols = _im2col(xp, spec.kernel_h, spec.kernel_w, spec.stride, spec.dilation, oh, ow)
    wmat = weights.data.reshape(spec.channels_out, -1)
    out = (wmat @ cols).reshape(spec.channels_out, oh, ow) + bias.data[:, None, None]

    hp, wp = xp.shape[1], xp.shape[2]

    def backward_fn(up: np.ndarray):
        up_flat = up.reshape(spec.channels_out, -1)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = wmat.T @ up_flat
            gxp = _col2im(gcols, cin, hp, wp, spec.kernel_h, spec.kernel_w,
                          spec.stride, spec.dilation, oh, ow)
            p = spec.padding
            gx = gxp[:, p:hp - p, p:wp - p] if p else gxp
        if weights.requires_grad:
            gw = (up_flat @ cols.T).reshape(weights.shape)
        if bias.requires_grad:
            gb = up.sum(axis=(1, 2))
        return gx, gw, gb

    return Tensor._from_op(out, (x, weights, bias), backward_fn)


def depthwise_conv2d(x: Tensor, weights: Tensor, spec: ConvSpec) -> Tensor:
    """Per-channel convolution: one (kh, kw) filter per input channel.

    ``weights`` is (C_in, kh, kw); channel c of the output sees only channel
    c of the input. No bias (a following pointwise stage carries it).
    """
    _require_chw("depthwise input", x)
    cin, h, w = x.shape
    if weights.shape != (cin, spec.kernel_h, spec.kernel_w):
        raise ShapeError(
            f"depthwise weights shape {weights.shape}, expected "
            f"({cin}, {spec.kernel_h}, {spec.kernel_w})"
        )
    oh, ow = spec.out_extents(h, w)
    xp = _pad2d(x.data, spec.padding)
    sc, sh, sw = xp.strides
    patches = as_strided(
        xp,
        shape=(cin, spec.kernel_h, spec.kernel_w, oh, ow),
        strides=(sc, spec.dilation * sh, spec.dilation * sw, spec.stride * sh, spec.stride * sw),
    )
    out = np.einsum("cijhw,cij->chw", patches, weights.data)
    hp, wp = xp.shape[1], xp.shape[2]

    def backward_fn(up: np.ndarray):
        gx = gw = None
        if weights.requires_grad:
            gw = np.einsum("cijhw,chw->cij", patches, up)
        if x.requires_grad:
            gcols = np.einsum("cij,chw->cijhw", weights.data, up)
            gcols = gcols.reshape(cin * spec.kernel_h * spec.kernel_w, oh * ow)
            gxp = _col2im(gcols, cin, hp, wp, spec.kernel_h, spec.kernel_w,
                          spec.stride, spec.dilation, oh, ow)
            p = spec.padding
            gx = gxp[:, p:hp - p, p:wp - p] if p else gxp
        return gx, gw

    return Tensor._from_op(out, (x, weights), backward_fn)


def separable_conv2d(x: Tensor, depthwise_weights: Tensor, pointwise_weights: Tensor,
                     bias: Tensor, spec: ConvSpec) -> Tensor:
    """Depthwise convolution followed by a 1x1 pointwise mix with bias.

    ``depthwise_weights`` is (C_in, kh, kw), ``pointwise_weights`` is
    (C_out, C_in, 1, 1). Stride/dilation/padding apply to the depthwise
    stage; the pointwise stage is always stride 1.
    """
    if depthwise_weights.shape[0] != spec.channels_in:
        raise ShapeError(
            f"depthwise kernel count {depthwise_weights.shape[0]} != "
            f"channels_in {spec.channels_in}"
        )
    if pointwise_weights.shape != (spec.channels_out, spec.channels_in, 1, 1):
        raise ShapeError(
            f"pointwise weights shape {pointwise_weights.shape}, expected "
            f"({spec.channels_out}, {spec.channels_in}, 1, 1)"
        )
    mid = depthwise_conv2d(x, depthwise_weights, spec)
    point = ConvSpec(1, 1, stride=1, dilation=1, padding=0,
                     channels_in=spec.channels_in, channels_out=spec.channels_out)
    return conv2d(mid, pointwise_weights, bias, point)


def transposed_conv2d(x: Tensor, weights: Tensor, bias: Tensor, stride: int = 2) -> Tensor:
    """Fractionally-strided convolution that exactly doubles spatial extents.

    ``weights`` is (C_in, C_out, k, k); forward equals the input-gradient of
    a stride-2 convolution with the same weights. The implied padding
    ``(k - stride) / 2`` must be a non-negative integer so that the output is
    exactly (C_out, 2H, 2W) for every input extent.
    """
    _require_chw("transposed_conv2d input", x)
    if stride != 2:
        raise InvalidSpecError(f"transposed_conv2d supports stride 2 only, got {stride}")
    if weights.data.ndim != 4 or weights.shape[2] != weights.shape[3]:
        raise ShapeError(f"transposed weights must be (C_in, C_out, k, k), got {weights.shape}")
    cin, cout, k, _ = weights.shape
    if (k - stride) % 2 != 0 or k < stride:
        raise InvalidSpecError(
            f"kernel {k} with stride {stride} cannot produce exact doubling "
            f"(needs kernel = 2*padding + stride)"
        )
    pad = (k - stride) // 2
    if x.shape[0] != cin:
        raise ShapeError(f"input has {x.shape[0]} channels, weights expect {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"transposed bias shape {bias.shape}, expected ({cout},)")

    h, w = x.shape[1], x.shape[2]
    oh, ow = stride * h, stride * w
    hp, wp = oh + 2 * pad, ow + 2 * pad  # == (h-1)*stride + k

    wmat = weights.data.reshape(cin, cout * k * k)
    cols = wmat.T @ x.data.reshape(cin, h * w)
    full = _col2im(cols, cout, hp, wp, k, k, stride, 1, h, w)
    out = full[:, pad:pad + oh, pad:pad + ow] + bias.data[:, None, None]

    def backward_fn(up: np.ndarray):
        gx = gw = gb = None
        if x.requires_grad or weights.requires_grad:
            upp = _pad2d(up, pad)
            up_cols = _im2col(upp, k, k, stride, 1, h, w)
            if x.requires_grad:
                gx = (wmat @ up_cols).reshape(cin, h, w)
            if weights.requires_grad:
                gw = (x.data.reshape(cin, h * w) @ up_cols.T).reshape(weights.shape)
        if bias.requires_grad:
            gb = up.sum(axis=(1, 2))
        return gx, gw, gb

    return Tensor._from_op(out, (x, weights, bias), backward_fn)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def backward_fn(up: np.ndarray):
        if not x.requires_grad:
            return (None,)
        return (up * (x.data > 0.0),)

    return Tensor._from_op(out, (x,), backward_fn)


def max_pool2d(x: Tensor, k: int, stride: int) -> Tensor:
    """Max pooling with a k-by-k window, no padding. Ties take the first
    window position in row-major order, so gradients are deterministic."""
    _require_chw("max_pool2d input", x)
    if k < 1 or stride < 1:
        raise InvalidSpecError(f"max_pool2d needs k, stride >= 1, got k={k} stride={stride}")
    c, h, w = x.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    if oh < 1 or ow < 1:
        raise InvalidSpecError(f"max_pool2d window {k} exceeds input {h}x{w}")
    sc, sh, sw = x.data.strides
    windows = as_strided(
        x.data,
        shape=(c, oh, ow, k, k),
        strides=(sc, stride * sh, stride * sw, sh, sw),
    ).reshape(c, oh, ow, k * k)
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def backward_fn(up: np.ndarray):
        if not x.requires_grad:
            return (None,)
        gx = np.zeros_like(x.data)
        ci = np.broadcast_to(np.arange(c)[:, None, None], arg.shape)
        hi = arg // k + np.arange(oh)[None, :, None] * stride
        wi = arg % k + np.arange(ow)[None, None, :] * stride
        np.add.at(gx, (ci, hi, wi), up)
        return (gx,)

    return Tensor._from_op(out, (x,), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add on mismatched shapes {a.shape} vs {b.shape}")
    out = a.data + b.data

    def backward_fn(up: np.ndarray):
        return (up if a.requires_grad else None, up if b.requires_grad else None)

    return Tensor._from_op(out, (a, b), backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub on mismatched shapes {a.shape} vs {b.shape}")
    out = a.data - b.data

    def backward_fn(up: np.ndarray):
        return (up if a.requires_grad else None, -up if b.requires_grad else None)

    return Tensor._from_op(out, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product of same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mul on mismatched shapes {a.shape} vs {b.shape}")
    out = a.data * b.data

    def backward_fn(up: np.ndarray):
        return (
            up * b.data if a.requires_grad else None,
            up * a.data if b.requires_grad else None,
        )

    return Tensor._from_op(out, (a, b), backward_fn)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = x.data * c

    def backward_fn(up: np.ndarray):
        return (up * c if x.requires_grad else None,)

    return Tensor._from_op(out, (x,), backward_fn)


def add_const(x: Tensor, c: float) -> Tensor:
    out = x.data + float(c)

    def backward_fn(up: np.ndarray):
        return (up if x.requires_grad else None,)

    return Tensor._from_op(out, (x,), backward_fn)


def square(x: Tensor) -> Tensor:
    out = x.data * x.data

    def backward_fn(up: np.ndarray):
        return (up * 2.0 * x.data if x.requires_grad else None,)

    return Tensor._from_op(out, (x,), backward_fn)


def sum_all(x: Tensor) -> Tensor:
    """Reduce to a 0-d scalar tensor (the integral of a density map)."""
    out = x.data.sum()

    def backward_fn(up: np.ndarray):
        if not x.requires_grad:
            return (None,)
        return (np.full_like(x.data, float(up)),)

    return Tensor._from_op(np.asarray(out), (x,), backward_fn)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    ``loss`` must be a 0-d scalar produced by at least one recorded
    operation. A second call on the same root raises ``TapeError``; build a
    fresh forward pass (and ``zero_grad`` parameters) between steps.
    """
    if loss.data.ndim != 0:
        raise TapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._backward_fn is None:
        raise TapeError("backward on a tensor with no recorded operations (empty tape)")
    if loss._backward_done:
        raise TapeError("backward already ran on this tape; rebuild the forward pass")
    loss._backward_done = True

    # Topological order by iterative post-order DFS.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    upstream: dict[int, np.ndarray] = {id(loss): np.asarray(1.0)}
    for node in reversed(order):
        up = upstream.pop(id(node), None)
        if up is None:
            continue
        if node.requires_grad:
            node.grad = up.copy() if node.grad is None else node.grad + up
        if node._backward_fn is None:
            continue
        grads = node._backward_fn(up)
        for parent, g in zip(node._parents, grads):
            if g is None:
                continue
            key = id(parent)
            if key in upstream:
                upstream[key] = upstream[key] + g
            else:
                upstream[key] = g


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None
