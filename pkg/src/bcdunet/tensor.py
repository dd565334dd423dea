"""Dense real tensors with a recorded operation graph and reverse-mode gradients.

Values live in numpy arrays (float64 by default, float32 supported for fast
training). Every differentiable operation appends a node to an implicit
graph: the output tensor remembers its parent tensors and a closure that
propagates the upstream gradient. ``Tensor.backward`` replays those closures
in reverse creation order, which is a valid topological order because inputs
are always created before outputs.

Spatial convention: images are ``[C, H, W]`` or batched ``[B, C, H, W]``.
The spatial ops here accept either rank and return the matching one.
"""

from __future__ import annotations

import itertools
import struct
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "UsageError",
    "no_grad",
    "add",
    "hadamard",
    "sigmoid",
    "tanh",
    "relu",
    "conv2d",
    "maxpool2",
    "upsample2",
    "concat_channels",
    "save_bt1",
    "load_bt1",
    "write_bt1",
    "read_bt1",
]


class ShapeError(ValueError):
    """Tensor extents are incompatible with the requested operation."""


class UsageError(RuntimeError):
    """The autodiff API was driven outside its contract."""


_ids = itertools.count()
_recording = True


class no_grad:
    """Context manager that pauses graph recording (values only, no graph)."""

    def __enter__(self) -> None:
        global _recording
        self._prev = _recording
        _recording = False

    def __exit__(self, *exc) -> bool:
        global _recording
        _recording = self._prev
        return False


class Tensor:
    """A dense real array participating in a recorded computation graph.

    Attributes:
        data: the numpy value buffer, immutable by convention after creation.
        grad: gradient buffer of identical shape, populated by ``backward``.
        requires_grad: whether gradients should be accumulated here.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_id", "_backward_ran")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = ()):
        arr = np.asarray(data)
        if arr.dtype.kind in "iub":
            arr = arr.astype(np.float64)
        elif arr.dtype.kind != "f":
            raise ShapeError(f"tensor data must be real-valued, got dtype {arr.dtype}")
        self.data = arr
        self.requires_grad = bool(requires_grad) and _recording
        self.grad = None
        self._parents = _parents
        self._backward_fn = None
        self._id = next(_ids)
        self._backward_ran = False

    # ---- introspection ----

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # ---- autodiff driver ----

    def backward(self) -> None:
        """Populate ``grad`` on every requires_grad ancestor of this scalar.

        Gradients accumulate additively across fan-out. Raises ``UsageError``
        if this tensor is not a scalar, or if backward already ran for it
        (rerun the forward pass to build a fresh graph).
        """
        if self.data.size != 1:
            raise UsageError(f"backward requires a scalar, got shape {self.data.shape}")
        if not self.requires_grad:
            raise UsageError("backward on a tensor with no recorded graph")
        if self._backward_ran:
            raise UsageError("backward already ran for this result; rebuild the graph first")
        self._backward_ran = True
        order = _reverse_topo(self)
        self.grad = np.ones_like(self.data)
        for node in order:
            fn = node._backward_fn
            if fn is not None and node.grad is not None:
                fn(node.grad)
                # free saved activations and intermediate grads as we go
                node._backward_fn = None
                node._parents = ()
                if node is not self:
                    node.grad = None

    def zero_grad(self) -> None:
        self.grad = None


def _raise_scalar(t: Tensor):
    raise UsageError(f"item() requires a scalar, got shape {t.data.shape}")


def _reverse_topo(root: Tensor) -> list[Tensor]:
    """All graph nodes reachable from ``root``, most recent first."""
    seen = {id(root)}
    order: list[Tensor] = []
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, i = stack[-1]
        if i < len(node._parents):
            stack[-1] = (node, i + 1)
            p = node._parents[i]
            if id(p) not in seen:
                seen.add(id(p))
                stack.append((p, 0))
        else:
            stack.pop()
            order.append(node)
    order.reverse()
    return order


def _as_tensor(x, dtype: np.dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    if _recording and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True, _parents=parents)
        out._backward_fn = backward_fn
        return out
    return Tensor(data)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are incompatible") from None


# ---- elementwise operations ----

def add(a, b) -> Tensor:
    """Elementwise sum; shapes must match or broadcast."""
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a))
    b = _as_tensor(b, a.data.dtype)
    _check_broadcast(a.data, b.data, "add")
    data = a.data + b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), bwd)


def hadamard(a, b) -> Tensor:
    """Elementwise product; shapes must match or broadcast."""
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a))
    b = _as_tensor(b, a.data.dtype)
    _check_broadcast(a.data, b.data, "hadamard")
    data = a.data * b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), bwd)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    data = np.empty_like(xd)
    pos = xd >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    data[~pos] = ex / (1.0 + ex)

    def bwd(g):
        _accumulate(x, g * (data * (1.0 - data)))

    return _make(data, (x,), bwd)


def tanh(x: Tensor) -> Tensor:
    data = np.tanh(x.data)

    def bwd(g):
        _accumulate(x, g * (1.0 - data * data))

    return _make(data, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    """max(0, x); subgradient 0 at exactly 0."""
    data = np.maximum(x.data, 0.0)

    def bwd(g):
        _accumulate(x, g * (x.data > 0))

    return _make(data, (x,), bwd)


def _neg(x: Tensor) -> Tensor:
    def bwd(g):
        _accumulate(x, -g)

    return _make(-x.data, (x,), bwd)


def _pow_scalar(x: Tensor, p: float) -> Tensor:
    data = x.data ** p

    def bwd(g):
        _accumulate(x, g * (p * x.data ** (p - 1.0)))

    return _make(data, (x,), bwd)


def log(x: Tensor) -> Tensor:
    data = np.log(x.data)

    def bwd(g):
        _accumulate(x, g / x.data)

    return _make(data, (x,), bwd)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes only strictly inside."""
    data = np.clip(x.data, lo, hi)

    def bwd(g):
        _accumulate(x, g * ((x.data > lo) & (x.data < hi)))

    return _make(data, (x,), bwd)


def _sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.data.shape))

    return _make(data, (x,), bwd)


def _mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.mean(axis=axis, keepdims=keepdims)
    scale = data.size / x.data.size

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g * scale, x.data.shape))

    return _make(data, (x,), bwd)


def _reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = x.data.reshape(shape)

    def bwd(g):
        _accumulate(x, g.reshape(x.data.shape))

    return _make(data, (x,), bwd)


# operator sugar on Tensor

Tensor.__add__ = lambda self, other: add(self, other)
Tensor.__radd__ = lambda self, other: add(self, other)
Tensor.__mul__ = lambda self, other: hadamard(self, other)
Tensor.__rmul__ = lambda self, other: hadamard(self, other)
Tensor.__neg__ = _neg
Tensor.__sub__ = lambda self, other: add(self, _neg(_as_tensor(other, self.data.dtype)))
Tensor.__rsub__ = lambda self, other: add(_as_tensor(other, self.data.dtype), _neg(self))
Tensor.__pow__ = _pow_scalar
Tensor.__truediv__ = lambda self, s: hadamard(self, 1.0 / float(s))
Tensor.sum = _sum
Tensor.mean = _mean
Tensor.reshape = lambda self, *shape: _reshape(self, shape if len(shape) != 1 or not isinstance(shape[0], (tuple, list)) else tuple(shape[0]))


# ---- spatial operations ----

def _to_batched(x: Tensor, op: str) -> tuple[np.ndarray, bool]:
    if x.data.ndim == 3:
        return x.data[None], False
    if x.data.ndim == 4:
        return x.data, True
    raise ShapeError(f"{op}: expected a [C,H,W] or [B,C,H,W] tensor, got shape {x.data.shape}")


def conv2d(x, kernel: Tensor, bias: Tensor | None = None, padding: str = "same") -> Tensor:
    """2-D cross-correlation, stride 1, plus optional per-output-channel bias.

    ``same`` zero-pads by (k-1)/2 per side (even kernels pad the extra
    row/column at bottom-right) and preserves H,W; ``valid`` yields
    H-kH+1, W-kW+1. Kernel layout is [C_out, C_in, kH, kW].
    """
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    xd, batched = _to_batched(x, "conv2d")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be [C_out,C_in,kH,kW], got shape {kernel.data.shape}")
    B, C, H, W = xd.shape
    O, Ck, kH, kW = kernel.data.shape
    if Ck != C:
        raise ShapeError(f"conv2d: kernel expects {Ck} input channels, input has {C}")
    if bias is not None and bias.data.shape != (O,):
        raise ShapeError(f"conv2d: bias must have shape ({O},), got {bias.data.shape}")

    if padding == "same":
        ph0, pw0 = (kH - 1) // 2, (kW - 1) // 2
        ph1, pw1 = kH - 1 - ph0, kW - 1 - pw0
        Ho, Wo = H, W
    elif padding == "valid":
        if kH > H or kW > W:
            raise ShapeError(f"conv2d: kernel {kH}x{kW} exceeds input {H}x{W} under valid padding")
        ph0 = ph1 = pw0 = pw1 = 0
        Ho, Wo = H - kH + 1, W - kW + 1
    else:
        raise ValueError(f"conv2d: padding must be 'same' or 'valid', got {padding!r}")

    if ph0 or ph1 or pw0 or pw1:
        xp = np.pad(xd, ((0, 0), (0, 0), (ph0, ph1), (pw0, pw1)))
    else:
        xp = xd

    # im2col with taps-major rows: one GEMM of (B*Ho*Wo, kk*C) x (kk*C, O)
    kd = kernel.data
    taps = kH * kW
    cols = np.empty((taps, C, B, Ho, Wo), dtype=xp.dtype)
    n = 0
    for i in range(kH):
        for j in range(kW):
            cols[n] = xp[:, :, i:i + Ho, j:j + Wo].transpose(1, 0, 2, 3)
            n += 1
    kmat = kd.transpose(2, 3, 1, 0).reshape(taps * C, O)
    out = cols.reshape(taps * C, B * Ho * Wo).T @ kmat
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))
    del cols
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bwd(g):
        g4 = g if g.ndim == 4 else g[None]
        if bias is not None:
            _accumulate(bias, g4.sum(axis=(0, 2, 3)))
        if kernel.requires_grad:
            gk = np.empty_like(kd)
            for i in range(kH):
                for j in range(kW):
                    gk[:, :, i, j] = np.tensordot(
                        g4, xp[:, :, i:i + Ho, j:j + Wo], axes=((0, 2, 3), (0, 2, 3)))
            _accumulate(kernel, gk)
        if x.requires_grad:
            gmat = g4.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
            dcols = (gmat @ kmat.T).reshape(B, Ho, Wo, taps, C)
            gxp = np.zeros_like(xp)
            n = 0
            for i in range(kH):
                for j in range(kW):
                    gxp[:, :, i:i + Ho, j:j + Wo] += dcols[:, :, :, n, :].transpose(0, 3, 1, 2)
                    n += 1
            gx = gxp[:, :, ph0:ph0 + H, pw0:pw0 + W]
            _accumulate(x, gx if batched else gx[0])

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out if batched else out[0], parents, bwd)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling; ties route the gradient to the first maximal cell in row-major order."""
    xd, batched = _to_batched(x, "maxpool2")
    B, C, H, W = xd.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2: spatial extents must be even, got {H}x{W}")
    win = xd.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        g4 = g if g.ndim == 4 else g[None]
        gw = np.zeros_like(win)
        np.put_along_axis(gw, idx[..., None], g4[..., None], axis=-1)
        gx = gw.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        _accumulate(x, gx if batched else gx[0])

    return _make(out if batched else out[0], (x,), bwd)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling; backward sums each 2x2 block."""
    xd, batched = _to_batched(x, "upsample2")
    B, C, H, W = xd.shape
    out = xd.repeat(2, axis=2).repeat(2, axis=3)

    def bwd(g):
        g4 = g if g.ndim == 4 else g[None]
        gx = g4.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5))
        _accumulate(x, gx if batched else gx[0])

    return _make(out if batched else out[0], (x,), bwd)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Channel-wise stacking in argument order; backward splits the gradient."""
    tensors = list(tensors)
    if not tensors:
        raise UsageError("concat_channels: need at least one tensor")
    if len(tensors) == 1:
        t = tensors[0]

        def bwd1(g):
            _accumulate(t, g)

        return _make(t.data, (t,), bwd1)
    ref = tensors[0].data
    axis = ref.ndim - 3
    if axis not in (0, 1):
        raise ShapeError(f"concat_channels: expected [C,H,W] or [B,C,H,W] tensors, got shape {ref.shape}")
    for t in tensors[1:]:
        if t.data.ndim != ref.ndim or t.data.shape[-2:] != ref.shape[-2:] or (axis == 1 and t.data.shape[0] != ref.shape[0]):
            raise ShapeError(
                f"concat_channels: spatial/batch extents differ: {ref.shape} vs {t.data.shape}")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def bwd(g):
        start = 0
        for t, c in zip(tensors, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + c)
            _accumulate(t, g[tuple(sl)])
            start += c

    return _make(data, tuple(tensors), bwd)


# ---- BT1 binary tensor file format ----

BT1_MAGIC = b"BT1\0"


def write_bt1(f, array: np.ndarray) -> None:
    """Write one tensor: magic, u32 rank, rank x u32 extents, little-endian f32 payload."""
    arr = np.ascontiguousarray(array)
    f.write(BT1_MAGIC)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.astype("<f4", copy=False).tobytes())


def read_bt1(f) -> np.ndarray:
    magic = f.read(4)
    if magic != BT1_MAGIC:
        raise UsageError(f"not a BT1 tensor file: magic {magic!r}")
    (rank,) = struct.unpack("<I", f.read(4))
    shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = f.read(4 * count)
    if len(payload) != 4 * count:
        raise UsageError(f"BT1 payload truncated: expected {4 * count} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


def save_bt1(path, array: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_bt1(f, array)


def load_bt1(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_bt1(f)
