"""Parameterized layers: conv blocks, dense bottleneck, spatial LSTM cells, batch norm.

Every layer owns its parameter tensors and exposes ``named_params`` for
checkpointing and optimizers. Construction order is deterministic for a
given RNG, so equal seeds materialize bit-identical parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    UsageError,
    _accumulate,
    _make,
    add,
    concat_channels,
    conv2d,
    hadamard,
    read_bt1,
    relu,
    sigmoid,
    tanh,
    write_bt1,
)

NamedParams = Iterator[tuple[str, Tensor]]


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], dtype) -> np.ndarray:
    """Uniform(+-sqrt(6/(fan_in+fan_out))) for conv kernels [C_out,C_in,kH,kW]."""
    fan_in = shape[1] * shape[2] * shape[3]
    fan_out = shape[0] * shape[2] * shape[3]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr, requires_grad=True)


class Conv2d:
    """Single convolution layer: kernel [C_out,C_in,k,k] plus bias [C_out]."""

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 dtype=np.float64, padding: str = "same"):
        self.kernel = _param(glorot_uniform(rng, (c_out, c_in, k, k), dtype))
        self.bias = _param(np.zeros(c_out, dtype=dtype))
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.kernel, self.bias, self.padding)

    def named_params(self, prefix: str) -> NamedParams:
        yield f"{prefix}.kernel", self.kernel
        yield f"{prefix}.bias", self.bias


class ConvBlock:
    """Two 3x3 same-padded convolutions, each followed by ReLU."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, dtype=np.float64):
        self.conv1 = Conv2d(c_in, c_out, 3, rng, dtype)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return relu(self.conv2(relu(self.conv1(x))))

    def named_params(self, prefix: str) -> NamedParams:
        yield from self.conv1.named_params(f"{prefix}.conv1")
        yield from self.conv2.named_params(f"{prefix}.conv2")


class DenseBottleneck:
    """Densely connected stack of conv blocks at the deepest encoder level.

    Block 1 consumes the pooled encoder tensor; block i>1 consumes the
    channel concatenation of all preceding block outputs, i.e. (i-1)*width
    channels. The final block's output (width channels) is returned.
    """

    def __init__(self, c_in: int, width: int, blocks: int, rng: np.random.Generator, dtype=np.float64):
        if blocks < 1:
            raise UsageError(f"dense bottleneck needs at least one block, got {blocks}")
        self.width = width
        self.blocks = []
        for i in range(blocks):
            block_in = c_in if i == 0 else i * width
            self.blocks.append(ConvBlock(block_in, width, rng, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        outs = [self.blocks[0](x)]
        for block in self.blocks[1:]:
            outs.append(block(concat_channels(outs)))
        return outs[-1]

    def named_params(self, prefix: str) -> NamedParams:
        for i, block in enumerate(self.blocks):
            yield from block.named_params(f"{prefix}.block{i + 1}")


@dataclass
class ConvLSTMState:
    """Recurrent pair: hidden map H and memory cell C, each [*, F, H, W]."""
    H: Tensor
    C: Tensor


class ConvLSTMCell:
    """Convolutional LSTM step with Hadamard peephole connections.

    Gates: i = sig(Wxi*x + Whi*h + Wci.C + bi), f analogous;
    C' = f.C + i.tanh(Wxc*x + Whc*h + bc);
    o = sig(Wxo*x + Who*h + Wco.C' + bo)  (peeps at the NEW cell);
    H' = o.tanh(C').
    ``*`` is convolution, ``.`` elementwise. Peepholes are per-cell tensors
    [F, H, W], so a cell is bound to one spatial resolution.
    """

    def __init__(self, c_in: int, hidden: int, spatial: tuple[int, int], k: int,
                 rng: np.random.Generator, dtype=np.float64, forget_bias: float = 1.0):
        sh, sw = spatial
        self.hidden = hidden
        self.W_xi = _param(glorot_uniform(rng, (hidden, c_in, k, k), dtype))
        self.W_xf = _param(glorot_uniform(rng, (hidden, c_in, k, k), dtype))
        self.W_xc = _param(glorot_uniform(rng, (hidden, c_in, k, k), dtype))
        self.W_xo = _param(glorot_uniform(rng, (hidden, c_in, k, k), dtype))
        self.W_hi = _param(glorot_uniform(rng, (hidden, hidden, k, k), dtype))
        self.W_hf = _param(glorot_uniform(rng, (hidden, hidden, k, k), dtype))
        self.W_hc = _param(glorot_uniform(rng, (hidden, hidden, k, k), dtype))
        self.W_ho = _param(glorot_uniform(rng, (hidden, hidden, k, k), dtype))
        self.W_ci = _param(np.zeros((hidden, sh, sw), dtype=dtype))
        self.W_cf = _param(np.zeros((hidden, sh, sw), dtype=dtype))
        self.W_co = _param(np.zeros((hidden, sh, sw), dtype=dtype))
        self.b_i = _param(np.zeros(hidden, dtype=dtype))
        self.b_f = _param(np.full(hidden, forget_bias, dtype=dtype))
        self.b_c = _param(np.zeros(hidden, dtype=dtype))
        self.b_o = _param(np.zeros(hidden, dtype=dtype))

    def _gates_x(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        # one fused convolution for all four input-to-state transforms
        kern = _concat_axis0([self.W_xi, self.W_xf, self.W_xc, self.W_xo])
        bias = _concat_axis0([self.b_i, self.b_f, self.b_c, self.b_o])
        return _split4(conv2d(x, kern, bias, "same"), self.hidden)

    def _gates_h(self, h: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        kern = _concat_axis0([self.W_hi, self.W_hf, self.W_hc, self.W_ho])
        return _split4(conv2d(h, kern, None, "same"), self.hidden)

    def step(self, x: Tensor, state: ConvLSTMState | None = None) -> ConvLSTMState:
        """One recurrence step; ``state=None`` means zero H and C."""
        xi, xf, xc, xo = self._gates_x(x)
        if state is None:
            i = sigmoid(xi)
            f = sigmoid(xf)
            c_new = hadamard(i, tanh(xc))
        else:
            hi, hf, hc, ho = self._gates_h(state.H)
            i = sigmoid(add(add(xi, hi), hadamard(self.W_ci, state.C)))
            f = sigmoid(add(add(xf, hf), hadamard(self.W_cf, state.C)))
            c_new = add(hadamard(f, state.C), hadamard(i, tanh(add(xc, hc))))
        o_pre = add(xo, hadamard(self.W_co, c_new))
        if state is not None:
            o_pre = add(o_pre, ho)
        o = sigmoid(o_pre)
        return ConvLSTMState(H=hadamard(o, tanh(c_new)), C=c_new)

    def named_params(self, prefix: str) -> NamedParams:
        for name in ("W_xi", "W_xf", "W_xc", "W_xo", "W_hi", "W_hf", "W_hc", "W_ho",
                     "W_ci", "W_cf", "W_co", "b_i", "b_f", "b_c", "b_o"):
            yield f"{prefix}.{name}", getattr(self, name)


def _split4(t: Tensor, width: int) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    axis = t.data.ndim - 3
    parts = []
    for n in range(4):
        sl = [slice(None)] * t.data.ndim
        sl[axis] = slice(n * width, (n + 1) * width)
        parts.append(_slice_channels(t, tuple(sl)))
    return tuple(parts)


def _slice_channels(t: Tensor, sl: tuple) -> Tensor:
    data = t.data[sl]

    def bwd(g):
        gz = np.zeros_like(t.data)
        gz[sl] = g
        _accumulate(t, gz)

    return _make(data, (t,), bwd)


def _concat_axis0(parts: list[Tensor]) -> Tensor:
    """Stack parameter tensors along axis 0 (gate fusion); backward splits."""
    data = np.concatenate([p.data for p in parts], axis=0)
    sizes = [p.data.shape[0] for p in parts]

    def bwd(g):
        start = 0
        for p, n in zip(parts, sizes):
            _accumulate(p, g[start:start + n])
            start += n

    return _make(data, tuple(parts), bwd)


class BConvLSTM:
    """Two ConvLSTMs over a length-2 sequence in opposite directions.

    The forward cell consumes (first, second), the backward cell
    (second, first); the fused map is tanh of the convolved final hidden
    states of both directions plus a bias. Output has ``out_channels`` maps.
    """

    def __init__(self, c_in: int, hidden: int, out_channels: int, spatial: tuple[int, int],
                 k: int, rng: np.random.Generator, dtype=np.float64):
        self.fwd = ConvLSTMCell(c_in, hidden, spatial, k, rng, dtype)
        self.bwd = ConvLSTMCell(c_in, hidden, spatial, k, rng, dtype)
        self.W_y_fwd = _param(glorot_uniform(rng, (out_channels, hidden, k, k), dtype))
        self.W_y_bwd = _param(glorot_uniform(rng, (out_channels, hidden, k, k), dtype))
        self.b_y = _param(np.zeros(out_channels, dtype=dtype))

    def __call__(self, seq) -> Tensor:
        seq = list(seq)
        if len(seq) != 2:
            raise UsageError(
                f"bidirectional fusion takes exactly 2 feature maps (encoded, decoded), got {len(seq)}")
        a, b = seq
        if a.data.shape != b.data.shape:
            raise ShapeError(f"sequence elements differ in shape: {a.data.shape} vs {b.data.shape}")
        hf = self.fwd.step(b, self.fwd.step(a)).H
        hb = self.bwd.step(a, self.bwd.step(b)).H
        return tanh(add(conv2d(hf, self.W_y_fwd, self.b_y, "same"),
                        conv2d(hb, self.W_y_bwd, None, "same")))

    def named_params(self, prefix: str) -> NamedParams:
        yield from self.fwd.named_params(f"{prefix}.fwd")
        yield from self.bwd.named_params(f"{prefix}.bwd")
        yield f"{prefix}.W_y_fwd", self.W_y_fwd
        yield f"{prefix}.W_y_bwd", self.W_y_bwd
        yield f"{prefix}.b_y", self.b_y


class BatchNorm:
    """Per-channel batch normalization over (B, H, W) with learned affine.

    Train mode normalizes with biased batch statistics and updates running
    statistics by ``running <- (1-momentum)*running + momentum*batch``;
    infer mode applies the deterministic affine map from running statistics.
    """

    def __init__(self, channels: int, rng: np.random.Generator | None = None,
                 dtype=np.float64, momentum: float = 0.1, epsilon: float = 1e-5):
        if not 0.0 < momentum < 1.0:
            raise UsageError(f"momentum must lie in (0,1), got {momentum}")
        self.channels = channels
        self.momentum = momentum
        self.epsilon = epsilon
        self.gamma = _param(np.ones(channels, dtype=dtype))
        self.beta = _param(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        if x.data.ndim != 4:
            raise ShapeError(f"batchnorm expects a [B,C,H,W] tensor, got shape {x.data.shape}")
        B, C = x.data.shape[:2]
        if C != self.channels:
            raise ShapeError(f"batchnorm built for {self.channels} channels, input has {C}")
        shp = (1, C, 1, 1)
        if mode == "train":
            if B < 2:
                raise UsageError("batchnorm train mode needs a batch of at least 2")
            mu = x.mean(axis=(0, 2, 3), keepdims=True)
            var = ((x - mu) ** 2).mean(axis=(0, 2, 3), keepdims=True)
            xhat = (x - mu) * ((var + self.epsilon) ** -0.5)
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mu.data.reshape(C)
            self.running_var = (1 - m) * self.running_var + m * var.data.reshape(C)
        elif mode == "infer":
            scale = 1.0 / np.sqrt(self.running_var + self.epsilon)
            xhat = (x - self.running_mean.reshape(shp)) * scale.reshape(shp)
        else:
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        return self.gamma.reshape(shp) * xhat + self.beta.reshape(shp)

    def named_params(self, prefix: str) -> NamedParams:
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta

    def named_buffers(self, prefix: str) -> Iterator[tuple[str, np.ndarray]]:
        yield f"{prefix}.running_mean", self.running_mean
        yield f"{prefix}.running_var", self.running_var

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        if name not in ("running_mean", "running_var"):
            raise UsageError(f"unknown batchnorm buffer {name!r}")
        setattr(self, name, value.astype(self.running_mean.dtype))


# ---- checkpoint bundle: text table of contents + BT1 payloads ----

CKPT_MAGIC = "NNW1"


def save_checkpoint(path, entries: list[tuple[str, np.ndarray]], meta: dict[str, str]) -> None:
    """Bundle named tensors into one file: text TOC header, then BT1 blobs."""
    import io

    payload = io.BytesIO()
    toc = []
    for name, arr in entries:
        if " " in name:
            raise UsageError(f"tensor name may not contain spaces: {name!r}")
        offset = payload.tell()
        write_bt1(payload, np.asarray(arr))
        dims = ",".join(str(d) for d in np.asarray(arr).shape) or "scalar"
        toc.append(f"{name} {dims} {offset} {payload.tell() - offset}")
    with open(path, "wb") as f:
        head = [CKPT_MAGIC, f"meta {len(meta)}"]
        head += [f"{k}={v}" for k, v in meta.items()]
        head += [f"tensors {len(toc)}"]
        head += toc
        head.append("payload")
        f.write(("\n".join(head) + "\n").encode())
        f.write(payload.getvalue())


def load_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    import io

    with open(path, "rb") as f:
        blob = f.read()
    newline = blob.find(b"\n")
    if blob[:newline].decode(errors="replace") != CKPT_MAGIC:
        raise UsageError(f"not a checkpoint file: {path}")
    lines = []
    pos = 0
    while True:
        nl = blob.find(b"\n", pos)
        line = blob[pos:nl].decode()
        pos = nl + 1
        lines.append(line)
        if line == "payload":
            break
    meta_count = int(lines[1].split()[1])
    meta = {}
    for line in lines[2:2 + meta_count]:
        k, _, v = line.partition("=")
        meta[k] = v
    tensor_line = 2 + meta_count
    n_tensors = int(lines[tensor_line].split()[1])
    tensors: dict[str, np.ndarray] = {}
    payload = blob[pos:]
    for line in lines[tensor_line + 1:tensor_line + 1 + n_tensors]:
        name, _dims, offset, nbytes = line.rsplit(" ", 3)
        buf = io.BytesIO(payload[int(offset):int(offset) + int(nbytes)])
        tensors[name] = read_bt1(buf)
    return meta, tensors
