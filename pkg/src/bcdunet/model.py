"""Full encoder-decoder assembly with bidirectional ConvLSTM skip fusion.

Topology: ``depth-1`` encoder steps (conv block, 2x2 max pool) with channel
doubling, a densely connected bottleneck at width ``base_filters *
2**(depth-1)``, then ``depth-1`` decoder steps (nearest upsample, 2x2 conv
halving channels, batch norm, bidirectional ConvLSTM fusion with the
matching encoder skip, conv block), and a final 1x1 convolution + sigmoid
producing one probability map at the input resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .tensor import ShapeError, Tensor, conv2d, maxpool2, sigmoid, upsample2


class BuildError(ValueError):
    """Model configuration cannot be materialized."""


@dataclass(frozen=True)
class ModelConfig:
    base_filters: int = 16
    depth: int = 4
    dense_blocks: int = 3
    input_channels: int = 1
    input_size: tuple[int, int] = (64, 64)
    seed: int = 0
    dtype: str = "float64"  # "float32" speeds up training runs

    def validate(self) -> None:
        if self.base_filters < 1 or self.depth < 2 or self.input_channels < 1:
            raise BuildError(f"base_filters/depth/input_channels must be positive, depth >= 2: {self}")
        if self.dense_blocks < 1:
            raise BuildError(f"dense_blocks must be >= 1, got {self.dense_blocks}")
        div = 2 ** (self.depth - 1)
        h, w = self.input_size
        for name, extent in (("height", h), ("width", w)):
            if extent % div:
                raise BuildError(
                    f"input {name} {extent} is not divisible by 2**(depth-1) = {div}")
        if self.dtype not in ("float64", "float32"):
            raise BuildError(f"dtype must be float64 or float32, got {self.dtype!r}")


PRESETS: dict[str, ModelConfig] = {
    "micro": ModelConfig(base_filters=2, depth=2, dense_blocks=2, input_size=(8, 8)),
    "desk": ModelConfig(base_filters=16, depth=4, dense_blocks=3, input_size=(64, 64)),
    "paper": ModelConfig(base_filters=64, depth=4, dense_blocks=3, input_size=(256, 256)),
}


class _DecoderStep:
    """Upsample + 2x2 conv + batch norm + skip fusion + conv block."""

    def __init__(self, c_in: int, c_out: int, spatial: tuple[int, int],
                 rng: np.random.Generator, dtype):
        self.upconv = nn.Conv2d(c_in, c_out, 2, rng, dtype)
        self.bn = nn.BatchNorm(c_out, dtype=dtype)
        self.fuse = nn.BConvLSTM(c_out, c_out, c_out, spatial, 3, rng, dtype)
        self.block = nn.ConvBlock(c_out, c_out, rng, dtype)

    def __call__(self, x: Tensor, skip: Tensor, mode: str) -> Tensor:
        up = self.bn(self.upconv(upsample2(x)), mode)
        if up.data.shape != skip.data.shape:
            raise ShapeError(
                f"decoder feature shape {up.data.shape} does not match skip {skip.data.shape}")
        return self.block(self.fuse([skip, up]))

    def named_params(self, prefix: str) -> nn.NamedParams:
        yield from self.upconv.named_params(f"{prefix}.upconv")
        yield from self.bn.named_params(f"{prefix}.bn")
        yield from self.fuse.named_params(f"{prefix}.fuse")
        yield from self.block.named_params(f"{prefix}.block")


class Model:
    """Materialized parameter collection plus the layer wiring plan."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(config.seed)

        h, w = config.input_size
        self.encoder: list[nn.ConvBlock] = []
        c, f = config.input_channels, config.base_filters
        for _ in range(config.depth - 1):
            self.encoder.append(nn.ConvBlock(c, f, rng, dtype))
            c, f = f, f * 2
        self.bottleneck = nn.DenseBottleneck(c, f, config.dense_blocks, rng, dtype)

        self.decoder: list[_DecoderStep] = []
        cur = f
        for level in reversed(range(config.depth - 1)):
            skip_channels = config.base_filters * 2 ** level
            spatial = (h // 2 ** level, w // 2 ** level)
            self.decoder.append(_DecoderStep(cur, skip_channels, spatial, rng, dtype))
            cur = skip_channels
        self.head = nn.Conv2d(cur, 1, 1, rng, dtype)

    def forward(self, batch, mode: str = "infer") -> Tensor:
        """Probability maps in (0,1) with shape [B,1,H,W]."""
        x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=self.config.dtype))
        if x.data.ndim != 4:
            raise ShapeError(f"forward expects a [B,C,H,W] batch, got shape {x.data.shape}")
        if x.data.shape[2:] != tuple(self.config.input_size):
            raise ShapeError(
                f"input spatial size {x.data.shape[2:]} does not match configured {self.config.input_size}")
        if x.data.shape[1] != self.config.input_channels:
            raise ShapeError(
                f"input has {x.data.shape[1]} channels, model expects {self.config.input_channels}")
        skips = []
        for block in self.encoder:
            x = block(x)
            skips.append(x)
            x = maxpool2(x)
        x = self.bottleneck(x)
        for step, skip in zip(self.decoder, reversed(skips)):
            x = step(x, skip, mode)
        return sigmoid(self.head(x))

    __call__ = forward

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, block in enumerate(self.encoder):
            out.extend(block.named_params(f"enc{i + 1}"))
        out.extend(self.bottleneck.named_params("bottleneck"))
        for i, step in enumerate(self.decoder):
            out.extend(step.named_params(f"dec{i + 1}"))
        out.extend(self.head.named_params("head"))
        return out

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        return [item for i, step in enumerate(self.decoder)
                for item in step.bn.named_buffers(f"dec{i + 1}.bn")]

    def count_params(self) -> int:
        return sum(p.data.size for _, p in self.named_params())

    def summary(self) -> str:
        lines = [f"{name} {'x'.join(str(d) for d in p.data.shape)} {p.data.size}"
                 for name, p in self.named_params()]
        lines.append(f"total {self.count_params()}")
        return "\n".join(lines)

    # ---- checkpoint state ----

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        return [(n, p.data) for n, p in self.named_params()] + self.named_buffers()

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Assign named parameter/buffer values, checking shapes tensor by tensor."""
        dtype = np.dtype(self.config.dtype)
        for name, p in self.named_params():
            if name not in arrays:
                raise ShapeError(f"checkpoint is missing tensor {name}")
            arr = arrays[name]
            if tuple(arr.shape) != p.data.shape:
                raise ShapeError(
                    f"checkpoint tensor {name} has shape {tuple(arr.shape)}, model expects {p.data.shape}")
            p.data = arr.astype(dtype)
        buffer_owners = {f"dec{i + 1}.bn": step.bn for i, step in enumerate(self.decoder)}
        for name, buf in self.named_buffers():
            if name not in arrays:
                raise ShapeError(f"checkpoint is missing buffer {name}")
            arr = arrays[name]
            if tuple(arr.shape) != buf.shape:
                raise ShapeError(
                    f"checkpoint buffer {name} has shape {tuple(arr.shape)}, model expects {buf.shape}")
            prefix, leaf = name.rsplit(".", 1)
            buffer_owners[prefix].set_buffer(leaf, arr)

    def save_checkpoint(self, path) -> None:
        meta = {
            "base_filters": str(self.config.base_filters),
            "depth": str(self.config.depth),
            "dense_blocks": str(self.config.dense_blocks),
            "input_channels": str(self.config.input_channels),
            "input_h": str(self.config.input_size[0]),
            "input_w": str(self.config.input_size[1]),
            "seed": str(self.config.seed),
            "dtype": self.config.dtype,
        }
        nn.save_checkpoint(path, self.state_arrays(), meta)


def config_from_meta(meta: dict[str, str], dtype: str | None = None) -> ModelConfig:
    return ModelConfig(
        base_filters=int(meta["base_filters"]),
        depth=int(meta["depth"]),
        dense_blocks=int(meta["dense_blocks"]),
        input_channels=int(meta["input_channels"]),
        input_size=(int(meta["input_h"]), int(meta["input_w"])),
        seed=int(meta["seed"]),
        dtype=dtype or meta.get("dtype", "float64"),
    )


def load_model(path) -> Model:
    meta, arrays = nn.load_checkpoint(path)
    model = build(config_from_meta(meta))
    model.load_state_arrays(arrays)
    return model


def build(config: ModelConfig) -> Model:
    """Deterministically materialize all parameters from the config seed."""
    return Model(config)
