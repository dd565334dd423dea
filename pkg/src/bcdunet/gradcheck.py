"""Finite-difference verification of analytic gradients, layer by layer.

Each check builds a small seeded instance, computes a scalar loss through
the recorded graph, and compares every parameter's analytic gradient with
central differences on a graph-free re-evaluation. All arithmetic is double
precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .model import Model, ModelConfig
from .tensor import Tensor, conv2d, maxpool2, no_grad, tanh, upsample2
from .train import bce_loss

DEFAULT_EPS = 1e-4
# compositions with ReLU/maxpool kinks need a finer probe so the central
# difference does not straddle a non-smooth point
KINKED_EPS = 1e-5
DEFAULT_TOLERANCE = 1e-3
# gradients whose magnitude never exceeds this are compared absolutely
REL_FLOOR = 1e-7


def numeric_grad(f, arr: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``arr``.

    ``arr`` is mutated in place during probing and restored afterwards.
    """
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        fp = f()
        flat[i] = saved - eps
        fm = f()
        flat[i] = saved
        gflat[i] = (fp - fm) / (2.0 * eps)
    return g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst elementwise relative error; near-zero pairs compare absolutely."""
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    err = np.abs(analytic - numeric)
    rel = np.where(scale > REL_FLOOR, err / np.maximum(scale, REL_FLOOR), err / REL_FLOOR)
    return float(rel.max()) if rel.size else 0.0


@dataclass
class CheckResult:
    name: str
    worst_param: str
    max_error: float

    def passed(self, tolerance: float) -> bool:
        return self.max_error < tolerance


def _check_params(name: str, params: list[tuple[str, Tensor]], loss_fn, eps: float) -> CheckResult:
    """loss_fn() must rebuild the graph from current parameter values."""
    loss = loss_fn()
    loss.backward()
    analytic = {pname: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for pname, p in params}

    def value() -> float:
        with no_grad():
            return float(loss_fn().data)

    worst_name, worst = "", 0.0
    for pname, p in params:
        num = numeric_grad(value, p.data, eps)
        err = max_rel_error(analytic[pname], num)
        if err >= worst:
            worst_name, worst = pname, err
    return CheckResult(name=name, worst_param=worst_name, max_error=worst)


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return (out * weights).sum()


def check_conv2d(eps: float = DEFAULT_EPS) -> CheckResult:
    rng = np.random.default_rng(11)
    x = Tensor(rng.standard_normal((1, 4, 4)), requires_grad=True)
    k = Tensor(rng.standard_normal((2, 1, 3, 3)) * 0.5, requires_grad=True)
    b = Tensor(rng.standard_normal(2) * 0.1, requires_grad=True)
    w = rng.standard_normal((2, 4, 4))
    params = [("input", x), ("kernel", k), ("bias", b)]
    return _check_params("conv2d", params, lambda: _weighted_sum(conv2d(x, k, b, "same"), w), eps)


def check_pool_upsample(eps: float = DEFAULT_EPS) -> CheckResult:
    rng = np.random.default_rng(12)
    x = Tensor(rng.standard_normal((2, 4, 4)), requires_grad=True)
    w = rng.standard_normal((2, 4, 4))
    loss_fn = lambda: _weighted_sum(upsample2(maxpool2(x)), w)
    return _check_params("maxpool2+upsample2", [("input", x)], loss_fn, eps)


def check_conv_block(eps: float = KINKED_EPS) -> CheckResult:
    rng = np.random.default_rng(13)
    block = nn.ConvBlock(1, 2, rng)
    x = Tensor(rng.standard_normal((1, 1, 4, 4)), requires_grad=True)
    w = rng.standard_normal((1, 2, 4, 4))
    params = list(block.named_params("block")) + [("input", x)]
    return _check_params("conv_block", params, lambda: _weighted_sum(block(x), w), eps)


def check_batchnorm(eps: float = DEFAULT_EPS) -> CheckResult:
    rng = np.random.default_rng(14)
    bn = nn.BatchNorm(2)
    x = Tensor(rng.standard_normal((2, 2, 4, 4)), requires_grad=True)
    w = rng.standard_normal((2, 2, 4, 4))
    params = list(bn.named_params("bn")) + [("input", x)]
    return _check_params("batchnorm(train)", params, lambda: _weighted_sum(bn(x, "train"), w), eps)


def check_convlstm_step(eps: float = DEFAULT_EPS) -> CheckResult:
    rng = np.random.default_rng(15)
    cell = nn.ConvLSTMCell(2, 2, (4, 4), 3, rng)
    x = Tensor(rng.standard_normal((2, 4, 4)), requires_grad=True)
    h0 = Tensor(rng.standard_normal((2, 4, 4)) * 0.5, requires_grad=True)
    c0 = Tensor(rng.standard_normal((2, 4, 4)) * 0.5, requires_grad=True)
    w = rng.standard_normal((2, 4, 4))
    params = list(cell.named_params("cell")) + [("x", x), ("h0", h0), ("c0", c0)]

    def loss_fn():
        state = cell.step(x, nn.ConvLSTMState(H=h0, C=c0))
        return _weighted_sum(state.H, w) + _weighted_sum(state.C, w)

    return _check_params("convlstm_step", params, loss_fn, eps)


def check_bconvlstm(eps: float = DEFAULT_EPS) -> CheckResult:
    rng = np.random.default_rng(16)
    fuse = nn.BConvLSTM(2, 2, 2, (4, 4), 3, rng)
    a = Tensor(rng.standard_normal((2, 4, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((2, 4, 4)), requires_grad=True)
    w = rng.standard_normal((2, 4, 4))
    params = list(fuse.named_params("fuse")) + [("a", a), ("b", b)]
    return _check_params("bconvlstm", params, lambda: _weighted_sum(fuse([a, b]), w), eps)


def check_dense_bottleneck(eps: float = KINKED_EPS) -> CheckResult:
    rng = np.random.default_rng(17)
    dense = nn.DenseBottleneck(2, 3, 2, rng)
    x = Tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True)
    w = rng.standard_normal((1, 3, 4, 4))
    params = list(dense.named_params("dense")) + [("input", x)]
    return _check_params("dense_bottleneck(d=2)", params, lambda: _weighted_sum(dense(x), w), eps)


def check_full_model(eps: float = KINKED_EPS) -> CheckResult:
    rng = np.random.default_rng(18)
    model = Model(ModelConfig(base_filters=2, depth=2, dense_blocks=2,
                              input_channels=1, input_size=(8, 8), seed=5))
    x = rng.uniform(0.0, 1.0, (2, 1, 8, 8))
    y = (rng.uniform(0.0, 1.0, (2, 1, 8, 8)) > 0.7).astype(np.float64)
    params = model.named_params()
    return _check_params("full micro model", params,
                         lambda: bce_loss(model.forward(Tensor(x), "train"), y), eps)


ALL_CHECKS = [
    check_conv2d,
    check_pool_upsample,
    check_conv_block,
    check_batchnorm,
    check_convlstm_step,
    check_bconvlstm,
    check_dense_bottleneck,
    check_full_model,
]


def run_suite(tolerance: float = DEFAULT_TOLERANCE, eps: float | None = None) -> list[CheckResult]:
    """Run every check; ``eps=None`` keeps each check's own probe size."""
    return [check() if eps is None else check(eps) for check in ALL_CHECKS]
