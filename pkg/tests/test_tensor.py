"""Tensor engine: op semantics, gradient oracles, invariants, BT1 format."""

import io

import numpy as np
import pytest

from bcdunet.tensor import (
    ShapeError,
    Tensor,
    UsageError,
    add,
    clip,
    concat_channels,
    conv2d,
    hadamard,
    load_bt1,
    log,
    maxpool2,
    no_grad,
    read_bt1,
    relu,
    save_bt1,
    sigmoid,
    tanh,
    upsample2,
    write_bt1,
)


def conv2d_loops(x, k, b, padding):
    """Independent oracle: direct nested-loop cross-correlation."""
    C, H, W = x.shape
    O, _, kH, kW = k.shape
    if padding == "same":
        ph, pw = (kH - 1) // 2, (kW - 1) // 2
        xp = np.zeros((C, H + kH - 1, W + kW - 1))
        xp[:, ph:ph + H, pw:pw + W] = x
        Ho, Wo = H, W
    else:
        xp = x
        Ho, Wo = H - kH + 1, W - kW + 1
    out = np.zeros((O, Ho, Wo))
    for o in range(O):
        for y in range(Ho):
            for xx in range(Wo):
                acc = 0.0
                for c in range(C):
                    for i in range(kH):
                        for j in range(kW):
                            acc += xp[c, y + i, xx + j] * k[o, c, i, j]
                out[o, y, xx] = acc + b[o]
    return out


def numeric_grad(f, arr, eps):
    g = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b, floor=1e-8):
    scale = np.maximum(np.abs(a), np.abs(b))
    return float(np.max(np.where(scale > floor, np.abs(a - b) / np.maximum(scale, floor),
                                 np.abs(a - b) / floor))) if a.size else 0.0


class TestConv2d:
    def test_1x1_kernel_scales(self):
        out = conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.full((1, 1, 1, 1), 2.0)),
                     Tensor(np.zeros(1)), "same")
        assert np.array_equal(out.data, np.full((1, 3, 3), 2.0))

    def test_valid_2x2_sum(self):
        x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
        k = Tensor(np.ones((1, 1, 2, 2)))
        out = conv2d(x, k, Tensor(np.zeros(1)), "valid")
        assert out.data.shape == (1, 1, 1)
        assert out.data[0, 0, 0] == 10.0

    def test_zero_kernel_zero_output(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((3, 5, 5)))
        out = conv2d(x, Tensor(np.zeros((2, 3, 3, 3))), Tensor(np.zeros(2)), "same")
        assert np.all(out.data == 0.0)

    @pytest.mark.parametrize("padding", ["same", "valid"])
    def test_matches_nested_loop_oracle(self, padding):
        rng = np.random.default_rng(42)
        for seed in range(10):
            r = np.random.default_rng(seed)
            x = r.standard_normal((2, 5, 6))
            k = r.standard_normal((3, 2, 3, 3))
            b = r.standard_normal(3)
            got = conv2d(Tensor(x), Tensor(k), Tensor(b), padding).data
            want = conv2d_loops(x, k, b, padding)
            assert np.allclose(got, want, atol=1e-12)

    def test_even_kernel_same_pads_bottom_right(self):
        # 2x2 same: output[y,x] covers input[y:y+2, x:x+2], zero pad at bottom/right
        x = np.arange(9, dtype=float).reshape(1, 3, 3)
        k = np.ones((1, 1, 2, 2))
        out = conv2d(Tensor(x), Tensor(k), None, "same").data
        assert out.shape == (1, 3, 3)
        assert out[0, 0, 0] == 0 + 1 + 3 + 4
        assert out[0, 2, 2] == 8.0  # only top-left of window in bounds

    def test_channel_mismatch_raises(self):
        with pytest.raises(ShapeError, match="input channels"):
            conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))), None, "same")

    def test_kernel_larger_than_input_valid_raises(self):
        with pytest.raises(ShapeError, match="valid"):
            conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))), None, "valid")

    def test_batched_matches_unbatched(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 2, 6, 6))
        k = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        full = conv2d(Tensor(x), Tensor(k), Tensor(b), "same").data
        for i in range(4):
            single = conv2d(Tensor(x[i]), Tensor(k), Tensor(b), "same").data
            assert np.allclose(full[i], single, atol=1e-12)

    def test_linearity(self):
        rng = np.random.default_rng(7)
        k = Tensor(rng.standard_normal((2, 1, 3, 3)))
        x, y = rng.standard_normal((1, 4, 4)), rng.standard_normal((1, 4, 4))
        a, b = 1.7, -0.3
        lhs = conv2d(Tensor(a * x + b * y), k, None, "same").data
        rhs = a * conv2d(Tensor(x), k, None, "same").data + b * conv2d(Tensor(y), k, None, "same").data
        assert np.abs(lhs - rhs).max() < 1e-10

    def test_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.standard_normal((1, 4, 4)), requires_grad=True)
        k = Tensor(rng.standard_normal((2, 1, 3, 3)), requires_grad=True)
        w = rng.standard_normal((2, 4, 4))

        def loss():
            return (conv2d(x, k, None, "same") * w).sum()

        loss().backward()
        gx, gk = x.grad.copy(), k.grad.copy()

        def value():
            with no_grad():
                return float(loss().data)

        assert rel_err(gx, numeric_grad(value, x.data, 1e-4)) < 1e-4
        assert rel_err(gk, numeric_grad(value, k.data, 1e-4)) < 1e-4


class TestBackward:
    def test_linear_map_grad(self):
        x = Tensor(np.random.default_rng(0).standard_normal((3, 4)), requires_grad=True)
        (x * 2.0).sum().backward()
        assert np.allclose(x.grad, 2.0)

    def test_unrelated_tensor_has_no_grad(self):
        x = Tensor(np.ones(3), requires_grad=True)
        other = Tensor(np.ones(3), requires_grad=True)
        x.sum().backward()
        assert other.grad is None

    def test_fanout_accumulates(self):
        x = Tensor(np.ones(3), requires_grad=True)
        (add(x, x)).sum().backward()
        assert np.allclose(x.grad, 2.0)

    def test_backward_on_nonscalar_raises(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = x * 1.0
        with pytest.raises(UsageError, match="scalar"):
            y.backward()

    def test_backward_twice_raises(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = x.sum()
        loss.backward()
        with pytest.raises(UsageError, match="already ran"):
            loss.backward()

    def test_no_grad_builds_no_graph(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = (x * 3.0).sum()
        assert not y.requires_grad
        with pytest.raises(UsageError):
            y.backward()


class TestMaxPool:
    def test_basic(self):
        out = maxpool2(Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]])))
        assert out.data.tolist() == [[[4.0]]]

    def test_backward_routes_to_argmax(self):
        x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]), requires_grad=True)
        maxpool2(x).sum().backward()
        assert x.grad.tolist() == [[[0.0, 0.0], [0.0, 1.0]]]

    def test_tie_goes_to_first_in_row_major(self):
        x = Tensor(np.full((1, 2, 2), 5.0), requires_grad=True)
        maxpool2(x).sum().backward()
        assert x.grad.tolist() == [[[1.0, 0.0], [0.0, 0.0]]]

    def test_odd_extent_raises(self):
        with pytest.raises(ShapeError, match="even"):
            maxpool2(Tensor(np.ones((1, 3, 4))))

    def test_output_bounded_by_window_max(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 6, 6))
        out = maxpool2(Tensor(x)).data
        assert out.max() <= x.max()
        win = x.reshape(2, 3, 2, 3, 2).transpose(0, 1, 3, 2, 4).reshape(2, 3, 3, 4)
        assert np.array_equal(out, win.max(axis=-1))


class TestUpsample:
    def test_duplication(self):
        out = upsample2(Tensor(np.array([[[1.0]]])))
        assert out.data.tolist() == [[[1.0, 1.0], [1.0, 1.0]]]

    def test_backward_sums_blocks(self):
        x = Tensor(np.array([[[1.0]]]), requires_grad=True)
        upsample2(x).sum().backward()
        assert x.grad.tolist() == [[[4.0]]]

    def test_shape_contract(self):
        out = upsample2(Tensor(np.zeros((3, 5, 7))))
        assert out.data.shape == (3, 10, 14)


class TestConcat:
    def test_channel_stacking(self):
        a, b = Tensor(np.ones((1, 2, 2))), Tensor(np.zeros((3, 2, 2)))
        out = concat_channels([a, b])
        assert out.data.shape == (4, 2, 2)
        assert np.all(out.data[:1] == 1.0) and np.all(out.data[1:] == 0.0)

    def test_single_input_identity(self):
        a = Tensor(np.arange(8.0).reshape(2, 2, 2))
        assert np.array_equal(concat_channels([a]).data, a.data)

    def test_backward_splits(self):
        a = Tensor(np.ones((1, 2, 2)), requires_grad=True)
        b = Tensor(np.ones((3, 2, 2)), requires_grad=True)
        w = np.concatenate([np.full((1, 2, 2), 2.0), np.full((3, 2, 2), 5.0)])
        (concat_channels([a, b]) * w).sum().backward()
        assert np.allclose(a.grad, 2.0)
        assert np.allclose(b.grad, 5.0)

    def test_spatial_mismatch_raises(self):
        with pytest.raises(ShapeError, match="extents differ"):
            concat_channels([Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 3, 2)))])


class TestElementwise:
    def test_analytic_values(self):
        assert sigmoid(Tensor(np.zeros(1))).data[0] == 0.5
        assert tanh(Tensor(np.zeros(1))).data[0] == 0.0
        assert relu(Tensor(np.array([-1.0]))).data[0] == 0.0

    def test_hadamard(self):
        out = hadamard(Tensor(np.array([2.0, 3.0])), Tensor(np.array([4.0, 5.0])))
        assert out.data.tolist() == [8.0, 15.0]

    def test_shape_mismatch_raises(self):
        with pytest.raises(ShapeError, match="incompatible"):
            add(Tensor(np.ones(3)), Tensor(np.ones(4)))

    def test_tanh_derivative_at_zero(self):
        x = Tensor(np.zeros(1), requires_grad=True)
        tanh(x).sum().backward()
        assert x.grad[0] == 1.0

        def value():
            with no_grad():
                return float(tanh(x).sum().data)

        fd = numeric_grad(value, x.data, 1e-4)
        assert abs(1.0 - fd[0]) < 1e-8

    def test_relu_subgradient_zero_at_zero(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        relu(x).sum().backward()
        assert np.all(x.grad == 0.0)

    def test_clip_gradient_masks_outside(self):
        x = Tensor(np.array([-1.0, 0.5, 2.0]), requires_grad=True)
        clip(x, 0.0, 1.0).sum().backward()
        assert x.grad.tolist() == [0.0, 1.0, 0.0]


SMOOTH_OPS = {
    "add": (lambda r: (r.standard_normal(6), r.standard_normal(6)), lambda a, b: add(a, b)),
    "hadamard": (lambda r: (r.standard_normal(6), r.standard_normal(6)), lambda a, b: hadamard(a, b)),
    "sigmoid": (lambda r: (r.standard_normal(8),), sigmoid),
    "tanh": (lambda r: (r.standard_normal(8),), tanh),
    "log": (lambda r: (r.uniform(0.5, 2.0, 8),), log),
    "conv_same": (lambda r: (r.standard_normal((2, 4, 4)), r.standard_normal((2, 2, 3, 3))),
                  lambda x, k: conv2d(x, k, None, "same")),
}


@pytest.mark.parametrize("name", sorted(SMOOTH_OPS))
def test_op_gradients_match_finite_differences(name):
    """Property: analytic gradient within 1e-4 relative of central FD, 100 seeds."""
    make, op = SMOOTH_OPS[name]
    for seed in range(100):
        rng = np.random.default_rng(seed)
        args = [Tensor(a, requires_grad=True) for a in make(rng)]
        w = rng.standard_normal(op(*args).data.shape)

        def loss():
            return (op(*args) * w).sum()

        loss().backward()
        grads = [a.grad.copy() if a.grad is not None else np.zeros_like(a.data) for a in args]

        def value():
            with no_grad():
                return float(loss().data)

        for a, g in zip(args, grads):
            assert rel_err(g, numeric_grad(value, a.data, 1e-4)) < 1e-4, f"{name} seed {seed}"


@pytest.mark.parametrize("name,op", [("relu", relu), ("maxpool2", maxpool2)])
def test_kinked_op_gradients(name, op):
    """ReLU/pool are checked away from their non-smooth points."""
    for seed in range(100):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, 4, 4))
        x[np.abs(x) < 1e-3] += 0.01  # keep clear of the ReLU kink
        xt = Tensor(x, requires_grad=True)
        w = rng.standard_normal(op(xt).data.shape)

        def loss():
            return (op(xt) * w).sum()

        loss().backward()
        g = xt.grad.copy()

        def value():
            with no_grad():
                return float(loss().data)

        assert rel_err(g, numeric_grad(value, xt.data, 1e-5)) < 1e-4, f"{name} seed {seed}"


def test_replay_determinism():
    """Identical inputs give bit-identical forward and backward results."""
    def run():
        rng = np.random.default_rng(123)
        x = Tensor(rng.standard_normal((1, 2, 8, 8)), requires_grad=True)
        k = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
        out = relu(conv2d(x, k, None, "same"))
        loss = (out * rng.standard_normal(out.data.shape)).sum()
        loss.backward()
        return out.data.copy(), x.grad.copy(), k.grad.copy()

    first, second = run(), run()
    for a, b in zip(first, second):
        assert a.tobytes() == b.tobytes()


def test_forward_backward_values_stay_finite():
    rng = np.random.default_rng(9)
    x = Tensor(rng.standard_normal((2, 8, 8)) * 50, requires_grad=True)
    k = Tensor(rng.standard_normal((4, 2, 3, 3)), requires_grad=True)
    out = sigmoid(conv2d(x, k, None, "same"))
    assert np.isfinite(out.data).all()
    out.sum().backward()
    assert np.isfinite(x.grad).all() and np.isfinite(k.grad).all()


class TestBT1:
    def test_round_trip(self, tmp_path):
        arr = np.random.default_rng(0).standard_normal((3, 4, 5)).astype(np.float32)
        path = tmp_path / "t.bt1"
        save_bt1(path, arr)
        assert np.array_equal(load_bt1(path), arr)

    def test_header_layout(self):
        buf = io.BytesIO()
        write_bt1(buf, np.zeros((2, 3), dtype=np.float32))
        raw = buf.getvalue()
        assert raw[:4] == b"BT1\0"
        assert raw[4:8] == (2).to_bytes(4, "little")
        assert raw[8:12] == (2).to_bytes(4, "little")
        assert raw[12:16] == (3).to_bytes(4, "little")
        assert len(raw) == 16 + 4 * 6

    def test_bad_magic_rejected(self):
        with pytest.raises(UsageError, match="magic"):
            read_bt1(io.BytesIO(b"XYZ\0" + b"\0" * 16))

    def test_truncated_payload_rejected(self):
        buf = io.BytesIO()
        write_bt1(buf, np.ones((4,), dtype=np.float32))
        with pytest.raises(UsageError, match="truncated"):
            read_bt1(io.BytesIO(buf.getvalue()[:-4]))
