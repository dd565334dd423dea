"""Layers: conv blocks, dense bottleneck, ConvLSTM cell and fusion, batch norm."""

import numpy as np
import pytest

from bcdunet import nn
from bcdunet.tensor import ShapeError, Tensor, UsageError, no_grad


def zero_params(layer, prefix="p"):
    for _, p in layer.named_params(prefix):
        p.data = np.zeros_like(p.data)


def zero_state(f, h, w):
    return nn.ConvLSTMState(H=Tensor(np.zeros((f, h, w))), C=Tensor(np.zeros((f, h, w))))


# ---- independent oracle: straight-line evaluation of the cell update ----

def corr2d_same(x, k):
    """Plain nested-loop 3x3 same cross-correlation, no graph."""
    C, H, W = x.shape
    O, _, kh, kw = k.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.zeros((C, H + kh - 1, W + kw - 1))
    xp[:, ph:ph + H, pw:pw + W] = x
    out = np.zeros((O, H, W))
    for o in range(O):
        for y in range(H):
            for xx in range(W):
                s = 0.0
                for c in range(C):
                    for i in range(kh):
                        for j in range(kw):
                            s += xp[c, y + i, xx + j] * k[o, c, i, j]
                out[o, y, xx] = s
    return out


def sig(v):
    return 1.0 / (1.0 + np.exp(-v))


def convlstm_step_reference(x, h, c, p):
    """Direct transcription of the gate equations with loops, no shared code."""
    def bias(b):
        return b[:, None, None]

    i = sig(corr2d_same(x, p["W_xi"]) + corr2d_same(h, p["W_hi"]) + p["W_ci"] * c + bias(p["b_i"]))
    f = sig(corr2d_same(x, p["W_xf"]) + corr2d_same(h, p["W_hf"]) + p["W_cf"] * c + bias(p["b_f"]))
    c_new = f * c + i * np.tanh(corr2d_same(x, p["W_xc"]) + corr2d_same(h, p["W_hc"]) + bias(p["b_c"]))
    o = sig(corr2d_same(x, p["W_xo"]) + corr2d_same(h, p["W_ho"]) + p["W_co"] * c_new + bias(p["b_o"]))
    h_new = o * np.tanh(c_new)
    return h_new, c_new


class TestConvBlock:
    def test_zero_params_zero_output(self):
        rng = np.random.default_rng(0)
        block = nn.ConvBlock(3, 4, rng)
        zero_params(block)
        out = block(Tensor(rng.standard_normal((3, 6, 6))))
        assert np.all(out.data == 0.0)

    def test_shape_contract(self):
        block = nn.ConvBlock(1, 16, np.random.default_rng(1))
        out = block(Tensor(np.random.default_rng(2).standard_normal((1, 64, 64))))
        assert out.data.shape == (16, 64, 64)

    def test_channel_mismatch(self):
        block = nn.ConvBlock(2, 4, np.random.default_rng(1))
        with pytest.raises(ShapeError):
            block(Tensor(np.ones((3, 6, 6))))


class TestDenseBottleneck:
    def test_d1_is_single_block(self):
        rng = np.random.default_rng(3)
        dense = nn.DenseBottleneck(2, 4, 1, rng)
        assert len(dense.blocks) == 1
        out = dense(Tensor(rng.standard_normal((2, 4, 4))))
        assert out.data.shape == (4, 4, 4)

    def test_channel_law_d3(self):
        dense = nn.DenseBottleneck(5, 8, 3, np.random.default_rng(4))
        in_channels = [b.conv1.kernel.data.shape[1] for b in dense.blocks]
        assert in_channels == [5, 8, 16]
        out = dense(Tensor(np.random.default_rng(5).standard_normal((5, 4, 4))))
        assert out.data.shape == (8, 4, 4)

    def test_block_and_concat_counts(self, monkeypatch):
        calls = {"blocks": 0, "concats": 0}
        orig_block = nn.ConvBlock.__call__
        orig_concat = nn.concat_channels

        def counting_block(self, x):
            calls["blocks"] += 1
            return orig_block(self, x)

        def counting_concat(ts):
            calls["concats"] += 1
            return orig_concat(ts)

        monkeypatch.setattr(nn.ConvBlock, "__call__", counting_block)
        monkeypatch.setattr(nn, "concat_channels", counting_concat)
        for d in (1, 2, 4):
            calls["blocks"] = calls["concats"] = 0
            dense = nn.DenseBottleneck(2, 3, d, np.random.default_rng(6))
            dense(Tensor(np.random.default_rng(7).standard_normal((2, 4, 4))))
            assert calls["blocks"] == d
            assert calls["concats"] == d - 1

    def test_zero_params_zero_output_any_d(self):
        for d in (1, 2, 3):
            dense = nn.DenseBottleneck(2, 3, d, np.random.default_rng(8))
            zero_params(dense)
            out = dense(Tensor(np.random.default_rng(9).standard_normal((2, 4, 4))))
            assert np.all(out.data == 0.0)


class TestConvLSTM:
    def test_zero_parameter_identities(self):
        """Zero weights and biases: every gate is 0.5, cell and hidden stay 0."""
        cell = nn.ConvLSTMCell(2, 3, (4, 4), 3, np.random.default_rng(10))
        zero_params(cell)
        x = Tensor(np.random.default_rng(11).standard_normal((2, 4, 4)))
        st = cell.step(x, zero_state(3, 4, 4))
        assert np.all(st.C.data == 0.0)
        assert np.all(st.H.data == 0.0)
        # gates at exactly sigma(0): reconstruct i from the cell update with tanh-input 0
        assert np.all(np.tanh(st.C.data) == 0.0)

    def test_forget_gate_saturation_carries_cell(self):
        cell = nn.ConvLSTMCell(2, 2, (4, 4), 3, np.random.default_rng(12))
        zero_params(cell)
        cell.b_f.data = np.full(2, 20.0)
        c0 = np.random.default_rng(13).standard_normal((2, 4, 4))
        st = cell.step(Tensor(np.zeros((2, 4, 4))),
                       nn.ConvLSTMState(H=Tensor(np.zeros((2, 4, 4))), C=Tensor(c0)))
        assert np.abs(st.C.data - c0).max() < 1e-6

    def test_matches_straight_line_reference(self):
        """Eq-by-eq oracle agreement on 50 random seeded instances."""
        for seed in range(50):
            rng = np.random.default_rng(1000 + seed)
            f = int(rng.integers(1, 5))
            c_in = int(rng.integers(1, 4))
            cell = nn.ConvLSTMCell(c_in, f, (4, 4), 3, rng)
            pvals = {}
            for name, p in cell.named_params("c"):
                leaf = name.split(".")[-1]
                p.data = rng.standard_normal(p.data.shape) * 0.5
                pvals[leaf] = p.data.copy()
            x = rng.standard_normal((c_in, 4, 4))
            h0 = rng.standard_normal((f, 4, 4)) * 0.5
            c0 = rng.standard_normal((f, 4, 4)) * 0.5
            st = cell.step(Tensor(x), nn.ConvLSTMState(H=Tensor(h0), C=Tensor(c0)))
            h_ref, c_ref = convlstm_step_reference(x, h0, c0, pvals)
            assert np.abs(st.H.data - h_ref).max() < 1e-10, f"seed {seed}"
            assert np.abs(st.C.data - c_ref).max() < 1e-10, f"seed {seed}"

    def test_cold_start_equals_explicit_zero_state(self):
        rng = np.random.default_rng(14)
        cell = nn.ConvLSTMCell(2, 3, (4, 4), 3, rng)
        x = Tensor(rng.standard_normal((2, 4, 4)))
        a = cell.step(x)
        b = cell.step(x, zero_state(3, 4, 4))
        assert np.allclose(a.H.data, b.H.data, atol=1e-15)
        assert np.allclose(a.C.data, b.C.data, atol=1e-15)

    def test_gates_in_open_interval_and_hidden_bounded(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            cell = nn.ConvLSTMCell(2, 2, (4, 4), 3, rng)
            st = zero_state(2, 4, 4)
            for _ in range(3):
                st = cell.step(Tensor(rng.standard_normal((2, 4, 4)) * 3), st)
            assert np.all(np.abs(st.H.data) < 1.0)

    def test_batched_matches_per_item(self):
        rng = np.random.default_rng(15)
        cell = nn.ConvLSTMCell(2, 2, (4, 4), 3, rng)
        xb = rng.standard_normal((3, 2, 4, 4))
        stb = cell.step(Tensor(xb), nn.ConvLSTMState(
            H=Tensor(np.zeros((3, 2, 4, 4))), C=Tensor(np.zeros((3, 2, 4, 4)))))
        for i in range(3):
            st = cell.step(Tensor(xb[i]), zero_state(2, 4, 4))
            assert np.allclose(stb.H.data[i], st.H.data, atol=1e-12)


class TestBConvLSTM:
    def test_zero_params_zero_output(self):
        fuse = nn.BConvLSTM(2, 2, 2, (4, 4), 3, np.random.default_rng(16))
        zero_params(fuse)
        rng = np.random.default_rng(17)
        out = fuse([Tensor(rng.standard_normal((2, 4, 4))), Tensor(rng.standard_normal((2, 4, 4)))])
        assert np.all(out.data == 0.0)

    def test_wrong_length_raises(self):
        fuse = nn.BConvLSTM(2, 2, 2, (4, 4), 3, np.random.default_rng(18))
        x = Tensor(np.ones((2, 4, 4)))
        with pytest.raises(UsageError, match="exactly 2"):
            fuse([x])
        with pytest.raises(UsageError, match="exactly 2"):
            fuse([x, x, x])

    def test_degenerate_backward_direction(self):
        """Zero backward cell and W_y_bwd: output equals the one-directional pass."""
        rng = np.random.default_rng(19)
        fuse = nn.BConvLSTM(2, 2, 2, (4, 4), 3, rng)
        zero_params(fuse.bwd, "b")
        fuse.W_y_bwd.data = np.zeros_like(fuse.W_y_bwd.data)
        fuse.b_y.data = np.zeros_like(fuse.b_y.data)
        a = Tensor(rng.standard_normal((2, 4, 4)))
        b = Tensor(rng.standard_normal((2, 4, 4)))
        out = fuse([a, b])
        from bcdunet.tensor import conv2d, tanh as ttanh
        hf = fuse.fwd.step(b, fuse.fwd.step(a)).H
        want = ttanh(conv2d(hf, fuse.W_y_fwd, None, "same"))
        assert np.allclose(out.data, want.data, atol=1e-15)

    def test_output_strictly_inside_unit_interval(self):
        rng = np.random.default_rng(20)
        fuse = nn.BConvLSTM(2, 3, 3, (4, 4), 3, rng)
        out = fuse([Tensor(rng.standard_normal((2, 4, 4)) * 10),
                    Tensor(rng.standard_normal((2, 4, 4)) * 10)])
        assert np.all(np.abs(out.data) < 1.0)

    def test_swap_directions_and_reverse_sequence_is_identity(self):
        rng = np.random.default_rng(21)
        fuse = nn.BConvLSTM(2, 2, 2, (4, 4), 3, rng)
        a = Tensor(rng.standard_normal((2, 4, 4)))
        b = Tensor(rng.standard_normal((2, 4, 4)))
        out = fuse([a, b]).data.copy()
        fuse.fwd, fuse.bwd = fuse.bwd, fuse.fwd
        fuse.W_y_fwd, fuse.W_y_bwd = fuse.W_y_bwd, fuse.W_y_fwd
        swapped = fuse([b, a]).data
        assert np.abs(out - swapped).max() < 1e-12


class TestBatchNorm:
    def test_two_value_batch(self):
        bn = nn.BatchNorm(1)
        out = bn(Tensor(np.array([1.0, 3.0]).reshape(2, 1, 1, 1)), "train")
        expected = 1.0 / np.sqrt(1.0 + 1e-5)
        assert np.allclose(out.data.ravel(), [-expected, expected], atol=1e-12)

    def test_train_normalizes_per_channel(self):
        rng = np.random.default_rng(22)
        bn = nn.BatchNorm(3)
        x = Tensor(rng.standard_normal((4, 3, 5, 5)) * 2 + 1)
        out = bn(x, "train").data
        assert np.abs(out.mean(axis=(0, 2, 3))).max() < 1e-6
        assert np.abs(out.var(axis=(0, 2, 3)) - 1.0).max() < 1e-5

    def test_constant_channel_maps_to_beta(self):
        bn = nn.BatchNorm(1)
        bn.beta.data = np.array([0.7])
        out = bn(Tensor(np.full((3, 1, 2, 2), 5.0)), "train")
        assert np.abs(out.data - 0.7).max() < 1e-6

    def test_single_item_batch_rejected_in_train(self):
        bn = nn.BatchNorm(2)
        with pytest.raises(UsageError, match="at least 2"):
            bn(Tensor(np.ones((1, 2, 4, 4))), "train")

    def test_infer_is_deterministic_affine(self):
        rng = np.random.default_rng(23)
        bn = nn.BatchNorm(2)
        bn(Tensor(rng.standard_normal((4, 2, 3, 3))), "train")  # move running stats
        x = rng.standard_normal((2, 2, 3, 3))
        a = bn(Tensor(x), "infer").data
        b = bn(Tensor(x), "infer").data
        assert np.array_equal(a, b)
        # affine in x: f(2x) - f(x) == f(x) - f(0)
        f0 = bn(Tensor(np.zeros_like(x)), "infer").data
        f2 = bn(Tensor(2 * x), "infer").data
        assert np.allclose(f2 - a, a - f0, atol=1e-10)

    def test_running_stats_move_toward_batch(self):
        rng = np.random.default_rng(24)
        bn = nn.BatchNorm(1, momentum=0.5)
        x = rng.standard_normal((8, 1, 4, 4)) + 3.0
        bn(Tensor(x), "train")
        assert bn.running_mean[0] == pytest.approx(0.5 * x.mean(), rel=1e-12)


class TestCheckpointBundle:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(25)
        entries = [("a.kernel", rng.standard_normal((2, 3)).astype(np.float32)),
                   ("b.bias", rng.standard_normal(4).astype(np.float32))]
        meta = {"depth": "4", "note": "x=1"}
        path = tmp_path / "w.ckpt"
        nn.save_checkpoint(path, entries, meta)
        got_meta, got = nn.load_checkpoint(path)
        assert got_meta == meta
        assert list(got) == ["a.kernel", "b.bias"]
        for name, arr in entries:
            assert np.array_equal(got[name], arr)

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"not a checkpoint\n")
        with pytest.raises(UsageError, match="not a checkpoint"):
            nn.load_checkpoint(path)
