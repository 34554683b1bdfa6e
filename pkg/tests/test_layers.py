"""Layer contracts: hand-derived values, scipy oracle, causality, gradients."""

import numpy as np
import pytest
from scipy import signal

from convdial.autodiff import Tensor, softmax_cross_entropy
from convdial.layers import (BatchNorm, Conv2d, ConvTranspose2d, Embedding, Linear, MaskedConv1d,
                             conv2d, layer_forward, masked_conv_forward)

from helpers import gradcheck, random_weighting


def _conv(in_ch, out_ch, kernel, stride=1, padding=0, dtype=np.float64):
    return Conv2d(in_ch, out_ch, kernel, stride, padding, rng=np.random.default_rng(0), dtype=dtype)


class TestConvForward:
    def test_identity_one_by_one_kernel(self):
        layer = _conv(1, 1, 1)
        layer.weight.data[:] = 1.0
        layer.bias.data[:] = 0.0
        x = Tensor(np.random.default_rng(0).standard_normal((2, 1, 4, 5)), dtype=np.float64)
        out = layer(x)
        np.testing.assert_array_equal(out.data, x.data)

    def test_all_ones_2x2_on_3x3_ones(self):
        # hand convolution: every 2x2 window of ones sums to 4
        layer = _conv(1, 1, 2)
        layer.weight.data[:] = 1.0
        layer.bias.data[:] = 0.0
        out = layer(Tensor(np.ones((1, 1, 3, 3)), dtype=np.float64))
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 4.0))

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_scipy_correlate(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((1, 1, 7, 6))
        w = rng.standard_normal((1, 1, 3, 3))
        layer = _conv(1, 1, 3)
        layer.weight.data[:] = w
        layer.bias.data[:] = 0.0
        ours = layer(Tensor(x, dtype=np.float64)).data[0, 0]
        ref = signal.correlate2d(x[0, 0], w[0, 0], mode="valid")
        np.testing.assert_allclose(ours, ref, rtol=1e-10)

    def test_output_shape_formula_and_roundtrip(self):
        # conv then matching transpose-conv restores the spatial extent
        rng = np.random.default_rng(1)
        for h, w, k, s, p in [(8, 8, 3, 2, 1), (16, 12, 4, 2, 1), (9, 9, 3, 1, 1), (10, 6, 2, 2, 0)]:
            down = Conv2d(1, 2, k, s, p, rng=rng, dtype=np.float64)
            oh, ow = down.out_shape(h, w)
            assert oh == (h + 2 * p - k) // s + 1 and ow == (w + 2 * p - k) // s + 1
            up = ConvTranspose2d(2, 1, k, s, p, rng=rng, dtype=np.float64)
            if (h + 2 * p - k) % s == 0 and (w + 2 * p - k) % s == 0:
                assert up.out_shape(oh, ow) == (h, w)

    def test_channel_mismatch_raises(self):
        layer = _conv(3, 2, 3)
        with pytest.raises(ValueError):
            layer(Tensor(np.zeros((1, 2, 5, 5)), dtype=np.float64))


class TestBatchNorm:
    def test_plus_minus_one_batch_normalises_to_unit(self):
        # batch {-1, +1} per channel: mean 0, variance 1, so the output is
        # +-1 shrunk by the epsilon correction 1/sqrt(1 + eps)
        bn = BatchNorm(2, dtype=np.float64)
        x = np.zeros((2, 2, 1, 1))
        x[0, :, 0, 0] = -1.0
        x[1, :, 0, 0] = 1.0
        out = bn(Tensor(x, dtype=np.float64), "train")
        expected = x / np.sqrt(1.0 + bn.eps)
        np.testing.assert_allclose(out.data, expected, rtol=1e-12)

    def test_eval_before_any_train_batch_raises(self):
        bn = BatchNorm(3, dtype=np.float64)
        with pytest.raises(RuntimeError):
            bn(Tensor(np.zeros((2, 3, 2, 2)), dtype=np.float64), "eval")

    def test_running_stats_first_copy_then_ema(self):
        bn = BatchNorm(1, momentum=0.001, dtype=np.float64)
        x1 = Tensor(np.full((4, 1, 1, 1), 2.0), dtype=np.float64)
        bn(x1, "train")
        np.testing.assert_allclose(bn.running_mean, [2.0])  # first update copies
        x2 = Tensor(np.full((4, 1, 1, 1), 4.0), dtype=np.float64)
        bn(x2, "train")
        np.testing.assert_allclose(bn.running_mean, [(1 - 0.001) * 2.0 + 0.001 * 4.0])

    def test_eval_uses_running_stats(self):
        bn = BatchNorm(1, dtype=np.float64)
        rng = np.random.default_rng(0)
        bn(Tensor(rng.standard_normal((8, 1, 3, 3)), dtype=np.float64), "train")
        x = Tensor(rng.standard_normal((2, 1, 3, 3)), dtype=np.float64)
        out = bn(x, "eval")
        expected = (x.data - bn.running_mean) / np.sqrt(bn.running_var + bn.eps)
        np.testing.assert_allclose(out.data, expected, rtol=1e-10)


class TestMaskedConv:
    def test_mask_b_identity_centre_kernel_is_identity(self):
        layer = MaskedConv1d(3, 3, 3, "B", dtype=np.float64)
        layer.weight.data[:] = 0.0
        for c in range(3):
            layer.weight.data[c, c, 1] = 1.0  # centre tap, identity across channels
        layer.bias.data[:] = 0.0
        x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 9)), dtype=np.float64)
        np.testing.assert_array_equal(layer(x).data, x.data)

    def test_mask_a_output_row_zero_has_zero_gradient_to_input(self):
        layer = MaskedConv1d(2, 2, 3, "A", dtype=np.float64)
        x = Tensor(np.random.default_rng(1).standard_normal((1, 2, 6)), requires_grad=True,
                   dtype=np.float64)
        out = masked_conv_forward(layer, x)
        out[:, :, 0].sum().backward()
        np.testing.assert_array_equal(x.grad, np.zeros_like(x.data))

    @pytest.mark.parametrize("mask", ["A", "B"])
    def test_perturbing_row_five_leaves_earlier_rows_bit_identical(self, mask):
        layer = MaskedConv1d(2, 2, 3, mask, dtype=np.float64)
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 2, 8))
        base = layer(Tensor(x, dtype=np.float64)).data
        x2 = x.copy()
        x2[:, :, 5] += 10.0
        bumped = layer(Tensor(x2, dtype=np.float64)).data
        compare_to = 5 if mask == "A" else 5  # rows strictly before 5 unaffected either way
        np.testing.assert_array_equal(base[:, :, :compare_to], bumped[:, :, :compare_to])
        # mask A additionally shields row 5 itself
        if mask == "A":
            np.testing.assert_array_equal(base[:, :, 5], bumped[:, :, 5])

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            MaskedConv1d(2, 2, 4, "A")

    def test_stack_causality_jacobian(self):
        # mask A then B..B: output row r must not depend on input rows >= r
        rng = np.random.default_rng(3)
        layers = [MaskedConv1d(3, 3, 3, "A", rng=rng, dtype=np.float64)] + \
                 [MaskedConv1d(3, 3, 3, "B", rng=rng, dtype=np.float64) for _ in range(2)]
        rows = 7

        def run(arr):
            t = Tensor(arr, dtype=np.float64)
            for l in layers:
                t = l(t)
            return t.data

        base = run(rng.standard_normal((1, 3, rows)))
        for probe in range(rows):
            x = rng.standard_normal((1, 3, rows))
            bumped = x.copy()
            bumped[:, :, probe] += 3.0
            a, b = run(x), run(bumped)
            np.testing.assert_array_equal(a[:, :, :probe + 1], b[:, :, :probe + 1])


class TestEmbeddingAndLinear:
    def test_embedding_lookup_and_gradient(self):
        emb = Embedding(5, 3, rng=np.random.default_rng(0), dtype=np.float64)
        ids = np.array([1, 1, 4])
        out = emb(ids)
        np.testing.assert_array_equal(out.data, emb.table.data[ids])
        out.sum().backward()
        assert emb.table.grad[1].sum() == pytest.approx(6.0)  # two lookups of row 1
        assert np.all(emb.table.grad[0] == 0)

    def test_embedding_out_of_range(self):
        emb = Embedding(4, 2)
        with pytest.raises(ValueError):
            emb(np.array([4]))

    def test_linear_shared_weight_receives_both_gradients(self):
        rng = np.random.default_rng(0)
        emb = Embedding(4, 3, rng=rng, dtype=np.float64)
        proj = Linear(3, 4, weight=emb.table, dtype=np.float64)
        x = emb(np.array([2]))
        out = proj(x)
        out.sum().backward()
        # gradient flows into the table through the lookup AND the projection
        assert emb.table.grad is not None
        assert np.abs(emb.table.grad).sum() > 0
        assert ("weight" not in dict(proj.parameters()))  # shared weight not re-registered


class TestLayerForwardDispatch:
    def test_dispatch_runs_each_kind(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((2, 3, 8, 8)), dtype=np.float64)
        assert layer_forward(_conv(3, 4, 3, 1, 1), x).shape == (2, 4, 8, 8)
        assert layer_forward(ConvTranspose2d(3, 2, 4, 2, 1, rng=rng, dtype=np.float64), x).shape == (2, 2, 16, 16)
        bn = BatchNorm(3, dtype=np.float64)
        assert layer_forward(bn, x, "train").shape == x.shape
        lin = Linear(8, 5, rng=rng, dtype=np.float64)
        assert layer_forward(lin, x).shape == (2, 3, 8, 5)


class TestGradients:
    """Quick per-kind gradient checks; the exhaustive sweep lives in acceptance."""

    def test_conv2d(self):
        rng = np.random.default_rng(0)
        layer = _conv(2, 3, 3, 2, 1)
        x = Tensor(rng.standard_normal((2, 2, 5, 5)), requires_grad=True, dtype=np.float64)
        w = random_weighting(rng, (2, 3, 3, 3))
        gradcheck(lambda: (layer(x) * Tensor(w)).sum(), [x, layer.weight, layer.bias])

    def test_conv_transpose2d(self):
        rng = np.random.default_rng(1)
        layer = ConvTranspose2d(2, 2, 4, 2, 1, rng=rng, dtype=np.float64)
        x = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True, dtype=np.float64)
        w = random_weighting(rng, (1, 2, 6, 6))
        gradcheck(lambda: (layer(x) * Tensor(w)).sum(), [x, layer.weight, layer.bias])

    def test_masked_conv(self):
        rng = np.random.default_rng(2)
        layer = MaskedConv1d(2, 2, 3, "A", rng=rng, dtype=np.float64)
        x = Tensor(rng.standard_normal((1, 2, 6)), requires_grad=True, dtype=np.float64)
        w = random_weighting(rng, (1, 2, 6))
        gradcheck(lambda: (layer(x) * Tensor(w)).sum(), [x, layer.weight, layer.bias])

    def test_batchnorm_train(self):
        rng = np.random.default_rng(3)
        bn = BatchNorm(2, dtype=np.float64)
        x = Tensor(rng.standard_normal((3, 2, 2, 2)), requires_grad=True, dtype=np.float64)
        w = random_weighting(rng, (3, 2, 2, 2))
        gradcheck(lambda: (bn(x, "train") * Tensor(w)).sum(), [x, bn.gamma, bn.beta])

    def test_softmax_cross_entropy(self):
        rng = np.random.default_rng(4)
        logits = Tensor(rng.standard_normal((4, 5)), requires_grad=True, dtype=np.float64)
        targets = rng.integers(0, 5, size=4)
        w = random_weighting(rng, (4,))
        gradcheck(lambda: (softmax_cross_entropy(logits, targets) * Tensor(w)).sum(), [logits])
