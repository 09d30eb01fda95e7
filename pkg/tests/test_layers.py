import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bnf.bitplane import BinaryWeightTensor, FixedTensor, PackedBits, decompose
from bnf.layers import (BilSpec, BNState, ConvSpec, batch_norm_forward, batch_norm_inference, bil_first_layer,
                        conv2d_binary, conv2d_reference, dbi_first_layer, dropout, fpid_first_layer,
                        fully_connected, max_pool, same_padding, softmax, softmax_cross_entropy)


def conv_loops(x, w):
    """Scalar-loop convolution with zero padding (top/left get the smaller half)."""
    h, wd, cin = x.shape
    kh, kw, _, n_out = w.shape
    top, left = (kh - 1) // 2, (kw - 1) // 2
    out = np.zeros((h, wd, n_out))
    for oy in range(h):
        for ox in range(wd):
            for o in range(n_out):
                s = 0.0
                for ky in range(kh):
                    for kx in range(kw):
                        iy, ix = oy + ky - top, ox + kx - left
                        if 0 <= iy < h and 0 <= ix < wd:
                            for c in range(cin):
                                s += x[iy, ix, c] * w[ky, kx, c, o]
                out[oy, ox, o] = s
    return out


class TestConvReference:
    def test_degenerate(self):
        assert conv2d_reference(np.full((1, 1, 1), 3.0), np.full((1, 1, 1, 1), -2.0)).item() == -6.0

    def test_identity_kernel(self, rng):
        x = rng.standard_normal((4, 5, 1))
        w = np.zeros((3, 3, 1, 1))
        w[1, 1] = 1
        assert np.array_equal(conv2d_reference(x, w), x)

    def test_matches_loops(self, rng):
        for _ in range(30):
            h, wd, c, o = rng.integers(1, 6, 4)
            kh, kw = rng.integers(1, 5, 2)
            x = rng.standard_normal((h, wd, c))
            w = rng.standard_normal((kh, kw, c, o))
            assert np.allclose(conv2d_reference(x, w), conv_loops(x, w))

    def test_counts_padded_taps(self):
        _, n = conv2d_reference(np.zeros((7, 100, 1)), np.zeros((1, 3, 1, 24)), count=True)
        assert n == 7 * 100 * 3 * 24

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="channels"):
            conv2d_reference(np.zeros((2, 2, 3)), np.zeros((1, 1, 2, 1)))

    def test_spec_mismatch(self):
        with pytest.raises(ValueError):
            conv2d_reference(np.zeros((2, 2, 1)), np.zeros((3, 3, 1, 2)), ConvSpec(4))

    def test_same_padding_even_kernel(self):
        assert same_padding((1, 4)) == (0, 0, 1, 2)


class TestConvBinary:
    def test_zero_input(self):
        w = BinaryWeightTensor.from_signs(np.ones((3, 3, 2, 4)), 0.7)
        assert not conv2d_binary(np.zeros((5, 5, 2), dtype=np.uint8), w).any()

    def test_single_tap(self):
        w = BinaryWeightTensor.from_signs(np.ones((1, 1, 1, 1)), 0.25)
        assert conv2d_binary(np.ones((1, 1, 1), dtype=np.uint8), w).item() == 0.25

    def test_rejects_non_binary(self):
        w = BinaryWeightTensor.from_signs(np.ones((1, 1, 1, 1)), 1.0)
        with pytest.raises(ValueError, match="0, 1"):
            conv2d_binary(np.full((1, 1, 1), 2), w)

    def test_matches_reference(self, rng):
        # dyadic scales keep both float paths exact
        for _ in range(100):
            n, h, wd, o = rng.integers(1, 5, 4)
            c = int(rng.integers(1, 130))
            kh, kw = rng.integers(1, 4, 2)
            x = rng.integers(0, 2, (n, h, wd, c)).astype(np.uint8)
            s = rng.choice([-1, 1], (kh, kw, c, o))
            alpha = int(rng.integers(1, 64)) / 16
            w = BinaryWeightTensor.from_signs(s, alpha)
            assert np.array_equal(conv2d_binary(x, w), conv2d_reference(x, alpha * s))


class TestFpid:
    def test_example(self):
        w = BinaryWeightTensor.from_signs(np.ones((1, 1, 1, 1)), 0.5)
        assert fpid_first_layer(FixedTensor(np.array([[[6]]]), 3), w).item() == 3.0

    def test_zero_input(self, rng):
        w = BinaryWeightTensor.from_signs(rng.choice([-1, 1], (3, 3, 2, 3)), 1.3)
        assert not fpid_first_layer(FixedTensor(np.zeros((4, 4, 2), dtype=int), 8), w).any()

    def test_equals_integer_conv(self, rng):
        for m in (1, 4, 8, 16):
            x = rng.integers(0, 1 << m, (2, 5, 6, 3))
            s = rng.choice([-1, 1], (3, 3, 3, 4))
            w = BinaryWeightTensor.from_signs(s, 0.125)
            assert np.array_equal(fpid_first_layer(FixedTensor(x, m), w), conv2d_reference(x, 0.125 * s))

    def test_channel_mismatch(self):
        w = BinaryWeightTensor.from_signs(np.ones((1, 1, 2, 1)), 1.0)
        with pytest.raises(ValueError):
            fpid_first_layer(FixedTensor(np.zeros((1, 1, 3), dtype=int), 3), w)


class TestDbi:
    def test_example(self):
        w = BinaryWeightTensor.from_signs(np.array([1, -1, 1]).reshape(1, 1, 3, 1), 1.0)
        assert dbi_first_layer(decompose(FixedTensor(np.array([[[5]]]), 3)), w).item() == 2.0

    @given(st.integers(0, 255), st.floats(0.125, 4.0))
    def test_all_positive_is_popcount(self, value, alpha):
        w = BinaryWeightTensor.from_signs(np.ones((1, 1, 8, 1)), alpha)
        got = dbi_first_layer(decompose(FixedTensor(np.array([[[value]]]), 8)), w).item()
        assert got == pytest.approx(alpha * bin(value).count("1"))

    def test_channel_mismatch(self):
        w = BinaryWeightTensor.from_signs(np.ones((1, 1, 3, 1)), 1.0)
        with pytest.raises(ValueError, match="C\\*M"):
            dbi_first_layer(decompose(FixedTensor(np.zeros((1, 1, 1), dtype=int), 4)), w)


class TestBil:
    def test_pamap2_shape(self, rng):
        x = decompose(FixedTensor(rng.integers(0, 256, (7, 100, 1)), 8))
        w = BinaryWeightTensor.from_signs(rng.choice([-1, 1], (1, 1, 8, 64)), 0.1)
        out = bil_first_layer(x, BilSpec(64), w, BNState.identity(64))
        assert isinstance(out, PackedBits) and out.shape == (7, 100, 64)
        assert set(np.unique(out.unpack())) <= {0, 1}

    def test_hand_computed_2x2(self):
        # values 0,1,2,3 with M=2 have popcounts 0,1,1,2; alpha=0.4 gives 0,0.4,0.4,0.8
        x = decompose(FixedTensor(np.array([[[0], [1]], [[2], [3]]]), 2))
        w = BinaryWeightTensor.from_signs(np.ones((1, 1, 2, 1)), 0.4)
        bn = BNState.identity(1)
        bn.eps = 0.0
        out = bil_first_layer(x, BilSpec(1), w, bn).unpack()[..., 0]
        assert out.tolist() == [[0, 0], [0, 1]]
        # alpha=0.5: 0.5 is a tie and rounds up
        w = BinaryWeightTensor.from_signs(np.ones((1, 1, 2, 1)), 0.5)
        assert bil_first_layer(x, BilSpec(1), w, bn).unpack()[..., 0].tolist() == [[0, 1], [1, 1]]

    def test_zero_input(self, rng):
        x = decompose(FixedTensor(np.zeros((3, 3, 2), dtype=int), 4))
        w = BinaryWeightTensor.from_signs(rng.choice([-1, 1], (1, 1, 8, 5)), 1.0)
        assert not bil_first_layer(x, BilSpec(5), w, BNState.identity(5)).unpack().any()

    def test_rejects_zero_k(self):
        with pytest.raises(ValueError):
            BilSpec(0)

    def test_weight_shape_checked(self):
        x = decompose(FixedTensor(np.zeros((1, 1, 1), dtype=int), 4))
        w = BinaryWeightTensor.from_signs(np.ones((1, 1, 3, 2)), 1.0)
        with pytest.raises(ValueError, match="shape"):
            bil_first_layer(x, BilSpec(2), w, BNState.identity(2))


class TestOtherLayers:
    def test_max_pool_time(self):
        assert max_pool(np.array([3.0, 1.0]).reshape(1, 2, 1), (1, 2)).ravel().tolist() == [3.0]

    def test_max_pool_drops_remainder(self):
        x = np.arange(5.0).reshape(1, 5, 1)
        assert max_pool(x, (1, 2)).ravel().tolist() == [1.0, 3.0]

    def test_max_pool_too_large(self):
        with pytest.raises(ValueError, match="fit"):
            max_pool(np.zeros((1, 2, 1)), (1, 3))

    def test_batch_norm_identity(self, rng):
        x = rng.standard_normal((1000, 3))
        x = (x - x.mean(0)) / x.std(0)
        assert np.allclose(batch_norm_forward(x, BNState.identity(3), training=True), x, atol=1e-5)

    def test_batch_norm_running_stats(self):
        st = BNState.identity(1)
        batch_norm_forward(np.array([[1.0], [3.0]]), st, training=True)
        assert st.running_mean.tolist() == pytest.approx([0.2])
        assert st.running_var.tolist() == pytest.approx([0.9 + 0.1 * 1.0])
        assert np.allclose(batch_norm_inference(np.array([[0.2]]), st), 0.0)

    def test_softmax_uniform(self):
        assert np.allclose(softmax(np.zeros((2, 7))), 1 / 7)

    def test_cross_entropy(self):
        loss, p = softmax_cross_entropy(np.log(np.array([[0.25, 0.75]])), np.array([1]))
        assert loss == pytest.approx(-np.log(0.75))
        assert np.allclose(p, [[0.25, 0.75]])

    def test_fully_connected(self):
        y = fully_connected(np.ones((2, 1, 3, 1)), np.arange(6.0).reshape(3, 2), np.array([1.0, -1.0]))
        assert y.tolist() == [[7.0, 8.0], [7.0, 8.0]]

    def test_dropout(self, rng):
        x = np.ones((10_000,))
        assert dropout(x, 0.5, training=False) is x
        y = dropout(x, 0.5, rng)
        assert set(np.unique(y)) == {0.0, 2.0}
        assert abs(y.mean() - 1.0) < 0.05
        with pytest.raises(ValueError):
            dropout(x, 0.5, None)


@settings(max_examples=30)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 70), st.integers(1, 16))
def test_dbi_is_linear_in_planes(h, w, c, m):
    """Splitting the planes into two halves sums to the whole (popcount linearity)."""
    rng = np.random.default_rng(h * 1000 + w * 100 + c + m)
    bits = rng.integers(0, 2, (h, w, c)).astype(np.uint8)
    s = rng.choice([-1, 1], (1, 1, c, 2))
    full = conv2d_binary(bits, BinaryWeightTensor.from_signs(s, 1.0))
    cut = c // 2
    parts = 0.0
    for sl in (slice(0, cut), slice(cut, c)):
        if sl.stop > sl.start:
            parts = parts + conv2d_binary(bits[..., sl], BinaryWeightTensor.from_signs(s[:, :, sl], 1.0))
    assert np.array_equal(full, parts)
