import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bitgrad import ops
from bitgrad.errors import EncodingError, ShapeError
from bitgrad.estimators import sign_binarize
from bitgrad.packed import (FoldedAffine, PackedBitMatrix, PkBinConv, PkPool,
                            benchmark, benchmark_csv, ops_accounting, xnor_dot,
                            xnor_gemm)

f32 = lambda x: np.asarray(x, dtype=np.float32)


def random_pm1(rng, shape):
    return sign_binarize(rng.standard_normal(shape).astype(np.float32))


class TestPack:
    def test_three_bit_row(self):
        m = PackedBitMatrix.pack(f32([1, -1, 1]))
        assert m.rows == 1 and m.cols == 3 and m.words_per_row == 1
        assert m.words[0, 0] == 0b101  # bit i holds column i; tail zeros

    def test_all_ones_word(self):
        m = PackedBitMatrix.pack(f32(np.ones(64)))
        assert m.words[0, 0] == np.uint64(0xFFFFFFFFFFFFFFFF)

    def test_tail_bits_zero(self):
        m = PackedBitMatrix.pack(f32(np.ones(70)))
        assert m.words_per_row == 2
        assert m.words[0, 1] == np.uint64(0b111111)

    def test_non_binary_rejected(self):
        with pytest.raises(EncodingError):
            PackedBitMatrix.pack(f32([1, 0, -1]))

    @settings(max_examples=60, derandomize=True)
    @given(st.integers(1, 3), st.integers(1, 200), st.integers(0, 2 ** 31 - 1))
    def test_roundtrip(self, rows, cols, seed):
        rng = np.random.default_rng(seed)
        t = random_pm1(rng, (rows, cols))
        m = PackedBitMatrix.pack(t)
        np.testing.assert_array_equal(m.unpack(), t)

    def test_roundtrip_100_columns(self):
        rng = np.random.default_rng(5)
        t = random_pm1(rng, (1, 100))
        np.testing.assert_array_equal(PackedBitMatrix.pack(t).unpack(), t)


class TestXnorDot:
    def test_three_element_example(self):
        w = PackedBitMatrix.pack(f32([1, -1, 1]))
        a = PackedBitMatrix.pack(f32([1, 1, -1]))
        assert xnor_dot(w, a) == -1  # one match -> 2*1 - 3

    def test_self_dot_is_length(self):
        rng = np.random.default_rng(1)
        v = random_pm1(rng, 64)
        p = PackedBitMatrix.pack(v)
        assert xnor_dot(p, p) == 64

    def test_length_130_matches_float_dot_exactly(self):
        rng = np.random.default_rng(2)
        w, a = random_pm1(rng, 130), random_pm1(rng, 130)
        assert xnor_dot(PackedBitMatrix.pack(w), PackedBitMatrix.pack(a)) \
            == int(np.dot(w, a))

    def test_single_bit_vectors(self):
        for wv in (1.0, -1.0):
            for av in (1.0, -1.0):
                d = xnor_dot(PackedBitMatrix.pack(f32([wv])), PackedBitMatrix.pack(f32([av])))
                assert d == int(wv * av)

    def test_mismatched_length_rejected(self):
        with pytest.raises(ShapeError):
            xnor_dot(PackedBitMatrix.pack(f32([1, 1])), PackedBitMatrix.pack(f32([1])))

    def test_1000_random_triples_bit_exact(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            n = int(rng.integers(1, 1001))
            w, a = random_pm1(rng, n), random_pm1(rng, n)
            got = xnor_dot(PackedBitMatrix.pack(w), PackedBitMatrix.pack(a))
            assert got == int(np.dot(w.astype(np.int64), a.astype(np.int64)))

    def test_gemm_equals_float_gemm(self):
        rng = np.random.default_rng(4)
        a = random_pm1(rng, (17, 130))
        w = random_pm1(rng, (5, 130))
        got = xnor_gemm(PackedBitMatrix.pack(a), PackedBitMatrix.pack(w))
        np.testing.assert_array_equal(got, (a @ w.T).astype(np.int32))


class TestFoldedAffine:
    def test_matches_alpha_then_bn(self):
        rng = np.random.default_rng(6)
        c = 5
        alpha = f32(rng.uniform(0.1, 2, c))
        gamma = f32(rng.uniform(0.5, 1.5, c))
        beta = f32(rng.standard_normal(c))
        mean = f32(rng.standard_normal(c))
        var = f32(rng.uniform(0.5, 2, c))
        fold = FoldedAffine.fold(alpha, gamma, beta, mean, var, eps=1e-5)
        dots = rng.integers(-50, 50, (7, c)).astype(np.int32)
        direct = ops.batchnorm_infer(f32(dots) * alpha, gamma, beta, mean, var, 1e-5)
        np.testing.assert_allclose(fold.apply(dots), direct, rtol=1e-4, atol=1e-4)


class TestPackedConv:
    def _layer_pair(self, rng, in_ch, out_ch, kernel, stride, pad, h, w):
        from bitgrad.layers import BinaryConvLayer
        from bitgrad.estimators import Ste
        layer = BinaryConvLayer("l", in_ch, out_ch, kernel, stride, pad,
                                estimator=Ste(), binarize_input=True,
                                binarize_weight=True, rng=rng)
        w_hat = sign_binarize(layer.w.value)
        pk = PkBinConv("l", PackedBitMatrix.pack(w_hat.reshape(out_ch, -1)),
                       layer.alpha.copy(), out_ch, in_ch, kernel, stride, pad)
        return layer, pk

    def test_all_plus_one_composition(self):
        # 1x1 kernel, all weights and inputs +1 -> output n * alpha
        from bitgrad.layers import BinaryConvLayer
        from bitgrad.estimators import Ste
        layer = BinaryConvLayer("l", 6, 2, 1, estimator=Ste(), binarize_input=True,
                                binarize_weight=True, rng=np.random.default_rng(0))
        layer.w.value[:] = 0.25
        x = f32(np.ones((1, 6, 3, 3)))
        layer.forward(x, True)  # sets alpha
        pk = PkBinConv("l", PackedBitMatrix.pack(
            sign_binarize(layer.w.value).reshape(2, -1)),
            layer.alpha, 2, 6, 1, 1, 0)
        np.testing.assert_allclose(pk(x), 6 * 0.25)

    @pytest.mark.parametrize("in_ch,out_ch,kernel,stride,pad", [
        (3, 4, 3, 1, 1),
        (5, 2, 3, 2, 1),
        (70, 3, 1, 1, 0),   # channel count not a multiple of 64
        (4, 3, 3, 1, 0),
    ])
    def test_matches_float_simulation_exactly(self, in_ch, out_ch, kernel, stride, pad):
        rng = np.random.default_rng(in_ch * 100 + out_ch)
        layer, pk = self._layer_pair(rng, in_ch, out_ch, kernel, stride, pad, 6, 6)
        x = f32(rng.standard_normal((2, in_ch, 6, 6)))
        layer.alpha[:] = pk.alpha  # forward below recomputes; keep in sync
        float_out = ops.conv2d(sign_binarize(x), sign_binarize(layer.w.value),
                               stride, pad) * pk.alpha.reshape(1, -1, 1, 1)
        packed_out = pk(x)
        np.testing.assert_array_equal(packed_out, float_out)

    def test_integer_accumulation_is_exact_with_padding(self):
        rng = np.random.default_rng(9)
        _, pk = self._layer_pair(rng, 4, 3, 3, 1, 1, 5, 5)
        x = f32(rng.standard_normal((1, 4, 5, 5)))
        dots = pk(x) / pk.alpha.reshape(1, -1, 1, 1)
        np.testing.assert_array_equal(dots, np.rint(dots))


class TestAccounting:
    def test_binary_macs_divided_by_64(self):
        # a layer doing 1M binary MACs and no float MACs costs 15625 OPs
        pk = PkBinConv("l", PackedBitMatrix.pack(f32(np.ones((1, 1)))),
                       f32([1.0]), 1, 1, 1, 1, 0)
        rows = ops_accounting([pk], (1000, 1000))
        assert rows[0]["bops"] == 1_000_000 and rows[0]["flops"] == 0
        assert rows[0]["ops"] == pytest.approx(15625)

    def test_all_float_layer_ops_equal_flops(self):
        from bitgrad.packed import PkFpConv
        w = f32(np.ones((2, 3, 3, 3)))
        rows = ops_accounting([PkFpConv("c", w, 1, 1)], (8, 8))
        assert rows[0]["bops"] == 0
        assert rows[0]["ops"] == rows[0]["flops"] > 0

    def test_pool_tracks_spatial_size(self):
        from bitgrad.packed import PkFpConv
        steps = [PkPool("p", PkPool.MAX, 2, 2),
                 PkFpConv("c", f32(np.ones((1, 1, 3, 3))), 1, 1)]
        rows = ops_accounting(steps, (8, 8))
        assert rows[1]["flops"] == 4 * 4 * 9


class TestBenchmark:
    def test_emits_row_with_positive_speedup_field(self):
        rows = benchmark([4096], rows=64)
        assert len(rows) == 1
        r = rows[0]
        assert r["size"] == 4096
        assert r["packed_ns"] > 0 and r["float_ns"] > 0 and r["speedup"] > 0
        assert r["ops"] == pytest.approx(64 * 4096 / 64)
        csv = benchmark_csv(rows)
        lines = csv.strip().split("\n")
        assert lines[0] == "size,packed_ns,float_ns,speedup,bops,flops,ops"
        assert len(lines) == 2

    def test_rejects_bad_size(self):
        with pytest.raises(ShapeError):
            benchmark([0])
