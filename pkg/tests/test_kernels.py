import math

import numpy as np
import pytest

from mcuenc.kernels import (
    CMSIS_LIKE_MK,
    DEFAULT_MK,
    KernelError,
    LayoutDescriptor,
    MicroKernelShape,
    OpCounts,
    attention_scores,
    gelu,
    gelu_exact,
    layernorm_rows,
    matmul_reference,
    matmul_tiled,
    residual_add_inplace,
    softmax_rows,
    transposed,
)
from mcuenc.qcore import QTensor, QuantParams, dequantize, quantize

UNIT = QuantParams(1.0, 0)


def qt(arr, scale=1.0, zp=0):
    return QTensor(np.asarray(arr, dtype=np.int8), QuantParams(scale, zp))


def random_qtensor(rng, shape, scale=1.0):
    zp = int(rng.integers(-20, 20))
    data = rng.integers(-128, 128, size=shape).astype(np.int8)
    return QTensor(data, QuantParams(scale, zp))


class TestMatmul:
    def test_identity(self):
        a = qt([[1, 2], [3, 4]])
        eye = qt(np.eye(2))
        out = matmul_tiled(a, eye, None, UNIT)
        assert out.data.tolist() == [[1, 2], [3, 4]]

    def test_1x1x1(self):
        assert matmul_tiled(qt([[2]]), qt([[3]]), None, UNIT).data[0, 0] == 6

    def test_k_zero_rejected(self):
        with pytest.raises(KernelError):
            matmul_tiled(qt(np.zeros((2, 0))), qt(np.zeros((0, 2))), None, UNIT)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(KernelError):
            matmul_tiled(qt(np.zeros((2, 3))), qt(np.zeros((4, 2))), None, UNIT)

    def test_oracle_equivalence_random_shapes(self):
        """Blocked kernel is bit-identical to the plain triple loop,
        including M/N/K remainder edges off the (4, 2, 4) grid."""
        rng = np.random.default_rng(0)
        for _ in range(60):
            M, N, K = (int(x) for x in rng.integers(1, 14, size=3))
            a = random_qtensor(rng, (M, K), scale=0.7)
            b = random_qtensor(rng, (K, N), scale=0.3)
            bias = rng.integers(-1000, 1000, size=N, dtype=np.int32)
            out_qp = QuantParams(2.5, int(rng.integers(-5, 5)))
            got = matmul_tiled(a, b, bias, out_qp)
            want = matmul_reference(a, b, bias, out_qp)
            np.testing.assert_array_equal(got.data, want.data)

    def test_blocking_order_invariance(self):
        """Results do not depend on the (M, N) blocking because the k-order
        is fixed; the CMSIS-like [1, 2, 4] shape agrees with [4, 2, 4]."""
        rng = np.random.default_rng(1)
        a = random_qtensor(rng, (9, 17))
        b = random_qtensor(rng, (17, 7))
        out_qp = QuantParams(3.0, 1)
        ref = matmul_tiled(a, b, None, out_qp, DEFAULT_MK)
        for mk in (CMSIS_LIKE_MK, MicroKernelShape(3, 5, 2, 8), MicroKernelShape(16, 16, 16, 1)):
            np.testing.assert_array_equal(matmul_tiled(a, b, None, out_qp, mk).data, ref.data)

    def test_op_counts(self):
        counts = OpCounts()
        a = qt(np.ones((4, 8)))
        b = qt(np.ones((8, 2)))
        matmul_tiled(a, b, None, UNIT, counts=counts)
        assert counts.macs == 4 * 2 * 8
        assert counts.dot4_ops == 4 * 2 * 2  # K=8 -> two DOTx4 per accumulator
        assert counts.stores == 8
        assert counts.loads == (4 + 2) * 2

    def test_cmsis_shape_costs_more_loads(self):
        rng = np.random.default_rng(2)
        a = random_qtensor(rng, (16, 32))
        b = random_qtensor(rng, (32, 16))
        c1, c2 = OpCounts(), OpCounts()
        matmul_tiled(a, b, None, UNIT, DEFAULT_MK, counts=c1)
        matmul_tiled(a, b, None, UNIT, CMSIS_LIKE_MK, counts=c2)
        assert c2.loads > c1.loads
        assert c1.macs == c2.macs


class TestLayout:
    def test_permutation_must_be_bijection(self):
        with pytest.raises(KernelError):
            LayoutDescriptor((2, 3), (0, 0))

    def test_transposed_shares_memory(self):
        q = qt(np.arange(6).reshape(2, 3))
        t = transposed(q)
        assert t.shape == (3, 2)
        assert np.shares_memory(t.data, q.data)


class TestAttentionScores:
    def test_dot_product_degenerate(self):
        q = qt([[1, 2, 3, 4]])
        k = qt([[1, 1, 1, 1]])
        out = attention_scores(q, k, UNIT)
        assert out.data[0, 0] == round(10 / math.sqrt(4))

    def test_matches_reference_with_explicit_transpose(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            t, s, dh = (int(x) for x in rng.integers(1, 9, size=3))
            q = random_qtensor(rng, (t, dh), scale=0.5)
            k = random_qtensor(rng, (s, dh), scale=0.5)
            out_qp = QuantParams(1.5, 0)
            got = attention_scores(q, k, out_qp)
            kt = QTensor(np.ascontiguousarray(k.data.T), k.qp)
            want = matmul_reference(q, kt, None, out_qp, extra_scale=1.0 / math.sqrt(dh))
            np.testing.assert_array_equal(got.data, want.data)

    def test_self_attention_diagonal_dominant(self):
        # orthonormal-ish rows: Q = K = scaled identity block
        q = qt(100 * np.eye(4, dtype=np.int64), scale=0.01)
        out = attention_scores(q, q, QuantParams(0.01, 0))
        d = np.diag(out.data).astype(int)
        off = out.data - np.diag(np.diag(out.data))
        assert np.all(d[:, None] > off)


def softmax_oracle(row_codes, in_qp, out_qp):
    xs = [(c - in_qp.zero_point) * in_qp.scale for c in row_codes]
    mx = max(xs)
    es = [math.exp(v - mx) for v in xs]
    tot = sum(es)
    out = []
    for e in es:
        q = round(e / tot / out_qp.scale) + out_qp.zero_point
        out.append(max(-128, min(127, int(q))))
    return out


class TestSoftmax:
    PROB = QuantParams(1.0 / 256.0, -128)

    def test_uniform_row(self):
        scores = qt([[5, 5, 5, 5]])
        out = softmax_rows(scores, self.PROB)
        want = quantize(np.full((1, 4), 0.25), self.PROB).data
        np.testing.assert_array_equal(out.data, want)

    def test_saturated_one_hot(self):
        scores = qt([[127, -128, -128, -128]])
        out = softmax_rows(scores, self.PROB)
        probs = dequantize(out)[0]
        assert probs[0] > 0.99
        assert np.all(probs[1:] < 0.01)

    def test_within_one_lsb_of_fp64_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(30):
            s = int(rng.integers(1, 12))
            scores = random_qtensor(rng, (1, s), scale=0.1)
            got = softmax_rows(scores, self.PROB).data[0].astype(int)
            want = softmax_oracle(scores.data[0].astype(int), scores.qp, self.PROB)
            assert np.max(np.abs(got - np.array(want))) <= 1


class TestLayerNorm:
    def test_constant_row_yields_beta(self):
        x = qt(np.full((1, 8), 42))
        gamma = np.ones(8)
        beta = np.full(8, 1.5)
        out_qp = QuantParams(0.25, 0)
        out = layernorm_rows(x, gamma, beta, out_qp)
        want = quantize(np.full((1, 8), 1.5), out_qp).data
        np.testing.assert_array_equal(out.data, want)

    def test_alternating_row(self):
        x = qt(np.array([[1, -1] * 4]))
        out = layernorm_rows(x, np.ones(8), np.zeros(8), QuantParams(0.5, 0))
        # normalized to almost exactly +/-1 (eps makes it a hair under)
        np.testing.assert_array_equal(out.data[0], np.array([2, -2] * 4, dtype=np.int8))

    def test_within_one_lsb_of_fp64_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            d = int(rng.integers(2, 24))
            x = random_qtensor(rng, (3, d), scale=0.2)
            gamma = rng.normal(1, 0.2, d)
            beta = rng.normal(0, 0.2, d)
            out_qp = QuantParams(0.05, 3)
            got = layernorm_rows(x, gamma, beta, out_qp).data.astype(int)
            xf = dequantize(x)
            for r in range(3):
                row = xf[r]
                mu = sum(row) / d
                var = sum((v - mu) ** 2 for v in row) / d
                want = [
                    max(-128, min(127, round(((v - mu) / math.sqrt(var + 1e-5) * g + b) / 0.05) + 3))
                    for v, g, b in zip(row, gamma, beta)
                ]
                assert np.max(np.abs(got[r] - np.array(want))) <= 1


class TestGelu:
    def test_zero_maps_to_zero(self):
        x = qt([[0]], scale=0.1)
        out = gelu(x, QuantParams(0.1, 0))
        assert out.data[0, 0] == 0

    def test_identity_tail(self):
        x = qt([[120]], scale=0.1)  # 12.0, far into the linear tail
        out = gelu(x, QuantParams(0.1, 0))
        assert out.data[0, 0] == 120

    def test_exhaustive_within_one_lsb(self):
        in_qp = QuantParams(1.0 / 16.0, 3)
        out_qp = QuantParams(1.0 / 20.0, -7)
        codes = np.arange(-128, 128, dtype=np.int8).reshape(1, -1)
        got = gelu(QTensor(codes, in_qp), out_qp).data[0].astype(int)
        for i, c in enumerate(range(-128, 128)):
            xv = (c - 3) / 16.0
            yv = 0.5 * xv * (1 + math.tanh(math.sqrt(2 / math.pi) * (xv + 0.044715 * xv**3)))
            want = max(-128, min(127, round(yv * 20.0) - 7))
            assert abs(got[i] - want) <= 1


class TestResidualAdd:
    def test_zero_y_requantizes_only(self):
        x = qt(np.array([[10, -10]]), scale=0.5)
        y = qt(np.zeros((1, 2)), scale=1.0)
        residual_add_inplace(x, y, QuantParams(0.25, 0))
        assert x.data.tolist() == [[20, -20]]
        assert x.qp.scale == 0.25

    def test_self_add_doubles_and_clamps(self):
        x = qt(np.array([[100, -100, 3]]))
        residual_add_inplace(x, x, UNIT)
        assert x.data.tolist() == [[127, -128, 6]]

    def test_partial_alias_rejected(self):
        buf = np.zeros((2, 4), dtype=np.int8)
        x = QTensor(buf[:, 0:2], UNIT)
        y = QTensor(buf[:, 1:3], UNIT)
        with pytest.raises(KernelError):
            residual_add_inplace(x, y, UNIT)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(KernelError):
            residual_add_inplace(qt(np.zeros((1, 2))), qt(np.zeros((2, 1))), UNIT)


def test_gelu_exact_matches_closed_form():
    xs = np.linspace(-4, 4, 17)
    want = 0.5 * xs * (1 + np.tanh(np.sqrt(2 / np.pi) * (xs + 0.044715 * xs**3)))
    np.testing.assert_allclose(gelu_exact(xs), want, rtol=1e-12)
