import numpy as np
import pytest

from mcuenc.embed_rt import (
    ClusterSpec,
    ClusteredEmbedding,
    EmbeddingError,
    cluster_of,
    embed_lookup,
    embedding_param_count,
)
from mcuenc.qcore import QTensor, QuantParams, dequantize, quantize


def contiguous_cls_map(sizes):
    return np.repeat(np.arange(len(sizes)), sizes)


def build_embedding(spec, d, rng, scale=0.01):
    def q(shape):
        return quantize(rng.normal(0, 0.5, shape) * scale * 40, QuantParams(scale, 0))

    u0 = q((spec.sizes[0], d))
    factors = [(q((spec.sizes[i], spec.ranks[i])), q((spec.ranks[i], d)))
               for i in range(1, spec.c)]
    return ClusteredEmbedding(spec, d, contiguous_cls_map(spec.sizes), u0, factors)


class TestParamCount:
    def test_single_full_cluster_bert_tiny(self):
        spec = ClusterSpec(sizes=(30522,), ranks=(128,))
        assert embedding_param_count(spec, 128) == 3_906_816

    def test_four_cluster_compressed(self):
        # sizes/ranks of a heavily compressed 30522-token table
        spec = ClusterSpec(sizes=(510, 555, 850, 28607), ranks=(128, 109, 18, 2))
        assert embedding_param_count(spec, 128) == 214_801

    def test_all_rank_d_equals_vd_when_merged(self):
        # a rank-d factor pair holds r*(n+d) params; merging it back into a
        # plain table gives n*d, so the single-cluster spec is the bound
        v, d = 100, 16
        merged = ClusterSpec(sizes=(v,), ranks=(d,))
        assert embedding_param_count(merged, d) == v * d

    def test_invalid_specs_rejected(self):
        with pytest.raises(EmbeddingError):
            ClusterSpec(sizes=(10, 0), ranks=(8, 4))
        with pytest.raises(EmbeddingError):
            embedding_param_count(ClusterSpec(sizes=(10,), ranks=(4,)), 8)


class TestClusterOf:
    def test_boundaries_and_round_trip(self):
        spec = ClusterSpec(sizes=(3, 4, 5), ranks=(8, 4, 2))
        emb = build_embedding(spec, 8, np.random.default_rng(0))
        assert [cluster_of(i, emb) for i in (0, 2, 3, 6, 7, 11)] == [0, 0, 1, 1, 2, 2]
        for tok in range(12):
            cl = cluster_of(tok, emb)
            assert emb.row_map[tok] < spec.sizes[cl]

    def test_out_of_range_rejected(self):
        spec = ClusterSpec(sizes=(4,), ranks=(8,))
        emb = build_embedding(spec, 8, np.random.default_rng(0))
        with pytest.raises(EmbeddingError):
            cluster_of(4, emb)
        with pytest.raises(EmbeddingError):
            cluster_of(-1, emb)

    def test_population_mismatch_rejected(self):
        spec = ClusterSpec(sizes=(2, 2), ranks=(4, 2))
        rng = np.random.default_rng(0)
        u0 = quantize(rng.normal(0, 0.1, (2, 4)), QuantParams(0.01, 0))
        f = [(quantize(rng.normal(0, 0.1, (2, 2)), QuantParams(0.01, 0)),
              quantize(rng.normal(0, 0.1, (2, 4)), QuantParams(0.01, 0)))]
        with pytest.raises(EmbeddingError):
            ClusteredEmbedding(spec, 4, np.array([0, 0, 0, 1]), u0, f)


class TestLookup:
    def test_cluster0_returns_row(self):
        spec = ClusterSpec(sizes=(4,), ranks=(8,))
        emb = build_embedding(spec, 8, np.random.default_rng(1))
        out = embed_lookup(2, emb, emb.u0.qp)
        np.testing.assert_array_equal(out.data[0], emb.u0.data[2])

    def test_rank_d_factorization_matches_full_table(self):
        """An exact-SVD rank-d pair reproduces direct lookups within 1 LSB."""
        rng = np.random.default_rng(2)
        n, d = 12, 8
        table = rng.normal(0, 0.04, (n, d))
        u, sing, vt = np.linalg.svd(table, full_matrices=False)
        uf = u * np.sqrt(sing)
        vf = (np.sqrt(sing)[:, None] * vt)
        # fine enough that factor quantization noise stays below the out LSB
        fine = QuantParams(max(np.abs(uf).max(), np.abs(vf).max()) / 120.0, 0)
        out_qp = QuantParams(0.01, 0)
        spec = ClusterSpec(sizes=(1, n), ranks=(d, d))
        emb = ClusteredEmbedding(
            spec, d, contiguous_cls_map((1, n)),
            quantize(table[:1], out_qp),
            [(quantize(uf, fine), quantize(vf, fine))],
        )
        for tok in range(1, n + 1):
            got = embed_lookup(tok, emb, out_qp).data[0].astype(int)
            want = quantize(table[tok - 1 : tok], out_qp).data[0].astype(int)
            assert np.max(np.abs(got - want)) <= 1

    def test_out_of_range_token(self):
        spec = ClusterSpec(sizes=(4,), ranks=(8,))
        emb = build_embedding(spec, 8, np.random.default_rng(3))
        with pytest.raises(EmbeddingError):
            embed_lookup(99, emb, QuantParams(1.0, 0))
