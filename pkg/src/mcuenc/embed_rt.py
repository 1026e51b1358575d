"""Runtime for the clustered low-rank embedding: token lookup through
per-cluster factor pairs, and exact parameter accounting.

Cluster 0 keeps its full sub-table; clusters i >= 1 store a factor pair
(U_i, V_i^T) at rank ranks[i].  Flash holds the factors; SRAM only ever
holds the active rows, so a lookup into a factorized cluster is a
1 x r times r x d product computed on the fly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import matmul_reference
from .qcore import QTensor, QuantParams


class EmbeddingError(ValueError):
    pass


@dataclass(frozen=True)
class ClusterSpec:
    sizes: tuple  # tokens per cluster, sums to v
    ranks: tuple  # ranks[0] == d (cluster 0 unfactorized)

    def __post_init__(self):
        if len(self.sizes) != len(self.ranks):
            raise EmbeddingError("sizes and ranks must have equal length")
        if any(s <= 0 for s in self.sizes):
            raise EmbeddingError(f"cluster sizes must be positive: {self.sizes}")
        if any(r < 1 for r in self.ranks):
            raise EmbeddingError(f"ranks must be >= 1: {self.ranks}")

    @property
    def c(self) -> int:
        return len(self.sizes)

    @property
    def v(self) -> int:
        return sum(self.sizes)

    def validate(self, d: int) -> None:
        if self.ranks[0] != d:
            raise EmbeddingError(f"cluster 0 is unfactorized; ranks[0] must equal d={d}")
        for i, r in enumerate(self.ranks):
            if i >= 1 and r > d:
                raise EmbeddingError(f"ranks[{i}]={r} exceeds d={d}")


def embedding_param_count(spec: ClusterSpec, d: int) -> int:
    """Exact parameter count: sizes[0]*d + sum_{i>=1} ranks[i]*(sizes[i] + d)."""
    spec.validate(d)
    total = spec.sizes[0] * d
    for i in range(1, spec.c):
        total += spec.ranks[i] * (spec.sizes[i] + d)
    return total


class ClusteredEmbedding:
    """Per-cluster embedding storage plus the hardened token -> (cluster, row)
    map.  Read-only after construction."""

    def __init__(self, spec: ClusterSpec, d: int, cls_map: np.ndarray,
                 u0: QTensor, factors: list):
        spec.validate(d)
        cls_map = np.asarray(cls_map)
        if cls_map.shape != (spec.v,):
            raise EmbeddingError(f"cls_map must have shape ({spec.v},)")
        counts = np.bincount(cls_map, minlength=spec.c)
        if cls_map.size and (cls_map.max() >= spec.c or not np.array_equal(counts, spec.sizes)):
            raise EmbeddingError(
                f"cls_map cluster populations {counts.tolist()} disagree with sizes {list(spec.sizes)}"
            )
        if u0.shape != (spec.sizes[0], d):
            raise EmbeddingError(f"U0 must be {spec.sizes[0]}x{d}, got {u0.shape}")
        if len(factors) != spec.c - 1:
            raise EmbeddingError(f"expected {spec.c - 1} factor pairs, got {len(factors)}")
        for i, (ui, vit) in enumerate(factors, start=1):
            r = spec.ranks[i]
            if ui.shape != (spec.sizes[i], r) or vit.shape != (r, d):
                raise EmbeddingError(
                    f"cluster {i}: expected U {spec.sizes[i]}x{r} and V^T {r}x{d}, "
                    f"got {ui.shape} and {vit.shape}"
                )
        self.spec = spec
        self.d = d
        self.cls_map = cls_map.astype(np.int64)
        self.u0 = u0
        self.factors = list(factors)
        # row index = order of appearance within the cluster, ascending token id
        self.row_map = np.zeros(spec.v, dtype=np.int64)
        next_row = [0] * spec.c
        for tok in range(spec.v):
            cl = int(self.cls_map[tok])
            self.row_map[tok] = next_row[cl]
            next_row[cl] += 1

    @property
    def v(self) -> int:
        return self.spec.v


def cluster_of(token_id: int, emb: ClusteredEmbedding) -> int:
    if not (0 <= token_id < emb.v):
        raise EmbeddingError(f"token id {token_id} out of range [0, {emb.v})")
    return int(emb.cls_map[token_id])


def embed_lookup(token_id: int, emb: ClusteredEmbedding, out_qp: QuantParams) -> QTensor:
    """Return the 1 x d embedding row for a token, requantized to out_qp."""
    cl = cluster_of(token_id, emb)
    row = int(emb.row_map[token_id])
    if cl == 0:
        src = QTensor(emb.u0.data[row : row + 1, :], emb.u0.qp)
        # requantize through a unit matmul-free path: scale conversion only
        from .qcore import dequantize, quantize

        return quantize(dequantize(src), out_qp)
    ui, vit = emb.factors[cl - 1]
    u_row = QTensor(ui.data[row : row + 1, :], ui.qp)
    return matmul_reference(u_row, vit, None, out_qp)
