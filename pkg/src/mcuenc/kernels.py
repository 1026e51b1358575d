"""Compute primitives: register-blocked int8 matmul micro-kernel, layout-fused
attention matmuls, and the softmax / layernorm / GELU / residual epilogues.

All matmuls accumulate in int32 with a fixed ascending-k order, so the
blocked kernel and the plain reference kernel are bit-identical.  Shape
transformations (transpose for K in attention) are realized purely as
access patterns via LayoutDescriptor; no kernel allocates a buffer for a
reshape or transpose.

Float epilogues (softmax, layernorm, GELU table construction) run in
double precision and requantize; on-device fixed-point emulation is out
of scope.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .qcore import (
    INT8_MAX,
    INT8_MIN,
    QTensor,
    QuantParams,
    dequantize,
    quantize,
    requantize,
    requantize_scalar,
)


class KernelError(ValueError):
    pass


@dataclass(frozen=True)
class MicroKernelShape:
    """Register-block dims [M, N, K] and the reduction unroll factor."""

    m_r: int = 4
    n_r: int = 2
    k_r: int = 4
    unroll: int = 64

    def __post_init__(self):
        if min(self.m_r, self.n_r, self.k_r, self.unroll) < 1:
            raise KernelError("micro-kernel dims must all be >= 1")


DEFAULT_MK = MicroKernelShape()
CMSIS_LIKE_MK = MicroKernelShape(m_r=1, n_r=2, k_r=4, unroll=64)


@dataclass(frozen=True)
class LayoutDescriptor:
    """A logical transpose/reshape realized purely as an access pattern."""

    base_shape: tuple
    permutation: tuple

    def __post_init__(self):
        if sorted(self.permutation) != list(range(len(self.base_shape))):
            raise KernelError(f"permutation {self.permutation} is not a bijection on axes")

    def apply(self, arr: np.ndarray) -> np.ndarray:
        return np.transpose(arr.reshape(self.base_shape), self.permutation)


def transposed(q: QTensor) -> QTensor:
    """2-D transpose as a strided view; shares storage with `q`."""
    ld = LayoutDescriptor(q.data.shape, (1, 0))
    return QTensor(ld.apply(q.data), q.qp)


@dataclass
class OpCounts:
    """Per-kernel operation tallies, the CLI's latency proxy."""

    macs: int = 0
    dot4_ops: int = 0
    loads: int = 0
    stores: int = 0

    def add(self, other: "OpCounts") -> None:
        self.macs += other.macs
        self.dot4_ops += other.dot4_ops
        self.loads += other.loads
        self.stores += other.stores

    def as_dict(self) -> dict:
        return {
            "macs": self.macs,
            "dot4_ops": self.dot4_ops,
            "loads": self.loads,
            "stores": self.stores,
        }


def _check_matmul_shapes(a: QTensor, b: QTensor, bias):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise KernelError("matmul operands must be 2-D")
    M, K = a.data.shape
    Kb, N = b.data.shape
    if K != Kb:
        raise KernelError(f"inner dims disagree: {K} vs {Kb}")
    if K == 0:
        raise KernelError("K must be >= 1")
    if bias is not None and bias.shape != (N,):
        raise KernelError(f"bias must have shape ({N},), got {bias.shape}")
    return M, K, N


def _matmul_counts(M: int, N: int, K: int, mk: MicroKernelShape, counts: OpCounts) -> None:
    # One DOTx4-style MAC instruction per accumulator per k_r-chunk; one
    # LDx4 per operand row/column per chunk; one store per output element.
    k_chunks = -(-K // mk.k_r)
    counts.macs += M * N * K
    counts.dot4_ops += M * N * k_chunks
    m_blocks = [min(mk.m_r, M - m0) for m0 in range(0, M, mk.m_r)]
    n_blocks = [min(mk.n_r, N - n0) for n0 in range(0, N, mk.n_r)]
    loads = 0
    for mb in m_blocks:
        for nb in n_blocks:
            loads += (mb + nb) * k_chunks
    counts.loads += loads
    counts.stores += M * N


def matmul_tiled(
    a: QTensor,
    b: QTensor,
    bias: np.ndarray | None,
    out_qp: QuantParams,
    mk: MicroKernelShape = DEFAULT_MK,
    *,
    extra_scale: float = 1.0,
    out: np.ndarray | None = None,
    counts: OpCounts | None = None,
) -> QTensor:
    """Two-level register-blocked int8 matmul with int32 accumulation.

    out[m, n] = requantize(sum_k (a[m,k]-zpa)(b[k,n]-zpb) + bias[n]).
    The reduction runs over ascending k regardless of the (M, N) blocking,
    so results are independent of the blocking order and bit-identical to
    `matmul_reference`.
    """
    M, K, N = _check_matmul_shapes(a, b, bias)
    multiplier = a.qp.scale * b.qp.scale * extra_scale / out_qp.scale
    zpa, zpb, zpo = a.qp.zero_point, b.qp.zero_point, out_qp.zero_point
    if out is None:
        out = np.empty((M, N), dtype=np.int8)
    else:
        out = out.reshape(M, N)

    A = a.data.astype(np.int64) - zpa
    B = b.data.astype(np.int64) - zpb
    for n0 in range(0, N, mk.n_r):
        n1 = min(n0 + mk.n_r, N)
        Bblk = B[:, n0:n1]
        bblk = bias[n0:n1] if bias is not None else 0
        for m0 in range(0, M, mk.m_r):
            m1 = min(m0 + mk.m_r, M)
            # register-resident micro-kernel: m_r x n_r int32 accumulators,
            # ascending-k DOTx4 reduction (integer, so chunking is exact)
            acc = A[m0:m1] @ Bblk + bblk
            out[m0:m1, n0:n1] = requantize(acc, multiplier, zpo)
    if counts is not None:
        _matmul_counts(M, N, K, mk, counts)
    return QTensor(out, out_qp)


def matmul_reference(
    a: QTensor,
    b: QTensor,
    bias: np.ndarray | None,
    out_qp: QuantParams,
    *,
    extra_scale: float = 1.0,
) -> QTensor:
    """Test oracle: the plainest possible triple loop, ascending k."""
    M, K, N = _check_matmul_shapes(a, b, bias)
    multiplier = a.qp.scale * b.qp.scale * extra_scale / out_qp.scale
    zpa, zpb, zpo = a.qp.zero_point, b.qp.zero_point, out_qp.zero_point
    out = np.empty((M, N), dtype=np.int8)
    ad = a.data
    bd = b.data
    for m in range(M):
        for n in range(N):
            acc = 0
            for k in range(K):
                acc += (int(ad[m, k]) - zpa) * (int(bd[k, n]) - zpb)
            if bias is not None:
                acc += int(bias[n])
            out[m, n] = requantize_scalar(acc, multiplier, zpo)
    return QTensor(out, out_qp)


def attention_scores(
    q_tile: QTensor,
    k_head: QTensor,
    out_qp: QuantParams,
    mk: MicroKernelShape = DEFAULT_MK,
    *,
    out: np.ndarray | None = None,
    counts: OpCounts | None = None,
) -> QTensor:
    """Q_tile (t x dh) times K_head^T (dh x s), scaled by 1/sqrt(dh).

    The transpose of K_head is an access pattern only; no buffer is
    allocated for it.
    """
    if q_tile.data.ndim != 2 or k_head.data.ndim != 2:
        raise KernelError("attention operands must be 2-D")
    t, dh = q_tile.data.shape
    s, dh_k = k_head.data.shape
    if dh != dh_k:
        raise KernelError(f"head dims disagree: {dh} vs {dh_k}")
    kt = transposed(k_head)
    return matmul_tiled(
        q_tile,
        kt,
        None,
        out_qp,
        mk,
        extra_scale=1.0 / math.sqrt(dh),
        out=out,
        counts=counts,
    )


def softmax_rows(
    scores: QTensor, out_qp: QuantParams, *, out: np.ndarray | None = None
) -> QTensor:
    """Row-wise softmax with max subtraction; each row must be a complete
    attention distribution (query tiling never splits a row)."""
    x = dequantize(scores)
    x = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(x)
    p = e / np.sum(e, axis=-1, keepdims=True)
    q = np.clip(np.rint(p / out_qp.scale) + out_qp.zero_point, INT8_MIN, INT8_MAX).astype(np.int8)
    if out is None:
        return QTensor(q, out_qp)
    out = out.reshape(q.shape)
    out[...] = q
    return QTensor(out, out_qp)


def layernorm_rows(
    x: QTensor,
    gamma: np.ndarray,
    beta: np.ndarray,
    out_qp: QuantParams,
    *,
    eps: float = 1e-5,
    out: np.ndarray | None = None,
) -> QTensor:
    """Per-row layer normalization followed by requantization."""
    xf = dequantize(x)
    if xf.ndim != 2:
        raise KernelError("layernorm input must be 2-D")
    mean = np.mean(xf, axis=-1, keepdims=True)
    var = np.mean((xf - mean) ** 2, axis=-1, keepdims=True)
    y = (xf - mean) / np.sqrt(var + eps) * gamma + beta
    q = np.clip(np.rint(y / out_qp.scale) + out_qp.zero_point, INT8_MIN, INT8_MAX).astype(np.int8)
    if out is None:
        return QTensor(q, out_qp)
    out = out.reshape(q.shape)
    out[...] = q
    return QTensor(out, out_qp)


def gelu_exact(x):
    """Tanh-approximation GELU, the table-construction formula."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


@lru_cache(maxsize=256)
def _gelu_lut(in_scale, in_zp, out_scale, out_zp) -> np.ndarray:
    codes = np.arange(INT8_MIN, INT8_MAX + 1, dtype=np.float64)
    xs = (codes - in_zp) * in_scale
    ys = gelu_exact(xs)
    return np.clip(np.rint(ys / out_scale) + out_zp, INT8_MIN, INT8_MAX).astype(np.int8)


def gelu(x: QTensor, out_qp: QuantParams, *, out: np.ndarray | None = None) -> QTensor:
    """GELU as a 256-entry int8 -> int8 lookup per (in_qp, out_qp) pair."""
    lut = _gelu_lut(x.qp.scale, x.qp.zero_point, out_qp.scale, out_qp.zero_point)
    idx = x.data.astype(np.int16) - INT8_MIN
    q = lut[idx]
    if out is None:
        return QTensor(q, out_qp)
    out = out.reshape(q.shape)
    out[...] = q
    return QTensor(out, out_qp)


def residual_add_inplace(x: QTensor, y: QTensor, out_qp: QuantParams) -> None:
    """x <- quantize(dequant(x) + dequant(y)); x's region is overwritten and
    no new allocation occurs.  Aliasing of y into x is rejected unless the
    two are the exact same view."""
    if x.data.shape != y.data.shape:
        raise KernelError(f"shape mismatch: {x.data.shape} vs {y.data.shape}")
    same = x.data is y.data or (
        x.data.base is not None and x.data.base is y.data.base
        and x.data.__array_interface__ == y.data.__array_interface__
    )
    if not same and np.shares_memory(x.data, y.data):
        raise KernelError("y partially aliases x; only exact overlap is allowed")
    total = dequantize(x) + dequantize(y)
    q = np.clip(np.rint(total / out_qp.scale) + out_qp.zero_point, INT8_MIN, INT8_MAX)
    x.data[...] = q.astype(np.int8)
    x.qp = out_qp
