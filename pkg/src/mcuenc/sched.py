"""Tiled MLP and MHA executors, the analytic peak-memory model, tile-size
planning from an SRAM budget, and the naive reference executor.

The memory model's contract is exactness: for every stage and mode, the
predicted byte count equals the measured arena peak of the corresponding
executor.  Tiled and naive execution are bit-identical on logits because
query tiling never splits a softmax row and MLP rows are independent.

Stage peaks (int8 activation bytes, dh = d / h, d_ffn the FFN width):
  embed   naive: 2*s*d                 tiled: s*d + t*d
  mha     naive: 4*s*d + h*s^2         tiled: max(2*s*d + 2*s*dh + t*(2*dh + s),
                                                  2*s*d + t*d)
  mlp     naive: 2*s*d + s*d_ffn       tiled: s*d + t*(d_ffn + d)
  head    both:  s*d + n_cls
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .arena import Arena, OutOfMemory
from .embed_rt import embed_lookup
from .kernels import (
    DEFAULT_MK,
    MicroKernelShape,
    OpCounts,
    attention_scores,
    gelu,
    layernorm_rows,
    matmul_tiled,
    residual_add_inplace,
    softmax_rows,
)
from .model import EncoderConfig, EncoderModel, LayerQps, LayerWeights
from .qcore import INT8_MAX, INT8_MIN, QTensor, QuantParams, dequantize


class ScheduleError(ValueError):
    pass


class InfeasibleBudget(RuntimeError):
    def __init__(self, budget: int, min_required: int):
        self.budget = budget
        self.min_required = min_required
        super().__init__(
            f"budget {budget} B is below the t=1 requirement of {min_required} B"
        )


STAGES = ("embed", "mha", "mlp", "head")


@dataclass(frozen=True)
class SchedulePlan:
    t: int
    stage_peaks: dict
    mode: str  # "naive" or "tiled"


def peak_memory_model(cfg: EncoderConfig, s: int, t: int, mode: str) -> dict:
    """Predicted activation peak per stage, in int8 bytes."""
    if mode not in ("naive", "tiled"):
        raise ScheduleError(f"unknown mode {mode!r}")
    if not (1 <= t <= s):
        raise ScheduleError(f"tile size t={t} must satisfy 1 <= t <= s={s}")
    d, h, dffn = cfg.d, cfg.h, cfg.d_ffn
    dh = d // h
    if mode == "naive":
        return {
            "embed": 2 * s * d,
            "mha": 4 * s * d + h * s * s,
            "mlp": 2 * s * d + s * dffn,
            "head": s * d + cfg.n_cls,
        }
    return {
        "embed": s * d + t * d,
        "mha": max(2 * s * d + 2 * s * dh + t * (2 * dh + s), 2 * s * d + t * d),
        "mlp": s * d + t * (dffn + d),
        "head": s * d + cfg.n_cls,
    }


def plan_tile_size(cfg: EncoderConfig, s: int, sram_budget_bytes: int) -> SchedulePlan:
    """Largest t whose max stage peak fits the budget (peaks are monotone
    non-decreasing in t, so binary search applies)."""

    def peak(t):
        return max(peak_memory_model(cfg, s, t, "tiled").values())

    if peak(1) > sram_budget_bytes:
        raise InfeasibleBudget(sram_budget_bytes, peak(1))
    lo, hi = 1, s
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if peak(mid) <= sram_budget_bytes:
            lo = mid
        else:
            hi = mid - 1
    return SchedulePlan(t=lo, stage_peaks=peak_memory_model(cfg, s, lo, "tiled"), mode="tiled")


def _tiles(s: int, t: int):
    """Row ranges of size t; the last tile takes the s mod t remainder."""
    return [(r0, min(r0 + t, s)) for r0 in range(0, s, t)]


def _requant_sum_rows(dst, dst_qp, a_f, out_qp):
    """dst rows <- quantize(a_f) under out_qp (helper for embed staging)."""
    q = np.clip(np.rint(a_f / out_qp.scale) + out_qp.zero_point, INT8_MIN, INT8_MAX)
    dst[...] = q.astype(np.int8)


# ---------------------------------------------------------------------------
# stage executors


def run_embedding(tokens, model: EncoderModel, t: int, arena: Arena) -> tuple:
    """Token + positional embedding into a fresh s x d arena buffer,
    processed t tokens at a time through a row-tile staging scratch."""
    cfg = model.config
    s = len(tokens)
    d = cfg.d
    x_qp = model.act_qps.x_emb
    with arena.stage("embed"):
        x_region = arena.alloc(s * d, "embed.x")
        x_arr = x_region.view((s, d))
        scratch = arena.alloc(t * d, "embed.row_tile")
        scr = scratch.view((t, d))
        for r0, r1 in _tiles(s, t):
            for j in range(r0, r1):
                tok = embed_lookup(int(tokens[j]), model.embedding, x_qp)
                pos_row = QTensor(model.pos.data[j : j + 1, :], model.pos.qp)
                total = dequantize(tok) + dequantize(pos_row)
                _requant_sum_rows(scr[j - r0 : j - r0 + 1], x_qp, total, x_qp)
            x_arr[r0:r1] = scr[: r1 - r0]
        arena.release(scratch)
    return QTensor(x_arr, x_qp), x_region


def run_mha_tiled(
    x: QTensor,
    lw: LayerWeights,
    lqp: LayerQps,
    h: int,
    t: int,
    arena: Arena,
    mk: MicroKernelShape = DEFAULT_MK,
    counts: OpCounts | None = None,
) -> None:
    """Head-then-query-tile scheduled attention, in place on x.

    Per head, K/V (s x dh) are materialized once; each query tile computes
    scores against all s tokens so softmax rows stay whole.
    """
    s, d = x.shape
    if d % h != 0:
        raise ScheduleError(f"d={d} must be divisible by h={h}")
    dh = d // h
    with arena.stage("mha"):
        out_region = arena.alloc(s * d, "mha.ctx_concat")
        out_arr = out_region.view((s, d))
        for head in range(h):
            c0, c1 = head * dh, (head + 1) * dh
            k_region = arena.alloc(s * dh, "mha.k_head")
            k_head = matmul_tiled(
                x, QTensor(lw.wk.data[:, c0:c1], lw.wk.qp), lw.bk[c0:c1],
                lqp.k, mk, out=k_region.view((s, dh)), counts=counts,
            )
            v_region = arena.alloc(s * dh, "mha.v_head")
            v_head = matmul_tiled(
                x, QTensor(lw.wv.data[:, c0:c1], lw.wv.qp), lw.bv[c0:c1],
                lqp.v, mk, out=v_region.view((s, dh)), counts=counts,
            )
            for r0, r1 in _tiles(s, t):
                ti = r1 - r0
                q_region = arena.alloc(ti * dh, "mha.q_tile")
                q_tile = matmul_tiled(
                    QTensor(x.data[r0:r1], x.qp),
                    QTensor(lw.wq.data[:, c0:c1], lw.wq.qp),
                    lw.bq[c0:c1], lqp.q, mk,
                    out=q_region.view((ti, dh)), counts=counts,
                )
                s_region = arena.alloc(ti * s, "mha.score_tile")
                scores = attention_scores(
                    q_tile, k_head, lqp.score, mk,
                    out=s_region.view((ti, s)), counts=counts,
                )
                probs = softmax_rows(scores, lqp.prob, out=s_region.view((ti, s)))
                c_region = arena.alloc(ti * dh, "mha.ctx_tile")
                ctx = matmul_tiled(
                    probs, v_head, None, lqp.ctx, mk,
                    out=c_region.view((ti, dh)), counts=counts,
                )
                out_arr[r0:r1, c0:c1] = ctx.data
                arena.release(c_region)
                arena.release(s_region)
                arena.release(q_region)
            arena.release(v_region)
            arena.release(k_region)
        # output projection + in-place residual, per query tile
        proj_region = arena.alloc(t * d, "mha.proj_tile")
        proj_full = proj_region.view((t, d))
        for r0, r1 in _tiles(s, t):
            ti = r1 - r0
            proj = matmul_tiled(
                QTensor(out_arr[r0:r1], lqp.ctx), lw.wo, lw.bo,
                lqp.attn_out, mk, out=proj_full[:ti], counts=counts,
            )
            residual_add_inplace(QTensor(x.data[r0:r1], x.qp), proj, lqp.resid1)
        arena.release(proj_region)
        arena.release(out_region)
        x.qp = lqp.resid1
        for r0, r1 in _tiles(s, t):
            layernorm_rows(
                QTensor(x.data[r0:r1], x.qp), lw.ln1_gamma, lw.ln1_beta,
                lqp.ln1, out=x.data[r0:r1],
            )
        x.qp = lqp.ln1


def run_mha_naive(
    x: QTensor,
    lw: LayerWeights,
    lqp: LayerQps,
    h: int,
    arena: Arena,
    mk: MicroKernelShape = DEFAULT_MK,
    counts: OpCounts | None = None,
) -> None:
    """Untiled baseline: full Q/K/V and all per-head s x s score matrices
    resident at once."""
    s, d = x.shape
    dh = d // h
    with arena.stage("mha"):
        q_region = arena.alloc(s * d, "mha.q")
        q_full = matmul_tiled(x, lw.wq, lw.bq, lqp.q, mk,
                              out=q_region.view((s, d)), counts=counts)
        k_region = arena.alloc(s * d, "mha.k")
        k_full = matmul_tiled(x, lw.wk, lw.bk, lqp.k, mk,
                              out=k_region.view((s, d)), counts=counts)
        v_region = arena.alloc(s * d, "mha.v")
        v_full = matmul_tiled(x, lw.wv, lw.bv, lqp.v, mk,
                              out=v_region.view((s, d)), counts=counts)
        s_region = arena.alloc(h * s * s, "mha.scores")
        sc = s_region.view((h, s, s))
        for head in range(h):
            c0, c1 = head * dh, (head + 1) * dh
            q_head = QTensor(q_full.data[:, c0:c1], lqp.q)
            k_head = QTensor(k_full.data[:, c0:c1], lqp.k)
            attention_scores(q_head, k_head, lqp.score, mk, out=sc[head], counts=counts)
            softmax_rows(QTensor(sc[head], lqp.score), lqp.prob, out=sc[head])
        arena.release(q_region)  # consumed by the score matrices
        c_region = arena.alloc(s * d, "mha.ctx")
        c_arr = c_region.view((s, d))
        for head in range(h):
            c0, c1 = head * dh, (head + 1) * dh
            v_head = QTensor(v_full.data[:, c0:c1], lqp.v)
            matmul_tiled(QTensor(sc[head], lqp.prob), v_head, None, lqp.ctx, mk,
                         out=c_arr[:, c0:c1], counts=counts)
        arena.release(s_region)
        arena.release(v_region)
        arena.release(k_region)
        o_region = arena.alloc(s * d, "mha.attn_out")
        attn_out = matmul_tiled(QTensor(c_arr, lqp.ctx), lw.wo, lw.bo, lqp.attn_out,
                                mk, out=o_region.view((s, d)), counts=counts)
        arena.release(c_region)
        residual_add_inplace(x, attn_out, lqp.resid1)
        arena.release(o_region)
        layernorm_rows(x, lw.ln1_gamma, lw.ln1_beta, lqp.ln1, out=x.data)
        x.qp = lqp.ln1


def run_mlp_tiled(
    x: QTensor,
    lw: LayerWeights,
    lqp: LayerQps,
    t: int,
    arena: Arena,
    mk: MicroKernelShape = DEFAULT_MK,
    counts: OpCounts | None = None,
) -> None:
    """Token-tiled FFN: linear1 -> GELU -> linear2 -> in-place residual, one
    t-token tile at a time, directly overwriting x's tile rows.

    The naive schedule is the t = s degenerate case.
    """
    s, d = x.shape
    dffn = lw.w1.shape[1]
    with arena.stage("mlp"):
        h1_region = arena.alloc(t * dffn, "mlp.ffn1_tile")
        h1_full = h1_region.view((t, dffn))
        h2_region = arena.alloc(t * d, "mlp.ffn2_tile")
        h2_full = h2_region.view((t, d))
        for r0, r1 in _tiles(s, t):
            ti = r1 - r0
            x_rows = QTensor(x.data[r0:r1], x.qp)
            hidden = matmul_tiled(x_rows, lw.w1, lw.b1, lqp.ffn1, mk,
                                  out=h1_full[:ti], counts=counts)
            act = gelu(hidden, lqp.gelu, out=h1_full[:ti])
            down = matmul_tiled(act, lw.w2, lw.b2, lqp.ffn2, mk,
                                out=h2_full[:ti], counts=counts)
            residual_add_inplace(x_rows, down, lqp.resid2)
        arena.release(h2_region)
        arena.release(h1_region)
        x.qp = lqp.resid2
        for r0, r1 in _tiles(s, t):
            layernorm_rows(QTensor(x.data[r0:r1], x.qp), lw.ln2_gamma, lw.ln2_beta,
                           lqp.ln2, out=x.data[r0:r1])
        x.qp = lqp.ln2


def run_head(x: QTensor, model: EncoderModel, arena: Arena,
             mk: MicroKernelShape = DEFAULT_MK, counts: OpCounts | None = None):
    """Pooled (first-token) classifier head; returns float logits."""
    cfg = model.config
    with arena.stage("head"):
        l_region = arena.alloc(cfg.n_cls, "head.logits")
        pooled = QTensor(x.data[0:1, :], x.qp)
        logits_q = matmul_tiled(pooled, model.w_cls, model.b_cls,
                                model.act_qps.logits, mk,
                                out=l_region.view((1, cfg.n_cls)), counts=counts)
        logits_i8 = logits_q.data.ravel().copy()
        logits = dequantize(logits_q).ravel().copy()
        arena.release(l_region)
    return logits, logits_i8


# ---------------------------------------------------------------------------
# full encoder


def _run(tokens, model: EncoderModel, mode: str, t: int, arena: Arena,
         mk: MicroKernelShape, counts: OpCounts | None):
    cfg = model.config
    s = len(tokens)
    if s < 1 or s > cfg.s_max:
        raise ScheduleError(f"sequence length {s} outside [1, {cfg.s_max}]")
    for tok in tokens:
        if not (0 <= int(tok) < cfg.v):
            raise ScheduleError(f"token id {int(tok)} outside [0, {cfg.v})")
    t_eff = s if mode == "naive" else min(t, s)
    x, x_region = run_embedding(tokens, model, t_eff, arena)
    for lw, lqp in zip(model.layers, model.act_qps.layers):
        if mode == "naive":
            run_mha_naive(x, lw, lqp, cfg.h, arena, mk, counts)
        else:
            run_mha_tiled(x, lw, lqp, cfg.h, t_eff, arena, mk, counts)
        run_mlp_tiled(x, lw, lqp, t_eff, arena, mk, counts)
    logits, logits_i8 = run_head(x, model, arena, mk, counts)
    arena.release(x_region)
    return logits, logits_i8


def run_encoder(tokens, model: EncoderModel, plan: SchedulePlan, arena: Arena,
                mk: MicroKernelShape = DEFAULT_MK, counts: OpCounts | None = None):
    """Full tiled inference; returns (float logits, int8 logits)."""
    return _run(tokens, model, plan.mode, plan.t, arena, mk, counts)


def run_encoder_naive(tokens, model: EncoderModel, arena: Arena,
                      mk: MicroKernelShape = DEFAULT_MK,
                      counts: OpCounts | None = None):
    """Untiled baseline with identical numerics; OOMs at long s under small
    budgets, which is exactly its point."""
    return _run(tokens, model, "naive", 0, arena, mk, counts)
