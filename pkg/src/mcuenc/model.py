"""Encoder model container: config, clustered embedding, per-layer weights,
activation quantization parameters, and parameter accounting.

`make_random_model` procedurally generates valid models for tests and
benchmarks (single full cluster by default, BERT-tiny preset available).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embed_rt import ClusterSpec, ClusteredEmbedding, embedding_param_count
from .qcore import QTensor, QuantParams, f32, quantize


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    v: int  # vocab size
    d: int  # embedding dim
    h: int  # head count
    L: int  # layer count
    d_ffn: int  # FFN dim (4d conventional)
    s_max: int  # max sequence length
    n_cls: int = 2  # classifier classes

    def __post_init__(self):
        for name in ("v", "d", "h", "L", "d_ffn", "s_max", "n_cls"):
            if getattr(self, name) <= 0:
                raise ModelError(f"{name} must be positive")
        if self.d % self.h != 0:
            raise ModelError(f"d={self.d} must be divisible by h={self.h}")


BERT_TINY = EncoderConfig(v=30522, d=128, h=2, L=2, d_ffn=512, s_max=512, n_cls=2)


@dataclass
class LayerQps:
    """Activation quant params for one encoder layer, in dataflow order."""

    q: QuantParams
    k: QuantParams
    v: QuantParams
    score: QuantParams
    prob: QuantParams
    ctx: QuantParams
    attn_out: QuantParams
    resid1: QuantParams
    ln1: QuantParams
    ffn1: QuantParams
    gelu: QuantParams
    ffn2: QuantParams
    resid2: QuantParams
    ln2: QuantParams

    FIELDS = ("q", "k", "v", "score", "prob", "ctx", "attn_out",
              "resid1", "ln1", "ffn1", "gelu", "ffn2", "resid2", "ln2")


@dataclass
class ActivationQps:
    x_emb: QuantParams
    layers: list  # list[LayerQps], length L
    logits: QuantParams


@dataclass
class LayerWeights:
    wq: QTensor  # d x d
    wk: QTensor
    wv: QTensor
    wo: QTensor
    bq: np.ndarray  # int32, d
    bk: np.ndarray
    bv: np.ndarray
    bo: np.ndarray
    w1: QTensor  # d x d_ffn
    b1: np.ndarray  # int32, d_ffn
    w2: QTensor  # d_ffn x d
    b2: np.ndarray  # int32, d
    ln1_gamma: np.ndarray  # fp32, d
    ln1_beta: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray


@dataclass
class EncoderModel:
    config: EncoderConfig
    embedding: ClusteredEmbedding
    pos: QTensor  # s_max x d positional table (full-size, uncompressed)
    layers: list  # list[LayerWeights]
    w_cls: QTensor  # d x n_cls
    b_cls: np.ndarray  # int32, n_cls
    act_qps: ActivationQps

    def validate(self) -> None:
        cfg = self.config
        if self.embedding.v != cfg.v or self.embedding.d != cfg.d:
            raise ModelError("embedding shape disagrees with config")
        if self.pos.shape != (cfg.s_max, cfg.d):
            raise ModelError("positional table shape disagrees with config")
        if len(self.layers) != cfg.L or len(self.act_qps.layers) != cfg.L:
            raise ModelError("layer count disagrees with config")
        if self.w_cls.shape != (cfg.d, cfg.n_cls):
            raise ModelError("classifier shape disagrees with config")


def param_counts(model: EncoderModel) -> dict:
    """Parameter accounting.

    `total` covers the token embedding, encoder layers, and classifier
    head; the positional table is reported separately (the conventional
    embedding-size accounting for this model family covers the token
    table only).
    """
    cfg = model.config
    emb = embedding_param_count(model.embedding.spec, cfg.d)
    per_layer = (
        4 * (cfg.d * cfg.d + cfg.d)  # Q/K/V/O + biases
        + cfg.d * cfg.d_ffn + cfg.d_ffn  # FFN1
        + cfg.d_ffn * cfg.d + cfg.d  # FFN2
        + 4 * cfg.d  # two layernorms, gamma + beta
    )
    encoder = cfg.L * per_layer
    head = cfg.d * cfg.n_cls + cfg.n_cls
    position = cfg.s_max * cfg.d
    return {
        "embedding": emb,
        "encoder": encoder,
        "head": head,
        "position": position,
        "total": emb + encoder + head,
    }


# ---------------------------------------------------------------------------
# procedural model generation


def _sym_quantize(w: np.ndarray) -> QTensor:
    scale = f32(max(float(np.max(np.abs(w))) / 127.0, 1e-8))
    return quantize(w, QuantParams(scale, 0))


def make_random_model(
    cfg: EncoderConfig,
    seed: int = 0,
    cluster_spec: ClusterSpec | None = None,
) -> EncoderModel:
    rng = np.random.default_rng(seed)
    d, dffn = cfg.d, cfg.d_ffn

    if cluster_spec is None:
        cluster_spec = ClusterSpec(sizes=(cfg.v,), ranks=(d,))
    cluster_spec.validate(d)
    if cluster_spec.v != cfg.v:
        raise ModelError("cluster spec vocab disagrees with config")

    # token -> cluster assignment: contiguous ranges by ascending id
    cls_map = np.zeros(cfg.v, dtype=np.int64)
    start = 0
    for i, size in enumerate(cluster_spec.sizes):
        cls_map[start : start + size] = i
        start += size

    def w(*shape, scale=0.08):
        return rng.normal(0.0, scale, size=shape)

    u0 = _sym_quantize(w(cluster_spec.sizes[0], d))
    factors = []
    for i in range(1, cluster_spec.c):
        r = cluster_spec.ranks[i]
        factors.append(
            (_sym_quantize(w(cluster_spec.sizes[i], r)), _sym_quantize(w(r, d)))
        )
    embedding = ClusteredEmbedding(cluster_spec, d, cls_map, u0, factors)
    pos = _sym_quantize(w(cfg.s_max, d, scale=0.02))

    def bias(n):
        return rng.integers(-200, 200, size=n, dtype=np.int32)

    layers = []
    layer_qps = []
    for _ in range(cfg.L):
        layers.append(
            LayerWeights(
                wq=_sym_quantize(w(d, d)), wk=_sym_quantize(w(d, d)),
                wv=_sym_quantize(w(d, d)), wo=_sym_quantize(w(d, d)),
                bq=bias(d), bk=bias(d), bv=bias(d), bo=bias(d),
                w1=_sym_quantize(w(d, dffn)), b1=bias(dffn),
                w2=_sym_quantize(w(dffn, d)), b2=bias(d),
                ln1_gamma=rng.normal(1.0, 0.05, d).astype(np.float32),
                ln1_beta=rng.normal(0.0, 0.05, d).astype(np.float32),
                ln2_gamma=rng.normal(1.0, 0.05, d).astype(np.float32),
                ln2_beta=rng.normal(0.0, 0.05, d).astype(np.float32),
            )
        )
        act = f32(0.02)
        layer_qps.append(
            LayerQps(
                q=QuantParams(act, 0), k=QuantParams(act, 0), v=QuantParams(act, 0),
                score=QuantParams(f32(0.05), 0), prob=QuantParams(1.0 / 256.0, -128),
                ctx=QuantParams(act, 0), attn_out=QuantParams(act, 0),
                resid1=QuantParams(act, 0), ln1=QuantParams(f32(0.02), 0),
                ffn1=QuantParams(f32(0.03), 0), gelu=QuantParams(f32(0.03), 0),
                ffn2=QuantParams(act, 0), resid2=QuantParams(act, 0),
                ln2=QuantParams(f32(0.02), 0),
            )
        )

    model = EncoderModel(
        config=cfg,
        embedding=embedding,
        pos=pos,
        layers=layers,
        w_cls=_sym_quantize(w(d, cfg.n_cls)),
        b_cls=bias(cfg.n_cls),
        act_qps=ActivationQps(
            x_emb=QuantParams(f32(0.02), 0), layers=layer_qps,
            logits=QuantParams(f32(0.1), 0),
        ),
    )
    model.validate()
    return model
