"""The `.mcub` binary model format, shared between the exporter and the
engine.  Little-endian, canonical (identical input -> identical bytes),
and self-describing: every section length is derivable from the config
section alone.

Layout (see docs/format.md for the field-level byte map):

  magic "MCUB" | version u16
  config: v d h L d_ffn s_max n_cls c (u32 each), sizes[c] u32, ranks[c] u32
  cls_map: v bytes (token -> cluster; rows within a cluster are ordered by
           ascending token id)
  quant-param table: (f32 scale, i32 zero_point) per tensor, canonical order
  weight sections, canonical order: embedding factors, positional table,
           per-layer Q/K/V/O + biases, FFN1/FFN2 + biases, LN gamma/beta
           (fp32), classifier head
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .embed_rt import ClusterSpec, ClusteredEmbedding, embedding_param_count
from .model import (
    ActivationQps,
    EncoderConfig,
    EncoderModel,
    LayerQps,
    LayerWeights,
    ModelError,
)
from .qcore import QTensor, QuantParams

MAGIC = b"MCUB"
VERSION = 1


class FormatError(ValueError):
    pass


class BadMagic(FormatError):
    pass


class VersionMismatch(FormatError):
    pass


class TruncatedSection(FormatError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"file ends inside section '{name}'")


class InvariantViolation(FormatError):
    pass


def model_file_size(cfg: EncoderConfig, sizes, ranks) -> int:
    """Analytic byte size of a serialized model."""
    c = len(sizes)
    n = len(MAGIC) + 2  # header
    n += 4 * (8 + 2 * c)  # config
    n += cfg.v  # cls_map
    n_weight_qps = 1 + 2 * (c - 1) + 1 + 6 * cfg.L + 1
    n_act_qps = 1 + 14 * cfg.L + 1
    n += 8 * (n_weight_qps + n_act_qps)
    n += embedding_param_count(ClusterSpec(tuple(sizes), tuple(ranks)), cfg.d)
    n += cfg.s_max * cfg.d
    per_layer = 4 * cfg.d * cfg.d + 4 * 4 * cfg.d  # QKVO + i32 biases
    per_layer += cfg.d * cfg.d_ffn + 4 * cfg.d_ffn + cfg.d_ffn * cfg.d + 4 * cfg.d
    per_layer += 4 * 4 * cfg.d  # two layernorms, f32 gamma + beta
    n += cfg.L * per_layer
    n += cfg.d * cfg.n_cls + 4 * cfg.n_cls
    return n


# ---------------------------------------------------------------------------
# writing


def _write_qp(buf, qp: QuantParams):
    buf.write(struct.pack("<fi", qp.scale, qp.zero_point))


def write_model(model: EncoderModel, sink) -> int:
    """Serialize to a binary stream or path; returns the byte count."""
    model.validate()
    cfg = model.config
    spec = model.embedding.spec
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    buf.write(
        struct.pack(
            "<8I", cfg.v, cfg.d, cfg.h, cfg.L, cfg.d_ffn, cfg.s_max, cfg.n_cls, spec.c
        )
    )
    buf.write(struct.pack(f"<{spec.c}I", *spec.sizes))
    buf.write(struct.pack(f"<{spec.c}I", *spec.ranks))
    buf.write(model.embedding.cls_map.astype(np.uint8).tobytes())

    weight_qts = [model.embedding.u0]
    for ui, vit in model.embedding.factors:
        weight_qts += [ui, vit]
    weight_qts.append(model.pos)
    for lw in model.layers:
        weight_qts += [lw.wq, lw.wk, lw.wv, lw.wo, lw.w1, lw.w2]
    weight_qts.append(model.w_cls)
    for qt in weight_qts:
        _write_qp(buf, qt.qp)

    aq = model.act_qps
    act_qps = [aq.x_emb]
    for lqp in aq.layers:
        act_qps += [getattr(lqp, f) for f in LayerQps.FIELDS]
    act_qps.append(aq.logits)
    for qp in act_qps:
        _write_qp(buf, qp)

    def w_i8(qt: QTensor):
        buf.write(np.ascontiguousarray(qt.data).tobytes())

    def w_i32(arr):
        buf.write(np.asarray(arr, dtype="<i4").tobytes())

    def w_f32(arr):
        buf.write(np.asarray(arr, dtype="<f4").tobytes())

    w_i8(model.embedding.u0)
    for ui, vit in model.embedding.factors:
        w_i8(ui)
        w_i8(vit)
    w_i8(model.pos)
    for lw in model.layers:
        for qt in (lw.wq, lw.wk, lw.wv, lw.wo):
            w_i8(qt)
        for b in (lw.bq, lw.bk, lw.bv, lw.bo):
            w_i32(b)
        w_i8(lw.w1)
        w_i32(lw.b1)
        w_i8(lw.w2)
        w_i32(lw.b2)
        w_f32(lw.ln1_gamma)
        w_f32(lw.ln1_beta)
        w_f32(lw.ln2_gamma)
        w_f32(lw.ln2_beta)
    w_i8(model.w_cls)
    w_i32(model.b_cls)

    data = buf.getvalue()
    if isinstance(sink, (str, bytes)) or hasattr(sink, "__fspath__"):
        with open(sink, "wb") as f:
            f.write(data)
    else:
        sink.write(data)
    return len(data)


# ---------------------------------------------------------------------------
# loading


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, n: int, name: str) -> bytes:
        if self.off + n > len(self.data):
            raise TruncatedSection(name)
        out = self.data[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str, name: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), name))


def _read_qp(r: _Reader, name: str) -> QuantParams:
    scale, zp = r.unpack("<fi", name)
    if not (scale > 0) or not np.isfinite(scale):
        raise InvariantViolation(f"non-positive scale in qp '{name}'")
    if not (-128 <= zp <= 127):
        raise InvariantViolation(f"zero-point {zp} out of int8 range in qp '{name}'")
    return QuantParams(float(scale), int(zp))


def load_model(source) -> EncoderModel:
    """Parse and validate a `.mcub` file; load(write(m)) == m field-for-field."""
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        with open(source, "rb") as f:
            data = f.read()
    else:
        data = source.read()
    r = _Reader(data)
    if r.take(4, "header") != MAGIC:
        raise BadMagic("bad magic; not a .mcub file")
    (version,) = r.unpack("<H", "header")
    if version != VERSION:
        raise VersionMismatch(f"unsupported version {version}, expected {VERSION}")
    v, d, h, L, d_ffn, s_max, n_cls, c = r.unpack("<8I", "config")
    if c < 1:
        raise InvariantViolation("cluster count must be >= 1")
    sizes = r.unpack(f"<{c}I", "config")
    ranks = r.unpack(f"<{c}I", "config")
    try:
        cfg = EncoderConfig(v=v, d=d, h=h, L=L, d_ffn=d_ffn, s_max=s_max, n_cls=n_cls)
    except ModelError as e:
        raise InvariantViolation(str(e)) from e
    if sum(sizes) != v:
        raise InvariantViolation(f"cluster sizes sum to {sum(sizes)}, expected v={v}")
    if ranks[0] != d or any(r_ < 1 or r_ > d for r_ in ranks):
        raise InvariantViolation(f"invalid ranks {ranks} for d={d}")
    spec = ClusterSpec(tuple(int(x) for x in sizes), tuple(int(x) for x in ranks))

    cls_map = np.frombuffer(r.take(v, "cls_map"), dtype=np.uint8).astype(np.int64)
    if cls_map.size and cls_map.max() >= c:
        raise InvariantViolation("cls_map references a nonexistent cluster")

    weight_qps = [_read_qp(r, "qp.emb.u0")]
    for i in range(1, c):
        weight_qps += [_read_qp(r, f"qp.emb.u{i}"), _read_qp(r, f"qp.emb.v{i}")]
    weight_qps.append(_read_qp(r, "qp.pos"))
    layer_w_qps = []
    for l in range(L):
        layer_w_qps.append([_read_qp(r, f"qp.layer{l}.{w}")
                            for w in ("wq", "wk", "wv", "wo", "w1", "w2")])
    wcls_qp = _read_qp(r, "qp.w_cls")

    x_emb_qp = _read_qp(r, "qp.act.x_emb")
    layer_aqps = []
    for l in range(L):
        fields = {f: _read_qp(r, f"qp.act.layer{l}.{f}") for f in LayerQps.FIELDS}
        layer_aqps.append(LayerQps(**fields))
    logits_qp = _read_qp(r, "qp.act.logits")

    def r_i8(shape, qp, name):
        n = int(np.prod(shape))
        arr = np.frombuffer(r.take(n, name), dtype=np.int8).reshape(shape).copy()
        return QTensor(arr, qp)

    def r_i32(n, name):
        return np.frombuffer(r.take(4 * n, name), dtype="<i4").astype(np.int32).copy()

    def r_f32(n, name):
        return np.frombuffer(r.take(4 * n, name), dtype="<f4").astype(np.float32).copy()

    qp_it = iter(weight_qps)
    u0 = r_i8((spec.sizes[0], d), next(qp_it), "emb.u0")
    factors = []
    for i in range(1, c):
        ui = r_i8((spec.sizes[i], spec.ranks[i]), next(qp_it), f"emb.u{i}")
        vit = r_i8((spec.ranks[i], d), next(qp_it), f"emb.v{i}")
        factors.append((ui, vit))
    pos = r_i8((s_max, d), next(qp_it), "pos")

    try:
        embedding = ClusteredEmbedding(spec, d, cls_map, u0, factors)
    except Exception as e:
        raise InvariantViolation(str(e)) from e

    layers = []
    for l, wqps in enumerate(layer_w_qps):
        nm = f"layer{l}"
        wq = r_i8((d, d), wqps[0], f"{nm}.wq")
        wk = r_i8((d, d), wqps[1], f"{nm}.wk")
        wv = r_i8((d, d), wqps[2], f"{nm}.wv")
        wo = r_i8((d, d), wqps[3], f"{nm}.wo")
        bq = r_i32(d, f"{nm}.bq")
        bk = r_i32(d, f"{nm}.bk")
        bv = r_i32(d, f"{nm}.bv")
        bo = r_i32(d, f"{nm}.bo")
        w1 = r_i8((d, d_ffn), wqps[4], f"{nm}.w1")
        b1 = r_i32(d_ffn, f"{nm}.b1")
        w2 = r_i8((d_ffn, d), wqps[5], f"{nm}.w2")
        b2 = r_i32(d, f"{nm}.b2")
        ln1_g = r_f32(d, f"{nm}.ln1_gamma")
        ln1_b = r_f32(d, f"{nm}.ln1_beta")
        ln2_g = r_f32(d, f"{nm}.ln2_gamma")
        ln2_b = r_f32(d, f"{nm}.ln2_beta")
        layers.append(
            LayerWeights(wq=wq, wk=wk, wv=wv, wo=wo, bq=bq, bk=bk, bv=bv, bo=bo,
                         w1=w1, b1=b1, w2=w2, b2=b2,
                         ln1_gamma=ln1_g, ln1_beta=ln1_b,
                         ln2_gamma=ln2_g, ln2_beta=ln2_b)
        )

    w_cls = r_i8((d, n_cls), wcls_qp, "w_cls")
    b_cls = r_i32(n_cls, "b_cls")
    if r.off != len(data):
        raise InvariantViolation(f"{len(data) - r.off} trailing bytes after model")

    model = EncoderModel(
        config=cfg, embedding=embedding, pos=pos, layers=layers,
        w_cls=w_cls, b_cls=b_cls,
        act_qps=ActivationQps(x_emb=x_emb_qp, layers=layer_aqps, logits=logits_qp),
    )
    model.validate()
    return model
