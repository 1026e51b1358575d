/**
 * Writer for the engine's `.mcub` binary model format.  Little-endian,
 * canonical section order:
 *
 *   magic "MCUB" | version u16
 *   config: v d h L d_ffn s_max n_cls c (u32), sizes[c] u32, ranks[c] u32
 *   cls_map: v bytes
 *   quant-param table: (f32 scale, i32 zero_point) per tensor
 *     weights: emb.u0, (emb.u_i, emb.v_i)..., pos, per-layer
 *              wq wk wv wo w1 w2, w_cls
 *     activations: x_emb, 14 per layer (q k v score prob ctx attn_out
 *              resid1 ln1 ffn1 gelu ffn2 resid2 ln2), logits
 *   weight sections: embedding, pos, per-layer QKVO + i32 biases,
 *              FFN1/FFN2 + i32 biases, f32 LN gamma/beta, classifier
 */

import { ACT_FIELDS, QuantParams, QuantizedModel } from './quantize.js';

export const MAGIC = 'MCUB';
export const VERSION = 1;

class ByteSink {
  private chunks: Buffer[] = [];

  ascii(s: string): void {
    this.chunks.push(Buffer.from(s, 'ascii'));
  }

  u16(x: number): void {
    const b = Buffer.alloc(2);
    b.writeUInt16LE(x);
    this.chunks.push(b);
  }

  u32(...xs: number[]): void {
    const b = Buffer.alloc(4 * xs.length);
    xs.forEach((x, i) => b.writeUInt32LE(x >>> 0, 4 * i));
    this.chunks.push(b);
  }

  i8(rows: number[][]): void {
    const flat = rows.flat();
    const b = Buffer.alloc(flat.length);
    flat.forEach((x, i) => b.writeInt8(x, i));
    this.chunks.push(b);
  }

  u8(xs: number[]): void {
    this.chunks.push(Buffer.from(xs));
  }

  i32(xs: number[]): void {
    const b = Buffer.alloc(4 * xs.length);
    xs.forEach((x, i) => b.writeInt32LE(x | 0, 4 * i));
    this.chunks.push(b);
  }

  f32(xs: number[]): void {
    const b = Buffer.alloc(4 * xs.length);
    xs.forEach((x, i) => b.writeFloatLE(x, 4 * i));
    this.chunks.push(b);
  }

  qp(qp: QuantParams): void {
    const b = Buffer.alloc(8);
    b.writeFloatLE(qp.scale, 0);
    b.writeInt32LE(qp.zeroPoint, 4);
    this.chunks.push(b);
  }

  bytes(): Buffer {
    return Buffer.concat(this.chunks);
  }
}

export function serializeModel(m: QuantizedModel): Buffer {
  const { config: cfg } = m;
  const c = m.sizes.length;
  const sink = new ByteSink();
  sink.ascii(MAGIC);
  sink.u16(VERSION);
  sink.u32(cfg.v, cfg.d, cfg.h, cfg.L, cfg.dffn, cfg.sMax, cfg.nCls, c);
  sink.u32(...m.sizes);
  sink.u32(...m.ranks);
  sink.u8(m.clsMap);

  sink.qp(m.u0Qp);
  for (const f of m.factors) {
    sink.qp(f.uQp);
    sink.qp(f.vtQp);
  }
  sink.qp(m.posQp);
  for (const l of m.layers) {
    sink.qp(l.wqQp);
    sink.qp(l.wkQp);
    sink.qp(l.wvQp);
    sink.qp(l.woQp);
    sink.qp(l.w1Qp);
    sink.qp(l.w2Qp);
  }
  sink.qp(m.wClsQp);

  sink.qp(m.xEmbQp);
  for (const l of m.layers) for (const f of ACT_FIELDS) sink.qp(l.act[f]);
  sink.qp(m.logitsQp);

  sink.i8(m.u0);
  for (const f of m.factors) {
    sink.i8(f.u);
    sink.i8(f.vt);
  }
  sink.i8(m.pos);
  for (const l of m.layers) {
    sink.i8(l.wq);
    sink.i8(l.wk);
    sink.i8(l.wv);
    sink.i8(l.wo);
    sink.i32(l.bq);
    sink.i32(l.bk);
    sink.i32(l.bv);
    sink.i32(l.bo);
    sink.i8(l.w1);
    sink.i32(l.b1);
    sink.i8(l.w2);
    sink.i32(l.b2);
    sink.f32(l.ln1g);
    sink.f32(l.ln1b);
    sink.f32(l.ln2g);
    sink.f32(l.ln2b);
  }
  sink.i8(m.wCls);
  sink.i32(m.bCls);
  return sink.bytes();
}

/** Analytic byte size; serializeModel output must match exactly. */
export function modelFileSize(
  cfg: QuantizedModel['config'],
  sizes: number[],
  ranks: number[],
): number {
  const c = sizes.length;
  let n = 4 + 2;
  n += 4 * (8 + 2 * c);
  n += cfg.v;
  const nWeightQps = 1 + 2 * (c - 1) + 1 + 6 * cfg.L + 1;
  const nActQps = 1 + 14 * cfg.L + 1;
  n += 8 * (nWeightQps + nActQps);
  n += sizes[0] * cfg.d;
  for (let i = 1; i < c; i++) n += ranks[i] * (sizes[i] + cfg.d);
  n += cfg.sMax * cfg.d;
  let perLayer = 4 * cfg.d * cfg.d + 4 * 4 * cfg.d;
  perLayer += cfg.d * cfg.dffn + 4 * cfg.dffn + cfg.dffn * cfg.d + 4 * cfg.d;
  perLayer += 4 * 4 * cfg.d;
  n += cfg.L * perLayer;
  n += cfg.d * cfg.nCls + 4 * cfg.nCls;
  return n;
}
