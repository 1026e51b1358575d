/**
 * Int8 quantization of a compression spec: symmetric per-tensor weight
 * scales, activation scales calibrated by max-abs over a calibration
 * batch, int32 biases folded to the accumulator domain.  Rounding is
 * half-to-even throughout, matching the engine bit-for-bit.
 */

import { Mat } from './linalg.js';
import { EmbeddingFn, EncoderParams, Param, ToyConfig, forward } from './model.js';
import { CalibrationData, CompressionSpec, LayerSpecJson } from './pipeline.js';

export interface QuantParams {
  scale: number; // stored as f32; always pre-rounded with Math.fround
  zeroPoint: number;
}

/** Round half to even (IEEE "banker's rounding"), as the engine does. */
export function rint(x: number): number {
  const f = Math.floor(x);
  const diff = x - f;
  if (diff > 0.5) return f + 1;
  if (diff < 0.5) return f;
  return f % 2 === 0 ? f : f + 1;
}

export function clampI8(x: number): number {
  return Math.max(-128, Math.min(127, x));
}

export function quantizeMat(m: Mat, qp: QuantParams): number[][] {
  return m.map((row) => row.map((x) => clampI8(rint(x / qp.scale) + qp.zeroPoint)));
}

export function dequantizeMat(q: number[][], qp: QuantParams): Mat {
  return q.map((row) => row.map((x) => (x - qp.zeroPoint) * qp.scale));
}

export function maxAbs(m: Mat): number {
  let mx = 0;
  for (const row of m) for (const x of row) mx = Math.max(mx, Math.abs(x));
  return mx;
}

const SCALE_FLOOR = 1e-8;

export function symmetricQp(m: Mat): QuantParams {
  return { scale: Math.fround(Math.max(maxAbs(m) / 127, SCALE_FLOOR)), zeroPoint: 0 };
}

export function calibratedQp(maxAbsSeen: number): QuantParams {
  return { scale: Math.fround(Math.max(maxAbsSeen / 127, SCALE_FLOOR)), zeroPoint: 0 };
}

/** Attention probabilities use the fixed [0, 1] grid the engine expects. */
export const PROB_QP: QuantParams = { scale: 1 / 256, zeroPoint: -128 };

export const ACT_FIELDS = [
  'q', 'k', 'v', 'score', 'prob', 'ctx', 'attn_out',
  'resid1', 'ln1', 'ffn1', 'gelu', 'ffn2', 'resid2', 'ln2',
] as const;

export type ActField = (typeof ACT_FIELDS)[number];

export interface LayerActQps {
  q: QuantParams; k: QuantParams; v: QuantParams; score: QuantParams;
  prob: QuantParams; ctx: QuantParams; attn_out: QuantParams;
  resid1: QuantParams; ln1: QuantParams; ffn1: QuantParams;
  gelu: QuantParams; ffn2: QuantParams; resid2: QuantParams; ln2: QuantParams;
}

export interface QuantizedLayer {
  wq: number[][]; wk: number[][]; wv: number[][]; wo: number[][];
  wqQp: QuantParams; wkQp: QuantParams; wvQp: QuantParams; woQp: QuantParams;
  bq: number[]; bk: number[]; bv: number[]; bo: number[];
  w1: number[][]; w1Qp: QuantParams; b1: number[];
  w2: number[][]; w2Qp: QuantParams; b2: number[];
  ln1g: number[]; ln1b: number[]; ln2g: number[]; ln2b: number[];
  act: LayerActQps;
}

export interface QuantizedModel {
  config: CompressionSpec['config'];
  sizes: number[];
  ranks: number[];
  clsMap: number[];
  u0: number[][];
  u0Qp: QuantParams;
  factors: { u: number[][]; uQp: QuantParams; vt: number[][]; vtQp: QuantParams }[];
  pos: number[][];
  posQp: QuantParams;
  layers: QuantizedLayer[];
  wCls: number[][];
  wClsQp: QuantParams;
  bCls: number[];
  xEmbQp: QuantParams;
  logitsQp: QuantParams;
}

/** Float embedding of the compressed spec, for calibration runs. */
function specEmbedding(spec: CompressionSpec): EmbeddingFn {
  const rowOf = buildRowMap(spec.clsMap, spec.sizes.length);
  return {
    row(tok: number): number[] {
      const i = spec.clsMap[tok];
      const r = rowOf[tok];
      if (i === 0) return spec.u0[r].slice();
      const { u, vt } = spec.factors[i - 1];
      const d = vt[0].length;
      const out = new Array<number>(d).fill(0);
      for (let l = 0; l < u[r].length; l++)
        for (let j = 0; j < d; j++) out[j] += u[r][l] * vt[l][j];
      return out;
    },
    back() {
      throw new Error('calibration embedding is forward-only');
    },
  };
}

export function buildRowMap(clsMap: number[], c: number): number[] {
  const next = new Array(c).fill(0);
  return clsMap.map((cl) => next[cl]++);
}

function specEncoderParams(spec: CompressionSpec): { cfg: ToyConfig; params: EncoderParams } {
  const cfg: ToyConfig = {
    v: spec.config.v, d: spec.config.d, h: spec.config.h, L: spec.config.L,
    dffn: spec.config.dffn, sMax: spec.config.sMax, nCls: spec.config.nCls,
  };
  const p = (m: Mat) => new Param(m.map((r) => r.slice()));
  const row = (r: number[]) => new Param([r.slice()]);
  return {
    cfg,
    params: {
      pos: p(spec.pos),
      layers: spec.layers.map((l: LayerSpecJson) => ({
        wq: p(l.wq), wk: p(l.wk), wv: p(l.wv), wo: p(l.wo),
        bq: row(l.bq), bk: row(l.bk), bv: row(l.bv), bo: row(l.bo),
        w1: p(l.w1), b1: row(l.b1), w2: p(l.w2), b2: row(l.b2),
        ln1g: row(l.ln1g), ln1b: row(l.ln1b), ln2g: row(l.ln2g), ln2b: row(l.ln2b),
      })),
      wCls: p(spec.wCls),
      bCls: row(spec.bCls),
    },
  };
}

/** Max-abs of every named activation over the calibration batch. */
export function calibrateActivations(
  spec: CompressionSpec,
  calib: CalibrationData,
): { xEmb: number; logits: number; layers: Record<ActField, number>[] } {
  const { cfg, params } = specEncoderParams(spec);
  const emb = specEmbedding(spec);
  let xEmb = 0;
  let logits = 0;
  const layers: Record<ActField, number>[] = Array.from({ length: cfg.L }, () =>
    Object.fromEntries(ACT_FIELDS.map((f) => [f, 0])) as Record<ActField, number>);
  for (const tokens of calib.sequences) {
    const perName: Record<string, number> = {};
    forward(cfg, params, emb, tokens, (name, values) => {
      const mx = maxAbs(values);
      if (name === 'x_emb') xEmb = Math.max(xEmb, mx);
      else if (name === 'logits') logits = Math.max(logits, mx);
      else {
        const layer = perName[name] ?? 0;
        perName[name] = layer + 1;
        const rec = layers[layer];
        rec[name as ActField] = Math.max(rec[name as ActField], mx);
      }
    });
  }
  return { xEmb, logits, layers };
}

function quantizeBias(bias: number[], sIn: number, sW: number): number[] {
  return bias.map((b) => rint(b / (sIn * sW)));
}

export function quantizeSpec(spec: CompressionSpec, calib: CalibrationData): QuantizedModel {
  for (const layer of spec.layers)
    for (const m of [layer.wq, layer.wk, layer.wv, layer.wo, layer.w1, layer.w2])
      for (const r of m)
        for (const x of r)
          if (!Number.isFinite(x)) throw new Error('non-finite weight');

  const stats = calibrateActivations(spec, calib);
  const xEmbQp = calibratedQp(stats.xEmb);
  const logitsQp = calibratedQp(stats.logits);

  const u0Qp = symmetricQp(spec.u0);
  const posQp = symmetricQp(spec.pos);
  const layers: QuantizedLayer[] = [];
  let inQp = xEmbQp;
  for (let l = 0; l < spec.layers.length; l++) {
    const ls = spec.layers[l];
    const st = stats.layers[l];
    const act: LayerActQps = {
      q: calibratedQp(st.q), k: calibratedQp(st.k), v: calibratedQp(st.v),
      score: calibratedQp(st.score), prob: PROB_QP, ctx: calibratedQp(st.ctx),
      attn_out: calibratedQp(st.attn_out), resid1: calibratedQp(st.resid1),
      ln1: calibratedQp(st.ln1), ffn1: calibratedQp(st.ffn1),
      gelu: calibratedQp(st.gelu), ffn2: calibratedQp(st.ffn2),
      resid2: calibratedQp(st.resid2), ln2: calibratedQp(st.ln2),
    };
    const wqQp = symmetricQp(ls.wq);
    const wkQp = symmetricQp(ls.wk);
    const wvQp = symmetricQp(ls.wv);
    const woQp = symmetricQp(ls.wo);
    const w1Qp = symmetricQp(ls.w1);
    const w2Qp = symmetricQp(ls.w2);
    layers.push({
      wq: quantizeMat(ls.wq, wqQp), wk: quantizeMat(ls.wk, wkQp),
      wv: quantizeMat(ls.wv, wvQp), wo: quantizeMat(ls.wo, woQp),
      wqQp, wkQp, wvQp, woQp,
      bq: quantizeBias(ls.bq, inQp.scale, wqQp.scale),
      bk: quantizeBias(ls.bk, inQp.scale, wkQp.scale),
      bv: quantizeBias(ls.bv, inQp.scale, wvQp.scale),
      bo: quantizeBias(ls.bo, act.ctx.scale, woQp.scale),
      w1: quantizeMat(ls.w1, w1Qp), w1Qp,
      b1: quantizeBias(ls.b1, act.ln1.scale, w1Qp.scale),
      w2: quantizeMat(ls.w2, w2Qp), w2Qp,
      b2: quantizeBias(ls.b2, act.gelu.scale, w2Qp.scale),
      ln1g: ls.ln1g.map(Math.fround), ln1b: ls.ln1b.map(Math.fround),
      ln2g: ls.ln2g.map(Math.fround), ln2b: ls.ln2b.map(Math.fround),
      act,
    });
    inQp = act.ln2;
  }
  const wClsQp = symmetricQp(spec.wCls);
  return {
    config: spec.config,
    sizes: spec.sizes.slice(),
    ranks: spec.ranks.slice(),
    clsMap: spec.clsMap.slice(),
    u0: quantizeMat(spec.u0, u0Qp),
    u0Qp,
    factors: spec.factors.map((f) => {
      const uQp = symmetricQp(f.u);
      const vtQp = symmetricQp(f.vt);
      return { u: quantizeMat(f.u, uQp), uQp, vt: quantizeMat(f.vt, vtQp), vtQp };
    }),
    pos: quantizeMat(spec.pos, posQp),
    posQp,
    layers,
    wCls: quantizeMat(spec.wCls, wClsQp),
    wClsQp,
    bCls: quantizeBias(spec.bCls, inQp.scale, wClsQp.scale),
    xEmbQp,
    logitsQp,
  };
}
