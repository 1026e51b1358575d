/**
 * Bit-faithful simulation of the engine's integer inference path: int32
 * accumulation in ascending-k order, half-even requantization through a
 * double-precision multiplier, and double-precision softmax / layernorm /
 * GELU epilogues.  The integer matmul path matches the engine exactly;
 * the float epilogues may differ by library rounding, which is why the
 * cross-component tolerance on logits is 2 LSB rather than 0.
 */

import { PROB_QP, QuantParams, QuantizedModel, buildRowMap, clampI8, rint } from './quantize.js';

type I8Mat = number[][];

function deq(q: I8Mat, qp: QuantParams): number[][] {
  return q.map((row) => row.map((x) => (x - qp.zeroPoint) * qp.scale));
}

/**
 * out[m][n] = requant(sum_k (a-zpa)(b-zpb) + bias[n]); exact integers in
 * f64 (|acc| stays far below 2^53 at these sizes).
 */
function matmulInt(
  a: I8Mat,
  aQp: QuantParams,
  b: I8Mat,
  bQp: QuantParams,
  bias: number[] | null,
  outQp: QuantParams,
  extraScale = 1,
): I8Mat {
  const M = a.length;
  const K = b.length;
  const N = b[0].length;
  const multiplier = (aQp.scale * bQp.scale * extraScale) / outQp.scale;
  const out: I8Mat = [];
  for (let m = 0; m < M; m++) {
    const row: number[] = [];
    for (let n = 0; n < N; n++) {
      let acc = 0;
      for (let k = 0; k < K; k++)
        acc += (a[m][k] - aQp.zeroPoint) * (b[k][n] - bQp.zeroPoint);
      if (bias) acc += bias[n];
      row.push(clampI8(rint(acc * multiplier) + outQp.zeroPoint));
    }
    out.push(row);
  }
  return out;
}

function softmaxRowsInt(scores: I8Mat, inQp: QuantParams, outQp: QuantParams): I8Mat {
  return scores.map((row) => {
    const xs = row.map((c) => (c - inQp.zeroPoint) * inQp.scale);
    const mx = Math.max(...xs);
    const es = xs.map((x) => Math.exp(x - mx));
    const total = es.reduce((s, e) => s + e, 0);
    return es.map((e) => clampI8(rint(e / total / outQp.scale) + outQp.zeroPoint));
  });
}

const LN_EPS = 1e-5;

function layernormRowsInt(
  x: I8Mat, inQp: QuantParams, g: number[], b: number[], outQp: QuantParams,
): I8Mat {
  return x.map((row) => {
    const xf = row.map((c) => (c - inQp.zeroPoint) * inQp.scale);
    const d = xf.length;
    let mean = 0;
    for (const v of xf) mean += v;
    mean /= d;
    let vr = 0;
    for (const v of xf) vr += (v - mean) ** 2;
    vr /= d;
    const inv = 1 / Math.sqrt(vr + LN_EPS);
    return xf.map((v, j) =>
      clampI8(rint(((v - mean) * inv * g[j] + b[j]) / outQp.scale) + outQp.zeroPoint));
  });
}

const GELU_C = Math.sqrt(2 / Math.PI);

function geluLut(inQp: QuantParams, outQp: QuantParams): number[] {
  const lut: number[] = [];
  for (let code = -128; code <= 127; code++) {
    const x = (code - inQp.zeroPoint) * inQp.scale;
    const y = 0.5 * x * (1 + Math.tanh(GELU_C * (x + 0.044715 * x * x * x)));
    lut.push(clampI8(rint(y / outQp.scale) + outQp.zeroPoint));
  }
  return lut;
}

function residualAdd(
  x: I8Mat, xQp: QuantParams, y: I8Mat, yQp: QuantParams, outQp: QuantParams,
): I8Mat {
  return x.map((row, i) =>
    row.map((c, j) => {
      const total = (c - xQp.zeroPoint) * xQp.scale + (y[i][j] - yQp.zeroPoint) * yQp.scale;
      return clampI8(rint(total / outQp.scale) + outQp.zeroPoint);
    }));
}

function embedRow(m: QuantizedModel, rowOf: number[], tok: number, outQp: QuantParams): number[] {
  const cl = m.clsMap[tok];
  const r = rowOf[tok];
  if (cl === 0) {
    return m.u0[r].map((c) => {
      const x = (c - m.u0Qp.zeroPoint) * m.u0Qp.scale;
      return clampI8(rint(x / outQp.scale) + outQp.zeroPoint);
    });
  }
  const f = m.factors[cl - 1];
  return matmulInt([f.u[r]], f.uQp, f.vt, f.vtQp, null, outQp)[0];
}

function columns(mat: I8Mat, c0: number, c1: number): I8Mat {
  return mat.map((row) => row.slice(c0, c1));
}

export interface ReferenceOutput {
  logits: number[]; // dequantized floats
  logitsI8: number[];
}

export function referenceForward(m: QuantizedModel, tokens: number[]): ReferenceOutput {
  const cfg = m.config;
  const s = tokens.length;
  if (s < 1 || s > cfg.sMax) throw new Error(`sequence length ${s} outside [1, ${cfg.sMax}]`);
  for (const t of tokens) if (t < 0 || t >= cfg.v) throw new Error(`token ${t} out of range`);
  const dh = cfg.d / cfg.h;
  const rowOf = buildRowMap(m.clsMap, m.sizes.length);

  // embedding: token row + positional row, summed in float, requantized
  const xQp0 = m.xEmbQp;
  let x: I8Mat = tokens.map((tok, j) => {
    const tokRow = embedRow(m, rowOf, tok, xQp0);
    return tokRow.map((c, jj) => {
      const total =
        (c - xQp0.zeroPoint) * xQp0.scale +
        (m.pos[j][jj] - m.posQp.zeroPoint) * m.posQp.scale;
      return clampI8(rint(total / xQp0.scale) + xQp0.zeroPoint);
    });
  });
  let xQp = xQp0;

  for (const layer of m.layers) {
    const a = layer.act;
    const q = matmulInt(x, xQp, layer.wq, layer.wqQp, layer.bq, a.q);
    const k = matmulInt(x, xQp, layer.wk, layer.wkQp, layer.bk, a.k);
    const v = matmulInt(x, xQp, layer.wv, layer.wvQp, layer.bv, a.v);
    const ctx: I8Mat = Array.from({ length: s }, () => new Array<number>(cfg.d).fill(0));
    for (let head = 0; head < cfg.h; head++) {
      const c0 = head * dh;
      const qh = columns(q, c0, c0 + dh);
      const khT = transposeI8(columns(k, c0, c0 + dh));
      const scores = matmulInt(qh, a.q, khT, a.k, null, a.score, 1 / Math.sqrt(dh));
      const probs = softmaxRowsInt(scores, a.score, PROB_QP);
      const ctxH = matmulInt(probs, PROB_QP, columns(v, c0, c0 + dh), a.v, null, a.ctx);
      for (let i = 0; i < s; i++)
        for (let p = 0; p < dh; p++) ctx[i][c0 + p] = ctxH[i][p];
    }
    const attnOut = matmulInt(ctx, a.ctx, layer.wo, layer.woQp, layer.bo, a.attn_out);
    let r1 = residualAdd(x, xQp, attnOut, a.attn_out, a.resid1);
    x = layernormRowsInt(r1, a.resid1, layer.ln1g, layer.ln1b, a.ln1);
    xQp = a.ln1;

    const h1 = matmulInt(x, xQp, layer.w1, layer.w1Qp, layer.b1, a.ffn1);
    const lut = geluLut(a.ffn1, a.gelu);
    const gAct = h1.map((row) => row.map((c) => lut[c + 128]));
    const h2 = matmulInt(gAct, a.gelu, layer.w2, layer.w2Qp, layer.b2, a.ffn2);
    const r2 = residualAdd(x, xQp, h2, a.ffn2, a.resid2);
    x = layernormRowsInt(r2, a.resid2, layer.ln2g, layer.ln2b, a.ln2);
    xQp = a.ln2;
  }

  const logitsQ = matmulInt([x[0]], xQp, m.wCls, m.wClsQp, m.bCls, m.logitsQp)[0];
  return {
    logitsI8: logitsQ,
    logits: logitsQ.map((c) => (c - m.logitsQp.zeroPoint) * m.logitsQp.scale),
  };
}

function transposeI8(mat: I8Mat): I8Mat {
  const out: I8Mat = Array.from({ length: mat[0].length }, () => new Array(mat.length));
  for (let i = 0; i < mat.length; i++)
    for (let j = 0; j < mat[i].length; j++) out[j][i] = mat[i][j];
  return out;
}
