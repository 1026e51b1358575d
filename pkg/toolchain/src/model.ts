/**
 * Double-precision toy transformer encoder with hand-written backward
 * passes.  The dataflow mirrors the inference engine exactly (per-head
 * attention, post-norm residuals, tanh-GELU, first-token pooling) so a
 * model trained here quantizes and exports cleanly.
 */

import { Mat, matmul, shape, transpose, zeros } from './linalg.js';

export interface ToyConfig {
  v: number;
  d: number;
  h: number;
  L: number;
  dffn: number;
  sMax: number;
  nCls: number;
}

export class Param {
  value: Mat;
  grad: Mat;
  // AdamW state
  m: Mat;
  s: Mat;

  constructor(value: Mat) {
    this.value = value;
    const [r, c] = shape(value);
    this.grad = zeros(r, c);
    this.m = zeros(r, c);
    this.s = zeros(r, c);
  }

  zeroGrad(): void {
    for (const row of this.grad) row.fill(0);
  }
}

export interface AdamOpts {
  lr: number;
  beta1?: number;
  beta2?: number;
  eps?: number;
  weightDecay?: number;
}

export class AdamW {
  private t = 0;
  constructor(private params: Param[], private opts: AdamOpts) {}

  step(): void {
    const { lr, beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weightDecay = 0 } = this.opts;
    this.t += 1;
    const bc1 = 1 - Math.pow(beta1, this.t);
    const bc2 = 1 - Math.pow(beta2, this.t);
    for (const p of this.params) {
      for (let i = 0; i < p.value.length; i++) {
        for (let j = 0; j < p.value[i].length; j++) {
          const g = p.grad[i][j];
          p.m[i][j] = beta1 * p.m[i][j] + (1 - beta1) * g;
          p.s[i][j] = beta2 * p.s[i][j] + (1 - beta2) * g * g;
          const mHat = p.m[i][j] / bc1;
          const sHat = p.s[i][j] / bc2;
          p.value[i][j] -= lr * (mHat / (Math.sqrt(sHat) + eps) + weightDecay * p.value[i][j]);
        }
      }
    }
  }

  zeroGrad(): void {
    for (const p of this.params) p.zeroGrad();
  }
}

export interface LayerParams {
  wq: Param;
  wk: Param;
  wv: Param;
  wo: Param;
  bq: Param;
  bk: Param;
  bv: Param;
  bo: Param;
  w1: Param;
  b1: Param;
  w2: Param;
  b2: Param;
  ln1g: Param;
  ln1b: Param;
  ln2g: Param;
  ln2b: Param;
}

export interface EncoderParams {
  pos: Param; // sMax x d
  layers: LayerParams[];
  wCls: Param; // d x nCls
  bCls: Param; // 1 x nCls
}

export function layerParamList(lp: LayerParams): Param[] {
  return [
    lp.wq, lp.wk, lp.wv, lp.wo, lp.bq, lp.bk, lp.bv, lp.bo,
    lp.w1, lp.b1, lp.w2, lp.b2, lp.ln1g, lp.ln1b, lp.ln2g, lp.ln2b,
  ];
}

export function encoderParamList(ep: EncoderParams): Param[] {
  return [ep.pos, ...ep.layers.flatMap(layerParamList), ep.wCls, ep.bCls];
}

export function initEncoderParams(cfg: ToyConfig, randn: () => number): EncoderParams {
  const init = (r: number, c: number, std: number): Param => {
    const m = zeros(r, c);
    for (let i = 0; i < r; i++) for (let j = 0; j < c; j++) m[i][j] = std * randn();
    return new Param(m);
  };
  const ones = (n: number): Param => new Param([new Array(n).fill(1)]);
  const zero = (n: number): Param => new Param([new Array(n).fill(0)]);
  const std = 0.08;
  const layers: LayerParams[] = [];
  for (let l = 0; l < cfg.L; l++) {
    layers.push({
      wq: init(cfg.d, cfg.d, std),
      wk: init(cfg.d, cfg.d, std),
      wv: init(cfg.d, cfg.d, std),
      wo: init(cfg.d, cfg.d, std),
      bq: zero(cfg.d), bk: zero(cfg.d), bv: zero(cfg.d), bo: zero(cfg.d),
      w1: init(cfg.d, cfg.dffn, std),
      b1: zero(cfg.dffn),
      w2: init(cfg.dffn, cfg.d, std),
      b2: zero(cfg.d),
      ln1g: ones(cfg.d), ln1b: zero(cfg.d),
      ln2g: ones(cfg.d), ln2b: zero(cfg.d),
    });
  }
  return {
    pos: init(cfg.sMax, cfg.d, 0.02),
    layers,
    wCls: init(cfg.d, cfg.nCls, std),
    bCls: zero(cfg.nCls),
  };
}

/**
 * Pluggable embedding: `row` produces the d-vector for a token, `back`
 * routes the row gradient into whatever parameterizes it (a full table,
 * an alpha-mixture, or a beta-scaled factorization).
 */
export interface EmbeddingFn {
  row(tok: number): number[];
  back(tok: number, grad: number[]): void;
}

export function tableEmbedding(table: Param): EmbeddingFn {
  return {
    row: (tok) => table.value[tok].slice(),
    back: (tok, g) => {
      for (let j = 0; j < g.length; j++) table.grad[tok][j] += g[j];
    },
  };
}

const GELU_C = Math.sqrt(2 / Math.PI);

export function geluF(x: number): number {
  return 0.5 * x * (1 + Math.tanh(GELU_C * (x + 0.044715 * x * x * x)));
}

function geluGrad(x: number): number {
  const u = GELU_C * (x + 0.044715 * x * x * x);
  const t = Math.tanh(u);
  const du = GELU_C * (1 + 3 * 0.044715 * x * x);
  return 0.5 * (1 + t) + 0.5 * x * (1 - t * t) * du;
}

export function softmaxVec(x: number[]): number[] {
  const mx = Math.max(...x);
  const e = x.map((v) => Math.exp(v - mx));
  const total = e.reduce((a, b) => a + b, 0);
  return e.map((v) => v / total);
}

const LN_EPS = 1e-5;

interface LnCache {
  xhat: Mat;
  invStd: number[];
}

function layerNorm(x: Mat, g: number[], b: number[]): { y: Mat; cache: LnCache } {
  const [s, d] = shape(x);
  const y = zeros(s, d);
  const xhat = zeros(s, d);
  const invStd: number[] = [];
  for (let i = 0; i < s; i++) {
    let mean = 0;
    for (let j = 0; j < d; j++) mean += x[i][j];
    mean /= d;
    let vr = 0;
    for (let j = 0; j < d; j++) vr += (x[i][j] - mean) ** 2;
    vr /= d;
    const inv = 1 / Math.sqrt(vr + LN_EPS);
    invStd.push(inv);
    for (let j = 0; j < d; j++) {
      xhat[i][j] = (x[i][j] - mean) * inv;
      y[i][j] = xhat[i][j] * g[j] + b[j];
    }
  }
  return { y, cache: { xhat, invStd } };
}

function layerNormBack(
  dy: Mat, cache: LnCache, g: number[], dg: number[], db: number[],
): Mat {
  const [s, d] = shape(dy);
  const dx = zeros(s, d);
  for (let i = 0; i < s; i++) {
    let sumDxhat = 0;
    let sumDxhatXhat = 0;
    for (let j = 0; j < d; j++) {
      dg[j] += dy[i][j] * cache.xhat[i][j];
      db[j] += dy[i][j];
      const dxhat = dy[i][j] * g[j];
      sumDxhat += dxhat;
      sumDxhatXhat += dxhat * cache.xhat[i][j];
    }
    for (let j = 0; j < d; j++) {
      const dxhat = dy[i][j] * g[j];
      dx[i][j] = cache.invStd[i] * (dxhat - sumDxhat / d - (cache.xhat[i][j] * sumDxhatXhat) / d);
    }
  }
  return dx;
}

/** Optional probe for calibration: called with every named activation. */
export type ActivationRecorder = (name: string, values: Mat) => void;

interface LayerCache {
  xIn: Mat;
  q: Mat;
  k: Mat;
  vv: Mat;
  probs: Mat[]; // per head, s x s
  ctx: Mat; // concat s x d
  r1: Mat;
  ln1: LnCache;
  x1: Mat;
  h1: Mat;
  gAct: Mat;
  r2: Mat;
  ln2: LnCache;
  x2: Mat;
}

export interface ForwardResult {
  logits: number[];
  /** Accumulates parameter and embedding gradients for one sequence. */
  backward(dLogits: number[]): void;
}

export function forward(
  cfg: ToyConfig,
  params: EncoderParams,
  emb: EmbeddingFn,
  tokens: number[],
  record?: ActivationRecorder,
): ForwardResult {
  const s = tokens.length;
  const { d, h } = cfg;
  const dh = d / h;

  const embRows: number[][] = tokens.map((t) => emb.row(t));
  const x0 = zeros(s, d);
  for (let i = 0; i < s; i++)
    for (let j = 0; j < d; j++) x0[i][j] = embRows[i][j] + params.pos.value[i][j];
  record?.('x_emb', x0);

  let x = x0;
  const layerCaches: LayerCache[] = [];
  for (let l = 0; l < cfg.L; l++) {
    const lp = params.layers[l];
    const q = matmul(x, lp.wq.value);
    const k = matmul(x, lp.wk.value);
    const vv = matmul(x, lp.wv.value);
    for (let i = 0; i < s; i++)
      for (let j = 0; j < d; j++) {
        q[i][j] += lp.bq.value[0][j];
        k[i][j] += lp.bk.value[0][j];
        vv[i][j] += lp.bv.value[0][j];
      }
    record?.('q', q);
    record?.('k', k);
    record?.('v', vv);

    const probs: Mat[] = [];
    const ctx = zeros(s, d);
    const invRoot = 1 / Math.sqrt(dh);
    const allScores = zeros(h * s, s);
    for (let head = 0; head < h; head++) {
      const c0 = head * dh;
      const scores = zeros(s, s);
      for (let i = 0; i < s; i++)
        for (let j2 = 0; j2 < s; j2++) {
          let acc = 0;
          for (let p = 0; p < dh; p++) acc += q[i][c0 + p] * k[j2][c0 + p];
          scores[i][j2] = acc * invRoot;
          allScores[head * s + i][j2] = scores[i][j2];
        }
      const pMat = scores.map(softmaxVec);
      probs.push(pMat);
      for (let i = 0; i < s; i++)
        for (let p = 0; p < dh; p++) {
          let acc = 0;
          for (let j2 = 0; j2 < s; j2++) acc += pMat[i][j2] * vv[j2][c0 + p];
          ctx[i][c0 + p] = acc;
        }
    }
    record?.('score', allScores);
    record?.('prob', probs.flat().map((r) => r.slice()));
    record?.('ctx', ctx);

    const attnOut = matmul(ctx, lp.wo.value);
    for (let i = 0; i < s; i++)
      for (let j = 0; j < d; j++) attnOut[i][j] += lp.bo.value[0][j];
    record?.('attn_out', attnOut);
    const r1 = zeros(s, d);
    for (let i = 0; i < s; i++)
      for (let j = 0; j < d; j++) r1[i][j] = x[i][j] + attnOut[i][j];
    record?.('resid1', r1);
    const { y: x1, cache: ln1 } = layerNorm(r1, lp.ln1g.value[0], lp.ln1b.value[0]);
    record?.('ln1', x1);

    const h1 = matmul(x1, lp.w1.value);
    for (let i = 0; i < s; i++)
      for (let j = 0; j < cfg.dffn; j++) h1[i][j] += lp.b1.value[0][j];
    record?.('ffn1', h1);
    const gAct = h1.map((row) => row.map(geluF));
    record?.('gelu', gAct);
    const h2 = matmul(gAct, lp.w2.value);
    for (let i = 0; i < s; i++)
      for (let j = 0; j < d; j++) h2[i][j] += lp.b2.value[0][j];
    record?.('ffn2', h2);
    const r2 = zeros(s, d);
    for (let i = 0; i < s; i++)
      for (let j = 0; j < d; j++) r2[i][j] = x1[i][j] + h2[i][j];
    record?.('resid2', r2);
    const { y: x2, cache: ln2 } = layerNorm(r2, lp.ln2g.value[0], lp.ln2b.value[0]);
    record?.('ln2', x2);

    layerCaches.push({ xIn: x, q, k, vv, probs, ctx, r1, ln1, x1, h1, gAct, r2, ln2, x2 });
    x = x2;
  }

  const pooled = x[0];
  const logits: number[] = [];
  for (let j = 0; j < cfg.nCls; j++) {
    let acc = params.bCls.value[0][j];
    for (let p = 0; p < d; p++) acc += pooled[p] * params.wCls.value[p][j];
    logits.push(acc);
  }
  record?.('logits', [logits]);

  const backward = (dLogits: number[]): void => {
    let dx = zeros(s, d);
    for (let j = 0; j < cfg.nCls; j++) {
      params.bCls.grad[0][j] += dLogits[j];
      for (let p = 0; p < d; p++) {
        params.wCls.grad[p][j] += pooled[p] * dLogits[j];
        dx[0][p] += params.wCls.value[p][j] * dLogits[j];
      }
    }

    for (let l = cfg.L - 1; l >= 0; l--) {
      const lp = params.layers[l];
      const cc = layerCaches[l];
      // LN2
      const dr2 = layerNormBack(dx, cc.ln2, lp.ln2g.value[0], lp.ln2g.grad[0], lp.ln2b.grad[0]);
      // r2 = x1 + h2
      const dh2 = dr2;
      let dx1 = dr2.map((row) => row.slice());
      // h2 = gelu(h1) . w2 + b2
      const dgAct = matmul(dh2, transpose(lp.w2.value));
      addGrad(lp.w2.grad, matmul(transpose(cc.gAct), dh2));
      addBiasGrad(lp.b2.grad[0], dh2);
      const dh1 = zeros(s, cfg.dffn);
      for (let i = 0; i < s; i++)
        for (let j = 0; j < cfg.dffn; j++) dh1[i][j] = dgAct[i][j] * geluGrad(cc.h1[i][j]);
      addGrad(lp.w1.grad, matmul(transpose(cc.x1), dh1));
      addBiasGrad(lp.b1.grad[0], dh1);
      addInto2(dx1, matmul(dh1, transpose(lp.w1.value)));
      // LN1
      const dr1 = layerNormBack(dx1, cc.ln1, lp.ln1g.value[0], lp.ln1g.grad[0], lp.ln1b.grad[0]);
      // r1 = xIn + attnOut
      const dAttnOut = dr1;
      const dxIn = dr1.map((row) => row.slice());
      // attnOut = ctx . wo + bo
      const dCtx = matmul(dAttnOut, transpose(lp.wo.value));
      addGrad(lp.wo.grad, matmul(transpose(cc.ctx), dAttnOut));
      addBiasGrad(lp.bo.grad[0], dAttnOut);

      const dq = zeros(s, d);
      const dk = zeros(s, d);
      const dv = zeros(s, d);
      const dhh = d / h;
      const invRoot = 1 / Math.sqrt(dhh);
      for (let head = 0; head < h; head++) {
        const c0 = head * dhh;
        const pMat = cc.probs[head];
        // dP = dCtx_h . V_h^T; dV_h += P^T . dCtx_h
        const dP = zeros(s, s);
        for (let i = 0; i < s; i++)
          for (let j2 = 0; j2 < s; j2++) {
            let acc = 0;
            for (let p = 0; p < dhh; p++) acc += dCtx[i][c0 + p] * cc.vv[j2][c0 + p];
            dP[i][j2] = acc;
          }
        for (let j2 = 0; j2 < s; j2++)
          for (let p = 0; p < dhh; p++) {
            let acc = 0;
            for (let i = 0; i < s; i++) acc += pMat[i][j2] * dCtx[i][c0 + p];
            dv[j2][c0 + p] += acc;
          }
        // softmax backward per row
        for (let i = 0; i < s; i++) {
          let dot = 0;
          for (let j2 = 0; j2 < s; j2++) dot += dP[i][j2] * pMat[i][j2];
          for (let j2 = 0; j2 < s; j2++) {
            const dS = pMat[i][j2] * (dP[i][j2] - dot) * invRoot;
            for (let p = 0; p < dhh; p++) {
              dq[i][c0 + p] += dS * cc.k[j2][c0 + p];
              dk[j2][c0 + p] += dS * cc.q[i][c0 + p];
            }
          }
        }
      }
      addGrad(lp.wq.grad, matmul(transpose(cc.xIn), dq));
      addGrad(lp.wk.grad, matmul(transpose(cc.xIn), dk));
      addGrad(lp.wv.grad, matmul(transpose(cc.xIn), dv));
      addBiasGrad(lp.bq.grad[0], dq);
      addBiasGrad(lp.bk.grad[0], dk);
      addBiasGrad(lp.bv.grad[0], dv);
      addInto2(dxIn, matmul(dq, transpose(lp.wq.value)));
      addInto2(dxIn, matmul(dk, transpose(lp.wk.value)));
      addInto2(dxIn, matmul(dv, transpose(lp.wv.value)));
      dx = dxIn;
    }

    for (let i = 0; i < s; i++) {
      for (let j = 0; j < d; j++) params.pos.grad[i][j] += dx[i][j];
      emb.back(tokens[i], dx[i]);
    }
  };

  return { logits, backward };
}

function addGrad(dst: Mat, src: Mat): void {
  for (let i = 0; i < dst.length; i++)
    for (let j = 0; j < dst[i].length; j++) dst[i][j] += src[i][j];
}

function addBiasGrad(dst: number[], rows: Mat): void {
  for (const row of rows) for (let j = 0; j < dst.length; j++) dst[j] += row[j];
}

function addInto2(dst: Mat, src: Mat): void {
  addGrad(dst, src);
}

/**
 * Knowledge-distillation objective: cross-entropy against the hard label
 * plus T^2-weighted KL from the teacher's softened distribution, equal
 * weights.  Returns the scalar loss and its gradient w.r.t. the student
 * logits.
 */
export function distillLoss(
  studentLogits: number[],
  teacherLogits: number[],
  label: number,
  temperature: number,
): { loss: number; dLogits: number[] } {
  if (studentLogits.length !== teacherLogits.length)
    throw new Error('student and teacher class counts disagree');
  const T = temperature;
  const ps = softmaxVec(studentLogits);
  const psT = softmaxVec(studentLogits.map((x) => x / T));
  const ptT = softmaxVec(teacherLogits.map((x) => x / T));
  const ce = -Math.log(Math.max(ps[label], 1e-300));
  let kl = 0;
  for (let j = 0; j < ps.length; j++)
    if (ptT[j] > 0) kl += ptT[j] * Math.log(ptT[j] / Math.max(psT[j], 1e-300));
  const loss = ce + T * T * kl;
  const dLogits = ps.map((p, j) => p - (j === label ? 1 : 0) + T * (psT[j] - ptT[j]));
  return { loss, dLogits };
}
