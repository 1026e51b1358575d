/**
 * Two-stage differentiable search for a clustered low-rank embedding:
 * stage 1 learns a token-to-cluster assignment (alpha, a per-token
 * simplex over candidate tables at geometrically decreasing ranks),
 * stage 2 learns per-cluster kept-rank counts (beta, soft gates on the
 * singular directions).  Both stages alternate plain weight steps with
 * architecture steps on a size-penalized distillation objective.
 */

import { Mat, lowRankFactorize, matmul, zeros } from './linalg.js';
import {
  AdamW,
  EmbeddingFn,
  EncoderParams,
  Param,
  ToyConfig,
  distillLoss,
  encoderParamList,
  forward,
  softmaxVec,
} from './model.js';
import { Rng } from './rng.js';
import { Example, ToyTask, makeBatch } from './toytask.js';
import { svd } from './linalg.js';

export interface NasConfig {
  c: number; // cluster count
  div: number; // rank divisor: candidate rank for cluster i is d / div^i
  lambda: number; // size-penalty weight
  betaStar: number; // keep threshold for singular-direction gates
  steps: number; // alternating steps per stage
  lr: number;
  archLr: number;
  batchSize: number;
  temperature: number;
  iterateStages: boolean; // ablation only; a single pass is the default
}

export const DEFAULT_NAS: NasConfig = {
  c: 4,
  div: 4,
  lambda: 1e-4,
  betaStar: 0.5,
  steps: 120,
  lr: 5e-5,
  archLr: 5e-2,
  batchSize: 32,
  temperature: 2,
  iterateStages: false,
};

export class ArchParams {
  alphaLogits: Param; // v x c
  betaLogits: Param; // c x d (row 0 unused; cluster 0 is unfactorized)
  betaStar: number[];
  lambda: number;

  constructor(v: number, c: number, d: number, betaStar: number, lambda: number) {
    this.alphaLogits = new Param(zeros(v, c));
    this.betaLogits = new Param(zeros(c, d));
    this.betaStar = new Array(c).fill(betaStar);
    this.lambda = lambda;
  }

  /** Row-softmax of the logits: each row lies on the simplex. */
  alpha(): Mat {
    return this.alphaLogits.value.map(softmaxVec);
  }

  /** Sigmoid of the logits: entries in (0, 1). */
  beta(): Mat {
    return this.betaLogits.value.map((row) => row.map((x) => 1 / (1 + Math.exp(-x))));
  }
}

/**
 * Differentiable embedding-size estimate:
 *   cluster 0 (unfactorized): d * sum_j alpha[j][0]
 *   cluster i >= 1:           sum_l beta[i][l] * (d + sum_j alpha[j][i])
 * At one-hot alpha and 0/1 beta this equals the engine's parameter count
 * of the hardened layout exactly.
 */
export function sizePenalty(alpha: Mat, beta: Mat, d: number): number {
  const c = beta.length;
  const colSums = new Array(c).fill(0);
  for (const row of alpha) for (let i = 0; i < c; i++) colSums[i] += row[i];
  let total = d * colSums[0];
  for (let i = 1; i < c; i++) {
    let betaSum = 0;
    for (const b of beta[i]) betaSum += b;
    total += betaSum * (d + colSums[i]);
  }
  return total;
}

export interface Hardened {
  cls: number[]; // token -> cluster
  ranks: number[]; // per cluster; ranks[0] = d
}

/** Deterministic discretization: argmax alpha (ties to the lowest index),
 * rank i = number of beta gates above the cluster's threshold, min 1. */
export function harden(arch: ArchParams, d: number, maxRanks?: number[]): Hardened {
  const alpha = arch.alpha();
  const beta = arch.beta();
  const c = beta.length;
  const cls = alpha.map((row) => {
    let best = 0;
    for (let i = 1; i < c; i++) if (row[i] > row[best]) best = i;
    return best;
  });
  const ranks = [d];
  for (let i = 1; i < c; i++) {
    const cap = maxRanks ? maxRanks[i] : d;
    let kept = 0;
    for (let l = 0; l < cap; l++) if (beta[i][l] > arch.betaStar[i]) kept += 1;
    ranks.push(Math.min(Math.max(kept, 1), cap));
  }
  return { cls, ranks };
}

/** Accumulate d(lambda * penalty)/d(alphaLogits, betaLogits) into the
 * arch grads; `betaMask[i][l]` zeroes gates beyond a cluster's spectrum. */
export function addPenaltyGrads(arch: ArchParams, d: number, betaMask?: Mat): void {
  const alpha = arch.alpha();
  const beta = arch.beta();
  const c = beta.length;
  const lam = arch.lambda;
  const colSums = new Array(c).fill(0);
  for (const row of alpha) for (let i = 0; i < c; i++) colSums[i] += row[i];
  // per-cluster weight: dP/d(alpha[j][i])
  const w = new Array(c).fill(0);
  w[0] = d;
  for (let i = 1; i < c; i++) {
    let betaSum = 0;
    for (let l = 0; l < d; l++) betaSum += (betaMask ? betaMask[i][l] : 1) * beta[i][l];
    w[i] = betaSum;
  }
  for (let j = 0; j < alpha.length; j++) {
    let mean = 0;
    for (let i = 0; i < c; i++) mean += alpha[j][i] * w[i];
    for (let i = 0; i < c; i++)
      arch.alphaLogits.grad[j][i] += lam * alpha[j][i] * (w[i] - mean);
  }
  for (let i = 1; i < c; i++) {
    for (let l = 0; l < d; l++) {
      const mask = betaMask ? betaMask[i][l] : 1;
      arch.betaLogits.grad[i][l] += lam * mask * (d + colSums[i]) * beta[i][l] * (1 - beta[i][l]);
    }
  }
}

// ---------------------------------------------------------------------------
// stage 1: token clustering

export interface CandidateTables {
  e0: Param; // v x d full table
  factors: { u: Param; vt: Param }[]; // per cluster i >= 1, rank d/div^i
  ranks: number[];
}

export function initCandidateTables(teacherEmb: Mat, c: number, div: number): CandidateTables {
  const d = teacherEmb[0].length;
  const e0 = new Param(teacherEmb.map((r) => r.slice()));
  const factors: { u: Param; vt: Param }[] = [];
  const ranks = [d];
  for (let i = 1; i < c; i++) {
    const r = Math.max(1, Math.floor(d / Math.pow(div, i)));
    ranks.push(r);
    const { u, vt } = lowRankFactorize(teacherEmb, r);
    factors.push({ u: new Param(u), vt: new Param(vt) });
  }
  return { e0, factors, ranks };
}

/**
 * Convex mixture over candidate tables: row(j) = sum_i alpha[j][i] * row_i(j)
 * where row_0 is the full-table row and row_i is U_i[j] . Vt_i.  The
 * backward pass routes gradients into the tables and the alpha logits.
 */
export function mixedEmbedding(arch: ArchParams, tables: CandidateTables): EmbeddingFn {
  const c = tables.factors.length + 1;
  const clusterRow = (i: number, tok: number): number[] => {
    if (i === 0) return tables.e0.value[tok];
    const { u, vt } = tables.factors[i - 1];
    const d = vt.value[0].length;
    const out = new Array<number>(d).fill(0);
    for (let l = 0; l < u.value[tok].length; l++) {
      const ul = u.value[tok][l];
      if (ul === 0) continue;
      for (let j = 0; j < d; j++) out[j] += ul * vt.value[l][j];
    }
    return out;
  };
  return {
    row(tok: number): number[] {
      const a = softmaxVec(arch.alphaLogits.value[tok]);
      const d = tables.e0.value[0].length;
      const out = new Array<number>(d).fill(0);
      for (let i = 0; i < c; i++) {
        const ri = clusterRow(i, tok);
        for (let j = 0; j < d; j++) out[j] += a[i] * ri[j];
      }
      return out;
    },
    back(tok: number, g: number[]): void {
      const a = softmaxVec(arch.alphaLogits.value[tok]);
      const dAlpha = new Array<number>(c).fill(0);
      for (let i = 0; i < c; i++) {
        const ri = clusterRow(i, tok);
        for (let j = 0; j < g.length; j++) dAlpha[i] += g[j] * ri[j];
        if (i === 0) {
          for (let j = 0; j < g.length; j++) tables.e0.grad[tok][j] += a[0] * g[j];
        } else {
          const { u, vt } = tables.factors[i - 1];
          const r = u.value[tok].length;
          for (let l = 0; l < r; l++) {
            let vg = 0;
            for (let j = 0; j < g.length; j++) vg += vt.value[l][j] * g[j];
            u.grad[tok][l] += a[i] * vg;
            const ul = u.value[tok][l];
            for (let j = 0; j < g.length; j++) vt.grad[l][j] += a[i] * ul * g[j];
          }
        }
      }
      // chain through the row softmax
      let mean = 0;
      for (let i = 0; i < c; i++) mean += a[i] * dAlpha[i];
      for (let i = 0; i < c; i++)
        arch.alphaLogits.grad[tok][i] += a[i] * (dAlpha[i] - mean);
    },
  };
}

export interface TeacherBundle {
  cfg: ToyConfig;
  emb: Param; // v x d full table
  params: EncoderParams;
  /** Frozen teacher logits for KD. */
  logitsFor(tokens: number[]): number[];
}

function meanLoss(
  cfg: ToyConfig,
  params: EncoderParams,
  emb: EmbeddingFn,
  teacher: TeacherBundle,
  batch: Example[],
  temperature: number,
): number {
  let total = 0;
  for (const ex of batch) {
    const fw = forward(cfg, params, emb, ex.tokens);
    const { loss, dLogits } = distillLoss(
      fw.logits, teacher.logitsFor(ex.tokens), ex.label, temperature,
    );
    total += loss;
    fw.backward(dLogits.map((x) => x / batch.length));
  }
  return total / batch.length;
}

export interface Stage1Result {
  cls: number[];
  arch: ArchParams;
  tables: CandidateTables;
  student: EncoderParams;
}

export function searchTokenClustering(
  teacher: TeacherBundle,
  task: ToyTask,
  nas: NasConfig,
  seed: number,
): Stage1Result {
  const cfg = teacher.cfg;
  const rng = new Rng(seed ^ 0x51a9e1);
  const arch = new ArchParams(cfg.v, nas.c, cfg.d, nas.betaStar, nas.lambda);
  const tables = initCandidateTables(teacher.emb.value, nas.c, nas.div);
  const student = cloneEncoderParams(teacher.params);
  const embFn = mixedEmbedding(arch, tables);

  const weightParams = [
    tables.e0,
    ...tables.factors.flatMap((f) => [f.u, f.vt]),
    ...encoderParamList(student),
  ];
  const weightOpt = new AdamW(weightParams, { lr: nas.lr });
  const archOpt = new AdamW([arch.alphaLogits], { lr: nas.archLr });
  // stage-1 gates: beta fixed at 1 for the candidate ranks, 0 beyond
  const betaMask = zeros(nas.c, cfg.d);
  for (let i = 1; i < nas.c; i++)
    for (let l = 0; l < tables.ranks[i]; l++) betaMask[i][l] = 1;
  for (let i = 0; i < nas.c; i++)
    for (let l = 0; l < cfg.d; l++) arch.betaLogits.value[i][l] = betaMask[i][l] > 0 ? 50 : -50;

  for (let step = 0; step < nas.steps; step++) {
    const batch = makeBatch(task, rng, nas.batchSize);
    weightOpt.zeroGrad();
    archOpt.zeroGrad();
    const loss = meanLoss(cfg, student, embFn, teacher, batch, nas.temperature);
    if (!Number.isFinite(loss))
      throw new Error(`clustering search diverged at step ${step}: loss=${loss}`);
    if (step % 2 === 0) {
      weightOpt.step();
    } else {
      addPenaltyGrads(arch, cfg.d, betaMask);
      archOpt.step();
    }
  }

  const { cls } = harden(arch, cfg.d);
  // cluster 0 must not be empty (it anchors the unfactorized table)
  if (!cls.includes(0)) {
    let best = 0;
    const alpha = arch.alpha();
    for (let j = 1; j < cfg.v; j++) if (alpha[j][0] > alpha[best][0]) best = j;
    cls[best] = 0;
  }
  return { cls, arch, tables, student };
}

// ---------------------------------------------------------------------------
// stage 2: per-cluster rank search

export interface ClusterLayout {
  sizes: number[]; // non-empty clusters only, cluster 0 first
  rowOf: number[]; // token -> row within its cluster (ascending token id)
  clusterOf: number[]; // token -> dense cluster index
  members: number[][]; // dense cluster -> token ids ascending
}

/** Drop empty clusters and assign within-cluster rows by ascending id. */
export function layoutClusters(cls: number[], c: number): ClusterLayout {
  const members: number[][] = Array.from({ length: c }, () => []);
  for (let tok = 0; tok < cls.length; tok++) members[cls[tok]].push(tok);
  const keep = members
    .map((m, i) => ({ m, i }))
    .filter(({ m, i }) => i === 0 || m.length > 0);
  const dense = keep.map(({ m }) => m);
  const rowOf = new Array(cls.length).fill(0);
  const clusterOf = new Array(cls.length).fill(0);
  dense.forEach((toks, di) => {
    toks.forEach((tok, row) => {
      rowOf[tok] = row;
      clusterOf[tok] = di;
    });
  });
  return { sizes: dense.map((m) => m.length), rowOf, clusterOf, members: dense };
}

export interface Stage2State {
  layout: ClusterLayout;
  e0: Param; // n0 x d
  factorsU: Param[]; // per cluster i >= 1: n_i x p_i (sqrt-sigma absorbed)
  factorsVt: Param[]; // p_i x d
  spectrum: number[]; // p_i per cluster i >= 1
  arch: ArchParams;
}

export function initRankSearch(
  emb: Mat,
  cls: number[],
  c: number,
  betaStar: number,
  lambda: number,
): Stage2State {
  const d = emb[0].length;
  const layout = layoutClusters(cls, c);
  const cDense = layout.sizes.length;
  const arch = new ArchParams(cls.length, cDense, d, betaStar, lambda);
  // alpha hardened one-hot; gates start open (logit +1) so directions are
  // kept by default and only sustained penalty pressure prunes them
  for (let i = 1; i < cDense; i++)
    for (let l = 0; l < d; l++) arch.betaLogits.value[i][l] = 1;
  for (let tok = 0; tok < cls.length; tok++) {
    for (let i = 0; i < cDense; i++)
      arch.alphaLogits.value[tok][i] = layout.clusterOf[tok] === i ? 60 : -60;
  }
  const e0 = new Param(layout.members[0].map((tok) => emb[tok].slice()));
  const factorsU: Param[] = [];
  const factorsVt: Param[] = [];
  const spectrum: number[] = [];
  for (let i = 1; i < cDense; i++) {
    const sub = layout.members[i].map((tok) => emb[tok].slice());
    const p = Math.min(sub.length, d);
    const { u, vt } = lowRankFactorize(sub, p);
    factorsU.push(new Param(u));
    factorsVt.push(new Param(vt));
    spectrum.push(p);
  }
  return { layout, e0, factorsU, factorsVt, spectrum, arch };
}

/** Beta-gated factorized embedding: token rows are sums of singular
 * directions, each scaled by its gate. */
export function gatedEmbedding(state: Stage2State): EmbeddingFn {
  const sigmoid = (x: number) => 1 / (1 + Math.exp(-x));
  return {
    row(tok: number): number[] {
      const i = state.layout.clusterOf[tok];
      const r = state.layout.rowOf[tok];
      if (i === 0) return state.e0.value[r].slice();
      const u = state.factorsU[i - 1];
      const vt = state.factorsVt[i - 1];
      const d = vt.value[0].length;
      const out = new Array<number>(d).fill(0);
      for (let l = 0; l < state.spectrum[i - 1]; l++) {
        const gate = sigmoid(state.arch.betaLogits.value[i][l]);
        const c0 = gate * u.value[r][l];
        for (let j = 0; j < d; j++) out[j] += c0 * vt.value[l][j];
      }
      return out;
    },
    back(tok: number, g: number[]): void {
      const i = state.layout.clusterOf[tok];
      const r = state.layout.rowOf[tok];
      if (i === 0) {
        for (let j = 0; j < g.length; j++) state.e0.grad[r][j] += g[j];
        return;
      }
      const u = state.factorsU[i - 1];
      const vt = state.factorsVt[i - 1];
      for (let l = 0; l < state.spectrum[i - 1]; l++) {
        const logit = state.arch.betaLogits.value[i][l];
        const gate = sigmoid(logit);
        let vg = 0;
        for (let j = 0; j < g.length; j++) vg += vt.value[l][j] * g[j];
        u.grad[r][l] += gate * vg;
        const ul = u.value[r][l];
        for (let j = 0; j < g.length; j++) vt.grad[l][j] += gate * ul * g[j];
        state.arch.betaLogits.grad[i][l] += ul * vg * gate * (1 - gate);
      }
    },
  };
}

export interface Stage2Result {
  ranks: number[]; // per dense cluster, ranks[0] = d
  state: Stage2State;
  student: EncoderParams;
}

export function searchRankRatios(
  teacher: TeacherBundle,
  task: ToyTask,
  cls: number[],
  studentInit: EncoderParams,
  nas: NasConfig,
  seed: number,
): Stage2Result {
  const cfg = teacher.cfg;
  const rng = new Rng(seed ^ 0x2b7e15);
  const state = initRankSearch(teacher.emb.value, cls, nas.c, nas.betaStar, nas.lambda);
  const student = cloneEncoderParams(studentInit);
  const embFn = gatedEmbedding(state);

  const cDense = state.layout.sizes.length;
  const betaMask = zeros(cDense, cfg.d);
  for (let i = 1; i < cDense; i++)
    for (let l = 0; l < state.spectrum[i - 1]; l++) betaMask[i][l] = 1;

  const weightParams = [
    state.e0,
    ...state.factorsU,
    ...state.factorsVt,
    ...encoderParamList(student),
  ];
  const weightOpt = new AdamW(weightParams, { lr: nas.lr });
  const archOpt = new AdamW([state.arch.betaLogits], { lr: nas.archLr });

  for (let step = 0; step < nas.steps; step++) {
    const batch = makeBatch(task, rng, nas.batchSize);
    weightOpt.zeroGrad();
    archOpt.zeroGrad();
    const loss = meanLoss(cfg, student, embFn, teacher, batch, nas.temperature);
    if (!Number.isFinite(loss))
      throw new Error(`rank search diverged at step ${step}: loss=${loss}`);
    if (step % 2 === 0) {
      weightOpt.step();
    } else {
      addPenaltyGrads(state.arch, cfg.d, betaMask);
      archOpt.step();
    }
  }

  const maxRanks = [cfg.d, ...state.spectrum];
  const { ranks } = harden(state.arch, cfg.d, maxRanks);
  return { ranks, state, student };
}

export function cloneEncoderParams(p: EncoderParams): EncoderParams {
  const cp = (x: Param) => new Param(x.value.map((r) => r.slice()));
  return {
    pos: cp(p.pos),
    layers: p.layers.map((lp) => ({
      wq: cp(lp.wq), wk: cp(lp.wk), wv: cp(lp.wv), wo: cp(lp.wo),
      bq: cp(lp.bq), bk: cp(lp.bk), bv: cp(lp.bv), bo: cp(lp.bo),
      w1: cp(lp.w1), b1: cp(lp.b1), w2: cp(lp.w2), b2: cp(lp.b2),
      ln1g: cp(lp.ln1g), ln1b: cp(lp.ln1b), ln2g: cp(lp.ln2g), ln2b: cp(lp.ln2b),
    })),
    wCls: cp(p.wCls),
    bCls: cp(p.bCls),
  };
}

/** Fold the hardened beta gates into final deployable factor pairs: keep
 * the gated singular directions above threshold, sqrt(gate) into each
 * factor, and re-rank by gated magnitude. */
export function finalizeFactors(state: Stage2State, ranks: number[]): {
  u0: Mat;
  factors: { u: Mat; vt: Mat }[];
} {
  const sigmoid = (x: number) => 1 / (1 + Math.exp(-x));
  const factors: { u: Mat; vt: Mat }[] = [];
  for (let i = 1; i < state.layout.sizes.length; i++) {
    const u = state.factorsU[i - 1].value;
    const vt = state.factorsVt[i - 1].value;
    const p = state.spectrum[i - 1];
    const gates = Array.from({ length: p }, (_, l) => sigmoid(state.arch.betaLogits.value[i][l]));
    // strength of direction l = gate * ||u_l|| * ||v_l||
    const strength = gates.map((g, l) => {
      let un = 0;
      for (const row of u) un += row[l] * row[l];
      let vn = 0;
      for (const x of vt[l]) vn += x * x;
      return g * Math.sqrt(un) * Math.sqrt(vn);
    });
    const order = Array.from({ length: p }, (_, l) => l).sort(
      (a, b) => strength[b] - strength[a],
    );
    const kept = order.slice(0, ranks[i]);
    const n = u.length;
    const d = vt[0].length;
    const uf = zeros(n, kept.length);
    const vf = zeros(kept.length, d);
    kept.forEach((l, k) => {
      const root = Math.sqrt(gates[l]);
      for (let r = 0; r < n; r++) uf[r][k] = u[r][l] * root;
      for (let j = 0; j < d; j++) vf[k][j] = vt[l][j] * root;
    });
    factors.push({ u: uf, vt: vf });
  }
  return { u0: state.e0.value.map((r) => r.slice()), factors };
}

/** Mean frequency rank (token id, since ids are frequency-ordered) of the
 * tokens in each cluster; a diagnostic for the Zipf task. */
export function meanFrequencyRanks(layout: ClusterLayout): number[] {
  return layout.members.map(
    (toks) => toks.reduce((a, b) => a + b, 0) / Math.max(toks.length, 1),
  );
}

/** Reconstruct a cluster's effective table (diagnostic / oracles). */
export function reconstruct(u: Mat, vt: Mat): Mat {
  return matmul(u, vt);
}

export { svd };
