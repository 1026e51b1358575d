import { mkdtempSync, writeFileSync } from 'node:fs';
import { tmpdir } from 'node:os';
import { join } from 'node:path';

import { describe, expect, test } from 'vitest';

import { zeros } from '../src/linalg.js';
import {
  AdamW,
  Param,
  ToyConfig,
  distillLoss,
  forward,
  initEncoderParams,
  softmaxVec,
} from '../src/model.js';
import {
  ArchParams,
  addPenaltyGrads,
  gatedEmbedding,
  harden,
  initCandidateTables,
  initRankSearch,
  mixedEmbedding,
  sizePenalty,
} from '../src/nas.js';
import { serializeModel } from '../src/mcub.js';
import { Rng } from '../src/rng.js';
import { engine } from './helpers.js';

function oneHotAlpha(arch: ArchParams, cls: number[]): void {
  for (let j = 0; j < cls.length; j++)
    for (let i = 0; i < arch.betaLogits.value.length; i++)
      arch.alphaLogits.value[j][i] = cls[j] === i ? 60 : -60;
}

function binaryBeta(arch: ArchParams, ranks: number[], d: number): void {
  for (let i = 1; i < ranks.length; i++)
    for (let l = 0; l < d; l++)
      arch.betaLogits.value[i][l] = l < ranks[i] ? 60 : -60;
}

describe('sizePenalty', () => {
  test('hand-computed uniform case', () => {
    // uniform alpha = 1/4 over v=100 tokens, all beta = 1, d = 8:
    // 8*25 + 3 * 8 * (8 + 25) = 992
    const alpha = Array.from({ length: 100 }, () => [0.25, 0.25, 0.25, 0.25]);
    const beta = Array.from({ length: 4 }, () => new Array(8).fill(1));
    expect(sizePenalty(alpha, beta, 8)).toBeCloseTo(992, 9);
  });

  test('all beta zero leaves only the cluster-0 term', () => {
    const alpha = Array.from({ length: 10 }, () => [0.5, 0.5]);
    const beta = [new Array(4).fill(1), new Array(4).fill(0)];
    expect(sizePenalty(alpha, beta, 4)).toBeCloseTo(4 * 5, 9);
  });
});

describe('harden', () => {
  test('one-hot alpha is the identity, ties go to the lowest index', () => {
    const arch = new ArchParams(4, 3, 8, 0.5, 0);
    oneHotAlpha(arch, [2, 1, 0, 2]);
    arch.alphaLogits.value[1] = [0, 0, 0]; // all-equal row -> cluster 0
    binaryBeta(arch, [8, 3, 5], 8);
    const { cls, ranks } = harden(arch, 8);
    expect(cls).toEqual([2, 0, 0, 2]);
    expect(ranks).toEqual([8, 3, 5]);
  });

  test('rank 0 clamps to 1', () => {
    const arch = new ArchParams(2, 2, 4, 0.5, 0);
    binaryBeta(arch, [4, 0], 4);
    expect(harden(arch, 4).ranks).toEqual([4, 1]);
  });

  test('matches a brute-force scan on random parameters', () => {
    const rng = new Rng(5);
    for (let trial = 0; trial < 10; trial++) {
      const v = 40;
      const c = 3;
      const d = 6;
      const arch = new ArchParams(v, c, d, 0.5, 0);
      for (let j = 0; j < v; j++)
        for (let i = 0; i < c; i++) arch.alphaLogits.value[j][i] = rng.normal();
      for (let i = 0; i < c; i++)
        for (let l = 0; l < d; l++) arch.betaLogits.value[i][l] = rng.normal();
      const { cls, ranks } = harden(arch, d);
      const alpha = arch.alpha();
      const beta = arch.beta();
      for (let j = 0; j < v; j++) {
        let best = 0;
        for (let i = 0; i < c; i++) if (alpha[j][i] > alpha[j][best]) best = i;
        expect(cls[j]).toBe(best);
      }
      for (let i = 1; i < c; i++) {
        let kept = 0;
        for (let l = 0; l < d; l++) if (beta[i][l] > 0.5) kept += 1;
        expect(ranks[i]).toBe(Math.max(kept, 1));
      }
    }
  });

  test('scaling a row before normalization preserves the argmax', () => {
    const arch = new ArchParams(1, 4, 4, 0.5, 0);
    arch.alphaLogits.value[0] = [0.3, 1.7, -0.2, 0.9];
    const before = harden(arch, 4).cls[0];
    // adding a constant to logits == scaling pre-softmax weights
    arch.alphaLogits.value[0] = arch.alphaLogits.value[0].map((x) => x + 3.1);
    expect(harden(arch, 4).cls[0]).toBe(before);
  });
});

describe('penalty/count identity across the component boundary', () => {
  test('20 random hardened layouts match the engine parameter count', () => {
    // a hardened ArchParams' penalty must equal the engine's accounting
    // of the exported layout, as exact integers
    const rng = new Rng(11);
    const dir = mkdtempSync(join(tmpdir(), 'penalty-'));
    let checked = 0;
    for (let trial = 0; trial < 20; trial++) {
      const d = 8;
      const c = 2 + rng.int(3);
      const v = 30 + rng.int(40);
      // random partition with no empty cluster
      const cls = Array.from({ length: v }, (_, j) => (j < c ? j : rng.int(c)));
      const ranks = [d, ...Array.from({ length: c - 1 }, () => 1 + rng.int(d))];
      const arch = new ArchParams(v, c, d, 0.5, 0);
      oneHotAlpha(arch, cls);
      binaryBeta(arch, ranks, d);
      const penalty = sizePenalty(arch.alpha(), arch.beta(), d);
      expect(Number.isInteger(Math.round(penalty))).toBe(true);

      const model = randomQuantizedModel(cls, ranks, d, rng);
      const path = join(dir, `m${trial}.mcub`);
      writeFileSync(path, serializeModel(model));
      const res = engine(['inspect', '--model', path]);
      expect(res.code).toBe(0);
      expect(res.out.params.embedding).toBe(Math.round(penalty));
      checked += 1;
    }
    console.log(`[criterion 9] size penalty == engine parameter count: PASS (${checked}/20 exact integer matches)`);
  });
});

describe('gradient checks', () => {
  const cfg: ToyConfig = { v: 16, d: 8, h: 2, L: 1, dffn: 16, sMax: 6, nCls: 3 };

  function buildObjective(stage: 'alpha' | 'beta') {
    const rng = new Rng(21);
    const teacherEmb = Array.from({ length: cfg.v }, () =>
      Array.from({ length: cfg.d }, () => 0.3 * rng.normal()));
    const params = initEncoderParams(cfg, () => rng.normal());
    const tokens = [3, 0, 5, 9];
    const label = 1;
    const teacherLogits = [0.4, -0.2, 0.9];
    const lambda = 1e-3;

    if (stage === 'alpha') {
      const arch = new ArchParams(cfg.v, 3, cfg.d, 0.5, lambda);
      for (let j = 0; j < cfg.v; j++)
        for (let i = 0; i < 3; i++) arch.alphaLogits.value[j][i] = 0.3 * rng.normal();
      const tables = initCandidateTables(teacherEmb, 3, 2);
      const betaMask = zeros(3, cfg.d);
      for (let i = 1; i < 3; i++)
        for (let l = 0; l < tables.ranks[i]; l++) betaMask[i][l] = 1;
      for (let i = 0; i < 3; i++)
        for (let l = 0; l < cfg.d; l++)
          arch.betaLogits.value[i][l] = betaMask[i][l] > 0 ? 50 : -50;
      const emb = mixedEmbedding(arch, tables);
      const evalLoss = () => {
        const fw = forward(cfg, params, emb, tokens);
        const { loss } = distillLoss(fw.logits, teacherLogits, label, 2);
        return loss + lambda * sizePenalty(arch.alpha(), maskBeta(arch.beta(), betaMask), cfg.d);
      };
      const evalGrad = () => {
        arch.alphaLogits.zeroGrad();
        const fw = forward(cfg, params, emb, tokens);
        const { dLogits } = distillLoss(fw.logits, teacherLogits, label, 2);
        fw.backward(dLogits);
        addPenaltyGrads(arch, cfg.d, betaMask);
        return arch.alphaLogits;
      };
      return { target: arch.alphaLogits, evalLoss, evalGrad };
    }

    const cls = Array.from({ length: cfg.v }, (_, j) => j % 3);
    const state = initRankSearch(teacherEmb, cls, 3, 0.5, lambda);
    for (let i = 1; i < 3; i++)
      for (let l = 0; l < state.spectrum[i - 1]; l++)
        state.arch.betaLogits.value[i][l] = 0.3 * rng.normal();
    const betaMask = zeros(3, cfg.d);
    for (let i = 1; i < 3; i++)
      for (let l = 0; l < state.spectrum[i - 1]; l++) betaMask[i][l] = 1;
    const emb = gatedEmbedding(state);
    const evalLoss = () => {
      const fw = forward(cfg, params, emb, tokens);
      const { loss } = distillLoss(fw.logits, teacherLogits, label, 2);
      return loss + lambda * sizePenalty(state.arch.alpha(), maskBeta(state.arch.beta(), betaMask), cfg.d);
    };
    const evalGrad = () => {
      state.arch.betaLogits.zeroGrad();
      const fw = forward(cfg, params, emb, tokens);
      const { dLogits } = distillLoss(fw.logits, teacherLogits, label, 2);
      fw.backward(dLogits);
      addPenaltyGrads(state.arch, cfg.d, betaMask);
      return state.arch.betaLogits;
    };
    return { target: state.arch.betaLogits, evalLoss, evalGrad };
  }

  function maskBeta(beta: number[][], mask: number[][]): number[][] {
    return beta.map((row, i) => row.map((b, l) => b * mask[i][l]));
  }

  function checkGrads(stage: 'alpha' | 'beta', probes: [number, number][]): number {
    const { target, evalLoss, evalGrad } = buildObjective(stage);
    const grads = evalGrad();
    const eps = 1e-5;
    let worst = 0;
    for (const [i, j] of probes) {
      const keep = target.value[i][j];
      target.value[i][j] = keep + eps;
      const up = evalLoss();
      target.value[i][j] = keep - eps;
      const down = evalLoss();
      target.value[i][j] = keep;
      const fd = (up - down) / (2 * eps);
      const an = grads.grad[i][j];
      const rel = Math.abs(fd - an) / Math.max(Math.abs(fd), Math.abs(an), 1e-8);
      worst = Math.max(worst, rel);
      expect(rel).toBeLessThan(1e-4);
    }
    return worst;
  }

  test('alpha gradient of the penalized objective vs central differences', () => {
    const probes: [number, number][] = [[3, 0], [3, 2], [0, 1], [5, 1], [9, 2], [2, 0]];
    const worst = checkGrads('alpha', probes);
    expect(worst).toBeLessThan(1e-4);
  });

  test('beta gradient of the penalized objective vs central differences', () => {
    const probes: [number, number][] = [[1, 0], [1, 2], [2, 0], [2, 1], [1, 1]];
    const worst = checkGrads('beta', probes);
    expect(worst).toBeLessThan(1e-4);
  });
});

describe('mixedEmbedding consistency', () => {
  test('one-hot alpha collapses to the single cluster row', () => {
    const rng = new Rng(31);
    const v = 6;
    const d = 4;
    const teacherEmb = Array.from({ length: v }, () =>
      Array.from({ length: d }, () => rng.normal()));
    const tables = initCandidateTables(teacherEmb, 3, 2);
    const arch = new ArchParams(v, 3, d, 0.5, 0);
    oneHotAlpha(arch, [0, 0, 0, 0, 0, 0]);
    const emb = mixedEmbedding(arch, tables);
    for (let tok = 0; tok < v; tok++) {
      const row = emb.row(tok);
      for (let j = 0; j < d; j++)
        expect(row[j]).toBeCloseTo(tables.e0.value[tok][j], 10);
    }
    // one-hot on a factorized cluster matches U[tok] . Vt
    oneHotAlpha(arch, [1, 1, 1, 1, 1, 1]);
    for (let tok = 0; tok < v; tok++) {
      const row = emb.row(tok);
      const { u, vt } = tables.factors[0];
      for (let j = 0; j < d; j++) {
        let want = 0;
        for (let l = 0; l < u.value[tok].length; l++) want += u.value[tok][l] * vt.value[l][j];
        expect(row[j]).toBeCloseTo(want, 10);
      }
    }
  });
});

describe('distillLoss', () => {
  test('student == teacher zeroes the KL term', () => {
    const logits = [0.5, -1.2, 0.3];
    const { loss } = distillLoss(logits, logits, 0, 2);
    const ce = -Math.log(softmaxVec(logits)[0]);
    expect(loss).toBeCloseTo(ce, 10);
  });

  test('class count mismatch rejected', () => {
    expect(() => distillLoss([1, 2], [1, 2, 3], 0, 1)).toThrow();
  });
});

describe('optimizer', () => {
  test('AdamW minimizes a quadratic', () => {
    const p = new Param([[5, -3]]);
    const opt = new AdamW([p], { lr: 0.1 });
    for (let i = 0; i < 500; i++) {
      opt.zeroGrad();
      p.grad[0][0] = 2 * p.value[0][0];
      p.grad[0][1] = 2 * p.value[0][1];
      opt.step();
    }
    expect(Math.abs(p.value[0][0])).toBeLessThan(1e-2);
    expect(Math.abs(p.value[0][1])).toBeLessThan(1e-2);
  });
});

// --------------------------------------------------------------------------
// small random quantized model matching a hardened layout, for the
// cross-boundary count check

function randomQuantizedModel(cls: number[], ranks: number[], d: number, rng: Rng) {
  const v = cls.length;
  const c = ranks.length;
  const counts = new Array(c).fill(0);
  for (const cl of cls) counts[cl] += 1;
  const cfg = { v, d, h: 2, L: 1, dffn: 2 * d, sMax: 8, nCls: 2 };
  const i8 = (r: number, cc: number) =>
    Array.from({ length: r }, () =>
      Array.from({ length: cc }, () => rng.int(255) - 128));
  const qp = () => ({ scale: Math.fround(0.01), zeroPoint: 0 });
  const actQp = () => ({ scale: Math.fround(0.02), zeroPoint: 0 });
  const ints = (n: number) => Array.from({ length: n }, () => rng.int(100) - 50);
  const f32s = (n: number) => Array.from({ length: n }, () => Math.fround(rng.normal()));
  const act = {
    q: actQp(), k: actQp(), v: actQp(), score: actQp(),
    prob: { scale: 1 / 256, zeroPoint: -128 }, ctx: actQp(), attn_out: actQp(),
    resid1: actQp(), ln1: actQp(), ffn1: actQp(), gelu: actQp(),
    ffn2: actQp(), resid2: actQp(), ln2: actQp(),
  };
  return {
    config: cfg,
    sizes: counts,
    ranks,
    clsMap: cls.slice(),
    u0: i8(counts[0], d),
    u0Qp: qp(),
    factors: Array.from({ length: c - 1 }, (_, i) => ({
      u: i8(counts[i + 1], ranks[i + 1]), uQp: qp(),
      vt: i8(ranks[i + 1], d), vtQp: qp(),
    })),
    pos: i8(cfg.sMax, d),
    posQp: qp(),
    layers: [{
      wq: i8(d, d), wk: i8(d, d), wv: i8(d, d), wo: i8(d, d),
      wqQp: qp(), wkQp: qp(), wvQp: qp(), woQp: qp(),
      bq: ints(d), bk: ints(d), bv: ints(d), bo: ints(d),
      w1: i8(d, cfg.dffn), w1Qp: qp(), b1: ints(cfg.dffn),
      w2: i8(cfg.dffn, d), w2Qp: qp(), b2: ints(d),
      ln1g: f32s(d), ln1b: f32s(d), ln2g: f32s(d), ln2b: f32s(d),
      act,
    }],
    wCls: i8(d, cfg.nCls),
    wClsQp: qp(),
    bCls: ints(cfg.nCls),
    xEmbQp: actQp(),
    logitsQp: actQp(),
  };
}
