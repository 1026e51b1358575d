/**
 * End-to-end recipe: train a float teacher on the toy task, run the
 * two-stage compression search, fold the result into deployable factor
 * pairs, fine-tune briefly under distillation, and emit the compression
 * spec plus a calibration batch for the exporter.
 */

import { Mat } from './linalg.js';
import {
  AdamW,
  EncoderParams,
  Param,
  ToyConfig,
  distillLoss,
  encoderParamList,
  forward,
  initEncoderParams,
  softmaxVec,
  tableEmbedding,
} from './model.js';
import {
  NasConfig,
  Stage2Result,
  TeacherBundle,
  cloneEncoderParams,
  finalizeFactors,
  layoutClusters,
  searchRankRatios,
  searchTokenClustering,
} from './nas.js';
import { Rng } from './rng.js';
import { ToyTask, makeBatch, makeToyTask } from './toytask.js';

export interface LayerSpecJson {
  wq: Mat; wk: Mat; wv: Mat; wo: Mat;
  bq: number[]; bk: number[]; bv: number[]; bo: number[];
  w1: Mat; b1: number[]; w2: Mat; b2: number[];
  ln1g: number[]; ln1b: number[]; ln2g: number[]; ln2b: number[];
}

/** Everything the exporter needs, all in plain float arrays. */
export interface CompressionSpec {
  config: { v: number; d: number; h: number; L: number; dffn: number; sMax: number; nCls: number };
  sizes: number[];
  ranks: number[];
  clsMap: number[];
  u0: Mat;
  factors: { u: Mat; vt: Mat }[];
  pos: Mat;
  layers: LayerSpecJson[];
  wCls: Mat;
  bCls: number[];
}

export interface CalibrationData {
  sequences: number[][];
}

export function trainTeacher(
  cfg: ToyConfig,
  task: ToyTask,
  seed: number,
  steps = 300,
  lr = 3e-3,
): TeacherBundle {
  const rng = new Rng(seed);
  const emb = new Param(
    Array.from({ length: cfg.v }, () =>
      Array.from({ length: cfg.d }, () => 0.08 * rng.normal())),
  );
  const params = initEncoderParams(cfg, () => rng.normal());
  const embFn = tableEmbedding(emb);
  const opt = new AdamW([emb, ...encoderParamList(params)], { lr });
  for (let step = 0; step < steps; step++) {
    const batch = makeBatch(task, rng, 32);
    opt.zeroGrad();
    for (const ex of batch) {
      const fw = forward(cfg, params, embFn, ex.tokens);
      const p = softmaxVec(fw.logits);
      const dLogits = p.map((x, j) => (x - (j === ex.label ? 1 : 0)) / batch.length);
      fw.backward(dLogits);
    }
    opt.step();
  }
  return {
    cfg,
    emb,
    params,
    logitsFor: (tokens) => forward(cfg, params, embFn, tokens).logits,
  };
}

export function teacherAccuracy(teacher: TeacherBundle, task: ToyTask, n: number, seed: number): number {
  const rng = new Rng(seed);
  let hit = 0;
  for (let i = 0; i < n; i++) {
    const ex = task.sample(rng);
    const logits = teacher.logitsFor(ex.tokens);
    if (logits.indexOf(Math.max(...logits)) === ex.label) hit += 1;
  }
  return hit / n;
}

export interface PipelineResult {
  spec: CompressionSpec;
  calib: CalibrationData;
  teacher: TeacherBundle;
  stage2: Stage2Result;
  cls: number[];
}

export function runTwoStageSearch(
  cfg: ToyConfig,
  nas: NasConfig,
  seed: number,
  opts: { teacherSteps?: number; fineTuneSteps?: number; calibSequences?: number } = {},
): PipelineResult {
  const task = makeToyTask(cfg.v, cfg.sMax, cfg.nCls, seed);
  const teacher = trainTeacher(cfg, task, seed, opts.teacherSteps ?? 300);

  const stage1 = searchTokenClustering(teacher, task, nas, seed);
  const stage2 = searchRankRatios(teacher, task, stage1.cls, stage1.student, nas, seed);

  const { u0, factors } = finalizeFactors(stage2.state, stage2.ranks);
  const student = cloneEncoderParams(stage2.student);

  // brief distillation fine-tune of the folded factors + encoder
  const fineSteps = opts.fineTuneSteps ?? 60;
  const layout = stage2.state.layout;
  const u0p = new Param(u0);
  const fps = factors.map((f) => ({ u: new Param(f.u), vt: new Param(f.vt) }));
  const embFn = {
    row(tok: number): number[] {
      const i = layout.clusterOf[tok];
      const r = layout.rowOf[tok];
      if (i === 0) return u0p.value[r].slice();
      const { u, vt } = fps[i - 1];
      const d = vt.value[0].length;
      const out = new Array<number>(d).fill(0);
      for (let l = 0; l < u.value[r].length; l++) {
        const ul = u.value[r][l];
        for (let j = 0; j < d; j++) out[j] += ul * vt.value[l][j];
      }
      return out;
    },
    back(tok: number, g: number[]): void {
      const i = layout.clusterOf[tok];
      const r = layout.rowOf[tok];
      if (i === 0) {
        for (let j = 0; j < g.length; j++) u0p.grad[r][j] += g[j];
        return;
      }
      const { u, vt } = fps[i - 1];
      for (let l = 0; l < u.value[r].length; l++) {
        let vg = 0;
        for (let j = 0; j < g.length; j++) vg += vt.value[l][j] * g[j];
        u.grad[r][l] += vg;
        const ul = u.value[r][l];
        for (let j = 0; j < g.length; j++) vt.grad[l][j] += ul * g[j];
      }
    },
  };
  const rng = new Rng(seed ^ 0x77f00d);
  const opt = new AdamW(
    [u0p, ...fps.flatMap((f) => [f.u, f.vt]), ...encoderParamList(student)],
    { lr: 1e-3 },
  );
  for (let step = 0; step < fineSteps; step++) {
    const batch = makeBatch(task, rng, nas.batchSize);
    opt.zeroGrad();
    for (const ex of batch) {
      const fw = forward(cfg, student, embFn, ex.tokens);
      const { dLogits } = distillLoss(
        fw.logits, teacher.logitsFor(ex.tokens), ex.label, nas.temperature,
      );
      fw.backward(dLogits.map((x) => x / batch.length));
    }
    opt.step();
  }

  const calibRng = new Rng(seed ^ 0xca11b);
  const calib: CalibrationData = {
    sequences: Array.from({ length: opts.calibSequences ?? 256 }, () =>
      task.sample(calibRng).tokens),
  };

  const toRow = (p: Param) => p.value[0].slice();
  const spec: CompressionSpec = {
    config: {
      v: cfg.v, d: cfg.d, h: cfg.h, L: cfg.L,
      dffn: cfg.dffn, sMax: cfg.sMax, nCls: cfg.nCls,
    },
    sizes: layout.sizes,
    ranks: stage2.ranks,
    clsMap: layout.clusterOf.slice(),
    u0: u0p.value.map((r) => r.slice()),
    factors: fps.map((f) => ({
      u: f.u.value.map((r) => r.slice()),
      vt: f.vt.value.map((r) => r.slice()),
    })),
    pos: student.pos.value.map((r) => r.slice()),
    layers: student.layers.map((lp) => ({
      wq: lp.wq.value, wk: lp.wk.value, wv: lp.wv.value, wo: lp.wo.value,
      bq: toRow(lp.bq), bk: toRow(lp.bk), bv: toRow(lp.bv), bo: toRow(lp.bo),
      w1: lp.w1.value, b1: toRow(lp.b1), w2: lp.w2.value, b2: toRow(lp.b2),
      ln1g: toRow(lp.ln1g), ln1b: toRow(lp.ln1b),
      ln2g: toRow(lp.ln2g), ln2b: toRow(lp.ln2b),
    })),
    wCls: student.wCls.value.map((r) => r.slice()),
    bCls: toRow(student.bCls),
  };
  return { spec, calib, teacher, stage2, cls: layoutClusters(stage1.cls, nas.c).clusterOf };
}
