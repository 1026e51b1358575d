#!/usr/bin/env node
/**
 * Toolchain driver.
 *
 *   search --seed N --lambda X [--v N --d N --c N --div N --steps N]
 *          --out-spec spec.json --out-calib calib.json
 *       run the two-stage compression search on the toy task and write
 *       the compression spec + calibration batch
 *
 *   export --spec spec.json --calib calib.json --out model.mcub
 *       quantize and serialize to the engine's binary format
 *
 *   reference --spec spec.json --calib calib.json --tokens "1 2 3"
 *       print reference logits for a token sequence (debugging aid)
 */

import { readFileSync, writeFileSync } from 'node:fs';
import { parseArgs } from 'node:util';

import { DEFAULT_NAS } from './nas.js';
import { CalibrationData, CompressionSpec, runTwoStageSearch } from './pipeline.js';
import { quantizeSpec } from './quantize.js';
import { serializeModel } from './mcub.js';
import { referenceForward } from './reference.js';

function fail(msg: string): never {
  console.error(msg);
  process.exit(2);
}

function cmdSearch(argv: string[]): void {
  const { values } = parseArgs({
    args: argv,
    options: {
      seed: { type: 'string', default: '0' },
      lambda: { type: 'string', default: String(DEFAULT_NAS.lambda) },
      v: { type: 'string', default: '1000' },
      d: { type: 'string', default: '16' },
      c: { type: 'string', default: '4' },
      div: { type: 'string', default: '2' },
      steps: { type: 'string', default: String(DEFAULT_NAS.steps) },
      'out-spec': { type: 'string' },
      'out-calib': { type: 'string' },
    },
  });
  if (!values['out-spec'] || !values['out-calib'])
    fail('search requires --out-spec and --out-calib');
  const d = Number(values.d);
  const cfg = {
    v: Number(values.v), d, h: 2, L: 1, dffn: 4 * d, sMax: 16, nCls: 4,
  };
  const nas = {
    ...DEFAULT_NAS,
    c: Number(values.c),
    div: Number(values.div),
    lambda: Number(values.lambda),
    steps: Number(values.steps),
    lr: 1e-3,
  };
  const t0 = Date.now();
  const result = runTwoStageSearch(cfg, nas, Number(values.seed));
  writeFileSync(values['out-spec'], JSON.stringify(result.spec));
  writeFileSync(values['out-calib'], JSON.stringify(result.calib));
  console.log(JSON.stringify({
    sizes: result.spec.sizes,
    ranks: result.spec.ranks,
    wall_time_s: (Date.now() - t0) / 1000,
  }));
}

function loadSpec(path: string): CompressionSpec {
  return JSON.parse(readFileSync(path, 'utf8')) as CompressionSpec;
}

function loadCalib(path: string): CalibrationData {
  return JSON.parse(readFileSync(path, 'utf8')) as CalibrationData;
}

function cmdExport(argv: string[]): void {
  const { values } = parseArgs({
    args: argv,
    options: {
      spec: { type: 'string' },
      calib: { type: 'string' },
      out: { type: 'string' },
    },
  });
  if (!values.spec || !values.calib || !values.out)
    fail('export requires --spec, --calib, and --out');
  const model = quantizeSpec(loadSpec(values.spec), loadCalib(values.calib));
  const bytes = serializeModel(model);
  writeFileSync(values.out, bytes);
  console.log(JSON.stringify({ bytes: bytes.length, sizes: model.sizes, ranks: model.ranks }));
}

function cmdReference(argv: string[]): void {
  const { values } = parseArgs({
    args: argv,
    options: {
      spec: { type: 'string' },
      calib: { type: 'string' },
      tokens: { type: 'string' },
    },
  });
  if (!values.spec || !values.calib || !values.tokens)
    fail('reference requires --spec, --calib, and --tokens');
  const model = quantizeSpec(loadSpec(values.spec), loadCalib(values.calib));
  const tokens = values.tokens.trim().split(/\s+/).map(Number);
  const out = referenceForward(model, tokens);
  console.log(JSON.stringify(out));
}

const [cmd, ...rest] = process.argv.slice(2);
switch (cmd) {
  case 'search':
    cmdSearch(rest);
    break;
  case 'export':
    cmdExport(rest);
    break;
  case 'reference':
    cmdReference(rest);
    break;
  default:
    fail('usage: mcuenc-toolchain <search|export|reference> [options]');
}
