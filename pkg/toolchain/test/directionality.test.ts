import { describe, expect, test } from 'vitest';

import { DEFAULT_NAS } from '../src/nas.js';
import { CompressionSpec, runTwoStageSearch } from '../src/pipeline.js';

function embeddingParamCount(spec: CompressionSpec): number {
  const d = spec.config.d;
  let total = spec.sizes[0] * d;
  for (let i = 1; i < spec.sizes.length; i++)
    total += spec.ranks[i] * (spec.sizes[i] + d);
  return total;
}

describe('size penalty directionality', () => {
  test('raising lambda 1000x shrinks the embedding on every seed', () => {
    const cfg = { v: 300, d: 16, h: 2, L: 1, dffn: 64, sMax: 16, nCls: 4 };
    const opts = { teacherSteps: 150, fineTuneSteps: 0, calibSequences: 1 };
    const seeds = [0, 1, 2];
    const lines: string[] = [];
    for (const seed of seeds) {
      const base = { ...DEFAULT_NAS, c: 4, div: 2, lr: 1e-3 };
      const loose = runTwoStageSearch(cfg, { ...base, lambda: 0 }, seed, opts);
      const tight = runTwoStageSearch(cfg, { ...base, lambda: 1e-1 }, seed, opts);
      const nLoose = embeddingParamCount(loose.spec);
      const nTight = embeddingParamCount(tight.spec);
      expect(nTight).toBeLessThan(nLoose);

      // with negligible pressure the gates keep nearly the full spectrum
      const spectrum = loose.stage2.state.spectrum;
      const keptRanks = loose.stage2.ranks.slice(1);
      const total = spectrum.reduce((a, b) => a + b, 0);
      const kept = keptRanks.reduce((a, b) => a + b, 0);
      expect(kept).toBeGreaterThanOrEqual(0.9 * total);
      lines.push(`seed ${seed}: ${nLoose} -> ${nTight} params, ranks kept ${kept}/${total}`);
    }
    console.log(`[criterion 11] penalty directionality: PASS (${lines.join('; ')})`);
  });
});
