/**
 * Synthetic classification task with a Zipf-distributed vocabulary: each
 * token carries a fixed latent class, a sequence's label is its first
 * token's class, and positions 1..s-1 are distractors.  Head tokens are
 * orders of magnitude more frequent than tail tokens, which is exactly
 * the skew the embedding-compression search exploits.
 */

import { Rng } from './rng.js';

export interface Example {
  tokens: number[];
  label: number;
}

export interface ToyTask {
  v: number;
  seqLen: number;
  nCls: number;
  tokenClass: number[];
  /** Zipf sampling weights, token id = frequency rank. */
  weights: number[];
  sample(rng: Rng): Example;
}

export function makeToyTask(v: number, seqLen: number, nCls: number, seed: number): ToyTask {
  const rng = new Rng(seed);
  const tokenClass = Array.from({ length: v }, () => rng.int(nCls));
  const weights = Array.from({ length: v }, (_, i) => 1 / (i + 1));
  return {
    v,
    seqLen,
    nCls,
    tokenClass,
    weights,
    sample(r: Rng): Example {
      const tokens = Array.from({ length: seqLen }, () => r.categorical(weights));
      return { tokens, label: tokenClass[tokens[0]] };
    },
  };
}

export function makeBatch(task: ToyTask, rng: Rng, size: number): Example[] {
  return Array.from({ length: size }, () => task.sample(rng));
}
