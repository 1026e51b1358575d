/**
 * Dense double-precision matrices (row-major number[][]) with the handful
 * of operations the search and exporter need, including a one-sided
 * Jacobi SVD.  Everything is plain loops; sizes here are tiny.
 */

export type Mat = number[][];

export function zeros(rows: number, cols: number): Mat {
  return Array.from({ length: rows }, () => new Array<number>(cols).fill(0));
}

export function copy(a: Mat): Mat {
  return a.map((row) => row.slice());
}

export function shape(a: Mat): [number, number] {
  return [a.length, a.length ? a[0].length : 0];
}

export function matmul(a: Mat, b: Mat): Mat {
  const [m, k] = shape(a);
  const [kb, n] = shape(b);
  if (k !== kb) throw new Error(`matmul: inner dims ${k} vs ${kb}`);
  const out = zeros(m, n);
  for (let i = 0; i < m; i++) {
    for (let p = 0; p < k; p++) {
      const aip = a[i][p];
      if (aip === 0) continue;
      for (let j = 0; j < n; j++) out[i][j] += aip * b[p][j];
    }
  }
  return out;
}

export function transpose(a: Mat): Mat {
  const [m, n] = shape(a);
  const out = zeros(n, m);
  for (let i = 0; i < m; i++) for (let j = 0; j < n; j++) out[j][i] = a[i][j];
  return out;
}

export function addInto(dst: Mat, src: Mat, scale = 1): void {
  for (let i = 0; i < dst.length; i++)
    for (let j = 0; j < dst[i].length; j++) dst[i][j] += scale * src[i][j];
}

export function scaleMat(a: Mat, s: number): Mat {
  return a.map((row) => row.map((x) => x * s));
}

export function frobNormSq(a: Mat): number {
  let total = 0;
  for (const row of a) for (const x of row) total += x * x;
  return total;
}

export interface Svd {
  u: Mat; // m x p, orthonormal columns
  sigma: number[]; // p singular values, descending
  vt: Mat; // p x n
}

/**
 * One-sided Jacobi SVD of an m x n matrix (p = min(m, n) triples).
 * Rotations orthogonalize the columns of A (of A^T when m < n); converges
 * to ~1e-14 relative on the well-conditioned matrices used here.
 */
export function svd(a: Mat): Svd {
  const [m, n] = shape(a);
  if (m < n) {
    const { u, sigma, vt } = svd(transpose(a));
    return { u: transpose(vt), sigma, vt: transpose(u) };
  }
  // work on columns of W = copy(A); accumulate V
  const w = copy(a);
  const v = zeros(n, n);
  for (let i = 0; i < n; i++) v[i][i] = 1;

  const dot = (p: number, q: number) => {
    let s = 0;
    for (let i = 0; i < m; i++) s += w[i][p] * w[i][q];
    return s;
  };

  const maxSweeps = 60;
  const eps = 1e-15;
  for (let sweep = 0; sweep < maxSweeps; sweep++) {
    let offDiag = 0;
    for (let p = 0; p < n - 1; p++) {
      for (let q = p + 1; q < n; q++) {
        const app = dot(p, p);
        const aqq = dot(q, q);
        const apq = dot(p, q);
        offDiag = Math.max(offDiag, Math.abs(apq) / Math.sqrt(app * aqq + eps));
        if (Math.abs(apq) < eps * Math.sqrt(app * aqq) + Number.MIN_VALUE) continue;
        const tau = (aqq - app) / (2 * apq);
        const t = Math.sign(tau || 1) / (Math.abs(tau) + Math.sqrt(1 + tau * tau));
        const c = 1 / Math.sqrt(1 + t * t);
        const s = c * t;
        for (let i = 0; i < m; i++) {
          const wp = w[i][p];
          const wq = w[i][q];
          w[i][p] = c * wp - s * wq;
          w[i][q] = s * wp + c * wq;
        }
        for (let i = 0; i < n; i++) {
          const vp = v[i][p];
          const vq = v[i][q];
          v[i][p] = c * vp - s * vq;
          v[i][q] = s * vp + c * vq;
        }
      }
    }
    if (offDiag < 1e-14) break;
  }

  // singular values = column norms of W; U = normalized W columns
  const order = Array.from({ length: n }, (_, i) => i);
  const norms = order.map((j) => Math.sqrt(dot(j, j)));
  order.sort((x, y) => norms[y] - norms[x]);

  const u = zeros(m, n);
  const sigma: number[] = [];
  const vtOut = zeros(n, n);
  for (let k = 0; k < n; k++) {
    const j = order[k];
    const s = norms[j];
    sigma.push(s);
    const inv = s > 1e-300 ? 1 / s : 0;
    for (let i = 0; i < m; i++) u[i][k] = w[i][j] * inv;
    for (let i = 0; i < n; i++) vtOut[k][i] = v[i][j];
  }
  return { u, sigma, vt: vtOut };
}

export interface FactorPair {
  u: Mat; // n x r, absorbs sqrt(sigma)
  vt: Mat; // r x d, absorbs sqrt(sigma)
}

/**
 * Best rank-r approximation via truncated SVD, with sqrt(sigma) split
 * into both factors so neither carries the whole dynamic range.
 */
export function lowRankFactorize(m: Mat, r: number): FactorPair {
  const [rows, cols] = shape(m);
  const p = Math.min(rows, cols);
  if (!Number.isInteger(r) || r < 1 || r > p)
    throw new Error(`rank ${r} out of range [1, ${p}]`);
  const { u, sigma, vt } = svd(m);
  const uf = zeros(rows, r);
  const vf = zeros(r, cols);
  for (let k = 0; k < r; k++) {
    const root = Math.sqrt(sigma[k]);
    for (let i = 0; i < rows; i++) uf[i][k] = u[i][k] * root;
    for (let j = 0; j < cols; j++) vf[k][j] = vt[k][j] * root;
  }
  return { u: uf, vt: vf };
}
