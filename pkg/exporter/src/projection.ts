/**
 * Seeded random orthonormal projection from the encoder width down to the
 * requested dimension, preserving relative geometry approximately and
 * reproducibly. Columns come from a Gaussian matrix orthonormalized by
 * modified Gram-Schmidt.
 */

import { SplitMix64 } from "./random.js";

export function orthonormalColumns(rows: number, cols: number, seed: number): Float64Array[] {
  if (cols > rows) {
    throw new Error(`cannot build ${cols} orthonormal columns in ${rows} dimensions`);
  }
  const rng = new SplitMix64(0xa11ce ^ seed);
  const columns: Float64Array[] = [];
  for (let c = 0; c < cols; c++) {
    const v = new Float64Array(rows);
    for (let r = 0; r < rows; r++) v[r] = rng.nextGaussian();
    for (const prev of columns) {
      let dot = 0;
      for (let r = 0; r < rows; r++) dot += v[r] * prev[r];
      for (let r = 0; r < rows; r++) v[r] -= dot * prev[r];
    }
    let sq = 0;
    for (const x of v) sq += x * x;
    const norm = Math.sqrt(sq);
    if (norm < 1e-9) throw new Error("degenerate projection column");
    for (let r = 0; r < rows; r++) v[r] /= norm;
    columns.push(v);
  }
  return columns;
}

/** Project a vector onto the columns and renormalize to unit length. */
export function projectAndNormalize(vec: Float64Array, columns: Float64Array[]): Float64Array {
  const out = new Float64Array(columns.length);
  columns.forEach((col, j) => {
    let dot = 0;
    for (let r = 0; r < vec.length; r++) dot += vec[r] * col[r];
    out[j] = dot;
  });
  let sq = 0;
  for (const x of out) sq += x * x;
  const norm = Math.sqrt(sq);
  if (norm < 1e-12) throw new Error("projection collapsed a vector to zero");
  for (let j = 0; j < out.length; j++) out[j] /= norm;
  return out;
}
