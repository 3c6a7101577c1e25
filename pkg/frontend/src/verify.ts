/**
 * Independent EMB1 verification: parse with the strict reader and report
 * dimensions, counts, and the norm range. Format violations and zero-norm
 * rows are reported and signalled through a nonzero exit code by the CLI.
 */

import * as fs from "node:fs";

import { decodeEmb1, Emb1FormatError } from "./emb1.js";

export interface VerifySummary {
  ok: boolean;
  dim?: number;
  classes?: number;
  records?: number;
  minNorm?: number;
  maxNorm?: number;
  violations: string[];
}

export function verifyEmb1(filePath: string): VerifySummary {
  let buf: Buffer;
  try {
    buf = fs.readFileSync(filePath);
  } catch (err) {
    return { ok: false, violations: [`cannot read ${filePath}: ${err}`] };
  }
  try {
    const set = decodeEmb1(buf);
    const violations: string[] = [];
    let minNorm = Infinity;
    let maxNorm = set.labels.length === 0 ? Infinity : -Infinity;
    for (let i = 0; i < set.labels.length; i++) {
      let sq = 0;
      for (let j = 0; j < set.dim; j++) {
        const v = set.vectors[i * set.dim + j];
        sq += v * v;
      }
      const norm = Math.sqrt(sq);
      minNorm = Math.min(minNorm, norm);
      maxNorm = Math.max(maxNorm, norm);
      if (norm === 0) violations.push(`record ${i} has zero norm`);
    }
    return {
      ok: violations.length === 0,
      dim: set.dim,
      classes: set.classNames.length,
      records: set.labels.length,
      minNorm: Number.isFinite(minNorm) ? minNorm : undefined,
      maxNorm: Number.isFinite(maxNorm) ? maxNorm : undefined,
      violations,
    };
  } catch (err) {
    const message = err instanceof Emb1FormatError ? err.message : String(err);
    return { ok: false, violations: [message] };
  }
}
