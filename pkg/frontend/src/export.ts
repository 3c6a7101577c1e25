/**
 * Export jobs: walk a class-per-folder image dataset or a class list and
 * write unit-norm embeddings as EMB1, plus the token-table JSON the prompt
 * tuner consumes.
 */

import * as fs from "node:fs";
import * as path from "node:path";

import { buildEmbeddingSet, encodeEmb1, type EmbeddingSet } from "./emb1.js";
import { decodeImage, ImageDecodeError } from "./images.js";
import { getModel, type VisionLanguageModel } from "./model.js";

export const DEFAULT_TEMPLATE = "a photo of a [CLS].";
export const CLS_PLACEHOLDER = "[CLS]";

export interface ExportSummary {
  dim: number;
  classes: number;
  records: number;
  skipped: number;
  warnings: string[];
}

export class ExportError extends Error {}

export function validateTemplate(template: string): void {
  const first = template.indexOf(CLS_PLACEHOLDER);
  if (first < 0) {
    throw new ExportError(`template must contain the ${CLS_PLACEHOLDER} placeholder`);
  }
  if (template.indexOf(CLS_PLACEHOLDER, first + 1) >= 0) {
    throw new ExportError(`template must contain ${CLS_PLACEHOLDER} exactly once`);
  }
}

export function listClassFolders(root: string): string[] {
  let entries: fs.Dirent[];
  try {
    entries = fs.readdirSync(root, { withFileTypes: true });
  } catch {
    throw new ExportError(`cannot read dataset root ${root}`);
  }
  const folders = entries.filter((e) => e.isDirectory()).map((e) => e.name).sort();
  if (folders.length === 0) {
    throw new ExportError(`dataset root ${root} contains no class folders`);
  }
  return folders;
}

export function exportImageFeatures(
  imagesRoot: string,
  modelId: string,
  outPath: string,
): ExportSummary {
  const model = getModel(modelId);
  const classNames = listClassFolders(imagesRoot);
  const records: Array<{ label: number; vector: Float32Array }> = [];
  const warnings: string[] = [];
  let skipped = 0;
  classNames.forEach((name, label) => {
    const folder = path.join(imagesRoot, name);
    const files = fs
      .readdirSync(folder, { withFileTypes: true })
      .filter((e) => e.isFile())
      .map((e) => e.name)
      .sort();
    let decoded = 0;
    for (const file of files) {
      const full = path.join(folder, file);
      try {
        const img = decodeImage(fs.readFileSync(full), file);
        records.push({ label, vector: model.embedImage(img) });
        decoded++;
      } catch (err) {
        if (err instanceof ImageDecodeError) {
          warnings.push(`skipped ${full}: ${err.message}`);
          skipped++;
        } else {
          throw err;
        }
      }
    }
    if (decoded === 0) {
      throw new ExportError(`class folder ${folder} has no decodable images`);
    }
  });
  const set = buildEmbeddingSet(model.dim, classNames, records);
  fs.writeFileSync(outPath, encodeEmb1(set));
  return {
    dim: model.dim,
    classes: classNames.length,
    records: records.length,
    skipped,
    warnings,
  };
}

export function exportTextFeatures(
  classNames: string[],
  template: string,
  modelId: string,
  outPath: string,
): ExportSummary {
  validateTemplate(template);
  if (classNames.length === 0) throw new ExportError("class list is empty");
  const model = getModel(modelId);
  const records = classNames.map((name, label) => ({
    label,
    vector: model.embedText(template.replace(CLS_PLACEHOLDER, name)),
  }));
  const set = buildEmbeddingSet(model.dim, classNames, records);
  fs.writeFileSync(outPath, encodeEmb1(set));
  return {
    dim: model.dim,
    classes: classNames.length,
    records: records.length,
    skipped: 0,
    warnings: [],
  };
}

/** token-table JSON consumed by the prompt tuner: {"dim": e, "classes": {...}} */
export function writeTokenTable(
  classNames: string[],
  modelId: string,
  outPath: string,
): void {
  const model = getModel(modelId);
  const classes: Record<string, number[]> = {};
  for (const name of classNames) {
    classes[name] = Array.from(model.tokenEmbedding(name));
  }
  fs.writeFileSync(outPath, JSON.stringify({ dim: model.tokenDim, classes }) + "\n");
}

/** class list file: JSON array, splits-style {"base": [], "new": []}, or one name per line */
export function readClassList(filePath: string): string[] {
  const text = fs.readFileSync(filePath, "utf-8");
  try {
    const doc = JSON.parse(text);
    if (Array.isArray(doc)) return doc.map(String);
    if (doc && typeof doc === "object" && ("base" in doc || "new" in doc)) {
      return [...(doc.base ?? []), ...(doc.new ?? [])].map(String);
    }
  } catch {
    // fall through to line-based parsing
  }
  const names = text.split(/\r?\n/).map((l) => l.trim()).filter((l) => l.length > 0);
  if (names.length === 0) throw new ExportError(`no class names found in ${filePath}`);
  return names;
}
