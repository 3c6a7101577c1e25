/**
 * Vision-language embedding models.
 *
 * The built-in `toy-rgb-v1` model embeds images and prompts into one shared
 * space: both sides are reduced to the same 16-slot color descriptor
 * (mean RGB, brightness, saturation, coarse hue histogram) and pushed through
 * one fixed seeded projection, then L2-normalized. It is fully deterministic
 * and needs no downloaded weights, so exports are reproducible anywhere;
 * other backends can be registered under new identifiers.
 */

import type { DecodedImage } from "./images.js";

export const DESCRIPTOR_DIM = 16;

export interface VisionLanguageModel {
  id: string;
  dim: number;
  tokenDim: number;
  embedImage(img: DecodedImage): Float32Array;
  embedText(prompt: string): Float32Array;
  /** input-space token embedding for a class name (the [CLS] slot) */
  tokenEmbedding(className: string): Float32Array;
}

export class UnknownModelError extends Error {}

function fnv1a(text: string): number {
  let hash = 0x811c9dc5;
  for (let i = 0; i < text.length; i++) {
    hash ^= text.charCodeAt(i);
    hash = Math.imul(hash, 0x01000193);
  }
  return hash >>> 0;
}

/** mulberry32: small deterministic PRNG, plenty for fixed projections */
function rngFrom(seedText: string): () => number {
  let a = fnv1a(seedText);
  return () => {
    a |= 0;
    a = (a + 0x6d2b79f5) | 0;
    let t = Math.imul(a ^ (a >>> 15), 1 | a);
    t = (t + Math.imul(t ^ (t >>> 7), 61 | t)) ^ t;
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

function gaussianPairs(rng: () => number, count: number): Float64Array {
  const out = new Float64Array(count);
  for (let i = 0; i < count; i += 2) {
    const u = Math.max(rng(), 1e-12);
    const v = rng();
    const r = Math.sqrt(-2 * Math.log(u));
    out[i] = r * Math.cos(2 * Math.PI * v);
    if (i + 1 < count) out[i + 1] = r * Math.sin(2 * Math.PI * v);
  }
  return out;
}

const COLOR_LEXICON: Record<string, [number, number, number]> = {
  red: [1, 0, 0],
  green: [0, 1, 0],
  blue: [0, 0, 1],
  yellow: [1, 1, 0],
  cyan: [0, 1, 1],
  magenta: [1, 0, 1],
  orange: [1, 0.5, 0],
  purple: [0.5, 0, 0.8],
  pink: [1, 0.6, 0.75],
  brown: [0.55, 0.3, 0.1],
  white: [1, 1, 1],
  black: [0, 0, 0],
  gray: [0.5, 0.5, 0.5],
  grey: [0.5, 0.5, 0.5],
};

const HUE_BINS = 6;

/** descriptor slots: 0-2 mean RGB, 3 brightness, 4 brightness spread,
 *  5 saturation, 6-11 saturation-weighted hue histogram, 12-15 reserved */
function patchDescriptor(r: number, g: number, b: number): Float64Array {
  const d = new Float64Array(DESCRIPTOR_DIM);
  d[0] = r;
  d[1] = g;
  d[2] = b;
  const lum = (r + g + b) / 3;
  d[3] = lum;
  d[4] = 0;
  const max = Math.max(r, g, b);
  const min = Math.min(r, g, b);
  const sat = max > 0 ? (max - min) / max : 0;
  d[5] = sat;
  if (sat > 1e-6) {
    d[6 + hueBin(r, g, b)] = sat;
  }
  return d;
}

function hueBin(r: number, g: number, b: number): number {
  const max = Math.max(r, g, b);
  const min = Math.min(r, g, b);
  const delta = max - min;
  let hue: number;
  if (delta < 1e-12) hue = 0;
  else if (max === r) hue = ((g - b) / delta + 6) % 6;
  else if (max === g) hue = (b - r) / delta + 2;
  else hue = (r - g) / delta + 4;
  return Math.min(HUE_BINS - 1, Math.floor(hue)); // hue in [0, 6)
}

function imageDescriptor(img: DecodedImage): Float64Array {
  const n = img.width * img.height;
  const acc = new Float64Array(DESCRIPTOR_DIM);
  let lumSq = 0;
  for (let i = 0; i < n; i++) {
    const r = img.rgb[i * 3] / 255;
    const g = img.rgb[i * 3 + 1] / 255;
    const b = img.rgb[i * 3 + 2] / 255;
    const p = patchDescriptor(r, g, b);
    for (let j = 0; j < DESCRIPTOR_DIM; j++) acc[j] += p[j];
    lumSq += p[3] * p[3];
  }
  for (let j = 0; j < DESCRIPTOR_DIM; j++) acc[j] /= n;
  acc[4] = Math.sqrt(Math.max(0, lumSq / n - acc[3] * acc[3]));
  return acc;
}

function wordDescriptor(word: string, modelId: string): { d: Float64Array; known: boolean } {
  const rgb = COLOR_LEXICON[word];
  if (rgb) return { d: patchDescriptor(...rgb), known: true };
  const rng = rngFrom(`${modelId}:word:${word}`);
  const d = new Float64Array(DESCRIPTOR_DIM);
  for (let j = 0; j < 12; j++) d[j] = rng() * 0.5;
  return { d, known: false };
}

function textDescriptor(prompt: string, modelId: string): Float64Array {
  const words = prompt
    .toLowerCase()
    .replace(/[^a-z0-9\s_-]/g, " ")
    .split(/[\s_-]+/)
    .filter((w) => w.length > 0);
  if (words.length === 0) throw new Error("prompt contains no words");
  const acc = new Float64Array(DESCRIPTOR_DIM);
  let total = 0;
  for (const word of words) {
    const { d, known } = wordDescriptor(word, modelId);
    // class-bearing color words dominate; template filler contributes a
    // small shared offset, the toy analogue of the prompt context
    const weight = known ? 1.0 : 0.15;
    for (let j = 0; j < DESCRIPTOR_DIM; j++) acc[j] += weight * d[j];
    total += weight;
  }
  for (let j = 0; j < DESCRIPTOR_DIM; j++) acc[j] /= total;
  return acc;
}

class ToyRgbModel implements VisionLanguageModel {
  readonly id: string;
  readonly dim: number;
  readonly tokenDim = DESCRIPTOR_DIM;
  private readonly projection: Float64Array; // (DESCRIPTOR_DIM x dim)

  constructor(id: string, dim: number) {
    this.id = id;
    this.dim = dim;
    this.projection = gaussianPairs(rngFrom(`${id}:projection`), DESCRIPTOR_DIM * dim);
  }

  private project(descriptor: Float64Array): Float32Array {
    const out = new Float64Array(this.dim);
    for (let i = 0; i < DESCRIPTOR_DIM; i++) {
      const centered = descriptor[i] - 0.5;
      if (centered === 0) continue;
      for (let j = 0; j < this.dim; j++) {
        out[j] += centered * this.projection[i * this.dim + j];
      }
    }
    let norm = Math.hypot(...out);
    if (norm < 1e-12) {
      out[0] = 1; // descriptor exactly at the center projects to zero
      norm = 1;
    }
    return Float32Array.from(out, (v) => v / norm);
  }

  embedImage(img: DecodedImage): Float32Array {
    return this.project(imageDescriptor(img));
  }

  embedText(prompt: string): Float32Array {
    return this.project(textDescriptor(prompt, this.id));
  }

  tokenEmbedding(className: string): Float32Array {
    return Float32Array.from(textDescriptor(className, this.id));
  }
}

export function getModel(id: string): VisionLanguageModel {
  if (id === "toy-rgb-v1") return new ToyRgbModel(id, 64);
  if (id === "toy-rgb-v1-d32") return new ToyRgbModel(id, 32);
  throw new UnknownModelError(
    `unknown model ${JSON.stringify(id)}; available: toy-rgb-v1, toy-rgb-v1-d32`,
  );
}
