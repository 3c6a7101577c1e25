/**
 * EMB1 binary embedding file format.
 *
 * Layout (all integers little-endian):
 *   bytes 0-3  ASCII "EMB1"
 *   u32        version (1)
 *   u32        dim
 *   u32        class_count C
 *   u32        record_count N
 *   C entries  (u32 byte_len, UTF-8 name bytes)
 *   N records  (u32 class_index, dim x f32)
 */

export const MAGIC = "EMB1";
export const VERSION = 1;

export interface EmbeddingSet {
  dim: number;
  classNames: string[];
  labels: Uint32Array;
  /** row-major (N x dim) */
  vectors: Float32Array;
}

export class Emb1FormatError extends Error {}

export function buildEmbeddingSet(
  dim: number,
  classNames: string[],
  records: Array<{ label: number; vector: Float32Array | number[] }>,
): EmbeddingSet {
  const labels = new Uint32Array(records.length);
  const vectors = new Float32Array(records.length * dim);
  records.forEach((rec, i) => {
    if (rec.label < 0 || rec.label >= classNames.length) {
      throw new Emb1FormatError(`record ${i} has class index ${rec.label} out of range`);
    }
    const v = rec.vector;
    if (v.length !== dim) {
      throw new Emb1FormatError(`record ${i} has ${v.length} values, expected ${dim}`);
    }
    labels[i] = rec.label;
    vectors.set(v, i * dim);
  });
  return { dim, classNames, labels, vectors };
}

function validate(set: EmbeddingSet): void {
  if (set.dim <= 0) throw new Emb1FormatError("dim must be positive");
  if (set.classNames.length === 0) throw new Emb1FormatError("class table must not be empty");
  if (new Set(set.classNames).size !== set.classNames.length) {
    throw new Emb1FormatError("class names must be unique");
  }
  if (set.classNames.some((n) => n.length === 0)) {
    throw new Emb1FormatError("class names must be non-empty");
  }
  if (set.vectors.length !== set.labels.length * set.dim) {
    throw new Emb1FormatError("vector block does not match record count");
  }
  for (let i = 0; i < set.labels.length; i++) {
    if (set.labels[i] >= set.classNames.length) {
      throw new Emb1FormatError(`record ${i} has class index ${set.labels[i]} out of range`);
    }
  }
}

export function encodeEmb1(set: EmbeddingSet): Buffer {
  validate(set);
  const encoder = new TextEncoder();
  const nameBytes = set.classNames.map((n) => encoder.encode(n));
  const nameBlock = nameBytes.reduce((acc, b) => acc + 4 + b.length, 0);
  const total = 20 + nameBlock + set.labels.length * (4 + 4 * set.dim);
  const buf = Buffer.alloc(total);
  buf.write(MAGIC, 0, "ascii");
  buf.writeUInt32LE(VERSION, 4);
  buf.writeUInt32LE(set.dim, 8);
  buf.writeUInt32LE(set.classNames.length, 12);
  buf.writeUInt32LE(set.labels.length, 16);
  let pos = 20;
  for (const b of nameBytes) {
    buf.writeUInt32LE(b.length, pos);
    pos += 4;
    buf.set(b, pos);
    pos += b.length;
  }
  for (let i = 0; i < set.labels.length; i++) {
    buf.writeUInt32LE(set.labels[i], pos);
    pos += 4;
    for (let j = 0; j < set.dim; j++) {
      buf.writeFloatLE(set.vectors[i * set.dim + j], pos);
      pos += 4;
    }
  }
  return buf;
}

/**
 * Independent reader used by `verify`: parses with explicit bounds checks
 * and reports the byte offset where a truncated file ran out.
 */
export function decodeEmb1(buf: Buffer): EmbeddingSet {
  if (buf.length < 20) {
    throw new Emb1FormatError(`file shorter than header (at byte offset ${buf.length})`);
  }
  if (buf.toString("ascii", 0, 4) !== MAGIC) {
    throw new Emb1FormatError(`bad magic ${JSON.stringify(buf.toString("ascii", 0, 4))}`);
  }
  const version = buf.readUInt32LE(4);
  if (version !== VERSION) throw new Emb1FormatError(`unsupported version ${version}`);
  const dim = buf.readUInt32LE(8);
  const classCount = buf.readUInt32LE(12);
  const recordCount = buf.readUInt32LE(16);
  if (dim === 0) throw new Emb1FormatError("dim must be positive");
  if (classCount === 0) throw new Emb1FormatError("class count must be positive");

  let pos = 20;
  const classNames: string[] = [];
  const decoder = new TextDecoder("utf-8", { fatal: true });
  for (let i = 0; i < classCount; i++) {
    if (pos + 4 > buf.length) {
      throw new Emb1FormatError(`class name ${i} length missing (at byte offset ${pos})`);
    }
    const len = buf.readUInt32LE(pos);
    pos += 4;
    if (pos + len > buf.length) {
      throw new Emb1FormatError(`class name ${i} bytes missing (at byte offset ${pos})`);
    }
    classNames.push(decoder.decode(buf.subarray(pos, pos + len)));
    pos += len;
  }
  const payload = recordCount * (4 + 4 * dim);
  if (pos + payload > buf.length) {
    throw new Emb1FormatError(
      `record payload needs ${payload} bytes, file ends early (at byte offset ${buf.length})`,
    );
  }
  if (pos + payload < buf.length) {
    throw new Emb1FormatError(`${buf.length - pos - payload} trailing bytes after payload`);
  }
  const labels = new Uint32Array(recordCount);
  const vectors = new Float32Array(recordCount * dim);
  for (let i = 0; i < recordCount; i++) {
    labels[i] = buf.readUInt32LE(pos);
    pos += 4;
    if (labels[i] >= classCount) {
      throw new Emb1FormatError(`record ${i} has class index ${labels[i]} >= ${classCount}`);
    }
    for (let j = 0; j < dim; j++) {
      vectors[i * dim + j] = buf.readFloatLE(pos);
      pos += 4;
    }
  }
  const set = { dim, classNames, labels, vectors };
  validate(set);
  return set;
}
