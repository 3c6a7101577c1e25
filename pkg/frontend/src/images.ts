/**
 * Minimal image decoding: PNG (8-bit gray/RGB/RGBA, non-interlaced) and
 * binary PPM (P6). Enough for folder-per-class datasets of ordinary images
 * without native dependencies.
 */

import { inflateSync } from "node:zlib";

export interface DecodedImage {
  width: number;
  height: number;
  /** row-major RGB triples, 0-255 */
  rgb: Uint8Array;
}

export class ImageDecodeError extends Error {}

const PNG_SIGNATURE = Buffer.from([0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a]);

export function decodeImage(data: Buffer, filename: string): DecodedImage {
  if (data.subarray(0, 8).equals(PNG_SIGNATURE)) return decodePng(data);
  if (data[0] === 0x50 && data[1] === 0x36) return decodePpm(data); // "P6"
  throw new ImageDecodeError(`${filename}: not a PNG or binary PPM file`);
}

function paeth(a: number, b: number, c: number): number {
  const p = a + b - c;
  const pa = Math.abs(p - a);
  const pb = Math.abs(p - b);
  const pc = Math.abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  return pb <= pc ? b : c;
}

function decodePng(data: Buffer): DecodedImage {
  let pos = 8;
  let width = 0;
  let height = 0;
  let bitDepth = 0;
  let colorType = 0;
  const idat: Buffer[] = [];
  while (pos + 8 <= data.length) {
    const length = data.readUInt32BE(pos);
    const kind = data.toString("ascii", pos + 4, pos + 8);
    const body = data.subarray(pos + 8, pos + 8 + length);
    if (kind === "IHDR") {
      width = body.readUInt32BE(0);
      height = body.readUInt32BE(4);
      bitDepth = body[8];
      colorType = body[9];
      if (body[12] !== 0) throw new ImageDecodeError("interlaced PNG not supported");
      if (bitDepth !== 8) throw new ImageDecodeError(`bit depth ${bitDepth} not supported`);
      if (![0, 2, 4, 6].includes(colorType)) {
        throw new ImageDecodeError(`color type ${colorType} not supported`);
      }
    } else if (kind === "IDAT") {
      idat.push(body);
    } else if (kind === "IEND") {
      break;
    }
    pos += 12 + length; // length + type + data + crc
  }
  if (width === 0 || height === 0 || idat.length === 0) {
    throw new ImageDecodeError("missing IHDR or IDAT chunks");
  }
  const channels = { 0: 1, 2: 3, 4: 2, 6: 4 }[colorType as 0 | 2 | 4 | 6];
  const raw = inflateSync(Buffer.concat(idat));
  const stride = width * channels;
  if (raw.length !== height * (stride + 1)) {
    throw new ImageDecodeError("decompressed size does not match dimensions");
  }
  const pixels = new Uint8Array(height * stride);
  for (let y = 0; y < height; y++) {
    const filter = raw[y * (stride + 1)];
    const line = raw.subarray(y * (stride + 1) + 1, (y + 1) * (stride + 1));
    const out = pixels.subarray(y * stride, (y + 1) * stride);
    const prev = y > 0 ? pixels.subarray((y - 1) * stride, y * stride) : null;
    for (let x = 0; x < stride; x++) {
      const left = x >= channels ? out[x - channels] : 0;
      const up = prev ? prev[x] : 0;
      const upLeft = prev && x >= channels ? prev[x - channels] : 0;
      let value = line[x];
      switch (filter) {
        case 0: break;
        case 1: value += left; break;
        case 2: value += up; break;
        case 3: value += (left + up) >> 1; break;
        case 4: value += paeth(left, up, upLeft); break;
        default: throw new ImageDecodeError(`unknown PNG filter ${filter}`);
      }
      out[x] = value & 0xff;
    }
  }
  const rgb = new Uint8Array(width * height * 3);
  for (let i = 0; i < width * height; i++) {
    const base = i * channels;
    if (colorType === 0 || colorType === 4) {
      rgb[i * 3] = rgb[i * 3 + 1] = rgb[i * 3 + 2] = pixels[base];
    } else {
      rgb[i * 3] = pixels[base];
      rgb[i * 3 + 1] = pixels[base + 1];
      rgb[i * 3 + 2] = pixels[base + 2];
    }
  }
  return { width, height, rgb };
}

function decodePpm(data: Buffer): DecodedImage {
  // header: "P6" <ws> width <ws> height <ws> maxval <single ws> pixels
  let pos = 2;
  const fields: number[] = [];
  while (fields.length < 3) {
    while (pos < data.length && /\s/.test(String.fromCharCode(data[pos]))) pos++;
    if (data[pos] === 0x23) { // comment line
      while (pos < data.length && data[pos] !== 0x0a) pos++;
      continue;
    }
    let start = pos;
    while (pos < data.length && !/\s/.test(String.fromCharCode(data[pos]))) pos++;
    const field = Number(data.toString("ascii", start, pos));
    if (!Number.isFinite(field)) throw new ImageDecodeError("bad PPM header field");
    fields.push(field);
  }
  pos++; // single whitespace after maxval
  const [width, height, maxval] = fields;
  if (maxval !== 255) throw new ImageDecodeError(`PPM maxval ${maxval} not supported`);
  const expected = width * height * 3;
  if (data.length - pos < expected) throw new ImageDecodeError("truncated PPM payload");
  return { width, height, rgb: new Uint8Array(data.subarray(pos, pos + expected)) };
}
