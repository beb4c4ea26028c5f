/**
 * Image ingestion: binary/ASCII PGM and PPM, plus planes pulled straight
 * out of A3VB view bundles written by the rendering pipeline.
 *
 * All loaders return grayscale or RGB pixel grids in [0, 1].
 */

import { readFileSync } from "node:fs";

export interface Image {
  height: number;
  width: number;
  channels: 1 | 3;
  /** row-major, channel-interleaved, values in [0, 1] */
  data: Float64Array;
}

export function loadImage(path: string, viewIndex = 0, wantRgb = false): Image {
  if (path.endsWith(".a3vb")) return loadA3vbPlane(path, viewIndex, wantRgb);
  if (path.endsWith(".pgm") || path.endsWith(".ppm")) return loadPnm(path);
  throw new Error(`unsupported image format: ${path}`);
}

// ---- PGM / PPM -------------------------------------------------------------

export function loadPnm(path: string): Image {
  const raw = readFileSync(path);
  const header = parsePnmHeader(raw);
  const { magic, width, height, maxval, offset } = header;
  const channels = magic === "P6" || magic === "P3" ? 3 : 1;
  const count = width * height * channels;
  const data = new Float64Array(count);
  if (magic === "P5" || magic === "P6") {
    if (maxval > 255) throw new Error("16-bit PNM not supported");
    if (raw.length < offset + count) throw new Error("truncated PNM payload");
    for (let i = 0; i < count; i++) data[i] = raw[offset + i] / maxval;
  } else {
    const text = raw.subarray(offset).toString("ascii").trim().split(/\s+/);
    if (text.length < count) throw new Error("truncated PNM payload");
    for (let i = 0; i < count; i++) data[i] = Number(text[i]) / maxval;
  }
  return { height, width, channels: channels as 1 | 3, data };
}

function parsePnmHeader(raw: Buffer) {
  const magic = raw.subarray(0, 2).toString("ascii");
  if (!["P2", "P3", "P5", "P6"].includes(magic)) {
    throw new Error(`not a PGM/PPM file (magic ${magic})`);
  }
  const fields: number[] = [];
  let i = 2;
  while (fields.length < 3) {
    while (i < raw.length && /\s/.test(String.fromCharCode(raw[i]))) i++;
    if (raw[i] === 0x23) { // comment
      while (i < raw.length && raw[i] !== 0x0a) i++;
      continue;
    }
    let start = i;
    while (i < raw.length && !/\s/.test(String.fromCharCode(raw[i]))) i++;
    const token = raw.subarray(start, i).toString("ascii");
    const value = Number(token);
    if (!Number.isFinite(value)) throw new Error(`bad PNM header token ${token}`);
    fields.push(value);
  }
  i++; // single whitespace after maxval
  const [width, height, maxval] = fields;
  return { magic, width, height, maxval, offset: i };
}

// ---- A3VB planes -----------------------------------------------------------

interface A3vbHeader {
  viewCount: number;
  height: number;
  width: number;
  points: number;
  hasRgb: boolean;
  headerBytes: number;
}

function parseA3vbHeader(raw: Buffer): A3vbHeader {
  if (raw.subarray(0, 4).toString("ascii") !== "A3VB") {
    throw new Error("not an A3VB view bundle");
  }
  const view = new DataView(raw.buffer, raw.byteOffset, raw.byteLength);
  const version = view.getUint32(4, true);
  if (version !== 1) throw new Error(`unsupported A3VB version ${version}`);
  const viewCount = view.getUint32(8, true);
  const height = view.getUint32(12, true);
  const width = view.getUint32(16, true);
  const points = Number(view.getBigUint64(20, true));
  const hasRgb = view.getUint8(28) === 1;
  // scale f64 + viewCount angles f64
  const headerBytes = 29 + 8 + viewCount * 8;
  return { viewCount, height, width, points, hasRgb, headerBytes };
}

export function loadA3vbPlane(path: string, viewIndex: number, wantRgb: boolean): Image {
  const raw = readFileSync(path);
  const h = parseA3vbHeader(raw);
  if (viewIndex < 0 || viewIndex >= h.viewCount) {
    throw new Error(`view ${viewIndex} out of range (V=${h.viewCount})`);
  }
  if (wantRgb && !h.hasRgb) throw new Error("bundle has no RGB planes");
  const hw = h.height * h.width;
  const perView = hw * 4 + (h.hasRgb ? hw * 12 : 0) + hw + hw * 8;
  let off = h.headerBytes + viewIndex * perView;
  const view = new DataView(raw.buffer, raw.byteOffset, raw.byteLength);
  const channels = wantRgb ? 3 : 1;
  if (wantRgb) off += hw * 4; // skip the render plane
  const count = hw * channels;
  if (off + count * 4 > raw.length) throw new Error("truncated A3VB payload");
  const data = new Float64Array(count);
  for (let i = 0; i < count; i++) data[i] = view.getFloat32(off + i * 4, true);
  return { height: h.height, width: h.width, channels: channels as 1 | 3, data };
}
