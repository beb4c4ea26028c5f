/**
 * A3FC feature-cache container (little endian).
 *
 * Layout: magic "A3FC", version u32, modality count u8, then per modality:
 * tag u8 (0 = RGB, 1 = rendering), V u32, N u32, d u32, and per view the
 * global vector G (d float32) followed by the patch matrix F (N x d
 * float32).  The byte layout is a cross-component contract: identical
 * feature sets must serialize to identical bytes.
 */

export const TAG_RGB = 0;
export const TAG_RENDER = 1;

export interface ModalityFeatures {
  tag: number;
  /** per view: global feature, length d */
  globals: Float64Array[];
  /** per view: patch features, N rows of length d (row-major) */
  patches: Float64Array[];
  n: number;
  d: number;
}

export function encodeA3fc(modalities: ModalityFeatures[]): Uint8Array {
  if (modalities.length === 0) {
    throw new Error("feature cache needs at least one modality");
  }
  let size = 4 + 4 + 1;
  for (const m of modalities) {
    validateModality(m);
    size += 1 + 12 + m.globals.length * (m.d + m.n * m.d) * 4;
  }
  const buf = new Uint8Array(size);
  const view = new DataView(buf.buffer);
  let off = 0;
  buf.set([0x41, 0x33, 0x46, 0x43], off); // "A3FC"
  off += 4;
  view.setUint32(off, 1, true);
  off += 4;
  view.setUint8(off, modalities.length);
  off += 1;
  for (const m of modalities) {
    view.setUint8(off, m.tag);
    off += 1;
    view.setUint32(off, m.globals.length, true);
    off += 4;
    view.setUint32(off, m.n, true);
    off += 4;
    view.setUint32(off, m.d, true);
    off += 4;
    for (let v = 0; v < m.globals.length; v++) {
      off = writeF32(view, off, m.globals[v]);
      off = writeF32(view, off, m.patches[v]);
    }
  }
  return buf;
}

function writeF32(view: DataView, off: number, values: Float64Array): number {
  for (let i = 0; i < values.length; i++) {
    view.setFloat32(off, values[i], true);
    off += 4;
  }
  return off;
}

function validateModality(m: ModalityFeatures): void {
  if (m.tag !== TAG_RGB && m.tag !== TAG_RENDER) {
    throw new Error(`unknown modality tag ${m.tag}`);
  }
  if (m.globals.length !== m.patches.length || m.globals.length === 0) {
    throw new Error("global and patch view counts disagree");
  }
  for (let v = 0; v < m.globals.length; v++) {
    if (m.globals[v].length !== m.d) {
      throw new Error(`view ${v}: global length != d`);
    }
    if (m.patches[v].length !== m.n * m.d) {
      throw new Error(`view ${v}: patch matrix is not N x d`);
    }
  }
}

export interface DecodedModality {
  tag: number;
  viewCount: number;
  n: number;
  d: number;
  globals: Float32Array[];
  patches: Float32Array[];
}

/** Reader used by the round-trip tests; mirrors the primary loader. */
export function decodeA3fc(buf: Uint8Array): DecodedModality[] {
  const view = new DataView(buf.buffer, buf.byteOffset, buf.byteLength);
  let off = 0;
  const magic = String.fromCharCode(...buf.subarray(0, 4));
  if (magic !== "A3FC") throw new Error(`bad magic ${magic}`);
  off += 4;
  const version = view.getUint32(off, true);
  off += 4;
  if (version !== 1) throw new Error(`unsupported version ${version}`);
  const count = view.getUint8(off);
  off += 1;
  const out: DecodedModality[] = [];
  for (let k = 0; k < count; k++) {
    const tag = view.getUint8(off);
    off += 1;
    const viewCount = view.getUint32(off, true);
    off += 4;
    const n = view.getUint32(off, true);
    off += 4;
    const d = view.getUint32(off, true);
    off += 4;
    const globals: Float32Array[] = [];
    const patches: Float32Array[] = [];
    for (let v = 0; v < viewCount; v++) {
      globals.push(readF32(view, off, d));
      off += d * 4;
      patches.push(readF32(view, off, n * d));
      off += n * d * 4;
    }
    out.push({ tag, viewCount, n, d, globals, patches });
  }
  if (off !== buf.byteLength) throw new Error("trailing bytes in cache");
  return out;
}

function readF32(view: DataView, off: number, count: number): Float32Array {
  if (off + count * 4 > view.byteLength) throw new Error("truncated cache");
  const out = new Float32Array(count);
  for (let i = 0; i < count; i++) out[i] = view.getFloat32(off + i * 4, true);
  return out;
}
