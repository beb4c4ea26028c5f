/**
 * Patch-token encoders behind one interface.
 *
 * Built-in encoders are fully deterministic so caches are reproducible
 * byte for byte:
 *
 *   unit-basis:<patch>:<d>   diagnostic encoder; patch n of view v maps to
 *                            the basis vector e_{(N*v+n) mod d}; used by
 *                            the golden-file fixture
 *   surrogate:<patch>:<d>:<seed>
 *                            patch statistics through a seeded random
 *                            projection, L2-normalized
 *   hf:<model-id>            adapter for a pretrained patch-token vision
 *                            model via @huggingface/transformers
 *                            (optional dependency, loaded lazily)
 */

import { Image } from "./images.js";

export interface EncodedView {
  global: Float64Array;
  patches: Float64Array; // N x d row-major
  n: number;
  d: number;
}

export interface Encoder {
  readonly id: string;
  readonly dim: number;
  /** viewIndex feeds deterministic per-view structure where needed */
  encode(image: Image, viewIndex: number): EncodedView;
}

export function createEncoder(id: string): Encoder {
  const parts = id.split(":");
  if (parts[0] === "unit-basis") {
    const [patch, d] = parts.slice(1).map(Number);
    if (!(patch >= 1 && d >= 2)) throw new Error(`bad unit-basis spec ${id}`);
    return new UnitBasisEncoder(id, patch, d);
  }
  if (parts[0] === "surrogate") {
    const [patch, d, seed] = parts.slice(1).map(Number);
    if (!(patch >= 1 && d >= 2) || !Number.isFinite(seed)) {
      throw new Error(`bad surrogate spec ${id}`);
    }
    return new SurrogateEncoder(id, patch, d, seed >>> 0);
  }
  if (parts[0] === "hf") {
    throw new Error(
      "hf-model export requires the optional @huggingface/transformers " +
      "dependency; install it and use the HfEncoder entry point");
  }
  throw new Error(`unknown encoder id ${id}`);
}

function patchGrid(image: Image, patch: number): { nh: number; nw: number } {
  if (image.height % patch !== 0 || image.width % patch !== 0) {
    throw new Error(
      `image ${image.height}x${image.width} not divisible by patch ${patch}`);
  }
  return { nh: image.height / patch, nw: image.width / patch };
}

function l2normalize(v: Float64Array): void {
  let s = 0;
  for (let i = 0; i < v.length; i++) s += v[i] * v[i];
  const norm = Math.sqrt(s);
  if (norm === 0) throw new Error("zero-norm feature vector");
  for (let i = 0; i < v.length; i++) v[i] /= norm;
}

class UnitBasisEncoder implements Encoder {
  constructor(readonly id: string, private patch: number, readonly dim: number) {}

  encode(image: Image, viewIndex: number): EncodedView {
    const { nh, nw } = patchGrid(image, this.patch);
    const n = nh * nw;
    const patches = new Float64Array(n * this.dim);
    const global = new Float64Array(this.dim);
    for (let p = 0; p < n; p++) {
      const axis = (n * viewIndex + p) % this.dim;
      patches[p * this.dim + axis] = 1.0;
      global[axis] += 1.0 / n;
    }
    l2normalize(global);
    return { global, patches, n, d: this.dim };
  }
}

/** splitmix64-style 32-bit PRNG; deterministic across platforms. */
function mulberry32(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a = (a + 0x6d2b79f5) >>> 0;
    let t = a;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

class SurrogateEncoder implements Encoder {
  private projection: Float64Array; // dim x (patch*patch*3 + 5)
  private nIn: number;

  constructor(readonly id: string, private patch: number, readonly dim: number,
              seed: number) {
    this.nIn = patch * patch * 3 + 5;
    const rand = mulberry32(seed);
    this.projection = new Float64Array(this.dim * this.nIn);
    for (let i = 0; i < this.projection.length; i++) {
      // Box-Muller from two uniforms, frozen at construction.
      const u1 = Math.max(rand(), 1e-12);
      const u2 = rand();
      this.projection[i] =
        Math.sqrt(-2 * Math.log(u1)) * Math.cos(2 * Math.PI * u2) /
        Math.sqrt(this.nIn);
    }
  }

  encode(image: Image): EncodedView {
    const { nh, nw } = patchGrid(image, this.patch);
    const n = nh * nw;
    const ps = this.patch;
    const raw = new Float64Array(n * this.dim);
    const input = new Float64Array(this.nIn);
    const global = new Float64Array(this.dim);
    for (let py = 0; py < nh; py++) {
      for (let px = 0; px < nw; px++) {
        let k = 0;
        let sum = 0, sumSq = 0;
        let min = Infinity, max = -Infinity;
        for (let y = 0; y < ps; y++) {
          for (let x = 0; x < ps; x++) {
            const row = py * ps + y;
            const col = px * ps + x;
            for (let c = 0; c < 3; c++) {
              const src = image.channels === 3
                ? image.data[(row * image.width + col) * 3 + c]
                : image.data[row * image.width + col];
              input[k++] = src;
              sum += src;
              sumSq += src * src;
              if (src < min) min = src;
              if (src > max) max = src;
            }
          }
        }
        const count = ps * ps * 3;
        const mean = sum / count;
        input[k++] = mean;
        input[k++] = Math.sqrt(Math.max(sumSq / count - mean * mean, 0));
        input[k++] = min;
        input[k++] = max;
        input[k++] = 1.0;
        const p = py * nw + px;
        for (let o = 0; o < this.dim; o++) {
          let acc = 0;
          const base = o * this.nIn;
          for (let i = 0; i < this.nIn; i++) acc += this.projection[base + i] * input[i];
          raw[p * this.dim + o] = acc;
          global[o] += acc / n;
        }
      }
    }
    for (let p = 0; p < n; p++) {
      const row = raw.subarray(p * this.dim, (p + 1) * this.dim);
      l2normalize(row);
    }
    l2normalize(global);
    return { global, patches: raw, n, d: this.dim };
  }
}
