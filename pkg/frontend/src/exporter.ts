/**
 * Export job: encode every image referenced by the manifest and emit one
 * A3FC cache per sample plus an output manifest.  Per-sample failures are
 * collected and reported; the job keeps going.
 */

import { mkdirSync, writeFileSync } from "node:fs";
import { join } from "node:path";

import { encodeA3fc, ModalityFeatures, TAG_RENDER, TAG_RGB } from "./a3fc.js";
import { createEncoder, Encoder } from "./encoders.js";
import { loadImage } from "./images.js";
import { groupBySample, parseManifest, SampleGroup } from "./manifest.js";

export interface ExportFailure {
  sample: string;
  reason: string;
}

export interface ExportResult {
  written: Map<string, string>;   // sample -> cache path
  failures: ExportFailure[];
  manifestPath: string;
}

const TAG_BY_MODALITY: Record<"R" | "r", number> = { R: TAG_RGB, r: TAG_RENDER };

export function exportSample(group: SampleGroup, encoder: Encoder): Uint8Array {
  const modalities: ModalityFeatures[] = [];
  // Deterministic modality order: RGB (0) first, rendering (1) second.
  const order: Array<"R" | "r"> = ["R", "r"];
  let expected: { n: number; d: number } | null = null;
  for (const modality of order) {
    const paths = group.views.get(modality);
    if (!paths) continue;
    const globals: Float64Array[] = [];
    const patches: Float64Array[] = [];
    let n = 0;
    paths.forEach((path, viewIndex) => {
      const image = loadImage(path, viewIndex, modality === "R");
      const encoded = encoder.encode(image, viewIndex);
      if (expected === null) {
        expected = { n: encoded.n, d: encoded.d };
      } else if (expected.n !== encoded.n || expected.d !== encoded.d) {
        throw new Error(
          `sample ${group.sample}: views disagree on patch geometry ` +
          `(${encoded.n}x${encoded.d} vs ${expected.n}x${expected.d})`);
      }
      globals.push(encoded.global);
      patches.push(encoded.patches);
      n = encoded.n;
    });
    modalities.push({ tag: TAG_BY_MODALITY[modality], globals, patches, n, d: encoder.dim });
  }
  if (modalities.length === 0) {
    throw new Error(`sample ${group.sample}: no views in manifest`);
  }
  return encodeA3fc(modalities);
}

export function runExport(manifestPath: string, modelId: string,
                          outDir: string): ExportResult {
  const encoder = createEncoder(modelId);
  const groups = groupBySample(parseManifest(manifestPath));
  mkdirSync(outDir, { recursive: true });
  const written = new Map<string, string>();
  const failures: ExportFailure[] = [];
  for (const group of groups) {
    try {
      const bytes = exportSample(group, encoder);
      const path = join(outDir, `${group.sample}.a3fc`);
      writeFileSync(path, bytes);
      written.set(group.sample, path);
    } catch (err) {
      failures.push({ sample: group.sample, reason: (err as Error).message });
    }
  }
  const manifestLines = [...written.entries()]
    .map(([sample, path]) => `${sample}\t${path}`);
  const outManifest = join(outDir, "manifest.txt");
  writeFileSync(outManifest, manifestLines.join("\n") + "\n", "utf-8");
  if (failures.length > 0) {
    const failLines = failures.map((f) => `${f.sample}\t${f.reason}`);
    writeFileSync(join(outDir, "failures.txt"), failLines.join("\n") + "\n", "utf-8");
  }
  return { written, failures, manifestPath: outManifest };
}
