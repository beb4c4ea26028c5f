/**
 * Input manifest: one image per line, tab separated:
 *
 *   sample_id <TAB> modality (R|r) <TAB> view_index <TAB> path
 *
 * Paths may reference .pgm/.ppm images or .a3vb bundles (the view index
 * selects the plane; modality R selects the RGB plane of a bundle).
 * Blank lines and `#` comments are skipped.
 */

import { readFileSync } from "node:fs";

export interface ManifestRow {
  sample: string;
  modality: "R" | "r";
  viewIndex: number;
  path: string;
  line: number;
}

export function parseManifest(path: string): ManifestRow[] {
  const rows: ManifestRow[] = [];
  const lines = readFileSync(path, "utf-8").split("\n");
  lines.forEach((raw, i) => {
    const text = raw.split("#", 1)[0].trim();
    if (!text) return;
    const parts = text.split("\t");
    if (parts.length !== 4) {
      throw new Error(`manifest line ${i + 1}: expected 4 tab-separated fields`);
    }
    const [sample, modality, viewIndex, imagePath] = parts;
    if (modality !== "R" && modality !== "r") {
      throw new Error(`manifest line ${i + 1}: modality must be R or r`);
    }
    const v = Number(viewIndex);
    if (!Number.isInteger(v) || v < 0) {
      throw new Error(`manifest line ${i + 1}: bad view index ${viewIndex}`);
    }
    rows.push({ sample, modality, viewIndex: v, path: imagePath, line: i + 1 });
  });
  return rows;
}

export interface SampleGroup {
  sample: string;
  /** modality -> view index -> path, dense in view order */
  views: Map<"R" | "r", string[]>;
}

export function groupBySample(rows: ManifestRow[]): SampleGroup[] {
  const bySample = new Map<string, Map<"R" | "r", Map<number, string>>>();
  for (const row of rows) {
    let mods = bySample.get(row.sample);
    if (!mods) bySample.set(row.sample, (mods = new Map()));
    let views = mods.get(row.modality);
    if (!views) mods.set(row.modality, (views = new Map()));
    if (views.has(row.viewIndex)) {
      throw new Error(
        `duplicate view ${row.viewIndex} for sample ${row.sample}/${row.modality}`);
    }
    views.set(row.viewIndex, row.path);
  }
  const groups: SampleGroup[] = [];
  for (const [sample, mods] of bySample) {
    const views = new Map<"R" | "r", string[]>();
    for (const [modality, byIndex] of mods) {
      const count = byIndex.size;
      const paths: string[] = [];
      for (let v = 0; v < count; v++) {
        const p = byIndex.get(v);
        if (p === undefined) {
          throw new Error(`sample ${sample}/${modality}: missing view ${v}`);
        }
        paths.push(p);
      }
      views.set(modality, paths);
    }
    groups.push({ sample, views });
  }
  groups.sort((a, b) => (a.sample < b.sample ? -1 : a.sample > b.sample ? 1 : 0));
  return groups;
}
