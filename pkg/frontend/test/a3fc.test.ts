import { readFileSync, writeFileSync, mkdtempSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { describe, expect, it } from "vitest";

import { decodeA3fc, encodeA3fc, TAG_RENDER, TAG_RGB } from "../src/a3fc.js";
import { runExport } from "../src/exporter.js";

function writePgm(path: string, height: number, width: number, fill: (y: number, x: number) => number): void {
  const header = Buffer.from(`P5\n${width} ${height}\n255\n`, "ascii");
  const body = Buffer.alloc(height * width);
  for (let y = 0; y < height; y++) {
    for (let x = 0; x < width; x++) {
      body[y * width + x] = fill(y, x);
    }
  }
  writeFileSync(path, Buffer.concat([header, body]));
}

describe("A3FC container", () => {
  it("round-trips feature sets value-exactly at float32", () => {
    const d = 5;
    const globals = [Float64Array.from([0.1, -0.2, 0.3, 0.7, -0.4])];
    const patches = [new Float64Array(2 * d).map((_, i) => Math.sin(i))];
    const bytes = encodeA3fc([{ tag: TAG_RGB, globals, patches, n: 2, d }]);
    const [decoded] = decodeA3fc(bytes);
    expect(decoded.tag).toBe(TAG_RGB);
    expect(decoded.viewCount).toBe(1);
    expect(decoded.n).toBe(2);
    expect(decoded.d).toBe(d);
    for (let i = 0; i < d; i++) {
      expect(decoded.globals[0][i]).toBe(Math.fround(globals[0][i]));
    }
    for (let i = 0; i < 2 * d; i++) {
      expect(decoded.patches[0][i]).toBe(Math.fround(patches[0][i]));
    }
  });

  it("is byte-deterministic", () => {
    const mk = () => encodeA3fc([{
      tag: TAG_RENDER,
      globals: [Float64Array.from([1, 0, 0])],
      patches: [Float64Array.from([0, 1, 0, 0, 0, 1])],
      n: 2, d: 3,
    }]);
    expect(Buffer.from(mk()).equals(Buffer.from(mk()))).toBe(true);
  });

  it("rejects malformed modalities", () => {
    expect(() => encodeA3fc([])).toThrow(/at least one/);
    expect(() => encodeA3fc([{
      tag: 7, globals: [new Float64Array(2)], patches: [new Float64Array(2)], n: 1, d: 2,
    }])).toThrow(/tag/);
    expect(() => encodeA3fc([{
      tag: TAG_RGB, globals: [new Float64Array(3)], patches: [new Float64Array(5)], n: 2, d: 3,
    }])).toThrow(/N x d/);
  });

  it("reproduces the hand-written golden fixture byte for byte", () => {
    // 2 views, N=4, d=8, rendering modality, unit-basis encoder.
    const dir = mkdtempSync(join(tmpdir(), "a3fc-golden-"));
    const lines: string[] = [];
    for (let v = 0; v < 2; v++) {
      const img = join(dir, `view${v}.pgm`);
      writePgm(img, 4, 4, (y, x) => (y * 4 + x) * 16);
      lines.push(`fixture\tr\t${v}\t${img}`);
    }
    const manifest = join(dir, "manifest.txt");
    writeFileSync(manifest, lines.join("\n") + "\n");

    const result = runExport(manifest, "unit-basis:2:8", join(dir, "out"));
    expect(result.failures).toEqual([]);
    const produced = readFileSync(result.written.get("fixture")!);
    const golden = readFileSync(join(__dirname, "fixtures", "exporter_golden.a3fc"));
    expect(produced.length).toBe(golden.length);
    expect(produced.equals(golden)).toBe(true);
  });

  it("matches the golden header geometry when re-read", () => {
    const golden = readFileSync(join(__dirname, "fixtures", "exporter_golden.a3fc"));
    const [m] = decodeA3fc(new Uint8Array(golden));
    expect(m.tag).toBe(TAG_RENDER);
    expect(m.viewCount).toBe(2);
    expect(m.n).toBe(4);
    expect(m.d).toBe(8);
    expect(m.globals[0][0]).toBe(0.5);
    expect(m.patches[1][0 * 8 + 4]).toBe(1.0);
  });
});
