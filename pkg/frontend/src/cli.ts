/**
 * CLI: export --manifest <file> --model <id> --out <dir>
 *
 * Exit codes: 0 success (possibly with per-sample failures listed),
 * 2 usage error, 1 fatal error.
 */

import { runExport } from "./exporter.js";

function parseArgs(argv: string[]): { manifest: string; model: string; out: string } {
  if (argv[0] !== "export") {
    throw new UsageError(`unknown command ${argv[0] ?? "<none>"}; expected 'export'`);
  }
  const opts = new Map<string, string>();
  for (let i = 1; i < argv.length; i += 2) {
    const key = argv[i];
    const value = argv[i + 1];
    if (!key.startsWith("--") || value === undefined) {
      throw new UsageError(`bad argument ${key}`);
    }
    opts.set(key.slice(2), value);
  }
  const manifest = opts.get("manifest");
  const model = opts.get("model");
  const out = opts.get("out");
  if (!manifest || !model || !out) {
    throw new UsageError("export requires --manifest, --model and --out");
  }
  return { manifest, model, out };
}

class UsageError extends Error {}

export function main(argv: string[]): number {
  try {
    const { manifest, model, out } = parseArgs(argv);
    const result = runExport(manifest, model, out);
    console.log(`wrote ${result.written.size} cache(s) -> ${result.manifestPath}`);
    for (const failure of result.failures) {
      console.error(`FAILED ${failure.sample}: ${failure.reason}`);
    }
    return 0;
  } catch (err) {
    if (err instanceof UsageError) {
      console.error(`usage error: ${err.message}`);
      console.error("usage: export --manifest <file> --model <id> --out <dir>");
      return 2;
    }
    console.error(`error: ${(err as Error).message}`);
    return 1;
  }
}

main(process.argv.slice(2));
