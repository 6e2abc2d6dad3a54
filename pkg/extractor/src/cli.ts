#!/usr/bin/env node
/**
 * isood-extract: produce the on-disk inputs the benchmark toolkit consumes.
 *
 *   isood-extract embed --manifest m.jsonl --modality image|text --out X.iseb
 *                       [--encoder hash|clip[:model]] [--dim 512]
 *   isood-extract classifier --manifest m.jsonl --out DIR/
 *                       [--encoder hash|clip[:model]] [--dim 512]
 *                       [--feature-dim 64] [--classes 10] [--seed 0]
 */

import { makeEncoder } from "./encoders.js";
import { extractClassifierOutputs, extractEmbeddings, readManifest } from "./extract.js";

function parseArgs(argv: string[]): { command: string; options: Map<string, string> } {
  const [command, ...rest] = argv;
  const options = new Map<string, string>();
  for (let i = 0; i < rest.length; i += 2) {
    const key = rest[i];
    if (!key.startsWith("--") || i + 1 >= rest.length) {
      throw new Error(`expected --key value pairs, got ${rest.slice(i).join(" ")}`);
    }
    options.set(key.slice(2), rest[i + 1]);
  }
  return { command, options };
}

function required(options: Map<string, string>, key: string): string {
  const value = options.get(key);
  if (value === undefined) throw new Error(`missing required option --${key}`);
  return value;
}

async function main(): Promise<void> {
  const { command, options } = parseArgs(process.argv.slice(2));
  const encoder = makeEncoder(
    options.get("encoder") ?? "hash",
    Number(options.get("dim") ?? 512),
  );

  if (command === "embed") {
    const modality = required(options, "modality");
    if (modality !== "image" && modality !== "text") {
      throw new Error(`--modality must be image or text, got ${modality}`);
    }
    const entries = await readManifest(required(options, "manifest"));
    const result = await extractEmbeddings(entries, modality, encoder, required(options, "out"));
    console.log(JSON.stringify({
      out: options.get("out"),
      written: result.written,
      failed: result.failed.length,
      encoder: encoder.name,
      dim: encoder.dim,
    }));
  } else if (command === "classifier") {
    const entries = await readManifest(required(options, "manifest"));
    const result = await extractClassifierOutputs(
      entries,
      encoder,
      {
        featureDim: Number(options.get("feature-dim") ?? 64),
        nClasses: Number(options.get("classes") ?? 10),
        seed: Number(options.get("seed") ?? 0),
      },
      required(options, "out"),
      (options.get("modality") as "image" | "text") ?? "image",
    );
    console.log(JSON.stringify({
      out: options.get("out"),
      written: result.written,
      failed: result.failed.length,
      encoder: encoder.name,
    }));
  } else {
    throw new Error(`unknown command ${command ?? "(none)"}; use embed or classifier`);
  }
}

main().catch((err) => {
  console.error(`error: ${(err as Error).message}`);
  process.exit(1);
});
