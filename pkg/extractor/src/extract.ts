/**
 * Extraction pipelines: manifests in, `.iseb` stores or classifier-output
 * bundles out. Output order always equals manifest order; unreadable inputs
 * are reported in an error sidecar and skipped rather than aborting the run.
 */

import { promises as fs } from "node:fs";

import { Encoder } from "./encoders.js";
import {
  ClassifierBundle,
  Modality,
  RecordMeta,
  Store,
  writeClassifierOutputs,
  writeStore,
} from "./iseb.js";

export interface ManifestEntry {
  id: string;
  text?: string;
  path?: string;
  label_id: number | null;
}

export async function readManifest(path: string): Promise<ManifestEntry[]> {
  const raw = await fs.readFile(path, "utf8");
  const entries: ManifestEntry[] = [];
  const seen = new Set<string>();
  for (const line of raw.split("\n")) {
    if (!line.trim()) continue;
    const obj = JSON.parse(line);
    if (obj.text === undefined && obj.path === undefined) {
      throw new Error(`manifest entry needs "text" or "path": ${line}`);
    }
    const id: string = obj.id ?? obj.path ?? obj.text;
    if (seen.has(id)) throw new Error(`duplicate manifest id ${id}`);
    seen.add(id);
    entries.push({
      id,
      text: obj.text,
      path: obj.path,
      label_id: obj.label_id ?? null,
    });
  }
  return entries;
}

export interface ExtractResult {
  written: number;
  failed: { id: string; error: string }[];
}

async function writeErrorSidecar(
  outPath: string,
  failed: { id: string; error: string }[],
): Promise<void> {
  if (failed.length === 0) return;
  const lines = failed.map((f) => JSON.stringify(f)).join("\n") + "\n";
  await fs.writeFile(`${outPath}.errors.jsonl`, lines);
}

export async function extractEmbeddings(
  entries: ManifestEntry[],
  modality: Modality,
  encoder: Encoder,
  outPath: string,
): Promise<ExtractResult> {
  const vectors: Float32Array[] = [];
  const meta: RecordMeta[] = [];
  const failed: { id: string; error: string }[] = [];

  for (const entry of entries) {
    try {
      let vec: Float32Array;
      if (modality === "text") {
        if (entry.text === undefined) throw new Error("entry has no text field");
        [vec] = await encoder.embedText([entry.text]);
      } else {
        if (entry.path === undefined) throw new Error("entry has no path field");
        [vec] = await encoder.embedImages([entry.path]);
      }
      vectors.push(vec);
      meta.push({ id: entry.id, label_id: entry.label_id, modality });
    } catch (err) {
      failed.push({ id: entry.id, error: (err as Error).message });
    }
  }

  const store: Store = { dim: encoder.dim, vectors, meta };
  await writeStore(outPath, store);
  await writeErrorSidecar(outPath, failed);
  return { written: vectors.length, failed };
}

// --- deterministic stand-in classifier over encoder embeddings ---------------

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

function seededMatrix(rows: number, cols: number, seed: number, scale: number): Float32Array[] {
  const rand = mulberry32(seed);
  const out: Float32Array[] = [];
  for (let r = 0; r < rows; r++) {
    const row = new Float32Array(cols);
    for (let c = 0; c < cols; c++) {
      const u1 = rand() || 1e-12;
      const u2 = rand();
      row[c] = Math.fround(scale * Math.sqrt(-2 * Math.log(u1)) * Math.cos(2 * Math.PI * u2));
    }
    out.push(row);
  }
  return out;
}

export interface BackboneConfig {
  featureDim: number;
  nClasses: number;
  seed: number;
}

/**
 * Deterministic linear-ReLU-linear head over encoder embeddings. All
 * parameters and activations are float32-rounded before the logits are
 * computed, so the stored logits reproduce from the stored features and
 * weights to float32 rounding error -- far inside the toolkit's 1e-3
 * consistency gate.
 */
export class MockBackbone {
  readonly config: BackboneConfig;
  private projection: Float32Array[]; // featureDim x encoderDim
  private projBias: Float32Array;
  private fcWeights: Float32Array[]; // nClasses x featureDim
  private fcBias: Float32Array;

  constructor(encoderDim: number, config: BackboneConfig) {
    this.config = config;
    const scale = 1 / Math.sqrt(encoderDim);
    this.projection = seededMatrix(config.featureDim, encoderDim, config.seed, scale);
    this.projBias = seededMatrix(1, config.featureDim, config.seed + 1, 0.1)[0];
    this.fcWeights = seededMatrix(config.nClasses, config.featureDim,
      config.seed + 2, 1 / Math.sqrt(config.featureDim));
    this.fcBias = seededMatrix(1, config.nClasses, config.seed + 3, 0.05)[0];
  }

  features(embedding: Float32Array): Float32Array {
    const out = new Float32Array(this.config.featureDim);
    for (let r = 0; r < this.config.featureDim; r++) {
      let acc = this.projBias[r];
      const row = this.projection[r];
      for (let c = 0; c < embedding.length; c++) acc += row[c] * embedding[c];
      out[r] = acc > 0 ? Math.fround(acc) : 0; // post-ReLU, non-negative
    }
    return out;
  }

  logits(features: Float32Array): Float32Array {
    const out = new Float32Array(this.config.nClasses);
    for (let r = 0; r < this.config.nClasses; r++) {
      let acc = this.fcBias[r];
      const row = this.fcWeights[r];
      for (let c = 0; c < features.length; c++) acc += row[c] * features[c];
      out[r] = Math.fround(acc);
    }
    return out;
  }

  head(): { weights: Float32Array[]; bias: Float32Array } {
    return { weights: this.fcWeights, bias: this.fcBias };
  }
}

export async function extractClassifierOutputs(
  entries: ManifestEntry[],
  encoder: Encoder,
  backboneConfig: BackboneConfig,
  outDir: string,
  modality: Modality = "image",
): Promise<ExtractResult> {
  const backbone = new MockBackbone(encoder.dim, backboneConfig);
  const ids: string[] = [];
  const labelIds: (number | null)[] = [];
  const features: Float32Array[] = [];
  const logits: Float32Array[] = [];
  const failed: { id: string; error: string }[] = [];

  for (const entry of entries) {
    try {
      let embedding: Float32Array;
      if (modality === "text") {
        if (entry.text === undefined) throw new Error("entry has no text field");
        [embedding] = await encoder.embedText([entry.text]);
      } else {
        if (entry.path === undefined) throw new Error("entry has no path field");
        [embedding] = await encoder.embedImages([entry.path]);
      }
      const f = backbone.features(embedding);
      ids.push(entry.id);
      labelIds.push(entry.label_id);
      features.push(f);
      logits.push(backbone.logits(f));
    } catch (err) {
      failed.push({ id: entry.id, error: (err as Error).message });
    }
  }

  const { weights, bias } = backbone.head();
  const bundle: ClassifierBundle = {
    ids,
    labelIds,
    features,
    logits,
    fcWeights: weights,
    fcBias: bias,
    modelName: `mock-${encoder.name}-d${backboneConfig.featureDim}-c${backboneConfig.nClasses}`,
  };
  await writeClassifierOutputs(outDir, bundle);
  await writeErrorSidecar(`${outDir}/features.iseb`, failed);
  return { written: ids.length, failed };
}
