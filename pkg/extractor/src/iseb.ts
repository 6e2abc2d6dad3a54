/**
 * Writer/reader for the `.iseb` embedding store format consumed by the
 * benchmark toolkit: 16-byte little-endian header (magic "ISEB", version,
 * dim, count, all u32) followed by row-major float32 vectors, with a
 * JSON-lines metadata sidecar at `<path>.meta.jsonl`.
 */

import { promises as fs } from "node:fs";

export const MAGIC = "ISEB";
export const FORMAT_VERSION = 1;
export const HEADER_BYTES = 16;

export type Modality = "text" | "image";

export interface RecordMeta {
  id: string;
  label_id: number | null;
  modality: Modality;
}

export interface Store {
  dim: number;
  vectors: Float32Array[]; // one per record, length dim
  meta: RecordMeta[];
}

function validate(store: Store): void {
  if (!Number.isInteger(store.dim) || store.dim <= 0) {
    throw new Error(`dim must be a positive integer, got ${store.dim}`);
  }
  if (store.vectors.length !== store.meta.length) {
    throw new Error(
      `${store.vectors.length} vectors but ${store.meta.length} metadata records`,
    );
  }
  const seen = new Set<string>();
  for (let i = 0; i < store.meta.length; i++) {
    if (store.vectors[i].length !== store.dim) {
      throw new Error(
        `record ${store.meta[i].id}: vector length ${store.vectors[i].length} != dim ${store.dim}`,
      );
    }
    if (seen.has(store.meta[i].id)) {
      throw new Error(`duplicate id ${store.meta[i].id}`);
    }
    seen.add(store.meta[i].id);
  }
}

export async function writeStore(path: string, store: Store): Promise<void> {
  validate(store);
  const count = store.vectors.length;
  const buf = Buffer.alloc(HEADER_BYTES + 4 * store.dim * count);
  buf.write(MAGIC, 0, "ascii");
  buf.writeUInt32LE(FORMAT_VERSION, 4);
  buf.writeUInt32LE(store.dim, 8);
  buf.writeUInt32LE(count, 12);
  for (let i = 0; i < count; i++) {
    const row = store.vectors[i];
    for (let j = 0; j < store.dim; j++) {
      buf.writeFloatLE(row[j], HEADER_BYTES + 4 * (i * store.dim + j));
    }
  }
  await fs.writeFile(path, buf);
  const lines = store.meta
    .map((m) => JSON.stringify({ id: m.id, label_id: m.label_id, modality: m.modality }))
    .join("\n");
  await fs.writeFile(`${path}.meta.jsonl`, count > 0 ? lines + "\n" : "");
}

export async function readStore(path: string): Promise<Store> {
  const buf = await fs.readFile(path);
  if (buf.length < HEADER_BYTES) {
    throw new Error(`${path}: shorter than the ${HEADER_BYTES}-byte header`);
  }
  if (buf.toString("ascii", 0, 4) !== MAGIC) {
    throw new Error(`${path}: bad magic`);
  }
  const version = buf.readUInt32LE(4);
  if (version !== FORMAT_VERSION) {
    throw new Error(`${path}: unsupported version ${version}`);
  }
  const dim = buf.readUInt32LE(8);
  const count = buf.readUInt32LE(12);
  if (buf.length !== HEADER_BYTES + 4 * dim * count) {
    throw new Error(`${path}: payload size mismatch`);
  }
  const vectors: Float32Array[] = [];
  for (let i = 0; i < count; i++) {
    const row = new Float32Array(dim);
    for (let j = 0; j < dim; j++) {
      row[j] = buf.readFloatLE(HEADER_BYTES + 4 * (i * dim + j));
    }
    vectors.push(row);
  }
  const metaRaw = await fs.readFile(`${path}.meta.jsonl`, "utf8");
  const meta: RecordMeta[] = metaRaw
    .split("\n")
    .filter((line) => line.trim().length > 0)
    .map((line) => JSON.parse(line));
  if (meta.length !== count) {
    throw new Error(`${path}: sidecar has ${meta.length} lines for ${count} records`);
  }
  return { dim, vectors, meta };
}

export interface ClassifierBundle {
  ids: string[];
  labelIds: (number | null)[];
  features: Float32Array[]; // n x d, post-ReLU
  logits: Float32Array[]; // n x C
  fcWeights: Float32Array[]; // C x d
  fcBias: Float32Array; // C
  modelName: string;
}

export async function writeClassifierOutputs(
  dir: string,
  bundle: ClassifierBundle,
): Promise<void> {
  await fs.mkdir(dir, { recursive: true });
  const d = bundle.fcWeights[0].length;
  const nClasses = bundle.fcWeights.length;
  const meta = (ids: string[], labels: (number | null)[]): RecordMeta[] =>
    ids.map((id, i) => ({ id, label_id: labels[i] ?? null, modality: "image" }));

  await writeStore(`${dir}/features.iseb`, {
    dim: d,
    vectors: bundle.features,
    meta: meta(bundle.ids, bundle.labelIds),
  });
  await writeStore(`${dir}/logits.iseb`, {
    dim: nClasses,
    vectors: bundle.logits,
    meta: meta(bundle.ids, bundle.labelIds),
  });
  await writeStore(`${dir}/fc_weights.iseb`, {
    dim: d,
    vectors: bundle.fcWeights,
    meta: meta(
      Array.from({ length: nClasses }, (_, c) => `class_${c}`),
      Array.from({ length: nClasses }, () => null),
    ),
  });
  await writeStore(`${dir}/fc_bias.iseb`, {
    dim: nClasses,
    vectors: [bundle.fcBias],
    meta: [{ id: "bias", label_id: null, modality: "image" }],
  });
  const manifest = { C: nClasses, d, model_name: bundle.modelName };
  await fs.writeFile(`${dir}/manifest.json`, JSON.stringify(manifest) + "\n");
}
