/**
 * Text encoder backends producing raw 512-dimensional embeddings.
 *
 * "clip" runs a pretrained CLIP text encoder through @xenova/transformers;
 * it needs the optional package installed plus local model weights, and
 * fails with a remediation hint otherwise. "seeded" is a fully deterministic
 * offline stand-in: hashed word and character-trigram features accumulated
 * into a fixed-width vector, so related names share mass.
 */

import { SplitMix64, hash64 } from "./random.js";

export const ENCODER_WIDTH = 512;

export class EncoderUnavailableError extends Error {}

export interface TextEncoder {
  encode(texts: string[]): Promise<Float64Array[]>;
}

function l2normalize(v: Float64Array): Float64Array {
  let sq = 0;
  for (const x of v) sq += x * x;
  const norm = Math.sqrt(sq);
  if (norm === 0) throw new Error("zero-norm embedding");
  return v.map((x) => x / norm) as Float64Array;
}

export class SeededEncoder implements TextEncoder {
  constructor(private readonly seed = 0x5eed) {}

  private features(text: string): string[] {
    const cleaned = text.toLowerCase().trim();
    const words = cleaned.split(/\s+/).filter((w) => w.length > 0);
    const grams: string[] = [];
    for (const w of words) {
      grams.push(`w:${w}`);
      const padded = `^${w}$`;
      for (let i = 0; i + 3 <= padded.length; i++) {
        grams.push(`g:${padded.slice(i, i + 3)}`);
      }
    }
    return grams;
  }

  async encode(texts: string[]): Promise<Float64Array[]> {
    return texts.map((text) => {
      const acc = new Float64Array(ENCODER_WIDTH);
      for (const gram of this.features(text)) {
        const rng = new SplitMix64(hash64(gram) ^ BigInt(this.seed));
        // each feature contributes a sparse signed pattern
        for (let k = 0; k < 16; k++) {
          const idx = Number(rng.nextU64() % BigInt(ENCODER_WIDTH));
          acc[idx] += rng.nextGaussian();
        }
      }
      return l2normalize(acc);
    });
  }
}

const CLIP_MODEL = "Xenova/clip-vit-base-patch32";

export class ClipEncoder implements TextEncoder {
  async encode(texts: string[]): Promise<Float64Array[]> {
    let transformers: any;
    try {
      transformers = await import("@xenova/transformers" as string);
    } catch {
      throw new EncoderUnavailableError(
        "CLIP backend needs the optional '@xenova/transformers' package. " +
          "Install it with `npm install @xenova/transformers` (plus local model " +
          `weights for ${CLIP_MODEL}), or rerun with --encoder seeded for the ` +
          "deterministic offline encoder.",
      );
    }
    try {
      const tokenizer = await transformers.AutoTokenizer.from_pretrained(CLIP_MODEL);
      const model = await transformers.CLIPTextModelWithProjection.from_pretrained(CLIP_MODEL);
      const inputs = await tokenizer(texts, { padding: true, truncation: true });
      const output = await model(inputs);
      const embeds = output.text_embeds;
      const [n, dim] = embeds.dims;
      const rows: Float64Array[] = [];
      for (let i = 0; i < n; i++) {
        const row = new Float64Array(dim);
        for (let j = 0; j < dim; j++) row[j] = Number(embeds.data[i * dim + j]);
        rows.push(l2normalize(row));
      }
      return rows;
    } catch (err) {
      throw new EncoderUnavailableError(
        `CLIP model ${CLIP_MODEL} could not be loaded (${String(err)}). ` +
          "Provide a local model cache or rerun with --encoder seeded.",
      );
    }
  }
}

export function makeEncoder(kind: string): TextEncoder {
  switch (kind) {
    case "clip":
      return new ClipEncoder();
    case "seeded":
      return new SeededEncoder();
    default:
      throw new Error(`unknown encoder '${kind}' (expected clip or seeded)`);
  }
}
