/**
 * Deterministic stand-in for the region-level vision-language model.
 *
 * Features are seeded from the input name (file stem or query text), so the
 * same inputs always produce byte-identical output. Every region is a soft
 * radial blob with peak confidence >= 0.5 and a unit-norm embedding.
 */

export function fnv1a(text: string): number {
  let hash = 0x811c9dc5;
  for (let i = 0; i < text.length; i++) {
    hash ^= text.charCodeAt(i);
    hash = Math.imul(hash, 0x01000193) >>> 0;
  }
  return hash >>> 0;
}

export function mulberry32(seed: number): () => number {
  let state = seed >>> 0;
  return () => {
    state = (state + 0x6d2b79f5) >>> 0;
    let t = state;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

function gaussianPair(rng: () => number): [number, number] {
  const u = Math.max(rng(), 1e-12);
  const v = rng();
  const r = Math.sqrt(-2 * Math.log(u));
  return [r * Math.cos(2 * Math.PI * v), r * Math.sin(2 * Math.PI * v)];
}

export function unitEmbedding(rng: () => number, dim: number): Float32Array {
  const out = new Float32Array(dim);
  for (let i = 0; i < dim; i += 2) {
    const [a, b] = gaussianPair(rng);
    out[i] = a;
    if (i + 1 < dim) out[i + 1] = b;
  }
  let norm = 0;
  for (let i = 0; i < dim; i++) norm += out[i] * out[i];
  norm = Math.sqrt(norm) || 1;
  for (let i = 0; i < dim; i++) out[i] /= norm;
  return out;
}

export interface MockOptions {
  factor: number; // output resolution factor (quarter by default)
  dim: number; // embedding dimension
  maxRegions: number;
}

export const DEFAULT_MOCK: MockOptions = { factor: 0.25, dim: 512, maxRegions: 8 };

export interface MockRegions {
  n: number;
  height: number;
  width: number;
  maps: Float32Array;
  embeddings: Float32Array;
}

export function mockRegions(
  name: string,
  imageWidth: number,
  imageHeight: number,
  options: Partial<MockOptions> = {}
): MockRegions {
  const opts = { ...DEFAULT_MOCK, ...options };
  const width = Math.max(1, Math.floor(imageWidth * opts.factor));
  const height = Math.max(1, Math.floor(imageHeight * opts.factor));
  const rng = mulberry32(fnv1a(`${name}:${imageWidth}x${imageHeight}`));
  const n = 1 + Math.floor(rng() * Math.min(opts.maxRegions, 4));
  const maps = new Float32Array(n * height * width);
  const embeddings = new Float32Array(n * opts.dim);
  for (let r = 0; r < n; r++) {
    const cx = (0.15 + 0.7 * rng()) * width;
    const cy = (0.15 + 0.7 * rng()) * height;
    const sigma = (0.08 + 0.15 * rng()) * Math.min(width, height);
    const peak = 0.6 + 0.4 * rng();
    const base = r * height * width;
    for (let y = 0; y < height; y++) {
      for (let x = 0; x < width; x++) {
        const d2 = (x - cx) ** 2 + (y - cy) ** 2;
        const value = peak * Math.exp(-d2 / (2 * sigma * sigma));
        maps[base + y * width + x] = value < 0.01 ? 0 : value;
      }
    }
    embeddings.set(unitEmbedding(rng, opts.dim), r * opts.dim);
  }
  return { n, height, width, maps, embeddings };
}

export function mockTextEmbedding(text: string, dim: number): Float32Array {
  const rng = mulberry32(fnv1a(`text:${text.trim().toLowerCase()}`));
  return unitEmbedding(rng, dim);
}
