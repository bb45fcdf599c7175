/**
 * Binary wire formats consumed by the mapping engine.
 *
 * `.ofrf` region feature message (little-endian):
 *   "OFRF" | u32 version=1 | u64 frame_id | u32 n | u32 d | u32 H' | u32 W'
 *   | n*d float32 embeddings (row-major) | n*H'*W' float32 confidences.
 *
 * `.ofqv` query vector file (little-endian):
 *   "OFQV" | u32 version=1 | u32 count | u32 d | count*d float32.
 */

export const WIRE_VERSION = 1;

export interface RegionFeatures {
  frameId: number;
  n: number;
  d: number;
  height: number; // H' (quarter resolution)
  width: number; // W'
  embeddings: Float32Array; // n * d
  maps: Float32Array; // n * height * width
}

function writeFloats(view: DataView, offset: number, values: Float32Array): number {
  for (let i = 0; i < values.length; i++) {
    view.setFloat32(offset, values[i], true);
    offset += 4;
  }
  return offset;
}

function readFloats(view: DataView, offset: number, count: number): [Float32Array, number] {
  const out = new Float32Array(count);
  for (let i = 0; i < count; i++) {
    out[i] = view.getFloat32(offset, true);
    offset += 4;
  }
  return [out, offset];
}

export function encodeRegionFeatures(features: RegionFeatures): Buffer {
  const { frameId, n, d, height, width, embeddings, maps } = features;
  if (embeddings.length !== n * d) {
    throw new Error(`embeddings length ${embeddings.length} != n*d = ${n * d}`);
  }
  if (maps.length !== n * height * width) {
    throw new Error(`maps length ${maps.length} != n*H'*W' = ${n * height * width}`);
  }
  const total = 4 + 28 + embeddings.length * 4 + maps.length * 4;
  const buf = Buffer.alloc(total);
  buf.write("OFRF", 0, "ascii");
  const view = new DataView(buf.buffer, buf.byteOffset, buf.length);
  view.setUint32(4, WIRE_VERSION, true);
  view.setBigUint64(8, BigInt(frameId), true);
  view.setUint32(16, n, true);
  view.setUint32(20, d, true);
  view.setUint32(24, height, true);
  view.setUint32(28, width, true);
  let offset = writeFloats(view, 32, embeddings);
  writeFloats(view, offset, maps);
  return buf;
}

export function decodeRegionFeatures(data: Buffer): RegionFeatures {
  if (data.length < 32 || data.toString("ascii", 0, 4) !== "OFRF") {
    throw new Error("not an OFRF message");
  }
  const view = new DataView(data.buffer, data.byteOffset, data.length);
  const version = view.getUint32(4, true);
  if (version !== WIRE_VERSION) {
    throw new Error(`unsupported OFRF version ${version}`);
  }
  const frameId = Number(view.getBigUint64(8, true));
  const n = view.getUint32(16, true);
  const d = view.getUint32(20, true);
  const height = view.getUint32(24, true);
  const width = view.getUint32(28, true);
  const expected = 32 + n * d * 4 + n * height * width * 4;
  if (data.length !== expected) {
    throw new Error(`OFRF payload size ${data.length}, expected ${expected}`);
  }
  const [embeddings, offset] = readFloats(view, 32, n * d);
  const [maps] = readFloats(view, offset, n * height * width);
  return { frameId, n, d, height, width, embeddings, maps };
}

export function encodeQueryVectors(vectors: Float32Array[], dim: number): Buffer {
  const count = vectors.length;
  for (const v of vectors) {
    if (v.length !== dim) {
      throw new Error(`query vector length ${v.length} != d = ${dim}`);
    }
  }
  const buf = Buffer.alloc(4 + 12 + count * dim * 4);
  buf.write("OFQV", 0, "ascii");
  const view = new DataView(buf.buffer, buf.byteOffset, buf.length);
  view.setUint32(4, WIRE_VERSION, true);
  view.setUint32(8, count, true);
  view.setUint32(12, dim, true);
  let offset = 16;
  for (const v of vectors) {
    offset = writeFloats(view, offset, v);
  }
  return buf;
}

export function decodeQueryVectors(data: Buffer): Float32Array[] {
  if (data.length < 16 || data.toString("ascii", 0, 4) !== "OFQV") {
    throw new Error("not an OFQV file");
  }
  const view = new DataView(data.buffer, data.byteOffset, data.length);
  const version = view.getUint32(4, true);
  if (version !== WIRE_VERSION) {
    throw new Error(`unsupported OFQV version ${version}`);
  }
  const count = view.getUint32(8, true);
  const dim = view.getUint32(12, true);
  if (data.length !== 16 + count * dim * 4) {
    throw new Error("OFQV payload size mismatch");
  }
  const out: Float32Array[] = [];
  let offset = 16;
  for (let i = 0; i < count; i++) {
    const [vec, next] = readFloats(view, offset, dim);
    out.push(vec);
    offset = next;
  }
  return out;
}
