/** Image dimension sniffing (PNG, PPM P6) without pulling in a codec. */

import * as fs from "fs";

export interface ImageSize {
  width: number;
  height: number;
}

const PNG_SIGNATURE = Buffer.from([0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a]);

export function imageSize(path: string): ImageSize {
  const data = fs.readFileSync(path);
  if (data.length >= 24 && data.subarray(0, 8).equals(PNG_SIGNATURE)) {
    return { width: data.readUInt32BE(16), height: data.readUInt32BE(20) };
  }
  if (data.length > 2 && data[0] === 0x50 && data[1] === 0x36) {
    // PPM "P6": ASCII header of width, height, maxval with optional comments
    const header = data.subarray(0, 256).toString("latin1");
    const tokens = header
      .split("\n")
      .map((line) => line.replace(/#.*$/, ""))
      .join(" ")
      .trim()
      .split(/\s+/);
    if (tokens.length >= 3) {
      const width = parseInt(tokens[1], 10);
      const height = parseInt(tokens[2], 10);
      if (Number.isFinite(width) && Number.isFinite(height)) {
        return { width, height };
      }
    }
    throw new Error(`${path}: malformed PPM header`);
  }
  throw new Error(`${path}: unsupported image format (need PNG or PPM)`);
}
