#!/usr/bin/env node
/**
 * Feature bridge CLI.
 *
 *   extract --images <dir> --out <dir> [--mock] [--stdout]
 *   encode  --text "sofa,chair" --out <file> [--mock]
 *
 * `extract` turns each image into a `<frame_id>.ofrf` region-feature file
 * (or a concatenated stream on stdout); `encode` turns text into an `.ofqv`
 * query vector file. Without --mock a real model backend must be loadable.
 */

import * as fs from "fs";
import * as path from "path";
import yargs from "yargs";
import { hideBin } from "yargs/helpers";

import { imageSize } from "./image";
import { DEFAULT_MOCK, mockRegions, mockTextEmbedding } from "./mock";
import { DEFAULT_CONFIG, ModelLoadError, loadModel } from "./model";
import { encodeQueryVectors, encodeRegionFeatures } from "./wire";

const IMAGE_EXTENSIONS = new Set([".png", ".ppm"]);

function frameIdFromName(name: string, fallback: number): number {
  const digits = path.parse(name).name.match(/\d+/g);
  if (!digits) return fallback;
  return parseInt(digits[digits.length - 1], 10);
}

interface ExtractArgs {
  images: string;
  out?: string;
  mock: boolean;
  stdout: boolean;
  factor: number;
  dim: number;
  maxRegions: number;
  model: string;
  device: string;
}

async function runExtract(argv: ExtractArgs): Promise<void> {
  if (!fs.existsSync(argv.images) || !fs.statSync(argv.images).isDirectory()) {
    throw new Error(`--images directory not found: ${argv.images}`);
  }
  if (!argv.stdout && !argv.out) {
    throw new Error("provide --out <dir> or --stdout");
  }
  const names = fs
    .readdirSync(argv.images)
    .filter((f) => IMAGE_EXTENSIONS.has(path.extname(f).toLowerCase()))
    .sort();
  if (names.length === 0) {
    throw new Error(`no PNG/PPM images in ${argv.images}`);
  }
  if (argv.out) {
    fs.mkdirSync(argv.out, { recursive: true });
  }

  const model = argv.mock
    ? null
    : await loadModel({
        model: argv.model,
        device: argv.device,
        factor: argv.factor,
        maxRegions: argv.maxRegions,
      });

  let index = 0;
  for (const name of names) {
    const file = path.join(argv.images, name);
    const frameId = frameIdFromName(name, index);
    let regions;
    if (model) {
      regions = await model.extractImage(file);
    } else {
      const { width, height } = imageSize(file);
      regions = mockRegions(path.parse(name).name, width, height, {
        factor: argv.factor,
        dim: argv.dim,
        maxRegions: argv.maxRegions,
      });
    }
    const message = encodeRegionFeatures({
      frameId,
      n: regions.n,
      d: regions.n ? regions.embeddings.length / regions.n : argv.dim,
      height: regions.height,
      width: regions.width,
      embeddings: regions.embeddings,
      maps: regions.maps,
    });
    if (argv.stdout) {
      process.stdout.write(message);
    } else {
      fs.writeFileSync(path.join(argv.out!, `${frameId}.ofrf`), message);
    }
    index += 1;
  }
  if (!argv.stdout) {
    process.stderr.write(`wrote ${names.length} feature files to ${argv.out}\n`);
  }
}

interface EncodeArgs {
  text: string;
  out?: string;
  stdout: boolean;
  mock: boolean;
  dim: number;
  model: string;
  device: string;
}

async function runEncode(argv: EncodeArgs): Promise<void> {
  if (!argv.stdout && !argv.out) {
    throw new Error("provide --out <file> or --stdout");
  }
  const prompts = argv.text
    .split(",")
    .map((t) => t.trim())
    .filter((t) => t.length > 0);
  let vectors: Float32Array[];
  let dim = argv.dim;
  if (argv.mock) {
    vectors = prompts.map((t) => mockTextEmbedding(t, argv.dim));
  } else {
    const model = await loadModel({
      model: argv.model,
      device: argv.device,
      factor: DEFAULT_CONFIG.factor,
      maxRegions: DEFAULT_CONFIG.maxRegions,
    });
    vectors = [];
    for (const t of prompts) {
      vectors.push(await model.encodeText(t));
    }
    dim = model.dim;
  }
  const payload = encodeQueryVectors(vectors, dim);
  if (argv.stdout) {
    process.stdout.write(payload);
  } else {
    fs.writeFileSync(argv.out!, payload);
    process.stderr.write(`wrote ${vectors.length} query vectors to ${argv.out}\n`);
  }
}

export async function main(args: string[]): Promise<number> {
  try {
    await yargs(args)
      .command<ExtractArgs>(
        "extract",
        "emit region feature files for a directory of images",
        (y) =>
          y
            .option("images", { type: "string", demandOption: true })
            .option("out", { type: "string" })
            .option("stdout", { type: "boolean", default: false })
            .option("mock", { type: "boolean", default: false })
            .option("factor", { type: "number", default: DEFAULT_MOCK.factor })
            .option("dim", { type: "number", default: DEFAULT_MOCK.dim })
            .option("max-regions", {
              type: "number",
              default: DEFAULT_MOCK.maxRegions,
            })
            .option("model", { type: "string", default: DEFAULT_CONFIG.model })
            .option("device", { type: "string", default: DEFAULT_CONFIG.device }),
        async (argv) => {
          await runExtract(argv as unknown as ExtractArgs);
        }
      )
      .command<EncodeArgs>(
        "encode",
        "encode comma-separated text prompts into a query vector file",
        (y) =>
          y
            .option("text", { type: "string", demandOption: true })
            .option("out", { type: "string" })
            .option("stdout", { type: "boolean", default: false })
            .option("mock", { type: "boolean", default: false })
            .option("dim", { type: "number", default: DEFAULT_MOCK.dim })
            .option("model", { type: "string", default: DEFAULT_CONFIG.model })
            .option("device", { type: "string", default: DEFAULT_CONFIG.device }),
        async (argv) => {
          await runEncode(argv as unknown as EncodeArgs);
        }
      )
      .demandCommand(1, "specify a command: extract or encode")
      .strict()
      .fail((msg, err) => {
        throw err ?? new Error(msg);
      })
      .parseAsync();
    return 0;
  } catch (err) {
    const message = err instanceof Error ? err.message : String(err);
    process.stderr.write(`error: ${message}\n`);
    return err instanceof ModelLoadError ? 3 : 1;
  }
}

if (require.main === module) {
  main(hideBin(process.argv)).then((code) => {
    process.exitCode = code;
  });
}
