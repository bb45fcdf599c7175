/**
 * Real-model backend: wraps a region-level vision-language model plus a text
 * encoder sharing its embedding space.
 *
 * Model weights are an external concern; when the configured backend cannot
 * be loaded the CLI exits nonzero with the reason, and `--mock` remains the
 * hermetic path for integration tests.
 */

export interface BridgeConfig {
  model: string;
  device: string;
  factor: number;
  maxRegions: number;
}

export const DEFAULT_CONFIG: BridgeConfig = {
  model: "seem-region-vlfm",
  device: "cpu",
  factor: 0.25,
  maxRegions: 8,
};

export interface RegionModel {
  dim: number;
  extractImage(path: string): Promise<{
    n: number;
    height: number;
    width: number;
    maps: Float32Array;
    embeddings: Float32Array;
  }>;
  encodeText(text: string): Promise<Float32Array>;
}

export class ModelLoadError extends Error {}

export async function loadModel(config: BridgeConfig): Promise<RegionModel> {
  // A region-level VLFM backend would be registered here (ONNX export or a
  // transformers.js port). None ships with this repository.
  throw new ModelLoadError(
    `cannot load model '${config.model}' on ${config.device}: no backend is ` +
      "installed in this environment. Use --mock for deterministic synthetic " +
      "features, or install a model backend and point --model at it."
  );
}
