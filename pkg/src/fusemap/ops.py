"""High-level operations shared by the HTTP service and the CLI.

Each function speaks in paths and plain dicts so the two front ends stay
thin; heavy state moves through snapshot directories (volume.bin, dict.bin,
report.json).
"""

from __future__ import annotations

from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .fusion import EmbeddingDictionary
from .ingest import FileFeatureSource, load_sequence
from .pipeline import (
    Pipeline,
    PipelineConfig,
    RunReport,
    align_by_coords,
    evaluate_segmentation,
)
from .plyio import write_mesh_ply, write_point_cloud_ply
from .query import QueryVector, extract_region, rank_regions, segment_all
from .snapshot import load_state, save_state
from .synthetic import default_scene_spec, export_dataset, scene_from_spec
from .tsdf import SparseVolume, VolumeConfig, extract_mesh, extract_point_cloud


class DataError(Exception):
    """Input data is missing or inconsistent (CLI exit code 2)."""


def build_pipeline_config(
    voxel_size: float = 0.02,
    semantic_every: int = 3,
    match_threshold: float = 0.10,
    workers: str = "single",
    depth_max: float = 5.0,
    block_resolution: int = 8,
) -> PipelineConfig:
    return PipelineConfig(
        volume=VolumeConfig(
            voxel_size=voxel_size,
            block_resolution=block_resolution,
            depth_max=depth_max,
        ),
        semantic_every=semantic_every,
        match_threshold=match_threshold,
        workers=workers,
    )


def op_synth(
    out_dir: str,
    scene_spec: Optional[dict] = None,
    voxel_size: float = 0.04,
) -> dict:
    spec = scene_spec or default_scene_spec()
    try:
        scene, k = scene_from_spec(spec)
    except (KeyError, ValueError) as exc:
        raise DataError(f"bad scene spec: {exc}") from exc
    manifest = export_dataset(scene, k, Path(out_dir), voxel_size=voxel_size)
    return {
        "manifest": str(manifest),
        "frames": len(scene.trajectory),
        "features_dir": str(Path(out_dir) / "features"),
        "ground_truth": str(Path(out_dir) / "gt.npz"),
    }


def op_reconstruct(
    manifest: str,
    out_dir: Optional[str] = None,
    voxel_size: float = 0.02,
    semantic_every: int = 3,
    match_threshold: float = 0.10,
    workers: str = "single",
    features_dir: Optional[str] = None,
    depth_max: float = 5.0,
) -> Tuple[SparseVolume, EmbeddingDictionary, RunReport]:
    """Run reconstruction; when ``out_dir`` is set, write the snapshot,
    surface mesh, point cloud, and report there."""
    from .ingest import LoadError

    try:
        sequence = load_sequence(manifest)
    except LoadError as exc:
        raise DataError(str(exc)) from exc
    config = build_pipeline_config(
        voxel_size=voxel_size,
        semantic_every=semantic_every,
        match_threshold=match_threshold,
        workers=workers,
        depth_max=depth_max,
    )
    source = None
    if features_dir:
        source = FileFeatureSource(features_dir)
    elif sequence.feature_dir is not None:
        source = FileFeatureSource(sequence.feature_dir)
    pipe = Pipeline(config, sequence.intrinsics)
    volume, dictionary, report = pipe.run(sequence.iter_frames(), source)
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_state(out, volume, dictionary, report)
        write_mesh_ply(out / "mesh.ply", extract_mesh(volume))
        pts, cols, keys, conf = extract_point_cloud(volume, volume.config.semantic_band)
        write_point_cloud_ply(out / "cloud.ply", pts, cols, keys, conf)
    return volume, dictionary, report


def _load_state_dir(state_dir: str):
    state = Path(state_dir)
    if not (state / "volume.bin").is_file():
        raise DataError(f"no volume snapshot in {state_dir}")
    return load_state(state)


def op_query(
    state: Tuple[SparseVolume, EmbeddingDictionary],
    queries: List[QueryVector],
    top_k: int = 1,
    mode: str = "voxels",
    out_dir: Optional[str] = None,
    min_score: Optional[float] = None,
) -> dict:
    volume, dictionary = state
    results = []
    out = None
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
    for qi, q in enumerate(queries):
        try:
            ranked = rank_regions(dictionary, q, top_k=top_k, min_score=min_score)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
        entry = {"query": qi, "ranked": [[int(k), float(s)] for k, s in ranked]}
        if out is not None and ranked:
            key = ranked[0][0]
            path = out / f"query{qi}_region{key}.ply"
            if mode == "mesh":
                write_mesh_ply(path, extract_region(volume, dictionary, key, mode="mesh"))
            else:
                pts, cols, conf = extract_region(volume, dictionary, key, mode="voxels")
                write_point_cloud_ply(path, pts, cols, np.full(len(pts), key), conf)
            entry["geometry"] = str(path)
        results.append(entry)
    return {"results": results, "dictionary_size": len(dictionary)}


def op_query_state_dir(state_dir: str, queries: List[QueryVector], **kw) -> dict:
    volume, dictionary, _ = _load_state_dir(state_dir)
    return op_query((volume, dictionary), queries, **kw)


def op_eval(state: Tuple[SparseVolume, EmbeddingDictionary], gt_path: str) -> dict:
    volume, dictionary = state
    gt_file = Path(gt_path)
    if not gt_file.is_file():
        raise DataError(f"ground truth not found: {gt_path}")
    gt = np.load(gt_file)
    for field in ("coords", "labels", "class_embeddings"):
        if field not in gt:
            raise DataError(f"ground truth missing '{field}'")
    queries = [QueryVector(e) for e in gt["class_embeddings"]]
    if len(dictionary) == 0:
        raise DataError("state has an empty dictionary; reconstruct with semantics on")
    pred_coords, pred_labels = segment_all(volume, dictionary, queries)
    gt_aligned, pred_aligned, coverage = align_by_coords(
        gt["coords"], gt["labels"], pred_coords, pred_labels
    )
    if len(gt_aligned) == 0:
        raise DataError("no overlap between predicted and ground-truth voxels")
    macc, fmiou = evaluate_segmentation(pred_aligned, gt_aligned, len(queries))
    return {
        "mAcc": macc,
        "f_mIoU": fmiou,
        "coverage": coverage,
        "evaluated_voxels": int(len(gt_aligned)),
        "classes": int(len(queries)),
    }


def op_eval_state_dir(state_dir: str, gt_path: str) -> dict:
    volume, dictionary, _ = _load_state_dir(state_dir)
    return op_eval((volume, dictionary), gt_path)


def op_bench(
    manifest: str,
    voxel_size: float = 0.05,
    semantic_every: int = 3,
    features_dir: Optional[str] = None,
) -> dict:
    """Time the two lanes separately: one geometry-only pass, then a pass
    with the semantic lane on (when features are available)."""
    _, _, geo = op_reconstruct(
        manifest, out_dir=None, voxel_size=voxel_size, semantic_every=0
    )
    out = {
        "frames": geo.frames,
        "geometry_fps": geo.geometric_fps,
        "geometry_ms_per_frame": 1000.0 * geo.geometry_seconds / max(geo.frames, 1),
        "semantic_fps": 0.0,
        "semantic_ms_per_frame": 0.0,
        "semantic_frames": 0,
    }
    sequence = load_sequence(manifest)
    has_features = features_dir is not None or sequence.feature_dir is not None
    if semantic_every > 0 and has_features:
        _, _, sem = op_reconstruct(
            manifest,
            out_dir=None,
            voxel_size=voxel_size,
            semantic_every=semantic_every,
            features_dir=features_dir,
        )
        out["semantic_fps"] = sem.semantic_fps
        out["semantic_frames"] = sem.semantic_frames
        if sem.semantic_frames:
            out["semantic_ms_per_frame"] = (
                1000.0 * sem.semantic_seconds / sem.semantic_frames
            )
    return out
