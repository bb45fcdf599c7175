"""Two-lane reconstruction pipeline and segmentation metrics.

Geometry integrates every frame; the semantic lane runs on every N-th frame
(the "semantic switch", N=0 disables it entirely).  In two-lane mode the
semantic worker consumes frame-boundary snapshots of the geometric fields so
its output is identical to the single-worker schedule even while geometry
races ahead.
"""

from __future__ import annotations

import logging
import queue
import threading
import time
from dataclasses import dataclass
from typing import Iterable, List, Optional, Tuple

import numpy as np

from .fusion import (
    DEFAULT_MATCH_THRESHOLD,
    DEFAULT_SUPPORT_MIN,
    EmbeddingDictionary,
    RegionFeatureSet,
    downsample_depth,
    match_regions,
    render_confidence_maps,
    update_semantics,
)
from .geometry import CameraIntrinsics, scale_intrinsics
from .ingest import FileFeatureSource, FrameObservation, SequenceManifest
from .tsdf import (
    SparseVolume,
    VolumeConfig,
    VoxelBlock,
    allocate_active_blocks,
    integrate_geometry,
)

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    volume: VolumeConfig
    semantic_every: int = 3  # 0 disables the semantic lane
    match_threshold: float = DEFAULT_MATCH_THRESHOLD
    support_min: float = DEFAULT_SUPPORT_MIN
    resolution_factor: float = 0.25
    workers: str = "single"  # single | two-lane
    embedding_mode: str = "frozen"
    fail_on_missing_features: bool = False

    def __post_init__(self):
        if self.semantic_every < 0:
            raise ValueError("semantic_every must be >= 0")
        if not (0 <= self.match_threshold <= 1):
            raise ValueError("match_threshold must lie in [0, 1]")
        if self.workers not in ("single", "two-lane"):
            raise ValueError(f"unknown worker mode {self.workers!r}")


@dataclass
class RunReport:
    frames: int = 0
    semantic_frames: int = 0
    geometric_fps: float = 0.0
    semantic_fps: float = 0.0
    geometry_seconds: float = 0.0
    semantic_seconds: float = 0.0
    dictionary_size: int = 0
    block_count: int = 0
    peak_memory_bytes: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, data: dict) -> "RunReport":
        return cls(**{k: data[k] for k in cls().__dict__ if k in data})


def _snapshot_volume(volume: SparseVolume, active) -> SparseVolume:
    """Frame-boundary view for the semantic lane: geometric fields copied,
    semantic fields shared so updates land in the live volume."""
    snap = SparseVolume(volume.config)
    snap.frame_count = volume.frame_count
    for idx in active:
        blk = volume.blocks[tuple(idx)]
        view = object.__new__(VoxelBlock)
        view.block_index = blk.block_index
        view.tsdf = blk.tsdf.copy()
        view.weight = blk.weight.copy()
        view.rgb = blk.rgb
        view.key = blk.key
        view.confidence = blk.confidence
        view.sem_weight = blk.sem_weight
        snap.blocks[tuple(idx)] = view
    return snap


class Pipeline:
    """Incremental reconstruction engine bound to one camera."""

    def __init__(self, config: PipelineConfig, intrinsics: CameraIntrinsics):
        self.config = config
        self.intrinsics = intrinsics
        self.k_hat = scale_intrinsics(intrinsics, config.resolution_factor)
        self.volume = SparseVolume(config.volume)
        self.dictionary = EmbeddingDictionary()
        self.report = RunReport()

    def integrate(self, frame: FrameObservation):
        t0 = time.perf_counter()
        active = allocate_active_blocks(self.volume, frame.depth, self.intrinsics, frame.pose)
        integrate_geometry(self.volume, frame, self.intrinsics, active=active)
        self.report.geometry_seconds += time.perf_counter() - t0
        self.report.frames += 1
        return active

    def semantics(self, frame: FrameObservation, features: RegionFeatureSet, active, volume=None):
        vol = volume if volume is not None else self.volume
        t0 = time.perf_counter()
        depth_q = downsample_depth(frame.depth, (self.k_hat.height, self.k_hat.width))
        rendered = render_confidence_maps(vol, depth_q, self.k_hat, frame.pose, active=active)
        match = match_regions(features, rendered, self.config.match_threshold)
        update_semantics(
            vol,
            self.dictionary,
            frame,
            features,
            match,
            self.k_hat,
            active=active,
            support_min=self.config.support_min,
            embedding_mode=self.config.embedding_mode,
        )
        self.report.semantic_seconds += time.perf_counter() - t0
        self.report.semantic_frames += 1

    def _want_semantics(self, position: int) -> bool:
        n = self.config.semantic_every
        return n > 0 and position % n == 0

    def _note_memory(self):
        est = self.volume.memory_bytes() + self.dictionary.memory_bytes()
        if est > self.report.peak_memory_bytes:
            self.report.peak_memory_bytes = est

    def _finalize(self) -> RunReport:
        r = self.report
        r.dictionary_size = len(self.dictionary)
        r.block_count = len(self.volume.blocks)
        self._note_memory()
        if r.frames and r.geometry_seconds > 0:
            r.geometric_fps = r.frames / r.geometry_seconds
        if r.semantic_frames and r.semantic_seconds > 0:
            r.semantic_fps = r.semantic_frames / r.semantic_seconds
        return r

    def _features_for(self, source, frame: FrameObservation) -> Optional[RegionFeatureSet]:
        if source is None:
            msg = f"no feature source for scheduled semantic frame {frame.frame_id}"
            if self.config.fail_on_missing_features:
                raise RuntimeError(msg)
            log.warning("%s; skipping semantics", msg)
            return None
        feats = source.get(frame.frame_id)
        if feats is None:
            msg = f"features missing for frame {frame.frame_id}"
            if self.config.fail_on_missing_features:
                raise RuntimeError(msg)
            log.warning("%s; skipping semantics", msg)
        return feats

    def run(
        self, frames: Iterable[FrameObservation], feature_source=None
    ) -> Tuple[SparseVolume, EmbeddingDictionary, RunReport]:
        if self.config.workers == "two-lane" and self.config.semantic_every > 0:
            return self._run_two_lane(frames, feature_source)
        for position, frame in enumerate(frames):
            active = self.integrate(frame)
            if self._want_semantics(position):
                feats = self._features_for(feature_source, frame)
                if feats is not None:
                    self.semantics(frame, feats, active)
            self._note_memory()
        return self.volume, self.dictionary, self._finalize()

    def _run_two_lane(self, frames, feature_source):
        work: "queue.Queue" = queue.Queue(maxsize=4)
        errors: List[BaseException] = []

        def semantic_worker():
            while True:
                item = work.get()
                if item is None:
                    return
                frame, feats, snap = item
                try:
                    self.semantics(frame, feats, active=None, volume=snap)
                except BaseException as exc:  # propagated after join
                    errors.append(exc)
                    return

        worker = threading.Thread(target=semantic_worker, name="semantic-lane")
        worker.start()
        try:
            for position, frame in enumerate(frames):
                active = self.integrate(frame)
                if self._want_semantics(position) and not errors:
                    feats = self._features_for(feature_source, frame)
                    if feats is not None:
                        work.put((frame, feats, _snapshot_volume(self.volume, active)))
                self._note_memory()
        finally:
            work.put(None)
            worker.join()
        if errors:
            raise errors[0]
        return self.volume, self.dictionary, self._finalize()


def run_reconstruction(
    config: PipelineConfig,
    sequence: SequenceManifest,
    feature_source=None,
) -> Tuple[SparseVolume, EmbeddingDictionary, RunReport]:
    """Reconstruct a loaded sequence; features default to the manifest's
    feature directory when the semantic lane is on."""
    if feature_source is None and config.semantic_every > 0 and sequence.feature_dir:
        feature_source = FileFeatureSource(sequence.feature_dir)
    pipe = Pipeline(config, sequence.intrinsics)
    return pipe.run(sequence.iter_frames(), feature_source)


def evaluate_segmentation(
    predicted: np.ndarray, ground_truth: np.ndarray, num_classes: int
) -> Tuple[float, float]:
    """Mean per-class accuracy and frequency-weighted mean IoU.

    Classes absent from the ground truth are excluded from both means.
    """
    pred = np.asarray(predicted, dtype=np.int64).reshape(-1)
    gt = np.asarray(ground_truth, dtype=np.int64).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError(f"label arrays differ in length: {pred.shape} vs {gt.shape}")
    if len(gt) == 0:
        raise ValueError("empty label arrays")
    for name, arr in (("predicted", pred), ("ground-truth", gt)):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise ValueError(f"{name} labels outside [0, {num_classes})")
    confusion = np.bincount(
        gt * num_classes + pred, minlength=num_classes * num_classes
    ).reshape(num_classes, num_classes)
    gt_count = confusion.sum(axis=1)
    pred_count = confusion.sum(axis=0)
    tp = np.diag(confusion)
    present = gt_count > 0
    recall = tp[present] / gt_count[present]
    macc = float(recall.mean())
    union = gt_count + pred_count - tp
    iou = tp[present] / union[present]
    freq = gt_count[present] / gt_count[present].sum()
    fmiou = float((freq * iou).sum())
    return macc, fmiou


def pack_coords(coords: np.ndarray) -> np.ndarray:
    c = np.asarray(coords, dtype=np.int64) + (1 << 20)
    return (c[:, 0] << 42) | (c[:, 1] << 21) | c[:, 2]


def align_by_coords(
    coords_a: np.ndarray,
    labels_a: np.ndarray,
    coords_b: np.ndarray,
    labels_b: np.ndarray,
):
    """Intersect two labeled voxel sets on exact lattice coordinates.

    Returns (labels_a', labels_b', coverage of set b over set a).
    """
    ka = pack_coords(coords_a)
    kb = pack_coords(coords_b)
    _, ia, ib = np.intersect1d(ka, kb, return_indices=True)
    coverage = len(ia) / len(ka) if len(ka) else 0.0
    return labels_a[ia], labels_b[ib], coverage
