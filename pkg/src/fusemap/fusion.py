"""Semantic fusion: render region maps from the volume, match them to the
current frame's regions by soft-IoU rectangular assignment, and write the
result back into voxels and the embedding dictionary.

Voxels store only a compact integer key plus a confidence; the embedding
vectors live once in :class:`EmbeddingDictionary`, which is what keeps
open-vocabulary queries linear in the number of regions rather than the
number of voxels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import CameraIntrinsics, DepthImage, Pose, nearest_pixels
from .tsdf import BlockIndex, SparseVolume, local_offsets

DEFAULT_MATCH_THRESHOLD = 0.10
DEFAULT_SUPPORT_MIN = 0.5


@dataclass
class RegionFeatureSet:
    """Per-frame region confidence maps and their embeddings.

    Maps are quarter-resolution soft masks in [0, 1]; embeddings are
    renormalized to unit length on construction.
    """

    maps: np.ndarray  # (n, H', W') float32
    embeddings: np.ndarray  # (n, d) float32, unit norm
    frame_id: int = 0

    def __post_init__(self):
        self.maps = np.asarray(self.maps, dtype=np.float32)
        self.embeddings = np.asarray(self.embeddings, dtype=np.float32)
        if self.maps.ndim != 3:
            raise ValueError(f"maps must be (n, H, W), got {self.maps.shape}")
        if self.embeddings.ndim != 2 or len(self.embeddings) != len(self.maps):
            raise ValueError("embeddings must be (n, d) matching maps")
        if self.maps.size and (self.maps.min() < 0 or self.maps.max() > 1):
            raise ValueError("confidence values must lie in [0, 1]")
        if self.n:
            norms = np.linalg.norm(self.embeddings, axis=1)
            if (norms == 0).any():
                raise ValueError("zero-length region embedding")
            # Renormalize only vectors outside tolerance so unit-norm inputs
            # round-trip through the wire format bit for bit.
            off = np.abs(norms - 1.0) > 1e-4
            if off.any():
                self.embeddings = self.embeddings.copy()
                self.embeddings[off] = self.embeddings[off] / norms[off, None]

    @property
    def n(self) -> int:
        return len(self.maps)

    @property
    def map_shape(self) -> Tuple[int, int]:
        return self.maps.shape[1:]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


@dataclass(frozen=True)
class EmbeddingEntry:
    key: int
    embedding: np.ndarray
    observation_count: int
    created_frame: int


class EmbeddingDictionary:
    """Compact key -> embedding store.

    Keys are dense integers handed out in creation order and never reused.
    Storage is exact-fit contiguous arrays so memory stays at
    entries * (4d + 16) bytes; growth is O(n) per insert, which is fine for
    the region counts this map sees.
    """

    def __init__(self, dim: Optional[int] = None):
        self._dim = dim
        self._embeddings = np.empty((0, dim or 0), dtype=np.float32)
        self._counts = np.empty(0, dtype=np.int64)
        self._created = np.empty(0, dtype=np.int64)

    def __len__(self) -> int:
        return len(self._counts)

    def __contains__(self, key: int) -> bool:
        return 0 <= key < len(self._counts)

    @property
    def dim(self) -> Optional[int]:
        return self._dim

    @property
    def next_key(self) -> int:
        return len(self._counts)

    @property
    def embedding_matrix(self) -> np.ndarray:
        return self._embeddings

    def add(self, embedding: np.ndarray, created_frame: int = 0) -> int:
        emb = np.asarray(embedding, dtype=np.float32).reshape(-1)
        norm = np.linalg.norm(emb)
        if norm == 0:
            raise ValueError("cannot store a zero embedding")
        emb = emb / norm
        if self._dim is None:
            self._dim = len(emb)
            self._embeddings = np.empty((0, self._dim), dtype=np.float32)
        elif len(emb) != self._dim:
            raise ValueError(f"embedding dim {len(emb)} != dictionary dim {self._dim}")
        key = len(self._counts)
        self._embeddings = np.concatenate([self._embeddings, emb[None, :]])
        self._counts = np.append(self._counts, 1)
        self._created = np.append(self._created, created_frame)
        return key

    def increment(self, key: int, new_embedding: Optional[np.ndarray] = None):
        """Record another observation.  The stored embedding stays frozen
        unless a replacement vector is supplied (running-mean mode)."""
        if key not in self:
            raise KeyError(f"unknown region key {key}")
        if new_embedding is not None:
            count = self._counts[key]
            mixed = count * self._embeddings[key] + np.asarray(new_embedding, np.float32)
            norm = np.linalg.norm(mixed)
            if norm > 0:
                self._embeddings[key] = mixed / norm
        self._counts[key] += 1

    def embedding(self, key: int) -> np.ndarray:
        if key not in self:
            raise KeyError(f"unknown region key {key}")
        return self._embeddings[key]

    def entry(self, key: int) -> EmbeddingEntry:
        if key not in self:
            raise KeyError(f"unknown region key {key}")
        return EmbeddingEntry(
            key, self._embeddings[key].copy(), int(self._counts[key]), int(self._created[key])
        )

    def entries(self):
        for key in range(len(self)):
            yield self.entry(key)

    def memory_bytes(self) -> int:
        return self._embeddings.nbytes + self._counts.nbytes + self._created.nbytes

    def state_arrays(self):
        return self._embeddings, self._counts, self._created

    @classmethod
    def from_state(cls, embeddings: np.ndarray, counts: np.ndarray, created: np.ndarray):
        d = cls()
        d._embeddings = np.asarray(embeddings, dtype=np.float32).copy()
        d._dim = d._embeddings.shape[1] if len(d._embeddings) else None
        d._counts = np.asarray(counts, dtype=np.int64).copy()
        d._created = np.asarray(created, dtype=np.int64).copy()
        return d


@dataclass
class RenderedRegions:
    """Region confidence maps re-synthesized from the volume for one view."""

    maps: np.ndarray  # (m, H', W') float32
    keys: List[int]
    depth: DepthImage  # the (downsampled) depth used for the occlusion test

    @property
    def m(self) -> int:
        return len(self.keys)


@dataclass
class MatchResult:
    """Optimal assignment between frame regions and rendered regions."""

    assignments: List[Tuple[int, int, float]]  # (frame region, rendered region, score)
    unmatched_frame_regions: List[int]
    rendered_keys: List[int] = field(default_factory=list)

    def key_for(self, rendered_region: int) -> int:
        return self.rendered_keys[rendered_region]


def downsample_depth(depth: DepthImage, target_hw: Tuple[int, int]) -> DepthImage:
    """Stride-sample a depth image down to the feature-map resolution."""
    th, tw = target_hw
    sh = depth.height // th
    sw = depth.width // tw
    if sh < 1 or sw < 1:
        raise ValueError(f"cannot downsample {depth.values.shape} to {target_hw}")
    return DepthImage(depth.values[: th * sh : sh, : tw * sw : sw])


def _project_voxels(
    volume: SparseVolume,
    mask_fn,
    k: CameraIntrinsics,
    pose: Pose,
    depth: DepthImage,
    occlusion_tol: float,
    active: Optional[Sequence[BlockIndex]],
):
    """Project the selected voxels of the active blocks into the view.

    Returns per-voxel arrays (block refs, flat indices, rows, cols, |tsdf|)
    for voxels that land on a pixel whose observed depth agrees within the
    occlusion tolerance.
    """
    r = volume.config.block_resolution
    offsets = local_offsets(r)
    indices = sorted(active) if active is not None else volume.sorted_block_indices()
    out_blocks, out_rows, out_cols, out_phi = [], [], [], []
    rot_t = pose.rotation.T
    for idx in indices:
        blk = volume.blocks.get(tuple(idx))
        if blk is None:
            continue
        m = mask_fn(blk).reshape(-1)
        if not m.any():
            continue
        flat = np.nonzero(m)[0]
        lattice = np.array(blk.block_index, dtype=np.int64) * r + offsets[flat]
        cam = lattice.astype(np.float64) * volume.config.voxel_size @ rot_t + pose.translation
        z = cam[:, 2]
        uv = np.empty((len(cam), 2))
        with np.errstate(divide="ignore", invalid="ignore"):
            uv[:, 0] = k.fx * cam[:, 0] / z + k.cx
            uv[:, 1] = k.fy * cam[:, 1] / z + k.cy
        cols, rows, ok = nearest_pixels(uv, k)
        ok &= z > 0
        if not ok.any():
            continue
        obs = np.zeros(len(cam))
        obs[ok] = depth.values[rows[ok], cols[ok]]
        ok &= (obs > 0) & (np.abs(obs - z) <= occlusion_tol)
        if not ok.any():
            continue
        flat = flat[ok]
        out_blocks.append((blk, flat))
        out_rows.append(rows[ok])
        out_cols.append(cols[ok])
        out_phi.append(np.abs(blk.tsdf.reshape(-1)[flat]))
    return out_blocks, out_rows, out_cols, out_phi


def render_confidence_maps(
    volume: SparseVolume,
    depth: DepthImage,
    k_hat: CameraIntrinsics,
    pose: Pose,
    active: Optional[Sequence[BlockIndex]] = None,
    occlusion_tol: Optional[float] = None,
) -> RenderedRegions:
    """Project semantic voxels into the current view, grouped by key.

    Per pixel and per key the written confidence comes from the voxel
    nearest the surface (smallest |tsdf|) among those passing the depth
    occlusion test against ``depth``.
    """
    if depth.values.shape != (k_hat.height, k_hat.width):
        raise ValueError(
            f"depth shape {depth.values.shape} does not match intrinsics "
            f"{(k_hat.height, k_hat.width)}"
        )
    if occlusion_tol is None:
        occlusion_tol = 2.0 * volume.config.voxel_size

    per_block, rows_l, cols_l, phi_l = _project_voxels(
        volume,
        lambda blk: blk.sem_weight > 0,
        k_hat,
        pose,
        depth,
        occlusion_tol,
        active,
    )
    if not per_block:
        return RenderedRegions(
            np.empty((0, k_hat.height, k_hat.width), dtype=np.float32), [], depth
        )

    keys = np.concatenate([blk.key.reshape(-1)[flat] for blk, flat in per_block])
    confs = np.concatenate([blk.confidence.reshape(-1)[flat] for blk, flat in per_block])
    rows = np.concatenate(rows_l)
    cols = np.concatenate(cols_l)
    abs_phi = np.concatenate(phi_l)

    pix = rows * k_hat.width + cols
    order = np.lexsort((abs_phi, pix, keys))
    keys, confs, pix, abs_phi = keys[order], confs[order], pix[order], abs_phi[order]
    first = np.ones(len(keys), dtype=bool)
    first[1:] = (keys[1:] != keys[:-1]) | (pix[1:] != pix[:-1])

    uniq_keys, key_slot = np.unique(keys[first], return_inverse=True)
    maps = np.zeros((len(uniq_keys), k_hat.height, k_hat.width), dtype=np.float32)
    flat_maps = maps.reshape(len(uniq_keys), -1)
    flat_maps[key_slot, pix[first]] = confs[first]
    return RenderedRegions(maps, [int(x) for x in uniq_keys], depth)


def soft_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Continuous IoU relaxation: sum(ab) / sum(a + b - ab); 0 when the
    denominator vanishes.  Equals crisp IoU on binary masks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"map shapes differ: {a.shape} vs {b.shape}")
    inter = float((a * b).sum())
    union = float(a.sum() + b.sum() - inter)
    return inter / union if union > 0 else 0.0


def score_matrix(current_maps: np.ndarray, rendered_maps: np.ndarray) -> np.ndarray:
    """Pairwise soft-IoU between two stacks of confidence maps."""
    a = np.asarray(current_maps, dtype=np.float64).reshape(len(current_maps), -1)
    b = np.asarray(rendered_maps, dtype=np.float64).reshape(len(rendered_maps), -1)
    if a.shape[1] != b.shape[1]:
        raise ValueError("confidence maps have different resolutions")
    inter = a @ b.T
    union = a.sum(axis=1)[:, None] + b.sum(axis=1)[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(union > 0, inter / union, 0.0)
    return s


def solve_assignment(scores: np.ndarray, threshold: float = DEFAULT_MATCH_THRESHOLD):
    """Maximize total score over one-to-one row/column pairs, then drop pairs
    scoring under the threshold.

    Returns (assignments, unmatched_rows) with assignments as
    (row, column, score) triples sorted by row.
    """
    s = np.asarray(scores, dtype=np.float64)
    n, m = s.shape
    if n == 0 or m == 0:
        return [], list(range(n))
    rows, cols = linear_sum_assignment(s, maximize=True)
    assignments = []
    matched = set()
    for i, j in zip(rows, cols):
        score = float(s[i, j])
        if score >= threshold:
            assignments.append((int(i), int(j), score))
            matched.add(int(i))
    assignments.sort()
    unmatched = [i for i in range(n) if i not in matched]
    return assignments, unmatched


def match_regions(
    current: RegionFeatureSet,
    rendered: RenderedRegions,
    threshold: float = DEFAULT_MATCH_THRESHOLD,
) -> MatchResult:
    """Solve the rectangular assignment maximizing total soft-IoU.

    Uses the modified Jonker-Volgenant solver; pairs scoring below the
    threshold are discarded and their frame regions reported unmatched.
    """
    n, m = current.n, rendered.m
    if n == 0 or m == 0:
        return MatchResult([], list(range(n)), list(rendered.keys))
    if current.map_shape != rendered.maps.shape[1:]:
        raise ValueError(
            f"frame maps {current.map_shape} vs rendered {rendered.maps.shape[1:]}"
        )
    s = score_matrix(current.maps, rendered.maps)
    assignments, unmatched = solve_assignment(s, threshold)
    return MatchResult(assignments, unmatched, list(rendered.keys))


def update_semantics(
    volume: SparseVolume,
    dictionary: EmbeddingDictionary,
    frame,
    current: RegionFeatureSet,
    match: MatchResult,
    k_hat: CameraIntrinsics,
    active: Optional[Sequence[BlockIndex]] = None,
    support_min: float = DEFAULT_SUPPORT_MIN,
    occlusion_tol: Optional[float] = None,
    embedding_mode: str = "frozen",
):
    """Write the matched frame's semantics into the volume and dictionary.

    Unmatched regions open fresh dictionary entries; matched regions
    increment their rendered key's observation count (embeddings stay frozen
    unless ``embedding_mode='mean'``).  Each near-surface voxel projecting
    into a region's support (confidence > ``support_min``) folds the map
    value into its stored confidence by weighted average.  A voxel already
    carrying a different key switches only when the incoming confidence
    beats the stored one.
    """
    for i, j, _ in match.assignments:
        if not (0 <= i < current.n):
            raise ValueError(f"match references frame region {i} of {current.n}")
        if not (0 <= j < len(match.rendered_keys)):
            raise ValueError(f"match references rendered region {j}")
    for i in match.unmatched_frame_regions:
        if not (0 <= i < current.n):
            raise ValueError(f"match references frame region {i} of {current.n}")
    if occlusion_tol is None:
        occlusion_tol = 2.0 * volume.config.voxel_size

    target_key: Dict[int, int] = {}
    for i, j, _ in match.assignments:
        key = match.key_for(j)
        if key not in dictionary:
            raise KeyError(f"rendered key {key} missing from dictionary")
        target_key[i] = key
        dictionary.increment(
            key, current.embeddings[i] if embedding_mode == "mean" else None
        )
    for i in sorted(match.unmatched_frame_regions):
        target_key[i] = dictionary.add(current.embeddings[i], current.frame_id)

    if current.n == 0:
        return volume, dictionary

    band = volume.config.semantic_band
    depth_q = downsample_depth(frame.depth, (k_hat.height, k_hat.width))
    per_block, rows_l, cols_l, _ = _project_voxels(
        volume,
        lambda blk: (blk.weight > 0) & (np.abs(blk.tsdf) <= band),
        k_hat,
        pose=frame.pose,
        depth=depth_q,
        occlusion_tol=occlusion_tol,
        active=active,
    )
    if not per_block:
        return volume, dictionary

    for i in sorted(target_key.keys()):
        key = target_key[i]
        conf_map = current.maps[i]
        for (blk, flat), rows, cols in zip(per_block, rows_l, cols_l):
            conf = conf_map[rows, cols]
            hit = conf > support_min
            if not hit.any():
                continue
            fsel = flat[hit]
            cvals = conf[hit].astype(np.float32)
            kflat = blk.key.reshape(-1)
            cflat = blk.confidence.reshape(-1)
            sflat = blk.sem_weight.reshape(-1)
            vkeys = kflat[fsel]
            same = vkeys == key
            fresh = vkeys < 0
            other = ~same & ~fresh

            upd = fsel[same | fresh]
            if len(upd):
                cv = cvals[same | fresh]
                sw = sflat[upd]
                cflat[upd] = (sw * cflat[upd] + cv) / (sw + 1.0)
                sflat[upd] = sw + 1.0
                kflat[upd] = key
            swap = fsel[other]
            if len(swap):
                cv = cvals[other]
                takeover = cv > cflat[swap]
                swap = swap[takeover]
                if len(swap):
                    kflat[swap] = key
                    cflat[swap] = cv[takeover]
                    sflat[swap] = 1.0
    return volume, dictionary
