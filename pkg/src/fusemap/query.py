"""Open-vocabulary queries against the semantic volume.

Ranking is a cosine-similarity sweep over the embedding dictionary, so its
cost scales with the number of regions, never with the number of voxels.
Geometry for a chosen region comes from the voxels holding its key, either
as raw lattice points or as a key-restricted marching-cubes mesh.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .fusion import EmbeddingDictionary
from .mesh import TriangleMesh, marching_cubes
from .tsdf import SparseVolume, local_offsets


@dataclass
class QueryVector:
    """Unit-norm query embedding with its provenance tag."""

    values: np.ndarray
    source: str = "raw"  # text | image | raw

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32).reshape(-1)
        norm = np.linalg.norm(self.values)
        if norm == 0 or not np.isfinite(norm):
            raise ValueError("query vector must be finite and nonzero")
        self.values = self.values / norm

    @property
    def dim(self) -> int:
        return len(self.values)


@dataclass
class QueryResult:
    ranked: List[Tuple[int, float]]
    geometry: Dict[int, object] = field(default_factory=dict)


def rank_regions(
    dictionary: EmbeddingDictionary,
    q: QueryVector,
    top_k: int = 1,
    min_score: Optional[float] = None,
) -> List[Tuple[int, float]]:
    """Top-k dictionary keys by cosine similarity, ties broken by smaller key.

    Runtime is linear in the dictionary size.  An empty dictionary yields an
    empty ranking; ``min_score`` optionally drops weak matches.
    """
    if len(dictionary) == 0:
        return []
    if dictionary.dim != q.dim:
        raise ValueError(f"query dim {q.dim} != dictionary dim {dictionary.dim}")
    scores = dictionary.embedding_matrix.astype(np.float64) @ q.values.astype(np.float64)
    keys = np.arange(len(dictionary))
    order = np.lexsort((keys, -scores))
    if top_k is not None:
        order = order[: max(int(top_k), 0)]
    out = [(int(k), float(scores[k])) for k in order]
    if min_score is not None:
        out = [(k, s) for k, s in out if s >= min_score]
    return out


def region_voxels(volume: SparseVolume, key: int):
    """Lattice points (and colors/confidences) of voxels carrying ``key``."""
    r = volume.config.block_resolution
    offsets = local_offsets(r)
    pts, cols, confs = [], [], []
    for idx in volume.sorted_block_indices():
        blk = volume.blocks[idx]
        mask = ((blk.key == key) & (blk.sem_weight > 0)).reshape(-1)
        if not mask.any():
            continue
        lattice = np.array(idx, dtype=np.int64) * r + offsets[mask]
        pts.append(lattice.astype(np.float64) * volume.config.voxel_size)
        cols.append(blk.rgb.reshape(-1, 3)[mask])
        confs.append(blk.confidence.reshape(-1)[mask])
    if not pts:
        return (
            np.empty((0, 3)),
            np.empty((0, 3), dtype=np.float32),
            np.empty(0, dtype=np.float32),
        )
    return np.concatenate(pts), np.concatenate(cols), np.concatenate(confs)


def extract_region(
    volume: SparseVolume,
    dictionary: EmbeddingDictionary,
    key: int,
    mode: str = "voxels",
):
    """Geometry of one region: its voxel lattice points or a restricted mesh.

    Mesh mode runs marching cubes over just the blocks containing the key and
    keeps triangles whose nearest voxel carries it.
    """
    if key not in dictionary:
        raise KeyError(f"unknown region key {key}")
    if mode == "voxels":
        return region_voxels(volume, key)
    if mode == "mesh":
        blocks = [
            idx
            for idx, blk in volume.blocks.items()
            if ((blk.key == key) & (blk.sem_weight > 0)).any()
        ]
        if not blocks:
            return TriangleMesh(
                np.empty((0, 3)),
                np.empty((0, 3), dtype=np.float32),
                np.empty((0, 3), dtype=np.int64),
            )
        return marching_cubes(volume, blocks=blocks, region_key=key)
    raise ValueError(f"unknown extraction mode {mode!r}")


def segment_all(
    volume: SparseVolume,
    dictionary: EmbeddingDictionary,
    queries: List[QueryVector],
):
    """Label every semantic voxel with the argmax query over its key's embedding.

    Returns (coords, labels): (N, 3) global lattice coordinates and the
    (N,) query indices.  Ties resolve to the lower query index.
    """
    if not queries:
        raise ValueError("segment_all needs at least one query")
    dims = {q.dim for q in queries}
    if len(dims) != 1:
        raise ValueError("queries have mixed dimensions")
    if len(dictionary) and dictionary.dim not in dims:
        raise ValueError("query dimension does not match dictionary")

    qmat = np.stack([q.values for q in queries]).astype(np.float64)
    if len(dictionary):
        key_label = np.argmax(dictionary.embedding_matrix.astype(np.float64) @ qmat.T, axis=1)
    else:
        key_label = np.empty(0, dtype=np.int64)

    r = volume.config.block_resolution
    offsets = local_offsets(r)
    coords, labels = [], []
    for idx in volume.sorted_block_indices():
        blk = volume.blocks[idx]
        mask = ((blk.sem_weight > 0) & (blk.key >= 0)).reshape(-1)
        if not mask.any():
            continue
        keys = blk.key.reshape(-1)[mask]
        coords.append(np.array(idx, dtype=np.int64) * r + offsets[mask])
        labels.append(key_label[keys])
    if not coords:
        return np.empty((0, 3), dtype=np.int64), np.empty(0, dtype=np.int64)
    return np.concatenate(coords), np.concatenate(labels)
