"""Iso-surface extraction from the sparse TSDF volume.

Marching cubes (the classic 256-case table with linear interpolation) runs
over a dense crop of the allocated blocks.  Cubes with any unobserved corner
(weight 0 or outside every allocated block) are skipped so allocation
boundaries never produce fake walls.  Vertex colors are interpolated along
the crossing edge exactly like positions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from scipy.ndimage import map_coordinates
from skimage import measure

from .tsdf import BlockIndex, SparseVolume


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float64, world meters
    colors: np.ndarray  # (V, 3) float32 in [0, 1]
    triangles: np.ndarray  # (T, 3) int64 vertex indices

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float32).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and self.triangles.max() >= len(self.vertices):
            raise ValueError("triangle index out of range")
        if len(self.triangles) and self.triangles.min() < 0:
            raise ValueError("negative triangle index")
        if len(self.vertices) and not np.isfinite(self.vertices).all():
            raise ValueError("mesh contains non-finite vertices")

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def euler_characteristic(self) -> int:
        """V - E + F with E counted over unique undirected edges."""
        if self.is_empty:
            return 0
        t = self.triangles
        edges = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        edges = np.sort(edges, axis=1)
        n_edges = len(np.unique(edges, axis=0))
        return len(self.vertices) - n_edges + len(self.triangles)


def empty_mesh() -> TriangleMesh:
    return TriangleMesh(
        np.empty((0, 3)), np.empty((0, 3), dtype=np.float32), np.empty((0, 3), dtype=np.int64)
    )


def _dense_crop(volume: SparseVolume, blocks: List[BlockIndex]):
    """Gather allocated blocks into dense arrays over their bounding box.

    Returns (origin lattice coords, tsdf, rgb, key, observed mask, selected
    mask).  Corner values on the +faces of selected blocks are pulled from
    any allocated neighbor so boundary cubes interpolate correctly.
    """
    r = volume.config.block_resolution
    sel = np.array(sorted(blocks), dtype=np.int64)
    lo = sel.min(axis=0) * r
    hi = (sel.max(axis=0) + 1) * r + 1  # +1 corner layer for boundary cubes
    dims = tuple(hi - lo)
    tsdf = np.full(dims, volume.config.truncation, dtype=np.float64)
    rgb = np.zeros(dims + (3,), dtype=np.float32)
    key = np.full(dims, -1, dtype=np.int64)
    observed = np.zeros(dims, dtype=bool)
    selected = np.zeros(dims, dtype=bool)
    sel_set = {tuple(s) for s in sel}
    for bidx, blk in volume.blocks.items():
        start = np.array(bidx, dtype=np.int64) * r - lo
        stop = start + r
        if (stop <= 0).any() or (start >= dims).any():
            continue
        s0 = np.maximum(start, 0)
        s1 = np.minimum(stop, dims)
        bs = s0 - start
        be = s1 - start
        dst = tuple(slice(int(s0[i]), int(s1[i])) for i in range(3))
        src = tuple(slice(int(bs[i]), int(be[i])) for i in range(3))
        tsdf[dst] = blk.tsdf[src]
        rgb[dst] = blk.rgb[src]
        key[dst] = blk.key[src]
        observed[dst] = blk.weight[src] > 0
        if bidx in sel_set:
            selected[dst] = True
    return lo, tsdf, rgb, key, observed, selected


def marching_cubes(
    volume: SparseVolume,
    blocks: Optional[List[BlockIndex]] = None,
    region_key: Optional[int] = None,
) -> TriangleMesh:
    """Triangulate the tsdf = 0 surface.

    ``blocks`` restricts the cubes considered to those based in the given
    blocks; ``region_key`` additionally keeps only triangles whose nearest
    voxel carries that semantic key.
    """
    if blocks is None:
        blocks = list(volume.blocks.keys())
    blocks = [b for b in blocks if b in volume.blocks]
    if not blocks:
        return empty_mesh()
    lo, tsdf, rgb, key, observed, selected = _dense_crop(volume, blocks)

    v = observed
    cube_ok = (
        v[:-1, :-1, :-1]
        & v[1:, :-1, :-1]
        & v[:-1, 1:, :-1]
        & v[:-1, :-1, 1:]
        & v[1:, 1:, :-1]
        & v[1:, :-1, 1:]
        & v[:-1, 1:, 1:]
        & v[1:, 1:, 1:]
    )
    cube_ok &= selected[:-1, :-1, :-1]
    if not cube_ok.any():
        return empty_mesh()
    # skimage tests the mask at each cube's max corner; shift accordingly.
    mask = np.zeros(tsdf.shape, dtype=bool)
    mask[1:, 1:, 1:] = cube_ok
    try:
        verts, faces, _, _ = measure.marching_cubes(tsdf, 0.0, method="lorensen", mask=mask)
    except (ValueError, RuntimeError):
        return empty_mesh()
    if len(faces) == 0:
        return empty_mesh()

    # Safety net against mask-convention drift: every vertex must sit on an
    # edge whose two endpoints were observed.
    lo_c = np.floor(verts).astype(np.int64)
    hi_c = np.ceil(verts).astype(np.int64)
    np.clip(lo_c, 0, np.array(tsdf.shape) - 1, out=lo_c)
    np.clip(hi_c, 0, np.array(tsdf.shape) - 1, out=hi_c)
    vert_ok = (
        observed[lo_c[:, 0], lo_c[:, 1], lo_c[:, 2]]
        & observed[hi_c[:, 0], hi_c[:, 1], hi_c[:, 2]]
    )
    keep = vert_ok[faces].all(axis=1)

    if region_key is not None:
        centroids = verts[faces].mean(axis=1)
        nearest = np.floor(centroids + 0.5).astype(np.int64)
        np.clip(nearest, 0, np.array(tsdf.shape) - 1, out=nearest)
        keep &= key[nearest[:, 0], nearest[:, 1], nearest[:, 2]] == region_key
    faces = faces[keep]
    if len(faces) == 0:
        return empty_mesh()

    used = np.unique(faces)
    remap = np.full(len(verts), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    verts = verts[used]
    faces = remap[faces]

    colors = np.stack(
        [map_coordinates(rgb[..., ch], verts.T, order=1, mode="nearest") for ch in range(3)],
        axis=1,
    ).astype(np.float32)
    world = (verts + lo) * volume.config.voxel_size
    return TriangleMesh(world, colors, faces)
