"""Globally sparse, locally dense TSDF volume.

The map is a hash of voxel blocks, each a dense ``r^3`` grid stored as
structure-of-arrays so whole frames integrate as batched numpy ops.  The
lattice point of voxel ``(a, b, c)`` in block ``B`` sits at world position
``(B * r + (a, b, c)) * voxel_size``; blocks exist only near observed
surfaces.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .geometry import CameraIntrinsics, DepthImage, Pose, nearest_pixels, pixel_rays

BlockIndex = Tuple[int, int, int]

# Packed block keys: 21 bits per signed axis, enough for +/- 2^20 blocks.
_PACK_OFFSET = 1 << 20
_PACK_LIMIT = (1 << 21) - 1


@dataclass(frozen=True)
class VolumeConfig:
    """Geometry of the voxel grid and integration limits.

    ``truncation`` defaults to four voxel sizes; ``semantic_band`` (the |tsdf|
    range in which voxels may carry semantics) defaults to two voxel sizes.
    ``weight_cap`` bounds the integration weight for long runs; None leaves
    the weight unbounded.
    """

    voxel_size: float
    block_resolution: int = 8
    truncation: Optional[float] = None
    semantic_band: Optional[float] = None
    depth_max: float = 5.0
    weight_cap: Optional[float] = None

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise ValueError(f"voxel_size must be positive, got {self.voxel_size}")
        if self.block_resolution < 2:
            raise ValueError(f"block_resolution must be >= 2, got {self.block_resolution}")
        if self.truncation is None:
            object.__setattr__(self, "truncation", 4.0 * self.voxel_size)
        if self.truncation < self.voxel_size:
            raise ValueError("truncation must be at least one voxel size")
        if self.semantic_band is None:
            object.__setattr__(self, "semantic_band", 2.0 * self.voxel_size)
        if not (0 < self.semantic_band <= self.truncation):
            raise ValueError("semantic_band must be in (0, truncation]")
        if self.depth_max <= 0:
            raise ValueError("depth_max must be positive")
        if self.weight_cap is not None and self.weight_cap < 1:
            raise ValueError("weight_cap must be >= 1 when set")

    @property
    def block_size(self) -> float:
        """Block edge length in meters."""
        return self.voxel_size * self.block_resolution


@dataclass(frozen=True)
class Voxel:
    """Read-only view of a single voxel's state."""

    rgb: np.ndarray
    weight: float
    tsdf: float
    semantic_key: Optional[int]
    confidence: float
    semantic_weight: float


class VoxelBlock:
    """Dense r^3 voxel grid, structure-of-arrays."""

    __slots__ = ("block_index", "tsdf", "weight", "rgb", "key", "confidence", "sem_weight")

    def __init__(self, block_index: BlockIndex, resolution: int, truncation: float):
        r = resolution
        self.block_index = block_index
        self.tsdf = np.full((r, r, r), truncation, dtype=np.float32)
        self.weight = np.zeros((r, r, r), dtype=np.float32)
        self.rgb = np.zeros((r, r, r, 3), dtype=np.float32)
        self.key = np.full((r, r, r), -1, dtype=np.int64)
        self.confidence = np.zeros((r, r, r), dtype=np.float32)
        self.sem_weight = np.zeros((r, r, r), dtype=np.float32)

    def nbytes(self) -> int:
        return (
            self.tsdf.nbytes
            + self.weight.nbytes
            + self.rgb.nbytes
            + self.key.nbytes
            + self.confidence.nbytes
            + self.sem_weight.nbytes
        )


def _local_offsets(r: int) -> np.ndarray:
    """(r^3, 3) voxel offsets within a block, C-order to match flat views."""
    a, b, c = np.mgrid[0:r, 0:r, 0:r]
    return np.stack([a.ravel(), b.ravel(), c.ravel()], axis=1).astype(np.int64)


_OFFSET_CACHE: Dict[int, np.ndarray] = {}


def local_offsets(r: int) -> np.ndarray:
    if r not in _OFFSET_CACHE:
        _OFFSET_CACHE[r] = _local_offsets(r)
    return _OFFSET_CACHE[r]


class SparseVolume:
    """Sparse map of voxel blocks plus per-volume bookkeeping."""

    def __init__(self, config: VolumeConfig):
        self.config = config
        self.blocks: Dict[BlockIndex, VoxelBlock] = {}
        self.frame_count = 0

    @property
    def block_size(self) -> float:
        return self.config.block_size

    def get_block(self, index: BlockIndex) -> Optional[VoxelBlock]:
        return self.blocks.get(tuple(index))

    def get_or_create_block(self, index: BlockIndex) -> VoxelBlock:
        index = tuple(int(i) for i in index)
        blk = self.blocks.get(index)
        if blk is None:
            blk = VoxelBlock(index, self.config.block_resolution, self.config.truncation)
            self.blocks[index] = blk
        return blk

    def sorted_block_indices(self) -> List[BlockIndex]:
        return sorted(self.blocks.keys())

    def voxel_at(self, gx: int, gy: int, gz: int) -> Optional[Voxel]:
        """Voxel at global lattice coordinates; None for unallocated space."""
        r = self.config.block_resolution
        bidx = (gx // r, gy // r, gz // r)
        blk = self.blocks.get(bidx)
        if blk is None:
            return None
        a, b, c = gx - bidx[0] * r, gy - bidx[1] * r, gz - bidx[2] * r
        key = int(blk.key[a, b, c])
        return Voxel(
            rgb=blk.rgb[a, b, c].copy(),
            weight=float(blk.weight[a, b, c]),
            tsdf=float(blk.tsdf[a, b, c]),
            semantic_key=None if key < 0 else key,
            confidence=float(blk.confidence[a, b, c]),
            semantic_weight=float(blk.sem_weight[a, b, c]),
        )

    def observed_voxel_count(self) -> int:
        return int(sum((blk.weight > 0).sum() for blk in self.blocks.values()))

    def memory_bytes(self) -> int:
        return sum(blk.nbytes() for blk in self.blocks.values())


def truncate(sdf_value, tau: float):
    """Clamp a signed distance into [-tau, +tau] (the TSDF truncation)."""
    if tau <= 0:
        raise ValueError(f"truncation must be positive, got {tau}")
    return np.clip(sdf_value, -tau, tau)


def pack_block_indices(idx: np.ndarray) -> np.ndarray:
    """Encode (N, 3) integer block indices into sortable int64 keys."""
    shifted = idx + _PACK_OFFSET
    if (shifted < 0).any() or (shifted > _PACK_LIMIT).any():
        raise ValueError("block index out of packable range")
    return (shifted[:, 0] << 42) | (shifted[:, 1] << 21) | shifted[:, 2]


def unpack_block_indices(keys: np.ndarray) -> np.ndarray:
    out = np.empty((len(keys), 3), dtype=np.int64)
    out[:, 0] = (keys >> 42) & _PACK_LIMIT
    out[:, 1] = (keys >> 21) & _PACK_LIMIT
    out[:, 2] = keys & _PACK_LIMIT
    return out - _PACK_OFFSET


def _segment_blocks(p0: np.ndarray, p1: np.ndarray, block_size: float) -> np.ndarray:
    """Unique packed block keys touched by the segments p0 -> p1.

    Amanatides-Woo traversal at block granularity, run for all segments in
    lockstep.  A point on a boundary belongs to the block given by the floor
    of its coordinates.
    """
    q0 = p0 / block_size
    q1 = p1 / block_size
    cur = np.floor(q0).astype(np.int64)
    end = np.floor(q1).astype(np.int64)
    delta = q1 - q0

    step = np.sign(delta).astype(np.int64)
    with np.errstate(divide="ignore"):
        tdelta = 1.0 / np.abs(delta)
    tdelta[~np.isfinite(tdelta)] = np.inf
    # Parameter value (in [0, 1]) at which each axis next crosses a boundary.
    boundary = np.where(step > 0, cur + 1, cur).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        tmax = (boundary - q0) / delta
    tmax[step == 0] = np.inf

    visited = [pack_block_indices(cur)]
    active = np.ones(len(cur), dtype=bool)
    # L1 block distance bounds the crossings; +3 margin for boundary rounding
    max_steps = int(np.abs(end - np.floor(q0).astype(np.int64)).sum(axis=1).max()) + 3
    rows = np.arange(len(cur))
    for _ in range(max_steps):
        axis = np.argmin(tmax, axis=1)
        tm = tmax[rows, axis]
        go = active & (tm <= 1.0)
        if not go.any():
            break
        gi = np.nonzero(go)[0]
        ga = axis[gi]
        cur[gi, ga] += step[gi, ga]
        tmax[gi, ga] += tdelta[gi, ga]
        visited.append(pack_block_indices(cur[gi]))
        active = go
    return np.unique(np.concatenate(visited))


def allocate_active_blocks(
    volume: SparseVolume, depth: DepthImage, k: CameraIntrinsics, pose: Pose
) -> List[BlockIndex]:
    """Find (and create) the blocks holding this frame's surface observations.

    For every valid depth pixel the surface sample is dilated by the
    truncation distance along its viewing ray; every block that segment
    passes through becomes active.  Absent blocks are created zero
    initialized (weight 0, tsdf +truncation).
    """
    if depth.values.shape != (k.height, k.width):
        raise ValueError(
            f"depth shape {depth.values.shape} does not match intrinsics "
            f"{(k.height, k.width)}"
        )
    cfg = volume.config
    d = depth.values
    valid = (d > 0) & (d <= cfg.depth_max)
    if not valid.any():
        return []
    vv, uu = np.nonzero(valid)
    z = d[vv, uu].astype(np.float64)
    rays = pixel_rays(k, np.stack([uu, vv], axis=1))
    dirs = rays @ pose.rotation  # R^T @ ray for each row
    center = pose.camera_center
    z0 = np.maximum(z - cfg.truncation, 0.0)
    z1 = z + cfg.truncation
    p0 = center + z0[:, None] * dirs
    p1 = center + z1[:, None] * dirs
    keys = _segment_blocks(p0, p1, cfg.block_size)
    indices = unpack_block_indices(keys)
    out = []
    for row in indices:
        idx = (int(row[0]), int(row[1]), int(row[2]))
        volume.get_or_create_block(idx)
        out.append(idx)
    return out


def integrate_geometry(
    volume: SparseVolume,
    frame,
    k: CameraIntrinsics,
    active: Optional[List[BlockIndex]] = None,
) -> SparseVolume:
    """Fuse one RGB-D frame into the volume by weighted averaging.

    Every voxel of the active blocks that projects to a valid pixel with
    signed distance >= -truncation receives the standard TSDF update:
    tsdf and color move toward the observation with weight w/(w+1) and the
    weight increments.  Samples far behind the observed surface are skipped.
    """
    cfg = volume.config
    depth = frame.depth.values
    if depth.shape != (k.height, k.width):
        raise ValueError(
            f"frame depth {depth.shape} does not match intrinsics {(k.height, k.width)}"
        )
    if frame.rgb.shape[:2] != depth.shape:
        raise ValueError("frame rgb and depth dimensions differ")
    if active is None:
        active = allocate_active_blocks(volume, frame.depth, k, frame.pose)
    blocks = [volume.blocks[tuple(i)] for i in active]
    if not blocks:
        volume.frame_count += 1
        return volume

    r = cfg.block_resolution
    n = r ** 3
    offsets = local_offsets(r)
    origins = np.array([b.block_index for b in blocks], dtype=np.int64) * r
    lattice = (origins[:, None, :] + offsets[None, :, :]).reshape(-1, 3)
    centers = lattice.astype(np.float64) * cfg.voxel_size

    cam = centers @ frame.pose.rotation.T + frame.pose.translation
    z = cam[:, 2]
    front = z > 0
    uv = np.empty((len(cam), 2))
    with np.errstate(divide="ignore", invalid="ignore"):
        uv[:, 0] = k.fx * cam[:, 0] / z + k.cx
        uv[:, 1] = k.fy * cam[:, 1] / z + k.cy
    cols, rows, in_img = nearest_pixels(uv, k)
    ok = front & in_img

    obs_depth = np.zeros(len(cam), dtype=np.float64)
    obs_depth[ok] = depth[rows[ok], cols[ok]]
    ok &= (obs_depth > 0) & (obs_depth <= cfg.depth_max)
    sdf = obs_depth - z
    ok &= sdf >= -cfg.truncation

    tsdf_obs = np.minimum(sdf, cfg.truncation).astype(np.float32)
    color_obs = np.zeros((len(cam), 3), dtype=np.float32)
    color_obs[ok] = frame.rgb[rows[ok], cols[ok]]

    ok_blocks = ok.reshape(len(blocks), n)
    tsdf_obs = tsdf_obs.reshape(len(blocks), n)
    color_obs = color_obs.reshape(len(blocks), n, 3)
    for bi, blk in enumerate(blocks):
        m = ok_blocks[bi]
        if not m.any():
            continue
        tflat = blk.tsdf.reshape(n)
        wflat = blk.weight.reshape(n)
        cflat = blk.rgb.reshape(n, 3)
        w = wflat[m]
        denom = w + 1.0
        tflat[m] = (w * tflat[m] + tsdf_obs[bi, m]) / denom
        cflat[m] = (w[:, None] * cflat[m] + color_obs[bi, m]) / denom[:, None]
        if cfg.weight_cap is not None:
            wflat[m] = np.minimum(denom, cfg.weight_cap)
        else:
            wflat[m] = denom
    volume.frame_count += 1
    return volume


def extract_point_cloud(volume: SparseVolume, band: float):
    """Surface point cloud: voxel lattice points with weight > 0, |tsdf| <= band.

    Returns (points, colors, keys, confidences); keys use -1 for voxels
    without a semantic key.
    """
    if band <= 0:
        raise ValueError(f"band must be positive, got {band}")
    r = volume.config.block_resolution
    offsets = local_offsets(r)
    pts, cols, keys, confs = [], [], [], []
    for idx in volume.sorted_block_indices():
        blk = volume.blocks[idx]
        mask = (blk.weight > 0) & (np.abs(blk.tsdf) <= band)
        if not mask.any():
            continue
        m = mask.reshape(-1)
        lattice = np.array(idx, dtype=np.int64) * r + offsets[m]
        pts.append(lattice.astype(np.float64) * volume.config.voxel_size)
        cols.append(blk.rgb.reshape(-1, 3)[m])
        keys.append(blk.key.reshape(-1)[m])
        confs.append(blk.confidence.reshape(-1)[m])
    if not pts:
        e = np.empty
        return e((0, 3)), e((0, 3), dtype=np.float32), e(0, dtype=np.int64), e(0, dtype=np.float32)
    return (
        np.concatenate(pts),
        np.concatenate(cols),
        np.concatenate(keys),
        np.concatenate(confs),
    )


def extract_mesh(volume: SparseVolume):
    """Triangulate the zero iso-surface of the whole volume."""
    from .mesh import marching_cubes

    return marching_cubes(volume)
