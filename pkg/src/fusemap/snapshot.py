"""Versioned on-disk state: ``volume.bin``, ``dict.bin``, ``report.json``.

Both binaries are little-endian with a 4-byte magic and a u32 version so
``query`` and ``eval`` can reload a reconstruction without recomputing it.
Blocks are written in sorted index order, which makes snapshots of
deterministic runs byte-identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from .fusion import EmbeddingDictionary
from .pipeline import RunReport
from .tsdf import SparseVolume, VolumeConfig, VoxelBlock

VOLUME_MAGIC = b"OFVL"
DICT_MAGIC = b"OFDC"
STATE_VERSION = 1

_VOL_HEADER = struct.Struct("<IdIddddQQ")
_DICT_HEADER = struct.Struct("<IIQ")


def save_volume(path: Union[str, Path], volume: SparseVolume):
    cfg = volume.config
    cap = float("nan") if cfg.weight_cap is None else float(cfg.weight_cap)
    with open(path, "wb") as fp:
        fp.write(VOLUME_MAGIC)
        fp.write(
            _VOL_HEADER.pack(
                STATE_VERSION,
                cfg.voxel_size,
                cfg.block_resolution,
                cfg.truncation,
                cfg.semantic_band,
                cfg.depth_max,
                cap,
                volume.frame_count,
                len(volume.blocks),
            )
        )
        for idx in volume.sorted_block_indices():
            blk = volume.blocks[idx]
            fp.write(struct.pack("<3i", *idx))
            fp.write(blk.tsdf.astype("<f4").tobytes())
            fp.write(blk.weight.astype("<f4").tobytes())
            fp.write(blk.rgb.astype("<f4").tobytes())
            fp.write(blk.key.astype("<i8").tobytes())
            fp.write(blk.confidence.astype("<f4").tobytes())
            fp.write(blk.sem_weight.astype("<f4").tobytes())


def load_volume(path: Union[str, Path]) -> SparseVolume:
    data = Path(path).read_bytes()
    if data[:4] != VOLUME_MAGIC:
        raise ValueError(f"{path}: not a volume snapshot")
    (
        version,
        voxel_size,
        block_res,
        truncation,
        band,
        depth_max,
        cap,
        frame_count,
        block_count,
    ) = _VOL_HEADER.unpack_from(data, 4)
    if version != STATE_VERSION:
        raise ValueError(f"unsupported volume snapshot version {version}")
    cfg = VolumeConfig(
        voxel_size=voxel_size,
        block_resolution=block_res,
        truncation=truncation,
        semantic_band=band,
        depth_max=depth_max,
        weight_cap=None if np.isnan(cap) else cap,
    )
    volume = SparseVolume(cfg)
    volume.frame_count = int(frame_count)
    r = block_res
    n = r ** 3
    off = 4 + _VOL_HEADER.size
    f4, i8 = 4 * n, 8 * n
    for _ in range(block_count):
        idx = struct.unpack_from("<3i", data, off)
        off += 12
        blk = VoxelBlock(tuple(idx), r, cfg.truncation)

        def take(count, dtype):
            nonlocal off
            arr = np.frombuffer(data, dtype=dtype, count=count, offset=off).copy()
            off += count * arr.itemsize
            return arr

        blk.tsdf = take(n, "<f4").reshape(r, r, r)
        blk.weight = take(n, "<f4").reshape(r, r, r)
        blk.rgb = take(3 * n, "<f4").reshape(r, r, r, 3)
        blk.key = take(n, "<i8").reshape(r, r, r).astype(np.int64)
        blk.confidence = take(n, "<f4").reshape(r, r, r)
        blk.sem_weight = take(n, "<f4").reshape(r, r, r)
        volume.blocks[tuple(idx)] = blk
    return volume


def save_dictionary(path: Union[str, Path], dictionary: EmbeddingDictionary):
    emb, counts, created = dictionary.state_arrays()
    d = emb.shape[1] if len(emb) else (dictionary.dim or 0)
    with open(path, "wb") as fp:
        fp.write(DICT_MAGIC)
        fp.write(_DICT_HEADER.pack(STATE_VERSION, d, len(counts)))
        fp.write(emb.astype("<f4").tobytes())
        fp.write(counts.astype("<i8").tobytes())
        fp.write(created.astype("<i8").tobytes())


def load_dictionary(path: Union[str, Path]) -> EmbeddingDictionary:
    data = Path(path).read_bytes()
    if data[:4] != DICT_MAGIC:
        raise ValueError(f"{path}: not a dictionary snapshot")
    version, d, count = _DICT_HEADER.unpack_from(data, 4)
    if version != STATE_VERSION:
        raise ValueError(f"unsupported dictionary snapshot version {version}")
    off = 4 + _DICT_HEADER.size
    emb = np.frombuffer(data, dtype="<f4", count=count * d, offset=off).reshape(count, d)
    off += count * d * 4
    counts = np.frombuffer(data, dtype="<i8", count=count, offset=off)
    off += count * 8
    created = np.frombuffer(data, dtype="<i8", count=count, offset=off)
    return EmbeddingDictionary.from_state(emb, counts, created)


def save_state(
    state_dir: Union[str, Path],
    volume: SparseVolume,
    dictionary: EmbeddingDictionary,
    report: Optional[RunReport] = None,
):
    state_dir = Path(state_dir)
    state_dir.mkdir(parents=True, exist_ok=True)
    save_volume(state_dir / "volume.bin", volume)
    save_dictionary(state_dir / "dict.bin", dictionary)
    if report is not None:
        (state_dir / "report.json").write_text(
            json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
        )


def load_state(
    state_dir: Union[str, Path],
) -> Tuple[SparseVolume, EmbeddingDictionary, Optional[RunReport]]:
    state_dir = Path(state_dir)
    volume = load_volume(state_dir / "volume.bin")
    dictionary = load_dictionary(state_dir / "dict.bin")
    report = None
    report_path = state_dir / "report.json"
    if report_path.is_file():
        report = RunReport.from_dict(json.loads(report_path.read_text()))
    return volume, dictionary, report
