"""Binary little-endian PLY export for meshes and semantic point clouds."""

from __future__ import annotations

from pathlib import Path
from typing import Union

import numpy as np

from .mesh import TriangleMesh

# region_key value written for voxels that carry no semantic key
NO_REGION = 0xFFFFFFFF


def _header(lines) -> bytes:
    return ("\n".join(lines) + "\n").encode("ascii")


def write_mesh_ply(path: Union[str, Path], mesh: TriangleMesh):
    """Vertices as x,y,z float32 + red,green,blue uchar; faces as index triples."""
    v = len(mesh.vertices)
    f = len(mesh.triangles)
    header = _header(
        [
            "ply",
            "format binary_little_endian 1.0",
            f"element vertex {v}",
            "property float x",
            "property float y",
            "property float z",
            "property uchar red",
            "property uchar green",
            "property uchar blue",
            f"element face {f}",
            "property list uchar int vertex_indices",
            "end_header",
        ]
    )
    vert = np.zeros(
        v,
        dtype=[
            ("x", "<f4"),
            ("y", "<f4"),
            ("z", "<f4"),
            ("red", "u1"),
            ("green", "u1"),
            ("blue", "u1"),
        ],
    )
    if v:
        vert["x"], vert["y"], vert["z"] = mesh.vertices.T.astype(np.float32)
        rgb8 = np.clip(mesh.colors * 255.0 + 0.5, 0, 255).astype(np.uint8)
        vert["red"], vert["green"], vert["blue"] = rgb8.T
    face = np.zeros(f, dtype=[("n", "u1"), ("idx", "<i4", (3,))])
    if f:
        face["n"] = 3
        face["idx"] = mesh.triangles.astype(np.int32)
    with open(path, "wb") as fp:
        fp.write(header)
        fp.write(vert.tobytes())
        fp.write(face.tobytes())


def write_point_cloud_ply(
    path: Union[str, Path],
    points: np.ndarray,
    colors: np.ndarray,
    keys: np.ndarray = None,
    confidences: np.ndarray = None,
):
    """Point cloud with the extra uint32 region_key and float32 confidence
    properties; keyless points carry region_key 0xFFFFFFFF."""
    n = len(points)
    if keys is None:
        keys = np.full(n, -1, dtype=np.int64)
    if confidences is None:
        confidences = np.zeros(n, dtype=np.float32)
    header = _header(
        [
            "ply",
            "format binary_little_endian 1.0",
            f"element vertex {n}",
            "property float x",
            "property float y",
            "property float z",
            "property uchar red",
            "property uchar green",
            "property uchar blue",
            "property uint region_key",
            "property float confidence",
            "end_header",
        ]
    )
    rec = np.zeros(
        n,
        dtype=[
            ("x", "<f4"),
            ("y", "<f4"),
            ("z", "<f4"),
            ("red", "u1"),
            ("green", "u1"),
            ("blue", "u1"),
            ("region_key", "<u4"),
            ("confidence", "<f4"),
        ],
    )
    if n:
        rec["x"], rec["y"], rec["z"] = np.asarray(points).T.astype(np.float32)
        rgb8 = np.clip(np.asarray(colors) * 255.0 + 0.5, 0, 255).astype(np.uint8)
        rec["red"], rec["green"], rec["blue"] = rgb8.T
        k = np.asarray(keys, dtype=np.int64)
        rec["region_key"] = np.where(k < 0, NO_REGION, k).astype(np.uint32)
        rec["confidence"] = np.asarray(confidences, dtype=np.float32)
    with open(path, "wb") as fp:
        fp.write(header)
        fp.write(rec.tobytes())
