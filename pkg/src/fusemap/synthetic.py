"""Synthetic scenes with analytic ray-cast rendering.

Serves as the ground-truth generator for tests and the ``synth`` command:
depth images are exact primitive intersections (no discretization), region
features are per-primitive binary masks at quarter resolution, and voxel
labels come from analytic distances to each primitive's surface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .fusion import RegionFeatureSet
from .geometry import CameraIntrinsics, DepthImage, Pose, pixel_rays
from .ingest import (
    FrameObservation,
    save_color,
    save_depth_npy,
    save_pose_file,
    write_region_features,
)


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    color: np.ndarray
    embedding: np.ndarray = None

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float32)

    def ray_depths(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        oc = origin - self.center
        a = (dirs * dirs).sum(axis=1)
        b = 2.0 * dirs @ oc
        c = oc @ oc - self.radius ** 2
        disc = b * b - 4 * a * c
        out = np.full(len(dirs), np.inf)
        hit = disc >= 0
        sq = np.sqrt(np.maximum(disc, 0.0))
        s_near = (-b - sq) / (2 * a)
        s_far = (-b + sq) / (2 * a)
        s = np.where(s_near > 0, s_near, s_far)
        ok = hit & (s > 0)
        out[ok] = s[ok]
        return out

    def surface_distance(self, points: np.ndarray) -> np.ndarray:
        return np.abs(np.linalg.norm(points - self.center, axis=1) - self.radius)

    def bounds(self):
        return self.center - self.radius, self.center + self.radius


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    color: np.ndarray
    embedding: np.ndarray = None

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float32)
        if (self.hi <= self.lo).any():
            raise ValueError("box hi must exceed lo on every axis")

    def ray_depths(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (self.lo - origin) / dirs
            t2 = (self.hi - origin) / dirs
        tmin = np.nanmax(np.minimum(t1, t2), axis=1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=1)
        out = np.full(len(dirs), np.inf)
        s = np.where(tmin > 0, tmin, tmax)
        ok = (tmax >= np.maximum(tmin, 0)) & (s > 0)
        out[ok] = s[ok]
        return out

    def surface_distance(self, points: np.ndarray) -> np.ndarray:
        center = (self.lo + self.hi) / 2
        half = (self.hi - self.lo) / 2
        q = np.abs(points - center) - half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return np.abs(outside + inside)

    def bounds(self):
        return self.lo.copy(), self.hi.copy()


@dataclass
class PlaneRect:
    """Axis-aligned rectangle: the finite 'floor/wall' primitive."""

    center: np.ndarray
    axis: int  # normal axis (0, 1, or 2)
    half_extents: Tuple[float, float]  # along the two in-plane axes, ascending
    color: np.ndarray
    embedding: np.ndarray = None

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float32)
        if self.axis not in (0, 1, 2):
            raise ValueError("plane axis must be 0, 1, or 2")
        self._in_plane = [a for a in range(3) if a != self.axis]

    def ray_depths(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        a = self.axis
        out = np.full(len(dirs), np.inf)
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (self.center[a] - origin[a]) / dirs[:, a]
        pts = origin + s[:, None] * dirs
        u, v = self._in_plane
        ok = (
            (s > 0)
            & np.isfinite(s)
            & (np.abs(pts[:, u] - self.center[u]) <= self.half_extents[0])
            & (np.abs(pts[:, v] - self.center[v]) <= self.half_extents[1])
        )
        out[ok] = s[ok]
        return out

    def surface_distance(self, points: np.ndarray) -> np.ndarray:
        u, v = self._in_plane
        du = np.maximum(np.abs(points[:, u] - self.center[u]) - self.half_extents[0], 0.0)
        dv = np.maximum(np.abs(points[:, v] - self.center[v]) - self.half_extents[1], 0.0)
        dn = points[:, self.axis] - self.center[self.axis]
        return np.sqrt(du ** 2 + dv ** 2 + dn ** 2)

    def bounds(self):
        lo = self.center.copy()
        hi = self.center.copy()
        u, v = self._in_plane
        lo[u] -= self.half_extents[0]
        hi[u] += self.half_extents[0]
        lo[v] -= self.half_extents[1]
        hi[v] += self.half_extents[1]
        return lo, hi


@dataclass
class SyntheticScene:
    primitives: List
    trajectory: List[Pose]
    feature_factor: float = 0.25

    def __post_init__(self):
        embs = [p.embedding for p in self.primitives]
        if any(e is None for e in embs):
            raise ValueError("every primitive needs an embedding")
        for i in range(len(embs)):
            for j in range(i + 1, len(embs)):
                if np.allclose(embs[i], embs[j]):
                    raise ValueError(f"primitives {i} and {j} share an embedding")

    def bounding_box(self, margin: float = 0.0):
        los, his = zip(*(p.bounds() for p in self.primitives))
        return np.min(los, axis=0) - margin, np.max(his, axis=0) + margin

    @property
    def embeddings(self) -> np.ndarray:
        return np.stack([np.asarray(p.embedding, dtype=np.float32) for p in self.primitives])


def orthonormal_embeddings(count: int, dim: int, seed: int = 0) -> np.ndarray:
    """Deterministic mutually-orthogonal unit vectors."""
    if count > dim:
        raise ValueError(f"cannot fit {count} orthogonal vectors in dimension {dim}")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((dim, count)))
    return q.T.astype(np.float32)


def look_at(eye, target, up=(0.0, 0.0, 1.0), timestamp: float = 0.0) -> Pose:
    """World-to-camera pose for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(forward)
    if norm == 0:
        raise ValueError("eye and target coincide")
    forward = forward / norm
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    return Pose(rot, -rot @ eye, timestamp)


def orbit_trajectory(
    center,
    radius: float,
    height: float,
    frames: int,
    start_angle: float = 0.37,
    fps: float = 30.0,
) -> List[Pose]:
    """Camera ring around ``center`` at the given height, looking inward."""
    center = np.asarray(center, dtype=np.float64)
    poses = []
    for i in range(frames):
        ang = start_angle + 2 * math.pi * i / frames
        eye = center + np.array([radius * math.cos(ang), radius * math.sin(ang), height])
        poses.append(look_at(eye, center, timestamp=i / fps))
    return poses


def raycast(scene: SyntheticScene, k: CameraIntrinsics, pose: Pose):
    """Analytic depth and primitive-id maps for one view.

    Depth is the camera-frame z of the nearest hit (0 where nothing is hit);
    ids hold the primitive index or -1.
    """
    h, w = k.height, k.width
    vv, uu = np.mgrid[0:h, 0:w]
    pixels = np.stack([uu.ravel(), vv.ravel()], axis=1)
    dirs_cam = pixel_rays(k, pixels)
    dirs_world = dirs_cam @ pose.rotation  # unit camera-z parameterization
    origin = pose.camera_center

    depth = np.full(h * w, np.inf)
    ids = np.full(h * w, -1, dtype=np.int64)
    for pid, prim in enumerate(scene.primitives):
        s = prim.ray_depths(origin, dirs_world)
        closer = s < depth
        depth[closer] = s[closer]
        ids[closer] = pid
    miss = ~np.isfinite(depth)
    depth[miss] = 0.0
    return depth.reshape(h, w), ids.reshape(h, w)


def frame_from_raycast(
    scene: SyntheticScene, k: CameraIntrinsics, pose: Pose, frame_id: int
) -> Tuple[FrameObservation, np.ndarray]:
    depth, ids = raycast(scene, k, pose)
    rgb = np.zeros((k.height, k.width, 3), dtype=np.float32)
    for pid, prim in enumerate(scene.primitives):
        rgb[ids == pid] = prim.color
    obs = FrameObservation(rgb, DepthImage(depth), pose, pose.timestamp, frame_id)
    return obs, ids


def features_from_ids(
    scene: SyntheticScene, ids: np.ndarray, frame_id: int, factor: float = 0.25
) -> Tuple[RegionFeatureSet, List[int]]:
    """Binary quarter-resolution confidence maps for the visible primitives.

    Returns the feature set plus the primitive index behind each region.
    Fully occluded or out-of-view primitives contribute no region.
    """
    h, w = ids.shape
    hp, wp = int(h * factor), int(w * factor)
    sh, sw = h // hp, w // wp
    ids_q = ids[: hp * sh : sh, : wp * sw : sw]
    maps, embs, owners = [], [], []
    for pid in range(len(scene.primitives)):
        mask = ids_q == pid
        if not mask.any():
            continue
        maps.append(mask.astype(np.float32))
        embs.append(scene.primitives[pid].embedding)
        owners.append(pid)
    if not maps:
        return (
            RegionFeatureSet(
                np.empty((0, hp, wp), dtype=np.float32),
                np.empty((0, scene.embeddings.shape[1]), dtype=np.float32),
                frame_id,
            ),
            [],
        )
    return RegionFeatureSet(np.stack(maps), np.stack(embs), frame_id), owners


def render_synthetic(scene: SyntheticScene, k: CameraIntrinsics):
    """Yield (observation, features, full-res id map) per trajectory pose."""
    for frame_id, pose in enumerate(scene.trajectory):
        obs, ids = frame_from_raycast(scene, k, pose, frame_id)
        feats, _ = features_from_ids(scene, ids, frame_id, scene.feature_factor)
        yield obs, feats, ids


def ground_truth_labels(scene: SyntheticScene, voxel_size: float, band: float):
    """Voxel-level ground truth: lattice coordinates within ``band`` of a
    primitive surface, labeled by the nearest primitive."""
    lo, hi = scene.bounding_box(margin=band + voxel_size)
    g0 = np.floor(lo / voxel_size).astype(np.int64)
    g1 = np.ceil(hi / voxel_size).astype(np.int64) + 1
    axes = [np.arange(g0[a], g1[a]) for a in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    points = grid.astype(np.float64) * voxel_size
    dists = np.stack([p.surface_distance(points) for p in scene.primitives], axis=1)
    best = np.argmin(dists, axis=1)
    near = dists[np.arange(len(points)), best] <= band
    return grid[near], best[near].astype(np.int64)


# ---------------------------------------------------------------------------
# Scene description files

def default_scene_spec() -> dict:
    return {
        "seed": 7,
        "embedding_dim": 16,
        "camera": {
            "fx": 200.0,
            "fy": 200.0,
            "cx": 159.61,
            "cy": 120.23,
            "width": 320,
            "height": 240,
        },
        "primitives": [
            {
                "kind": "plane",
                "center": [0.013, 0.007, 0.004],
                "axis": 2,
                "half_extents": [1.4, 1.4],
                "color": [0.55, 0.55, 0.5],
            },
            {
                "kind": "sphere",
                "center": [0.35, 0.21, 0.42],
                "radius": 0.33,
                "color": [0.85, 0.2, 0.15],
            },
            {
                "kind": "box",
                "lo": [-0.78, -0.55, 0.004],
                "hi": [-0.25, -0.05, 0.52],
                "color": [0.15, 0.3, 0.85],
            },
        ],
        "trajectory": {
            "kind": "orbit",
            "center": [0.0, 0.0, 0.25],
            "radius": 2.1,
            "height": 1.35,
            "frames": 60,
        },
    }


def scene_from_spec(spec: dict) -> Tuple[SyntheticScene, CameraIntrinsics]:
    cam = spec["camera"]
    k = CameraIntrinsics(
        fx=cam["fx"],
        fy=cam["fy"],
        cx=cam["cx"],
        cy=cam["cy"],
        width=cam["width"],
        height=cam["height"],
    )
    prims = []
    for p in spec["primitives"]:
        kind = p["kind"]
        if kind == "sphere":
            prims.append(Sphere(p["center"], p["radius"], p["color"]))
        elif kind == "box":
            prims.append(Box(p["lo"], p["hi"], p["color"]))
        elif kind == "plane":
            prims.append(
                PlaneRect(p["center"], p["axis"], tuple(p["half_extents"]), p["color"])
            )
        else:
            raise ValueError(f"unknown primitive kind {kind!r}")
    dim = int(spec.get("embedding_dim", 16))
    seed = int(spec.get("seed", 0))
    explicit = [p.get("embedding") for p in spec["primitives"]]
    if all(e is not None for e in explicit):
        for prim, e in zip(prims, explicit):
            prim.embedding = np.asarray(e, dtype=np.float32)
    else:
        auto = orthonormal_embeddings(len(prims), dim, seed)
        for prim, e in zip(prims, auto):
            prim.embedding = e
    traj = spec["trajectory"]
    if traj.get("kind", "orbit") != "orbit":
        raise ValueError(f"unknown trajectory kind {traj.get('kind')!r}")
    poses = orbit_trajectory(
        traj["center"],
        traj["radius"],
        traj["height"],
        int(traj["frames"]),
        start_angle=float(traj.get("start_angle", 0.37)),
    )
    return SyntheticScene(prims, poses), k


def export_dataset(
    scene: SyntheticScene,
    k: CameraIntrinsics,
    out_dir: Path,
    voxel_size: float = 0.04,
    band: Optional[float] = None,
) -> Path:
    """Write a loadable sequence: manifest, frames, features, ground truth.

    Depth goes out as raw float32 so the analytic values survive the round
    trip.  Returns the manifest path.
    """
    out_dir = Path(out_dir)
    frames_dir = out_dir / "frames"
    features_dir = out_dir / "features"
    frames_dir.mkdir(parents=True, exist_ok=True)
    features_dir.mkdir(parents=True, exist_ok=True)
    if band is None:
        band = 2.0 * voxel_size

    lines = [
        f"fx {k.fx}",
        f"fy {k.fy}",
        f"cx {k.cx}",
        f"cy {k.cy}",
        f"width {k.width}",
        f"height {k.height}",
        "depth_scale 1.0",
        "feature_dir features",
    ]
    for obs, feats, _ in render_synthetic(scene, k):
        fid = obs.frame_id
        rgb_rel = f"frames/{fid:05d}.png"
        depth_rel = f"frames/{fid:05d}.npy"
        pose_rel = f"frames/{fid:05d}.pose.txt"
        save_color(out_dir / rgb_rel, obs.rgb)
        save_depth_npy(out_dir / depth_rel, obs.depth.values)
        save_pose_file(out_dir / pose_rel, obs.pose)
        write_region_features(features_dir / f"{fid}.ofrf", feats)
        lines.append(f"frame {fid} {obs.timestamp:.6f} {rgb_rel} {depth_rel} {pose_rel}")

    coords, labels = ground_truth_labels(scene, voxel_size, band)
    np.savez(
        out_dir / "gt.npz",
        coords=coords,
        labels=labels,
        class_embeddings=scene.embeddings,
        voxel_size=np.float64(voxel_size),
        band=np.float64(band),
    )
    manifest = out_dir / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
