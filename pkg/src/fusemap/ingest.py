"""Dataset and stream ingestion.

Covers the sequence manifest (a key/value text file plus per-frame image and
pose files), timestamp synchronization of image and pose streams, and the two
binary wire formats: ``.ofrf`` region-feature messages and ``.ofqv`` query
vector files.  Both formats are little-endian and documented in the README.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from .fusion import RegionFeatureSet
from .geometry import CameraIntrinsics, DepthImage, Pose
from .query import QueryVector

OFRF_MAGIC = b"OFRF"
OFQV_MAGIC = b"OFQV"
WIRE_VERSION = 1

DEFAULT_SYNC_WINDOW = 0.010  # seconds


class LoadError(Exception):
    """A dataset file is missing, malformed, or inconsistent."""


@dataclass
class FrameObservation:
    """One synchronized RGB-D observation with its camera pose."""

    rgb: np.ndarray  # (H, W, 3) float32 in [0, 1]
    depth: DepthImage
    pose: Pose
    timestamp: float
    frame_id: int = 0

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float32)
        if self.rgb.shape[:2] != self.depth.values.shape:
            raise ValueError(
                f"rgb {self.rgb.shape[:2]} and depth {self.depth.values.shape} differ"
            )


@dataclass
class FrameEntry:
    frame_id: int
    timestamp: float
    rgb_path: Path
    depth_path: Path
    pose: Pose


@dataclass
class SequenceManifest:
    intrinsics: CameraIntrinsics
    depth_scale: float
    frames: List[FrameEntry]
    feature_dir: Optional[Path] = None
    root: Optional[Path] = None

    def __len__(self) -> int:
        return len(self.frames)

    def read_frame(self, entry: FrameEntry) -> FrameObservation:
        rgb = load_color(entry.rgb_path)
        depth = load_depth(entry.depth_path, self.depth_scale)
        return FrameObservation(rgb, depth, entry.pose, entry.timestamp, entry.frame_id)

    def iter_frames(self) -> Iterator[FrameObservation]:
        for entry in self.frames:
            yield self.read_frame(entry)


def load_color(path: Union[str, Path]) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    return np.asarray(img, dtype=np.float32) / 255.0


def save_color(path: Union[str, Path], rgb: np.ndarray):
    arr = np.clip(np.asarray(rgb) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_depth(path: Union[str, Path], depth_scale: float = 0.001) -> DepthImage:
    """Load a depth image: 16-bit PNG scaled by ``depth_scale`` or raw
    float32 ``.npy`` already in meters."""
    path = Path(path)
    if path.suffix == ".npy":
        return DepthImage(np.load(path).astype(np.float32))
    img = Image.open(path)
    values = np.asarray(img, dtype=np.float32) * depth_scale
    return DepthImage(values)


def save_depth_png(path: Union[str, Path], depth_m: np.ndarray, depth_scale: float = 0.001):
    stored = np.round(np.asarray(depth_m) / depth_scale).astype(np.uint16)
    Image.fromarray(stored).save(path)


def save_depth_npy(path: Union[str, Path], depth_m: np.ndarray):
    np.save(path, np.asarray(depth_m, dtype=np.float32))


def load_pose_file(path: Union[str, Path], timestamp: float = 0.0) -> Pose:
    """Pose file: 12 whitespace-separated floats, row-major [R|t], world->camera."""
    vals = np.loadtxt(path, dtype=np.float64).reshape(-1)
    if vals.size != 12:
        raise LoadError(f"{path}: expected 12 pose values, got {vals.size}")
    m = vals.reshape(3, 4)
    return Pose(m[:, :3], m[:, 3], timestamp)


def save_pose_file(path: Union[str, Path], pose: Pose):
    m = np.concatenate([pose.rotation, pose.translation[:, None]], axis=1)
    np.savetxt(path, m.reshape(1, 12), fmt="%.17g")


def synchronize(
    image_stamps: Sequence[float],
    pose_stamps: Sequence[float],
    window: float = DEFAULT_SYNC_WINDOW,
) -> List[Tuple[int, int]]:
    """Greedily pair each image with the nearest pose within ``window``.

    Both streams must be timestamp-ordered.  One forward pass; each pose is
    used at most once; images without a close-enough pose are dropped.
    Returns (image index, pose index) pairs in image order.
    """
    if window <= 0:
        raise ValueError("sync window must be positive")
    pairs: List[Tuple[int, int]] = []
    j = 0
    for i, t in enumerate(image_stamps):
        if j >= len(pose_stamps):
            break
        while j + 1 < len(pose_stamps) and abs(pose_stamps[j + 1] - t) <= abs(
            pose_stamps[j] - t
        ):
            j += 1
        if abs(pose_stamps[j] - t) <= window:
            pairs.append((i, j))
            j += 1
    return pairs


def _parse_manifest_lines(text: str):
    scalars = {}
    frames = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "frame":
            if len(parts) not in (5, 6):
                raise LoadError(
                    f"manifest line {lineno}: expected "
                    "'frame <id> <timestamp> <rgb> <depth> [<pose>]'"
                )
            frames.append(parts[1:])
        elif len(parts) == 2:
            scalars[parts[0]] = parts[1]
        else:
            raise LoadError(f"manifest line {lineno}: cannot parse {raw!r}")
    return scalars, frames


def load_sequence(manifest_path: Union[str, Path]) -> SequenceManifest:
    """Parse and validate a sequence manifest.

    Frames must be in timestamp order and every referenced file must exist.
    Poses come either from a per-frame pose file or, when the manifest names
    a ``poses`` stream, by timestamp synchronization (images without a pose
    within the window are dropped, mirroring live capture).
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise LoadError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent
    scalars, frame_rows = _parse_manifest_lines(manifest_path.read_text())

    for key in ("fx", "fy", "cx", "cy", "width", "height"):
        if key not in scalars:
            raise LoadError(f"manifest missing intrinsics key '{key}'")
    intr = CameraIntrinsics(
        fx=float(scalars["fx"]),
        fy=float(scalars["fy"]),
        cx=float(scalars["cx"]),
        cy=float(scalars["cy"]),
        width=int(scalars["width"]),
        height=int(scalars["height"]),
    )
    depth_scale = float(scalars.get("depth_scale", 0.001))
    feature_dir = None
    if "feature_dir" in scalars:
        feature_dir = root / scalars["feature_dir"]

    pose_stream: Optional[List[Tuple[float, Pose]]] = None
    if "poses" in scalars:
        pose_path = root / scalars["poses"]
        if not pose_path.is_file():
            raise LoadError(f"pose stream not found: {pose_path}")
        pose_stream = []
        rows = np.loadtxt(pose_path, dtype=np.float64, ndmin=2)
        if rows.shape[1] != 13:
            raise LoadError(f"{pose_path}: each line must be timestamp + 12 pose values")
        for row in rows:
            m = row[1:].reshape(3, 4)
            pose_stream.append((float(row[0]), Pose(m[:, :3], m[:, 3], float(row[0]))))

    entries: List[FrameEntry] = []
    stamps: List[float] = []
    pending: List[Tuple[int, float, Path, Path, Optional[str]]] = []
    for row in frame_rows:
        frame_id = int(row[0])
        timestamp = float(row[1])
        rgb_path = root / row[2]
        depth_path = root / row[3]
        pose_rel = row[4] if len(row) == 5 else None
        if not rgb_path.is_file():
            raise LoadError(f"frame {frame_id}: color image missing: {rgb_path}")
        if not depth_path.is_file():
            raise LoadError(f"frame {frame_id}: depth image missing: {depth_path}")
        pending.append((frame_id, timestamp, rgb_path, depth_path, pose_rel))
        stamps.append(timestamp)
    if any(b < a for a, b in zip(stamps, stamps[1:])):
        raise LoadError("manifest frames are not in timestamp order")

    if pose_stream is None:
        for frame_id, timestamp, rgb_path, depth_path, pose_rel in pending:
            if pose_rel is None:
                raise LoadError(f"frame {frame_id}: no pose file and no pose stream")
            pose_path = root / pose_rel
            if not pose_path.is_file():
                raise LoadError(f"frame {frame_id}: pose file missing: {pose_path}")
            pose = load_pose_file(pose_path, timestamp)
            entries.append(FrameEntry(frame_id, timestamp, rgb_path, depth_path, pose))
    else:
        window = float(scalars.get("sync_window", DEFAULT_SYNC_WINDOW))
        pairs = synchronize(stamps, [t for t, _ in pose_stream], window)
        for i, j in pairs:
            frame_id, timestamp, rgb_path, depth_path, _ = pending[i]
            entries.append(
                FrameEntry(frame_id, timestamp, rgb_path, depth_path, pose_stream[j][1])
            )

    return SequenceManifest(intr, depth_scale, entries, feature_dir, root)


# ---------------------------------------------------------------------------
# Region feature wire format (.ofrf)

_OFRF_HEADER = struct.Struct("<IQIIII")  # version, frame_id, n, d, H', W'


def write_region_features(target: Union[str, Path, IO[bytes]], features: RegionFeatureSet):
    n = features.n
    d = features.embeddings.shape[1] if n else 0
    hp, wp = features.map_shape
    payload = [
        OFRF_MAGIC,
        _OFRF_HEADER.pack(WIRE_VERSION, features.frame_id, n, d, hp, wp),
        np.ascontiguousarray(features.embeddings, dtype="<f4").tobytes(),
        np.ascontiguousarray(features.maps, dtype="<f4").tobytes(),
    ]
    data = b"".join(payload)
    if hasattr(target, "write"):
        target.write(data)
    else:
        Path(target).write_bytes(data)


def _read_exact(fp: IO[bytes], count: int, what: str) -> bytes:
    data = fp.read(count)
    if len(data) != count:
        raise LoadError(f"truncated feature message while reading {what}")
    return data


def read_region_features_stream(fp: IO[bytes]) -> Optional[RegionFeatureSet]:
    """Read one ``.ofrf`` message from a byte stream; None at end of stream."""
    magic = fp.read(4)
    if len(magic) == 0:
        return None
    if magic != OFRF_MAGIC:
        raise LoadError(f"bad feature magic {magic!r}")
    version, frame_id, n, d, hp, wp = _OFRF_HEADER.unpack(
        _read_exact(fp, _OFRF_HEADER.size, "header")
    )
    if version != WIRE_VERSION:
        raise LoadError(f"unsupported feature format version {version}")
    emb = np.frombuffer(_read_exact(fp, n * d * 4, "embeddings"), dtype="<f4")
    maps = np.frombuffer(_read_exact(fp, n * hp * wp * 4, "confidence maps"), dtype="<f4")
    return RegionFeatureSet(
        maps=maps.reshape(n, hp, wp).copy(),
        embeddings=emb.reshape(n, d).copy(),
        frame_id=frame_id,
    )


def read_region_features(source: Union[str, Path, IO[bytes]]) -> RegionFeatureSet:
    if hasattr(source, "read"):
        out = read_region_features_stream(source)
    else:
        with open(source, "rb") as fp:
            out = read_region_features_stream(fp)
    if out is None:
        raise LoadError("empty feature file")
    return out


class FileFeatureSource:
    """Per-frame features from a directory of ``<frame_id>.ofrf`` files."""

    def __init__(self, directory: Union[str, Path]):
        self.directory = Path(directory)

    def get(self, frame_id: int) -> Optional[RegionFeatureSet]:
        path = self.directory / f"{frame_id}.ofrf"
        if not path.is_file():
            return None
        return read_region_features(path)


class StreamFeatureSource:
    """Features from a byte stream of concatenated ``.ofrf`` messages.

    Messages must arrive in frame order; requests for frames the stream has
    already passed return None.
    """

    def __init__(self, fp: IO[bytes]):
        self.fp = fp
        self._ahead: Optional[RegionFeatureSet] = None
        self._done = False

    def get(self, frame_id: int) -> Optional[RegionFeatureSet]:
        while True:
            if self._ahead is not None:
                if self._ahead.frame_id == frame_id:
                    out, self._ahead = self._ahead, None
                    return out
                if self._ahead.frame_id > frame_id:
                    return None
                self._ahead = None
            if self._done:
                return None
            msg = read_region_features_stream(self.fp)
            if msg is None:
                self._done = True
                return None
            self._ahead = msg


# ---------------------------------------------------------------------------
# Query vector file format (.ofqv)

_OFQV_HEADER = struct.Struct("<III")  # version, count, d


def write_query_vectors(target: Union[str, Path, IO[bytes]], vectors) -> None:
    if len(vectors) and isinstance(vectors[0], QueryVector):
        mat = np.stack([v.values for v in vectors])
    else:
        mat = np.asarray(vectors, dtype=np.float32)
        mat = mat.reshape(len(mat), -1) if mat.size else mat.reshape(0, 0)
    count = len(mat)
    d = mat.shape[1] if count else 0
    data = b"".join(
        [
            OFQV_MAGIC,
            _OFQV_HEADER.pack(WIRE_VERSION, count, d),
            np.ascontiguousarray(mat, dtype="<f4").tobytes(),
        ]
    )
    if hasattr(target, "write"):
        target.write(data)
    else:
        Path(target).write_bytes(data)


def read_query_vectors(source: Union[str, Path, IO[bytes]]) -> List[QueryVector]:
    if hasattr(source, "read"):
        data = source.read()
    else:
        data = Path(source).read_bytes()
    if len(data) < 4 + _OFQV_HEADER.size or data[:4] != OFQV_MAGIC:
        raise LoadError("not a query vector file")
    version, count, d = _OFQV_HEADER.unpack(data[4 : 4 + _OFQV_HEADER.size])
    if version != WIRE_VERSION:
        raise LoadError(f"unsupported query format version {version}")
    body = data[4 + _OFQV_HEADER.size :]
    if len(body) != count * d * 4:
        raise LoadError("query file payload size mismatch")
    mat = np.frombuffer(body, dtype="<f4").reshape(count, d)
    return [QueryVector(row.copy()) for row in mat]
