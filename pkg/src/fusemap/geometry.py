"""Pinhole camera model, rigid transforms, and the unproject/project pair.

Conventions used throughout the engine:

* Pixel coordinates are ``(u, v)`` = (column, row), with pixel centers at
  integer coordinates.
* A :class:`Pose` maps world points into the camera frame:
  ``x_cam = R @ x_world + t``.  Unprojection applies the exact inverse,
  ``x_world = R.T @ (x_cam - t)``, so projecting an unprojected pixel
  returns the original pixel and depth.
* Depths are meters; a stored depth of 0 encodes "invalid".
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# A 3D point is a plain float ndarray of shape (3,); world frame unless stated.
Point3 = np.ndarray

_ROTATION_TOL = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics. Focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.cx < self.width):
            raise ValueError(f"cx={self.cx} outside (0, {self.width})")
        if not (0 < self.cy < self.height):
            raise ValueError(f"cy={self.cy} outside (0, {self.height})")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]],
            dtype=np.float64,
        )

    @property
    def shape(self) -> tuple:
        """(height, width) of images this camera produces."""
        return (self.height, self.width)


def scale_intrinsics(k: CameraIntrinsics, factor: float) -> CameraIntrinsics:
    """Rescale intrinsics to a different image resolution.

    Focal lengths and principal point scale linearly; the image size is
    scaled and rounded down.  ``factor=0.25`` yields the quarter-resolution
    intrinsics used by the region feature maps.
    """
    if factor <= 0:
        raise ValueError(f"scale factor must be positive, got {factor}")
    width = int(k.width * factor)
    height = int(k.height * factor)
    if width < 1 or height < 1:
        raise ValueError(f"factor {factor} scales {k.width}x{k.height} below one pixel")
    return CameraIntrinsics(
        fx=k.fx * factor,
        fy=k.fy * factor,
        cx=k.cx * factor,
        cy=k.cy * factor,
        width=width,
        height=height,
    )


@dataclass
class Pose:
    """World-to-camera rigid transform: ``x_cam = rotation @ x_world + translation``."""

    rotation: np.ndarray
    translation: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.rotation.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {self.rotation.shape}")
        if not (np.isfinite(self.rotation).all() and np.isfinite(self.translation).all()):
            raise ValueError("pose entries must be finite")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > _ROTATION_TOL:
            raise ValueError(f"rotation not orthonormal (max |R^T R - I| = {err:.2e})")
        det = np.linalg.det(self.rotation)
        if abs(det - 1.0) > _ROTATION_TOL:
            raise ValueError(f"rotation determinant {det} != +1")

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation, self.timestamp)

    def compose(self, other: "Pose") -> "Pose":
        """Return the transform applying ``other`` first, then ``self``."""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
            self.timestamp,
        )

    @property
    def matrix(self) -> np.ndarray:
        """4x4 homogeneous world-to-camera matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @property
    def camera_center(self) -> np.ndarray:
        """Camera origin expressed in world coordinates."""
        return -self.rotation.T @ self.translation

    def transform(self, points: np.ndarray) -> np.ndarray:
        """World -> camera for an (N, 3) array (or a single point)."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        out = pts @ self.rotation.T + self.translation
        return out[0] if np.ndim(points) == 1 else out

    def inverse_transform(self, points: np.ndarray) -> np.ndarray:
        """Camera -> world for an (N, 3) array (or a single point)."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        out = (pts - self.translation) @ self.rotation
        return out[0] if np.ndim(points) == 1 else out


def identity_pose(timestamp: float = 0.0) -> Pose:
    return Pose(np.eye(3), np.zeros(3), timestamp)


@dataclass
class DepthImage:
    """Depth in meters, zero marking invalid pixels."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ValueError(f"depth must be HxW, got shape {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise ValueError("depth contains non-finite values")
        if (self.values < 0).any():
            raise ValueError("depth contains negative values")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def valid_mask(self) -> np.ndarray:
        return self.values > 0


def pixel_rays(k: CameraIntrinsics, pixels: np.ndarray) -> np.ndarray:
    """Camera-frame ray directions ``K^-1 [u, v, 1]`` with unit z component.

    A point at depth ``z`` along the ray through a pixel is ``z * ray``.
    """
    px = np.asarray(pixels, dtype=np.float64)
    rays = np.empty((len(px), 3))
    rays[:, 0] = (px[:, 0] - k.cx) / k.fx
    rays[:, 1] = (px[:, 1] - k.cy) / k.fy
    rays[:, 2] = 1.0
    return rays


def unproject_depth(depth: DepthImage, k: CameraIntrinsics, pose: Pose):
    """Lift every valid depth pixel into a world-frame point.

    Returns ``(pixels, points)``: an (N, 2) int array of (u, v) pixel
    coordinates and the matching (N, 3) world points.  Invalid (zero-depth)
    pixels are omitted.
    """
    if depth.values.shape != (k.height, k.width):
        raise ValueError(
            f"depth shape {depth.values.shape} does not match intrinsics "
            f"{(k.height, k.width)}"
        )
    vv, uu = np.nonzero(depth.valid_mask)
    pixels = np.stack([uu, vv], axis=1)
    d = depth.values[vv, uu].astype(np.float64)
    cam = pixel_rays(k, pixels) * d[:, None]
    points = pose.inverse_transform(cam)
    return pixels, np.atleast_2d(points)


def project_points(points: np.ndarray, k: CameraIntrinsics, pose: Pose):
    """Project world points through the camera.

    Returns ``(uv, depth, visible)`` where ``uv`` is (N, 2) continuous pixel
    coordinates, ``depth`` the camera-frame z, and ``visible`` the validity
    predicate ``depth > 0 and 0 <= u < width and 0 <= v < height``.
    """
    cam = np.atleast_2d(pose.transform(points))
    d = cam[:, 2]
    uv = np.empty((len(cam), 2))
    with np.errstate(divide="ignore", invalid="ignore"):
        uv[:, 0] = k.fx * cam[:, 0] / d + k.cx
        uv[:, 1] = k.fy * cam[:, 1] / d + k.cy
    visible = (
        (d > 0)
        & (uv[:, 0] >= 0)
        & (uv[:, 0] < k.width)
        & (uv[:, 1] >= 0)
        & (uv[:, 1] < k.height)
    )
    return uv, d, visible


def project_point(p: Point3, k: CameraIntrinsics, pose: Pose):
    """Single-point projection: ``(u, v, depth)`` or None when not visible."""
    uv, d, visible = project_points(np.asarray(p, dtype=np.float64), k, pose)
    if not visible[0]:
        return None
    return (float(uv[0, 0]), float(uv[0, 1]), float(d[0]))


def nearest_pixels(uv: np.ndarray, k: CameraIntrinsics):
    """Round continuous pixel coordinates to the nearest integer pixel.

    Uses floor(x + 0.5) so the convention is independent of numpy's
    round-half-to-even.  Returns ``(cols, rows, in_bounds)``.
    """
    cols = np.floor(uv[:, 0] + 0.5).astype(np.int64)
    rows = np.floor(uv[:, 1] + 0.5).astype(np.int64)
    ok = (cols >= 0) & (cols < k.width) & (rows >= 0) & (rows < k.height)
    return cols, rows, ok
