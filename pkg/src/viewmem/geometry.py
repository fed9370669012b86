"""Pinhole projection, point-cloud measures, frustum and depth-buffer visibility.

Camera convention used everywhere in this package: +z forward, +x right,
+y down, pixel centers at integer coordinates (no half-pixel offset).
Poses are world-from-camera. Point clouds are (N, 3) float arrays in world
coordinates, meters; the empty cloud is shape (0, 3).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .scene_memory import CameraIntrinsics, DepthMap, Pose

FRUSTUM_MAX_RANGE_M = 20.0


@dataclass
class Mask:
    """Boolean pixel grid paired with a segmentation confidence."""

    values: np.ndarray  # (height, width) bool
    confidence: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=bool)
        if self.values.ndim != 2:
            raise ValueError("mask must be a 2D grid")

    @property
    def empty(self) -> bool:
        return not bool(self.values.any())


@dataclass(frozen=True)
class DepthRange:
    """Valid metric depth interval for backprojection."""

    min_m: float = 0.1
    max_m: float = 20.0

    def __post_init__(self):
        if not (0.0 < self.min_m < self.max_m):
            raise ValueError(f"invalid depth range ({self.min_m}, {self.max_m})")


@dataclass(frozen=True)
class BoundingBox:
    min_corner: np.ndarray
    max_corner: np.ndarray
    center: np.ndarray = field(init=False)

    def __post_init__(self):
        lo = np.asarray(self.min_corner, dtype=np.float64)
        hi = np.asarray(self.max_corner, dtype=np.float64)
        if np.any(lo > hi):
            raise ValueError("bounding box min exceeds max")
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)
        object.__setattr__(self, "center", (lo + hi) / 2.0)

    @classmethod
    def of_cloud(cls, points: np.ndarray) -> "BoundingBox":
        points = as_cloud(points)
        if len(points) == 0:
            raise ValueError("bounding box of empty cloud")
        return cls(points.min(axis=0), points.max(axis=0))


def as_cloud(points) -> np.ndarray:
    """Coerce to an (N, 3) float64 world-point array."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("non-finite point coordinates")
    return arr


def backproject(
    depth: DepthMap,
    mask: Mask,
    intrinsics: CameraIntrinsics,
    pose: Pose,
    depth_range: DepthRange = DepthRange(),
) -> np.ndarray:
    """Lift masked pixels with valid depth to world points.

    Pixels with depth 0 (invalid) or outside [min_m, max_m] are skipped.
    """
    values = depth.values
    if values.shape != mask.values.shape:
        raise ValueError(
            f"depth {values.shape} and mask {mask.values.shape} dimensions differ"
        )
    if (values.shape[0], values.shape[1]) != (intrinsics.height, intrinsics.width):
        raise ValueError("depth dimensions do not match intrinsics")

    v_idx, u_idx = np.nonzero(mask.values)
    z = values[v_idx, u_idx]
    keep = (z >= depth_range.min_m) & (z <= depth_range.max_m)
    if not keep.any():
        return np.empty((0, 3), dtype=np.float64)
    u = u_idx[keep].astype(np.float64)
    v = v_idx[keep].astype(np.float64)
    z = z[keep].astype(np.float64)

    x = (u - intrinsics.cx) * z / intrinsics.fx
    y = (v - intrinsics.cy) * z / intrinsics.fy
    pts_cam = np.stack([x, y, z], axis=1)
    return pts_cam @ pose.rotation.T + pose.translation


def project(
    points: np.ndarray, intrinsics: CameraIntrinsics, pose: Pose
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Project world points into the camera; returns (u, v, z, in_bounds).

    in_bounds requires z > 0 and the rounded pixel inside the image.
    u, v are finite only where z > 0.
    """
    points = as_cloud(points)
    pts_cam = (points - pose.translation) @ pose.rotation
    x, y, z = pts_cam[:, 0], pts_cam[:, 1], pts_cam[:, 2]
    u = np.full(len(points), np.nan)
    v = np.full(len(points), np.nan)
    front = z > 0
    u[front] = intrinsics.fx * x[front] / z[front] + intrinsics.cx
    v[front] = intrinsics.fy * y[front] / z[front] + intrinsics.cy
    in_bounds = front.copy()
    if front.any():
        ur = np.round(u[front])
        vr = np.round(v[front])
        in_bounds[front] = (
            (ur >= 0)
            & (ur < intrinsics.width)
            & (vr >= 0)
            & (vr < intrinsics.height)
        )
    return u, v, z, in_bounds


def median_masked_depth(depth: DepthMap, mask: Mask) -> float:
    """Median depth over masked pixels with z > 0; +inf when none exist.

    The +inf sentinel makes empty/invalid views fail any far-view gate.
    """
    z = depth.values[mask.values].astype(np.float64)
    z = z[z > 0]
    if z.size == 0:
        return float("inf")
    return float(np.median(z))


def _matched_fraction(small: np.ndarray, other: np.ndarray, radius: float) -> float:
    dist, _ = cKDTree(other).query(small, k=1, distance_upper_bound=radius * (1 + 1e-12))
    return int(np.count_nonzero(dist <= radius)) / len(small)


def cloud_overlap(a: np.ndarray, b: np.ndarray, radius: float) -> float:
    """Fraction of the smaller cloud's points with a neighbor in the other
    cloud within `radius`. Either cloud empty -> 0.

    Equal-sized clouds take the larger of the two directed fractions so
    the result is symmetric in its arguments.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    a = as_cloud(a)
    b = as_cloud(b)
    if len(a) == 0 or len(b) == 0:
        return 0.0
    if len(a) == len(b):
        return max(_matched_fraction(a, b, radius), _matched_fraction(b, a, radius))
    small, other = (a, b) if len(a) < len(b) else (b, a)
    return _matched_fraction(small, other, radius)


def min_point_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Minimum pairwise Euclidean distance between two non-empty clouds."""
    a = as_cloud(a)
    b = as_cloud(b)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("min_point_distance requires non-empty clouds")
    small, other = (a, b) if len(a) <= len(b) else (b, a)
    dist, _ = cKDTree(other).query(small, k=1)
    return float(dist.min())


def frustum_contains(
    intrinsics: CameraIntrinsics,
    pose: Pose,
    cloud: np.ndarray,
    max_range: float = FRUSTUM_MAX_RANGE_M,
) -> bool:
    """True iff at least half the cloud projects in-bounds with z in (0, max_range]."""
    cloud = as_cloud(cloud)
    if len(cloud) == 0:
        raise ValueError("frustum test on empty cloud")
    _, _, z, in_bounds = project(cloud, intrinsics, pose)
    inside = in_bounds & (z <= max_range)
    return int(np.count_nonzero(inside)) * 2 >= len(cloud)


def visible_points(
    cloud: np.ndarray,
    depth: DepthMap,
    intrinsics: CameraIntrinsics,
    pose: Pose,
    margin: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-point depth-buffer visibility test.

    Returns (in_bounds, visible) boolean arrays over the cloud. A point is
    visible when its projection lands in-bounds on a pixel with rendered
    depth > 0 and its own depth is within `margin` behind that buffer value.
    """
    if margin < 0:
        raise ValueError("margin must be >= 0")
    cloud = as_cloud(cloud)
    if len(cloud) == 0:
        return np.zeros(0, dtype=bool), np.zeros(0, dtype=bool)
    u, v, z, in_bounds = project(cloud, intrinsics, pose)
    visible = np.zeros(len(cloud), dtype=bool)
    if in_bounds.any():
        ui = np.round(u[in_bounds]).astype(int)
        vi = np.round(v[in_bounds]).astype(int)
        buf = depth.values[vi, ui]
        visible[in_bounds] = (buf > 0) & (z[in_bounds] <= buf + margin)
    return in_bounds, visible


def visible_fraction(
    cloud: np.ndarray,
    depth: DepthMap,
    intrinsics: CameraIntrinsics,
    pose: Pose,
    margin: float,
) -> float:
    """Fraction of in-bounds projected points confirmed by the depth buffer.

    No in-bounds points -> 0.
    """
    in_bounds, visible = visible_points(cloud, depth, intrinsics, pose, margin)
    n_in = int(np.count_nonzero(in_bounds))
    if n_in == 0:
        return 0.0
    return int(np.count_nonzero(visible)) / n_in


def write_ply(path, points: np.ndarray) -> None:
    """Binary little-endian PLY export (xyz float32), for inspection only."""
    points = as_cloud(points).astype("<f4")
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(points)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(points.tobytes())


def read_ply(path) -> np.ndarray:
    """Read clouds written by write_ply (used by tests, not the pipeline)."""
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    count = 0
    for line in data[:end].decode("ascii").splitlines():
        if line.startswith("element vertex"):
            count = int(line.split()[-1])
    body = data[end : end + count * 12]
    pts = np.array(struct.unpack(f"<{count * 3}f", body), dtype=np.float64)
    return pts.reshape(count, 3)
