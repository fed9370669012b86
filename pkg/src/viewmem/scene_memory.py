"""Posed RGB-D keyframe memory: ingestion, pose-threshold selection, storage.

A scene is stored as a JSON-lines manifest next to 8-bit RGB PNGs and
16-bit depth PNGs (value * depth_scale = meters, 0 = invalid). Poses are
world-from-camera. Memories are immutable after construction.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

ROTATION_TOL = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")

    def scaled(self, factor: int) -> "CameraIntrinsics":
        return CameraIntrinsics(
            fx=self.fx / factor,
            fy=self.fy / factor,
            cx=self.cx / factor,
            cy=self.cy / factor,
            width=math.ceil(self.width / factor),
            height=math.ceil(self.height / factor),
        )


@dataclass(frozen=True)
class Pose:
    """World-from-camera rigid transform."""

    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if np.abs(r.T @ r - np.eye(3)).max() > ROTATION_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ROTATION_TOL:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


@dataclass
class DepthMap:
    """Metric depth grid; 0 marks invalid pixels.

    `quantization` is the meters-per-unit of the stored integer format and
    bounds the depth error of any store/load round-trip.
    """

    values: np.ndarray  # (height, width) float32 meters
    quantization: float = 0.001

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ValueError("depth must be a 2D grid")
        if not np.isfinite(self.values).all() or (self.values < 0).any():
            raise ValueError("depth values must be finite and >= 0")
        if self.quantization <= 0:
            raise ValueError("quantization must be positive")


@dataclass(frozen=True)
class KeyframeSelectionConfig:
    theta_rot: float = 15.0  # degrees
    theta_trans: float = 0.25  # meters

    def __post_init__(self):
        if self.theta_rot <= 0 or self.theta_trans <= 0:
            raise ValueError("selection thresholds must be positive")


@dataclass
class Keyframe:
    id: int
    rgb_ref: str | None
    depth: DepthMap
    pose: Pose
    intrinsics: CameraIntrinsics
    depth_ref: str | None = None
    rgb: np.ndarray | None = None  # optional in-memory pixels

    def __post_init__(self):
        h, w = self.depth.values.shape
        if (w, h) != (self.intrinsics.width, self.intrinsics.height):
            raise ValueError(
                f"frame {self.id}: depth {w}x{h} does not match intrinsics "
                f"{self.intrinsics.width}x{self.intrinsics.height}"
            )

    def load_rgb(self) -> np.ndarray:
        if self.rgb is not None:
            return self.rgb
        if self.rgb_ref is None:
            raise FileNotFoundError(f"frame {self.id}: no RGB reference")
        return np.asarray(Image.open(self.rgb_ref).convert("RGB"))


class SceneMemory:
    """Immutable ordered collection of keyframes with unique increasing ids."""

    def __init__(self, keyframes: Sequence[Keyframe], scene_id: str = "scene"):
        frames = list(keyframes)
        if not frames:
            raise ValueError("scene memory requires at least one keyframe")
        ids = [kf.id for kf in frames]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ValueError("keyframe ids must be strictly increasing")
        self.keyframes: tuple[Keyframe, ...] = tuple(frames)
        self.scene_id = scene_id
        self._by_id = {kf.id: kf for kf in frames}

    def __len__(self) -> int:
        return len(self.keyframes)

    def __iter__(self):
        return iter(self.keyframes)

    def frame(self, frame_id: int) -> Keyframe:
        try:
            return self._by_id[frame_id]
        except KeyError:
            raise KeyError(f"no keyframe with id {frame_id}") from None

    @property
    def ids(self) -> list[int]:
        return [kf.id for kf in self.keyframes]


def pose_delta(a: Pose, b: Pose) -> tuple[float, float]:
    """Relative (rotation degrees, translation meters) between two poses."""
    trace = float(np.trace(a.rotation.T @ b.rotation))
    cos_angle = min(1.0, max(-1.0, (trace - 1.0) / 2.0))
    rot_deg = math.degrees(math.acos(cos_angle))
    trans_m = float(np.linalg.norm(a.translation - b.translation))
    return rot_deg, trans_m


def _pose_of(item) -> Pose:
    return item if isinstance(item, Pose) else item.pose


# guard below the sensor noise floor; absorbs arccos/norm rounding so a
# delta equal to the threshold (e.g. 3 x 5 deg vs 15 deg) never trips
# the strict comparison
_THRESHOLD_GUARD = 1e-9


def select_keyframes(trajectory: Sequence, cfg: KeyframeSelectionConfig) -> list[int]:
    """Greedy pose-threshold selection over a trajectory of posed frames.

    The first frame is always kept; a later frame is kept iff its rotation
    OR translation relative to the last kept frame strictly exceeds the
    configured threshold.
    """
    if len(trajectory) == 0:
        raise ValueError("empty trajectory")
    selected = [0]
    last = _pose_of(trajectory[0])
    for i in range(1, len(trajectory)):
        pose = _pose_of(trajectory[i])
        rot_deg, trans_m = pose_delta(last, pose)
        if rot_deg > cfg.theta_rot + _THRESHOLD_GUARD or trans_m > cfg.theta_trans + _THRESHOLD_GUARD:
            selected.append(i)
            last = pose
    return selected


def downsample(kf: Keyframe, factor: int) -> Keyframe:
    """Resolution-reduce a keyframe by an integer factor.

    Depth uses nearest-neighbor sampling (averaging across depth
    discontinuities would create phantom surfaces); RGB, when present in
    memory, uses box averaging. Intrinsics are divided by the factor.
    """
    if factor < 1:
        raise ValueError("downsample factor must be >= 1")
    if factor == 1:
        return replace(kf)
    depth = DepthMap(kf.depth.values[::factor, ::factor], kf.depth.quantization)
    rgb = None
    if kf.rgb is not None:
        rgb = np.asarray(Image.fromarray(kf.rgb).reduce(factor))
    return Keyframe(
        id=kf.id,
        rgb_ref=None,
        depth=depth,
        pose=kf.pose,
        intrinsics=kf.intrinsics.scaled(factor),
        depth_ref=None,
        rgb=rgb,
    )


def manifest_record(kf: Keyframe, rgb_rel: str, depth_rel: str, depth_scale: float) -> str:
    """Canonical one-line JSON manifest record for a keyframe.

    Pose entries are stored at 9 decimals (sub-nanometer, far inside the
    orthonormality tolerance); this keeps records compact and canonical.
    """
    rec = {
        "id": kf.id,
        "rgb": rgb_rel,
        "depth": depth_rel,
        "pose": [round(float(x), 9) for x in kf.pose.matrix().reshape(-1)],
        "fx": kf.intrinsics.fx,
        "fy": kf.intrinsics.fy,
        "cx": kf.intrinsics.cx,
        "cy": kf.intrinsics.cy,
        "width": kf.intrinsics.width,
        "height": kf.intrinsics.height,
        "depth_scale": depth_scale,
    }
    return json.dumps(rec, sort_keys=True)


def storage_stats(mem: SceneMemory) -> tuple[int, int]:
    """(frame count, exact bytes) over stored RGB + depth files + pose records."""
    total = 0
    for kf in mem.keyframes:
        for kind, ref in (("rgb", kf.rgb_ref), ("depth", kf.depth_ref)):
            if ref is None or not os.path.exists(ref):
                raise FileNotFoundError(f"frame {kf.id}: missing {kind} file {ref!r}")
            total += os.path.getsize(ref)
        rel_rgb = os.path.basename(kf.rgb_ref)
        rel_depth = os.path.basename(kf.depth_ref)
        total += len(
            manifest_record(kf, rel_rgb, rel_depth, kf.depth.quantization).encode()
        )
    return len(mem), total


def write_depth_png(path, depth: DepthMap, compress_level: int = 6) -> None:
    units = np.round(depth.values / depth.quantization)
    if units.max(initial=0) > 65535:
        raise ValueError("depth exceeds 16-bit range at this quantization")
    img = Image.fromarray(units.astype(np.uint16))
    img.save(path, format="PNG", compress_level=compress_level)


def read_depth_png(path, depth_scale: float) -> DepthMap:
    arr = np.asarray(Image.open(path), dtype=np.uint16)
    return DepthMap(arr.astype(np.float32) * depth_scale, quantization=depth_scale)


def write_rgb_png(path, rgb: np.ndarray, compress_level: int = 6) -> None:
    Image.fromarray(np.asarray(rgb, dtype=np.uint8)).save(
        path, format="PNG", compress_level=compress_level
    )


def write_manifest(
    mem: SceneMemory, manifest_path, depth_scale: float | None = None
) -> None:
    """Write the scene manifest; frame files must already exist on disk."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    lines = []
    for kf in mem.keyframes:
        if kf.rgb_ref is None or kf.depth_ref is None:
            raise ValueError(f"frame {kf.id} has no file references")
        scale = depth_scale if depth_scale is not None else kf.depth.quantization
        rgb_rel = os.path.relpath(kf.rgb_ref, base)
        depth_rel = os.path.relpath(kf.depth_ref, base)
        lines.append(manifest_record(kf, rgb_rel, depth_rel, scale))
    manifest_path.write_text("\n".join(lines) + "\n")


def load_manifest(manifest_path, scene_id: str | None = None) -> SceneMemory:
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    frames = []
    for line_no, line in enumerate(manifest_path.read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{manifest_path}:{line_no}: bad manifest line") from exc
        intr = CameraIntrinsics(
            fx=rec["fx"],
            fy=rec["fy"],
            cx=rec["cx"],
            cy=rec["cy"],
            width=rec["width"],
            height=rec["height"],
        )
        depth_path = str(base / rec["depth"])
        depth = read_depth_png(depth_path, rec["depth_scale"])
        frames.append(
            Keyframe(
                id=rec["id"],
                rgb_ref=str(base / rec["rgb"]),
                depth=depth,
                pose=Pose.from_matrix(rec["pose"]),
                intrinsics=intr,
                depth_ref=depth_path,
            )
        )
    return SceneMemory(frames, scene_id=scene_id or manifest_path.stem)


def downsample_memory(
    mem: SceneMemory, factor: int, out_dir, compress_level: int = 6
) -> SceneMemory:
    """Write a resolution-reduced copy of a memory (new PNGs + manifest)."""
    if factor < 1:
        raise ValueError("downsample factor must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames = []
    for kf in mem.keyframes:
        rgb = np.asarray(Image.open(kf.rgb_ref).convert("RGB"))
        if factor > 1:
            rgb = np.asarray(Image.fromarray(rgb).reduce(factor))
            depth = DepthMap(kf.depth.values[::factor, ::factor], kf.depth.quantization)
            intr = kf.intrinsics.scaled(factor)
        else:
            depth = kf.depth
            intr = kf.intrinsics
        rgb_path = out_dir / f"rgb_{kf.id:06d}.png"
        depth_path = out_dir / f"depth_{kf.id:06d}.png"
        write_rgb_png(rgb_path, rgb, compress_level)
        write_depth_png(depth_path, depth, compress_level)
        frames.append(
            Keyframe(
                id=kf.id,
                rgb_ref=str(rgb_path),
                depth=depth,
                pose=kf.pose,
                intrinsics=intr,
                depth_ref=str(depth_path),
            )
        )
    out = SceneMemory(frames, scene_id=mem.scene_id)
    write_manifest(out, out_dir / "manifest.jsonl")
    return out


def subset_memory(mem: SceneMemory, indices: Iterable[int]) -> SceneMemory:
    """Memory restricted to the given positional indices (keyframe selection)."""
    frames = [mem.keyframes[i] for i in indices]
    return SceneMemory(frames, scene_id=mem.scene_id)
