"""Shared constructed fixtures for the unit and acceptance suites."""

from __future__ import annotations

import math

import numpy as np

from viewmem.geometry import Mask
from viewmem.scene_memory import CameraIntrinsics, DepthMap
from viewmem.localization import GoalCandidate
from viewmem.nav_sim import AgentState, SceneObject, SyntheticScene, render_view
from viewmem.providers import ProviderError
from viewmem.scene_memory import Keyframe, SceneMemory
from viewmem.synthetic import intrinsics_for, open_room


class ScriptedSegProvider:
    """In-memory provider: (image_id, prompt) -> list of (mask, confidence)."""

    def __init__(self, table=None, fail_ids=()):
        self.table = table or {}
        self.fail_ids = set(fail_ids)
        self.calls = 0

    def add(self, frame_id, prompt, mask, confidence=0.9):
        self.table.setdefault((str(frame_id), prompt), []).append((mask, confidence))

    def segment(self, image_id, prompt):
        self.calls += 1
        if image_id in self.fail_ids:
            raise ProviderError("scripted failure")
        return [
            Mask(m, confidence=c) for m, c in self.table.get((image_id, prompt), [])
        ]


def blob(center, n=40, spread=0.05, seed=0):
    rng = np.random.default_rng(seed)
    return np.asarray(center, dtype=float) + rng.uniform(-spread, spread, size=(n, 3))


def goal_of(cloud, center=None) -> GoalCandidate:
    cloud = np.asarray(cloud, dtype=float)
    if center is None:
        center = (cloud.min(0) + cloud.max(0)) / 2
    return GoalCandidate(member_predictions=[], fused_cloud=cloud, center=center)


def box_world(n_cameras, radius=1.6, offset_deg=20.0, box_half=0.3):
    """A box in an open room observed from cameras on a ring.

    Each camera is rotated off the face normal so neighboring views share
    edge geometry (overlapping clouds). Returns (scene, memory, provider,
    object).
    """
    grid = open_room(20, 0.5)
    center = np.array([5.0, 0.7, 5.0])
    obj = SceneObject(
        "box",
        center - np.array([box_half, 0.45, box_half]),
        center + np.array([box_half, 0.45, box_half]),
    )
    scene = SyntheticScene(grid, 0.5, wall_height=1.8, objects=[obj], camera_height=0.8)
    intr = intrinsics_for(96, 72)
    frames, masks = [], {}
    for i in range(n_cameras):
        angle = i * (360.0 / max(n_cameras, 1)) + offset_deg
        x = center[0] + radius * math.sin(math.radians(angle))
        z = center[2] + radius * math.cos(math.radians(angle))
        heading = math.degrees(math.atan2(center[0] - x, center[2] - z))
        agent = AgentState(x=x, z=z, heading=heading, y=0.8)
        depth, hits = render_view(scene, agent, intr)
        frames.append(
            Keyframe(id=i, rgb_ref=None, depth=depth, pose=agent.pose(), intrinsics=intr)
        )
        masks[i] = hits == 0
    memory = SceneMemory(frames)
    provider = ScriptedSegProvider()
    for fid, mask in masks.items():
        provider.add(fid, "box", mask)
    return scene, memory, provider, obj


def two_room_scene() -> SyntheticScene:
    """Left room reachable, right pocket sealed; same-label object in each."""
    grid = open_room(16, 0.5)
    grid[:, 8] = True  # full dividing wall, no door
    objects = [
        SceneObject("cup", np.array([6.0, 0.0, 4.0]), np.array([6.3, 1.2, 4.3])),
        SceneObject("cup", np.array([2.0, 0.0, 2.0]), np.array([2.3, 1.2, 2.3])),
    ]
    return SyntheticScene(grid, 0.5, wall_height=1.8, objects=objects,
                          camera_height=0.8, goal_labels=["cup"])


def occluded_goal_scene():
    """Thin wall hides 97 of 100 goal points; 3 sit on the wall's front face."""
    grid = open_room(16, 0.5)
    grid[11, 6:10] = True
    obj = SceneObject("t", np.array([3.7, 0.0, 6.1]), np.array([4.3, 1.2, 6.7]))
    scene = SyntheticScene(grid, 0.5, wall_height=1.8, objects=[obj],
                           camera_height=0.8, goal_labels=["t"])
    visible = np.array([[3.9, 0.8, 5.5], [4.0, 0.8, 5.5], [4.1, 0.8, 5.5]])
    hidden = np.tile([4.0, 0.8, 6.15], (97, 1))
    cloud = np.vstack([visible, hidden])
    start = AgentState(x=4.0, z=3.0, heading=0.0)
    return scene, start, goal_of(cloud)


def rotz(deg: float) -> np.ndarray:
    th = np.radians(deg)
    c, s = np.cos(th), np.sin(th)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def simple_intrinsics(width=64, height=48, fx=200.0) -> CameraIntrinsics:
    return CameraIntrinsics(
        fx=fx, fy=fx, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
        width=width, height=height,
    )


def flat_depth(width=64, height=48, z=2.0, quant=0.001) -> DepthMap:
    return DepthMap(np.full((height, width), z, dtype=np.float32), quantization=quant)
