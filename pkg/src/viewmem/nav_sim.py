"""Deterministic navigation test-bed on 2.5D occupancy-grid worlds.

Replaces a learned point-goal policy with a Dijkstra-on-grid greedy
follower so that goal tracking, multi-goal fallback, and visibility-based
stopping can be exercised reproducibly. World frame: y up, agents move in
the xz plane; grid cell (row, col) spans z in [row*s, (row+1)*s) and
x in [col*s, (col+1)*s). Heading 0 looks along +z and TURN_LEFT increases
heading.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import yaml

from .geometry import visible_fraction, visible_points
from .localization import GoalCandidate
from .scene_memory import CameraIntrinsics, DepthMap, Pose

RENDER_MAX_RANGE_M = 20.0
SQRT2 = math.sqrt(2.0)


class Action(Enum):
    STOP = "STOP"
    FORWARD = "FORWARD"
    TURN_LEFT = "TURN_LEFT"
    TURN_RIGHT = "TURN_RIGHT"


class GoalUnreachable(RuntimeError):
    """No reachable free cell approaches the goal point."""


@dataclass(frozen=True)
class SceneObject:
    label: str
    min_corner: np.ndarray
    max_corner: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min_corner, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max_corner, dtype=np.float64).reshape(3)
        if np.any(lo > hi):
            raise ValueError(f"object {self.label}: min exceeds max")
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)

    @property
    def center(self) -> np.ndarray:
        return (self.min_corner + self.max_corner) / 2.0

    def xz_distance(self, x: float, z: float) -> float:
        dx = max(self.min_corner[0] - x, 0.0, x - self.max_corner[0])
        dz = max(self.min_corner[2] - z, 0.0, z - self.max_corner[2])
        return math.hypot(dx, dz)


@dataclass
class SimConfig:
    turn_deg: float = 30.0
    step_m: float = 0.25
    hfov_deg: float = 79.0
    max_steps: int = 500
    success_radius: float = 0.5
    stop_visibility_floor: float = 0.05
    stuck_window: int = 20
    stuck_displacement: float = 0.2
    visibility_margin: float = 0.1
    image_width: int = 64
    image_height: int = 48

    def __post_init__(self):
        if not 0 < self.hfov_deg < 180:
            raise ValueError("hfov must be in (0, 180)")
        for name in (
            "turn_deg",
            "step_m",
            "max_steps",
            "success_radius",
            "stop_visibility_floor",
            "stuck_window",
            "stuck_displacement",
            "image_width",
            "image_height",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def intrinsics(self) -> CameraIntrinsics:
        fx = (self.image_width / 2.0) / math.tan(math.radians(self.hfov_deg) / 2.0)
        return CameraIntrinsics(
            fx=fx,
            fy=fx,
            cx=(self.image_width - 1) / 2.0,
            cy=(self.image_height - 1) / 2.0,
            width=self.image_width,
            height=self.image_height,
        )


@dataclass
class AgentState:
    x: float
    z: float
    heading: float  # degrees in [0, 360)
    y: float = 0.8  # fixed camera height
    step_count: int = 0
    collision_count: int = 0

    def __post_init__(self):
        self.heading = self.heading % 360.0

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def pose(self) -> Pose:
        th = math.radians(self.heading)
        s, c = math.sin(th), math.cos(th)
        rot = np.array([[-c, 0.0, s], [0.0, -1.0, 0.0], [s, 0.0, c]])
        return Pose(rot, np.array([self.x, self.y, self.z]))


@dataclass(frozen=True)
class PolarGoal:
    rho: float  # meters
    theta: float  # degrees, bearing relative to heading (+ = left)

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError("rho must be >= 0")


@dataclass
class EpisodeResult:
    success: bool
    path_length: float
    geodesic_optimum: float | None
    steps: int
    termination: str  # stopped | max_steps | exhausted_candidates
    candidate_index: int | None = None
    collisions: int = 0
    stop_overrides: int = 0

    def to_dict(self) -> dict:
        return {
            "success": bool(self.success),
            "path_length": float(self.path_length),
            "geodesic_optimum": (
                None if self.geodesic_optimum is None else float(self.geodesic_optimum)
            ),
            "steps": int(self.steps),
            "termination": self.termination,
            "candidate_index": self.candidate_index,
            "collisions": int(self.collisions),
            "stop_overrides": int(self.stop_overrides),
        }


class SyntheticScene:
    """Occupancy grid plus labelled axis-aligned boxes."""

    def __init__(
        self,
        grid: np.ndarray,
        cell_size: float,
        wall_height: float = 1.5,
        objects: list[SceneObject] | None = None,
        camera_height: float = 0.8,
        starts: list[dict] | None = None,
        goal_labels: list[str] | None = None,
    ):
        self.grid = np.asarray(grid, dtype=bool)  # True = occupied
        if self.grid.ndim != 2 or self.grid.size == 0:
            raise ValueError("grid must be a non-empty 2D array")
        if cell_size <= 0:
            raise ValueError("cell_size must be positive")
        self.cell_size = float(cell_size)
        self.wall_height = float(wall_height)
        self.objects = list(objects or [])
        self.camera_height = float(camera_height)
        self.starts = list(starts or [])
        self.goal_labels = list(goal_labels or [])
        self._blocked = self._build_blocked()

    @property
    def rows(self) -> int:
        return self.grid.shape[0]

    @property
    def cols(self) -> int:
        return self.grid.shape[1]

    @property
    def bounds(self) -> tuple[float, float]:
        return self.cols * self.cell_size, self.rows * self.cell_size

    def _build_blocked(self) -> np.ndarray:
        blocked = self.grid.copy()
        s = self.cell_size
        for obj in self.objects:
            c0 = max(0, int(math.floor(obj.min_corner[0] / s)))
            c1 = min(self.cols - 1, int(math.floor(obj.max_corner[0] / s)))
            r0 = max(0, int(math.floor(obj.min_corner[2] / s)))
            r1 = min(self.rows - 1, int(math.floor(obj.max_corner[2] / s)))
            for r in range(r0, r1 + 1):
                for c in range(c0, c1 + 1):
                    cx, cz = self.cell_center(r, c)
                    if obj.xz_distance(cx, cz) == 0.0:
                        blocked[r, c] = True
        return blocked

    @property
    def blocked(self) -> np.ndarray:
        """Planning grid: walls plus object footprints."""
        return self._blocked

    def cell_of(self, x: float, z: float) -> tuple[int, int]:
        return int(math.floor(z / self.cell_size)), int(math.floor(x / self.cell_size))

    def cell_center(self, row: int, col: int) -> tuple[float, float]:
        return (col + 0.5) * self.cell_size, (row + 0.5) * self.cell_size

    def in_grid(self, row: int, col: int) -> bool:
        return 0 <= row < self.rows and 0 <= col < self.cols

    def is_free_point(self, x: float, z: float) -> bool:
        r, c = self.cell_of(x, z)
        if not self.in_grid(r, c):
            return False
        if self._blocked[r, c]:
            return False
        return True

    def segment_free(
        self, x0: float, z0: float, x1: float, z1: float, clearance: float = 0.0
    ) -> bool:
        """Straight segment stays in free space; optional lateral clearance
        keeps the line away from wall corners."""
        length = math.hypot(x1 - x0, z1 - z0)
        n = max(2, int(math.ceil(length / (self.cell_size / 4.0))) + 1)
        for i in range(n):
            t = i / (n - 1)
            x = x0 + t * (x1 - x0)
            z = z0 + t * (z1 - z0)
            if not self.is_free_point(x, z):
                return False
            if clearance > 0.0:
                for dx, dz in ((clearance, 0), (-clearance, 0), (0, clearance), (0, -clearance)):
                    if not self.is_free_point(x + dx, z + dz):
                        return False
        return True

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticScene":
        grid_rows = data["grid"]
        grid = np.array(
            [[ch == "#" for ch in row] for row in grid_rows], dtype=bool
        )
        objects = [
            SceneObject(o["label"], np.asarray(o["min"]), np.asarray(o["max"]))
            for o in data.get("objects", [])
        ]
        return cls(
            grid=grid,
            cell_size=data["cell_size"],
            wall_height=data.get("wall_height", 1.5),
            objects=objects,
            camera_height=data.get("camera_height", 0.8),
            starts=data.get("starts", []),
            goal_labels=data.get("goal_labels", []),
        )

    @classmethod
    def from_file(cls, path) -> "SyntheticScene":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {
            "cell_size": self.cell_size,
            "wall_height": self.wall_height,
            "camera_height": self.camera_height,
            "grid": ["".join("#" if v else "." for v in row) for row in self.grid],
            "objects": [
                {
                    "label": o.label,
                    "min": [float(v) for v in o.min_corner],
                    "max": [float(v) for v in o.max_corner],
                }
                for o in self.objects
            ],
            "starts": self.starts,
            "goal_labels": self.goal_labels,
        }

    def to_file(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))


def _wrap_deg(angle: float) -> float:
    """Wrap to (-180, 180]."""
    wrapped = (angle + 180.0) % 360.0 - 180.0
    return 180.0 if wrapped == -180.0 else wrapped


def render_view(
    scene: SyntheticScene, agent: AgentState, intr: CameraIntrinsics
) -> tuple[DepthMap, np.ndarray]:
    """Raycast depth plus per-pixel hit attribution.

    Hit ids: -3 none (beyond range), -2 wall, -1 floor, >= 0 object index.
    Depth is the camera-frame z distance; pixels beyond range are 0.
    """
    r0, c0 = scene.cell_of(agent.x, agent.z)
    if not scene.in_grid(r0, c0) or scene.grid[r0, c0]:
        raise ValueError("agent is inside an occupied cell")

    w, h = intr.width, intr.height
    th = math.radians(agent.heading)
    sin_t, cos_t = math.sin(th), math.cos(th)
    vs = np.arange(h, dtype=np.float64)
    dir_y = -(vs - intr.cy) / intr.fy  # world vertical rate per unit t
    cam_y = agent.y

    depth = np.zeros((h, w), dtype=np.float64)
    hits = np.full((h, w), -3, dtype=np.int64)

    # precompute object slab bounds in x/z once
    obj_bounds = [
        (o.min_corner[0], o.max_corner[0], o.min_corner[1], o.max_corner[1],
         o.min_corner[2], o.max_corner[2])
        for o in scene.objects
    ]

    for u in range(w):
        dx_cam = (u - intr.cx) / intr.fx
        wx = -dx_cam * cos_t + sin_t
        wz = dx_cam * sin_t + cos_t

        wall_ts = _wall_crossings(scene, agent.x, agent.z, wx, wz, RENDER_MAX_RANGE_M)

        best_t = np.full(h, np.inf)
        best_id = np.full(h, -3, dtype=np.int64)

        # floor (y = 0)
        desc = dir_y < 0
        t_floor = np.full(h, np.inf)
        t_floor[desc] = cam_y / -dir_y[desc]
        closer = t_floor < best_t
        best_t[closer] = t_floor[closer]
        best_id[closer] = -1

        # walls: first crossing whose surface band contains the ray height
        unresolved = np.ones(h, dtype=bool)
        for t_wall in wall_ts:
            if not unresolved.any():
                break
            y_at = cam_y + t_wall * dir_y
            hit = unresolved & (y_at >= 0.0) & (y_at <= scene.wall_height) & (t_wall < best_t)
            best_t[hit] = t_wall
            best_id[hit] = -2
            unresolved &= ~hit

        # object boxes via slab intersection (x/z slabs constant per column)
        for oi, (x0, x1, y0, y1, z0, z1) in enumerate(obj_bounds):
            t_lo, t_hi = 0.0, np.inf
            ok = True
            for lo, hi, o, d in ((x0, x1, agent.x, wx), (z0, z1, agent.z, wz)):
                if abs(d) < 1e-12:
                    if not lo <= o <= hi:
                        ok = False
                        break
                else:
                    ta, tb = (lo - o) / d, (hi - o) / d
                    if ta > tb:
                        ta, tb = tb, ta
                    t_lo, t_hi = max(t_lo, ta), min(t_hi, tb)
            if not ok or t_lo > t_hi:
                continue
            with np.errstate(divide="ignore", invalid="ignore"):
                ty_a = (y0 - cam_y) / dir_y
                ty_b = (y1 - cam_y) / dir_y
            ty_lo = np.where(dir_y != 0, np.minimum(ty_a, ty_b), 0.0)
            ty_hi = np.where(dir_y != 0, np.maximum(ty_a, ty_b), np.inf)
            level = dir_y == 0
            if level.any() and not y0 <= cam_y <= y1:
                ty_lo = ty_lo.copy()
                ty_hi = ty_hi.copy()
                ty_lo[level] = np.inf
                ty_hi[level] = -np.inf
            enter = np.maximum(t_lo, ty_lo)
            exit_ = np.minimum(t_hi, ty_hi)
            hit = (enter <= exit_) & (enter > 1e-9) & (enter < best_t)
            best_t[hit] = enter[hit]
            best_id[hit] = oi

        in_range = np.isfinite(best_t) & (best_t <= RENDER_MAX_RANGE_M)
        depth[in_range, u] = best_t[in_range]
        hits[in_range, u] = best_id[in_range]

    return DepthMap(depth.astype(np.float32), quantization=0.001), hits


def _wall_crossings(
    scene: SyntheticScene, x: float, z: float, wx: float, wz: float, max_s: float
) -> list[float]:
    """Horizontal distances (per unit t, where t is camera depth) at which the
    2D ray enters occupied cells, DDA over the grid, ascending."""
    s = scene.cell_size
    r, c = scene.cell_of(x, z)
    norm = math.hypot(wx, wz)
    if norm < 1e-12:
        return []
    ux, uz = wx / norm, wz / norm
    step_c = 1 if ux > 0 else -1
    step_r = 1 if uz > 0 else -1
    t_max_x = math.inf if ux == 0 else (
        ((c + (step_c > 0)) * s - x) / ux
    )
    t_max_z = math.inf if uz == 0 else (
        ((r + (step_r > 0)) * s - z) / uz
    )
    t_dx = math.inf if ux == 0 else abs(s / ux)
    t_dz = math.inf if uz == 0 else abs(s / uz)
    crossings = []
    dist = 0.0
    max_horizontal = max_s * norm  # t <= max_s  =>  horizontal distance <= max_s * |h|
    while dist <= max_horizontal:
        if t_max_x < t_max_z:
            dist = t_max_x
            t_max_x += t_dx
            c += step_c
        else:
            dist = t_max_z
            t_max_z += t_dz
            r += step_r
        if not scene.in_grid(r, c):
            break
        if scene.grid[r, c]:
            crossings.append(dist / norm)  # convert horizontal distance to t
    return crossings


def render_depth(scene: SyntheticScene, agent: AgentState, intr: CameraIntrinsics) -> DepthMap:
    depth, _ = render_view(scene, agent, intr)
    return depth


_NEIGHBORS = [
    (-1, 0, 1.0), (1, 0, 1.0), (0, -1, 1.0), (0, 1, 1.0),
    (-1, -1, SQRT2), (-1, 1, SQRT2), (1, -1, SQRT2), (1, 1, SQRT2),
]


def dijkstra_field(
    blocked: np.ndarray, cell_size: float, sources: list[tuple[int, int, float]]
) -> np.ndarray:
    """Grid distances (meters) from seeded sources (row, col, seed_cost);
    8-connected, no corner cutting, inf where unreachable."""
    rows, cols = blocked.shape
    dist = np.full((rows, cols), np.inf)
    heap: list[tuple[float, int, int]] = []
    for r, c, seed in sources:
        if 0 <= r < rows and 0 <= c < cols and not blocked[r, c] and seed < dist[r, c]:
            dist[r, c] = seed
            heapq.heappush(heap, (seed, r, c))
    while heap:
        d, r, c = heapq.heappop(heap)
        if d > dist[r, c]:
            continue
        for dr, dc, cost in _NEIGHBORS:
            nr, nc = r + dr, c + dc
            if not (0 <= nr < rows and 0 <= nc < cols) or blocked[nr, nc]:
                continue
            if dr != 0 and dc != 0 and (blocked[r + dr, c] or blocked[r, c + dc]):
                continue  # no cutting corners
            nd = d + cost * cell_size
            if nd < dist[nr, nc]:
                dist[nr, nc] = nd
                heapq.heappush(heap, (nd, nr, nc))
    return dist


class _GoalField:
    """Cached Dijkstra field toward the current goal cell."""

    def __init__(self, scene: SyntheticScene, cfg: SimConfig):
        self.scene = scene
        self.cfg = cfg
        self.goal_cell: tuple[int, int] | None = None
        self.field: np.ndarray | None = None

    def toward(self, goal_xz: tuple[float, float]) -> np.ndarray:
        cell = self.scene.cell_of(*goal_xz)
        if cell != self.goal_cell or self.field is None:
            sources = self._sources_near(goal_xz)
            self.field = dijkstra_field(self.scene.blocked, self.scene.cell_size, sources)
            self.goal_cell = cell
        return self.field

    def _sources_near(self, goal_xz: tuple[float, float]) -> list[tuple[int, int, float]]:
        gx, gz = goal_xz
        scene = self.scene
        reach = max(self.cfg.success_radius, SQRT2 * scene.cell_size) + 1e-9
        sources = []
        r_lo, c_lo = scene.cell_of(gx - reach, gz - reach)
        r_hi, c_hi = scene.cell_of(gx + reach, gz + reach)
        for r in range(max(0, r_lo), min(scene.rows, r_hi + 1)):
            for c in range(max(0, c_lo), min(scene.cols, c_hi + 1)):
                if scene.blocked[r, c]:
                    continue
                cx, cz = scene.cell_center(r, c)
                d = math.hypot(cx - gx, cz - gz)
                if d <= reach:
                    sources.append((r, c, d))
        return sources


def dynamic_goal(
    cloud: np.ndarray,
    agent: AgentState,
    depth: DepthMap,
    intr: CameraIntrinsics,
    margin: float,
) -> tuple[PolarGoal, np.ndarray]:
    """Closest depth-confirmed cloud point as a relative polar goal.

    Falls back to the planar-nearest cloud point when nothing is visible.
    Returns the goal and the chosen world point.
    """
    cloud = np.asarray(cloud, dtype=np.float64)
    if len(cloud) == 0:
        raise ValueError("dynamic goal requires a non-empty cloud")
    _, visible = visible_points(cloud, depth, intr, agent.pose(), margin)
    planar = np.hypot(cloud[:, 0] - agent.x, cloud[:, 2] - agent.z)
    pool = np.nonzero(visible)[0]
    if len(pool) == 0:
        pool = np.arange(len(cloud))
    chosen = pool[int(np.argmin(planar[pool]))]
    point = cloud[chosen]
    rho = float(planar[chosen])
    world_bearing = math.degrees(math.atan2(point[0] - agent.x, point[2] - agent.z))
    theta = _wrap_deg(world_bearing - agent.heading)
    return PolarGoal(rho=rho, theta=theta), point


def _descent_path(scene: SyntheticScene, field: np.ndarray, start: tuple[int, int],
                  limit: int = 24) -> list[tuple[int, int]]:
    """Cells along the steepest-descent shortest path, start excluded."""
    path = []
    r, c = start
    for _ in range(limit):
        best = None
        for dr, dc, cost in _NEIGHBORS:
            nr, nc = r + dr, c + dc
            if not scene.in_grid(nr, nc) or scene.blocked[nr, nc]:
                continue
            if dr != 0 and dc != 0 and (scene.blocked[r + dr, c] or scene.blocked[r, c + dc]):
                continue
            if not np.isfinite(field[nr, nc]):
                continue
            total = field[nr, nc] + cost * scene.cell_size
            if best is None or total < best[0]:
                best = (total, nr, nc)
        if best is None or field[best[1], best[2]] + 1e-9 >= field[r, c]:
            break
        r, c = best[1], best[2]
        path.append((r, c))
    return path


def _lookahead_waypoint(scene, field, agent, goal_xz):
    """Farthest line-of-sight point along the descent path; the goal itself
    when there is a clear line to it. Sight lines carry lateral clearance
    so waypoints do not hug wall corners."""
    gx, gz = goal_xz
    clearance = 0.3 * scene.cell_size
    if scene.segment_free(agent.x, agent.z, gx, gz, clearance):
        return (gx, gz)
    path = _descent_path(scene, field, scene.cell_of(agent.x, agent.z))
    waypoint = None
    for r, c in path:
        cx, cz = scene.cell_center(r, c)
        if scene.segment_free(agent.x, agent.z, cx, cz, clearance):
            waypoint = (cx, cz)
        else:
            break
    if waypoint is None:
        if path:
            return scene.cell_center(*path[0])
        return (gx, gz)  # basin bottom: head straight for the goal point
    return waypoint


def plan_step(
    scene: SyntheticScene,
    agent: AgentState,
    goal_point: np.ndarray,
    cfg: SimConfig,
    goal_field: _GoalField | None = None,
) -> Action:
    """One action of the greedy shortest-path follower.

    STOP within success_radius of the goal; otherwise descend the Dijkstra
    field toward the goal and rotate/advance. Raises GoalUnreachable when
    no free cell approaches the goal.
    """
    gx, gz = float(goal_point[0]), float(goal_point[2])
    if math.hypot(gx - agent.x, gz - agent.z) <= cfg.success_radius:
        return Action.STOP

    if goal_field is None:
        goal_field = _GoalField(scene, cfg)
    field = goal_field.toward((gx, gz))
    r, c = scene.cell_of(agent.x, agent.z)
    if not np.isfinite(field[r, c]):
        raise GoalUnreachable(f"no path from cell {(r, c)} to goal around ({gx:.2f}, {gz:.2f})")

    waypoint = _lookahead_waypoint(scene, field, agent, (gx, gz))

    bearing = math.degrees(math.atan2(waypoint[0] - agent.x, waypoint[1] - agent.z))

    def forward_free(heading: float) -> bool:
        th = math.radians(heading)
        nx = agent.x + cfg.step_m * math.sin(th)
        nz = agent.z + cfg.step_m * math.cos(th)
        return scene.segment_free(agent.x, agent.z, nx, nz)

    # best reachable discrete heading whose literal forward step is free;
    # considering feasibility here avoids turn/blocked-forward flapping
    # at wall corners
    best_heading = None
    best_key = None
    steps = int(math.ceil(360.0 / cfg.turn_deg))
    for i in range(steps):
        heading = (agent.heading + i * cfg.turn_deg) % 360.0
        if not forward_free(heading):
            continue
        err = _wrap_deg(bearing - heading)
        key = (abs(err), 0 if err >= 0 else 1)
        if best_key is None or key < best_key:
            best_heading, best_key = heading, key

    if best_heading is None:  # boxed in: rotate toward the waypoint
        error = _wrap_deg(bearing - agent.heading)
        return Action.TURN_LEFT if error >= 0 else Action.TURN_RIGHT
    diff = _wrap_deg(best_heading - agent.heading)
    if abs(diff) < 1e-9:
        return Action.FORWARD
    return Action.TURN_LEFT if diff > 0 else Action.TURN_RIGHT


def check_stop(
    cloud: np.ndarray,
    agent: AgentState,
    depth: DepthMap,
    intr: CameraIntrinsics,
    cfg: SimConfig,
) -> tuple[bool, float]:
    """Gate a requested STOP on depth-buffer visibility of the goal cloud.

    Returns (allow, fraction); fraction below the floor overrides the STOP
    with FORWARD.
    """
    fraction = visible_fraction(cloud, depth, intr, agent.pose(), cfg.visibility_margin)
    return fraction >= cfg.stop_visibility_floor, fraction


def apply_action(scene: SyntheticScene, agent: AgentState, action: Action, cfg: SimConfig) -> bool:
    """Mutate the agent; returns True when a FORWARD actually moved."""
    agent.step_count += 1
    if action is Action.TURN_LEFT:
        agent.heading = (agent.heading + cfg.turn_deg) % 360.0
        return False
    if action is Action.TURN_RIGHT:
        agent.heading = (agent.heading - cfg.turn_deg) % 360.0
        return False
    if action is Action.FORWARD:
        th = math.radians(agent.heading)
        nx = agent.x + cfg.step_m * math.sin(th)
        nz = agent.z + cfg.step_m * math.cos(th)
        if scene.segment_free(agent.x, agent.z, nx, nz):
            agent.x, agent.z = nx, nz
            return True
        agent.collision_count += 1
        return False
    return False


def goal_region_distance(scene: SyntheticScene, x: float, z: float, goal_labels) -> float:
    """Planar distance to the nearest true goal object box."""
    labels = set(goal_labels)
    dists = [o.xz_distance(x, z) for o in scene.objects if o.label in labels]
    if not dists:
        raise ValueError("scene has no objects with the requested goal labels")
    return min(dists)


def geodesic_to_goal(scene: SyntheticScene, start: AgentState, goal_labels, cfg: SimConfig):
    """Grid-Dijkstra distance from the start to the inflated goal region."""
    labels = set(goal_labels)
    sources = []
    for r in range(scene.rows):
        for c in range(scene.cols):
            if scene.blocked[r, c]:
                continue
            cx, cz = scene.cell_center(r, c)
            for obj in scene.objects:
                if obj.label in labels and obj.xz_distance(cx, cz) <= cfg.success_radius:
                    sources.append((r, c, 0.0))
                    break
    if not sources:
        return None
    field = dijkstra_field(scene.blocked, scene.cell_size, sources)
    value = field[scene.cell_of(start.x, start.z)]
    return float(value) if np.isfinite(value) else None


def run_episode(
    scene: SyntheticScene,
    start: AgentState,
    goals: list[GoalCandidate],
    cfg: SimConfig,
    goal_labels=None,
    trace_path=None,
) -> EpisodeResult:
    """Navigate candidate goals in order with stuck/unreachable fallback.

    Terminates on an allowed STOP, the global step budget, or candidate
    exhaustion. Success requires a stop within success_radius of a true
    goal object.
    """
    if not goals:
        raise ValueError("run_episode requires at least one goal candidate")
    labels = list(goal_labels if goal_labels is not None else scene.goal_labels)
    if not labels:
        raise ValueError("no goal labels given")
    r, c = scene.cell_of(start.x, start.z)
    if not scene.in_grid(r, c) or scene.blocked[r, c]:
        raise ValueError("start position is not in free space")

    agent = AgentState(
        x=start.x, z=start.z, heading=start.heading, y=scene.camera_height
    )
    intr = cfg.intrinsics()
    optimum = geodesic_to_goal(scene, start, labels, cfg)
    path_length = 0.0
    stop_overrides = 0
    termination = "exhausted_candidates"
    terminal_candidate = None
    trace = open(trace_path, "w") if trace_path else None

    def emit(record: dict):
        if trace is not None:
            trace.write(json.dumps(record, sort_keys=True) + "\n")

    try:
        out_of_budget = False
        for ci, candidate in enumerate(goals):
            goal_field = _GoalField(scene, cfg)
            history: list[tuple[float, float]] = [(agent.x, agent.z)]
            while agent.step_count < cfg.max_steps:
                depth = render_depth(scene, agent, intr)
                goal, goal_point = dynamic_goal(
                    candidate.fused_cloud, agent, depth, intr, cfg.visibility_margin
                )
                try:
                    action = plan_step(scene, agent, goal_point, cfg, goal_field)
                except GoalUnreachable:
                    emit({"step": agent.step_count, "event": "unreachable", "candidate": ci})
                    break
                event = None
                if action is Action.STOP:
                    allow, fraction = check_stop(
                        candidate.fused_cloud, agent, depth, intr, cfg
                    )
                    if allow:
                        emit(
                            {
                                "step": agent.step_count,
                                "action": "STOP",
                                "candidate": ci,
                                "visible_fraction": round(fraction, 6),
                                "pose": [agent.x, agent.z, agent.heading],
                            }
                        )
                        termination = "stopped"
                        terminal_candidate = ci
                        break
                    action = Action.FORWARD
                    stop_overrides += 1
                    event = f"stop_override:{fraction:.4f}"
                moved = apply_action(scene, agent, action, cfg)
                if action is Action.FORWARD:
                    if moved:
                        path_length += cfg.step_m
                    else:
                        event = "collision"
                emit(
                    {
                        "step": agent.step_count,
                        "action": action.value,
                        "candidate": ci,
                        "pose": [agent.x, agent.z, agent.heading],
                        "goal": [goal.rho, goal.theta],
                        **({"event": event} if event else {}),
                    }
                )
                history.append((agent.x, agent.z))
                if len(history) > cfg.stuck_window:
                    px, pz = history[-cfg.stuck_window - 1]
                    if math.hypot(agent.x - px, agent.z - pz) < cfg.stuck_displacement:
                        emit({"step": agent.step_count, "event": "stuck", "candidate": ci})
                        break
            else:
                out_of_budget = True
            if termination == "stopped" or out_of_budget:
                break
        if termination != "stopped" and out_of_budget:
            termination = "max_steps"
    finally:
        if trace is not None:
            trace.close()

    success = (
        termination == "stopped"
        and goal_region_distance(scene, agent.x, agent.z, labels) <= cfg.success_radius
    )
    return EpisodeResult(
        success=success,
        path_length=path_length,
        geodesic_optimum=optimum,
        steps=agent.step_count,
        termination=termination,
        candidate_index=terminal_candidate,
        collisions=agent.collision_count,
        stop_overrides=stop_overrides,
    )
