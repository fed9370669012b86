"""Seeded synthetic worlds and fixtures: grid scenes with labelled boxes,
rendered RGB-D trajectories, deterministic embeddings, mask tables.

Everything here is procedural and reproducible from a seed, which gives
the pipeline ground truth to be scored against without any real sensors
or models. Embeddings follow a label/frame basis construction: views of
the same object score high against the label query but stay below the
near-duplicate threshold against each other.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embedding_index import EmbeddingIndex, write_emb1
from .nav_sim import AgentState, SceneObject, SyntheticScene, render_view
from .scene_memory import (
    CameraIntrinsics,
    Keyframe,
    KeyframeSelectionConfig,
    SceneMemory,
    downsample_memory,
    select_keyframes,
    subset_memory,
    write_depth_png,
    write_manifest,
    write_rgb_png,
)

LABEL_PALETTE = ["mug", "chair", "plant", "lamp", "crate"]

FRAME_AXIS_WEIGHT = 0.45  # keeps same-label views below the 0.9 dedup cosine
MIN_VISIBLE_PIXELS = 60


def intrinsics_for(width: int, height: int, hfov_deg: float = 79.0) -> CameraIntrinsics:
    fx = (width / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
    return CameraIntrinsics(
        fx=fx, fy=fx, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
        width=width, height=height,
    )


def frame_embedding(frame_id: int, label_idx: int | None, n_labels: int, n_frames: int) -> np.ndarray:
    """Deterministic per-frame embedding; normalized by the index loader."""
    d = 1 + n_labels + n_frames
    v = np.zeros(d)
    if label_idx is None:
        v[0] = 1.0
    else:
        v[1 + label_idx] = 1.0 + 0.01 * (frame_id % 9)
    v[1 + n_labels + frame_id] = FRAME_AXIS_WEIGHT
    return v / np.linalg.norm(v)


def query_embedding(label_idx: int, n_labels: int, n_frames: int) -> np.ndarray:
    d = 1 + n_labels + n_frames
    v = np.zeros(d)
    v[1 + label_idx] = 1.0
    return v


def box_surface_cloud(obj: SceneObject, spacing: float = 0.06) -> np.ndarray:
    """Deterministic grid of points on the four side faces and the top."""
    (x0, y0, z0), (x1, y1, z1) = obj.min_corner, obj.max_corner

    def rng(a, b):
        return np.linspace(a, b, max(2, int(math.ceil((b - a) / spacing)) + 1))

    xs, ys, zs = rng(x0, x1), rng(y0, y1), rng(z0, z1)
    faces = []
    for z in (z0, z1):
        gx, gy = np.meshgrid(xs, ys)
        faces.append(np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, z)], axis=1))
    for x in (x0, x1):
        gz, gy = np.meshgrid(zs, ys)
        faces.append(np.stack([np.full(gz.size, x), gy.ravel(), gz.ravel()], axis=1))
    gx, gz = np.meshgrid(xs, zs)
    faces.append(np.stack([gx.ravel(), np.full(gx.size, y1), gz.ravel()], axis=1))
    return np.unique(np.round(np.concatenate(faces), 9), axis=0)


def open_room(size_cells: int = 16, cell_size: float = 0.5) -> np.ndarray:
    grid = np.zeros((size_cells, size_cells), dtype=bool)
    grid[0, :] = grid[-1, :] = grid[:, 0] = grid[:, -1] = True
    return grid


def make_maze(seed: int, cells: int = 6, cell_size: float = 0.5) -> SyntheticScene:
    """Perfect maze via recursive backtracking; goal box in the cell
    farthest from the start."""
    rng = random.Random(seed)
    visited = [[False] * cells for _ in range(cells)]
    passages: set[tuple[tuple[int, int], tuple[int, int]]] = set()
    stack = [(0, 0)]
    visited[0][0] = True
    while stack:
        i, j = stack[-1]
        options = [
            (i + di, j + dj)
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1))
            if 0 <= i + di < cells and 0 <= j + dj < cells and not visited[i + di][j + dj]
        ]
        if not options:
            stack.pop()
            continue
        ni, nj = rng.choice(options)
        visited[ni][nj] = True
        passages.add(((i, j), (ni, nj)))
        stack.append((ni, nj))

    dim = 2 * cells + 1
    grid = np.ones((dim, dim), dtype=bool)
    for i in range(cells):
        for j in range(cells):
            grid[2 * i + 1, 2 * j + 1] = False
    for (i, j), (ni, nj) in passages:
        grid[i + ni + 1, j + nj + 1] = False

    # farthest logical cell from the start by BFS
    dist = {(0, 0): 0}
    frontier = [(0, 0)]
    adjacency = {}
    for (a, b) in passages:
        adjacency.setdefault(a, []).append(b)
        adjacency.setdefault(b, []).append(a)
    while frontier:
        nxt = []
        for node in frontier:
            for nb in adjacency.get(node, []):
                if nb not in dist:
                    dist[nb] = dist[node] + 1
                    nxt.append(nb)
        frontier = nxt
    goal_cell = max(dist, key=lambda cell: (dist[cell], -cell[0], -cell[1]))

    s = cell_size
    gx = (2 * goal_cell[1] + 1 + 0.5) * s
    gz = (2 * goal_cell[0] + 1 + 0.5) * s
    half = 0.12
    target = SceneObject("target", np.array([gx - half, 0.0, gz - half]),
                         np.array([gx + half, 1.2, gz + half]))
    start_x = 1.5 * s
    start_z = 1.5 * s
    return SyntheticScene(
        grid=grid,
        cell_size=s,
        wall_height=1.5,
        objects=[target],
        camera_height=0.8,
        starts=[{"position": [start_x, start_z], "heading": 0.0}],
        goal_labels=["target"],
    )


@dataclass
class WorldSpec:
    scene: SyntheticScene
    labels: list[str]  # distinct label vocabulary, index = embedding slot
    object_labels: list[str]  # per object


def make_localization_world(
    seed: int, n_objects: int = 2, duplicate_label: bool = False,
    size_cells: int = 16, cell_size: float = 0.5,
) -> WorldSpec:
    """Open room with a partial interior wall and labelled boxes."""
    rng = np.random.default_rng(seed)
    grid = open_room(size_cells, cell_size)
    # partial partition adds occlusion variety without harming connectivity
    wall_row = int(rng.integers(5, size_cells - 5))
    wall_len = int(rng.integers(3, size_cells // 2))
    if rng.integers(0, 2) == 0:
        grid[wall_row, 1 : 1 + wall_len] = True
    else:
        grid[wall_row, size_cells - 1 - wall_len : size_cells - 1] = True

    extent = size_cells * cell_size
    if duplicate_label:
        chosen = [LABEL_PALETTE[int(rng.integers(0, len(LABEL_PALETTE)))]] * n_objects
    else:
        order = rng.permutation(len(LABEL_PALETTE))[:n_objects]
        chosen = [LABEL_PALETTE[i] for i in order]

    objects: list[SceneObject] = []
    guard = 0
    while len(objects) < n_objects and guard < 500:
        guard += 1
        w = float(rng.uniform(0.5, 0.7))
        cx = float(rng.uniform(1.6, extent - 1.6))
        cz = float(rng.uniform(1.6, extent - 1.6))
        lo = np.array([cx - w / 2, 0.25, cz - w / 2])
        hi = np.array([cx + w / 2, 1.15, cz + w / 2])
        candidate = SceneObject(chosen[len(objects)], lo, hi)
        if any(
            np.linalg.norm(candidate.center[[0, 2]] - o.center[[0, 2]]) < 2.6
            for o in objects
        ):
            continue
        # keep boxes off the partition wall
        probe = SyntheticScene(grid, cell_size, objects=[candidate])
        r0, c0 = probe.cell_of(lo[0], lo[2])
        r1, c1 = probe.cell_of(hi[0], hi[2])
        if any(
            grid[r, c]
            for r in range(r0, r1 + 1)
            for c in range(c0, c1 + 1)
        ):
            continue
        objects.append(candidate)
    if len(objects) < n_objects:
        raise RuntimeError(f"could not place {n_objects} objects with seed {seed}")

    scene = SyntheticScene(
        grid=grid, cell_size=cell_size, wall_height=1.8, objects=objects,
        camera_height=0.8,
    )
    labels = sorted(set(chosen))
    return WorldSpec(scene=scene, labels=labels, object_labels=chosen)


def plan_cameras(
    world: WorldSpec,
    intr: CameraIntrinsics,
    views_per_object: int = 5,
    background_views: int = 3,
    min_pixels: int = MIN_VISIBLE_PIXELS,
) -> list[AgentState]:
    """Camera states that observe each object, plus background views."""
    scene = world.scene
    cameras: list[AgentState] = []
    free_cells = [
        (r, c)
        for r in range(scene.rows)
        for c in range(scene.cols)
        if not scene.blocked[r, c]
    ]
    for oi, obj in enumerate(scene.objects):
        center = obj.center
        ranked = sorted(
            free_cells,
            key=lambda rc: abs(
                math.hypot(*(np.array(scene.cell_center(*rc)) - center[[0, 2]])) - 1.8
            ),
        )
        found = 0
        for r, c in ranked:
            if found >= views_per_object:
                break
            x, z = scene.cell_center(r, c)
            d = math.hypot(x - center[0], z - center[2])
            if not 0.9 <= d <= 3.4:
                continue
            heading = math.degrees(math.atan2(center[0] - x, center[2] - z))
            agent = AgentState(x=x, z=z, heading=heading, y=scene.camera_height)
            _, hits = render_view(scene, agent, intr)
            if int((hits == oi).sum()) >= min_pixels:
                cameras.append(agent)
                found += 1
        if found == 0:
            raise RuntimeError(f"object {obj.label} has no viable camera")
    # background cameras stare at the nearest wall
    corners = [(1.2, 1.2, 225.0), (1.2, scene.bounds[1] - 1.2, 315.0),
               (scene.bounds[0] - 1.2, 1.2, 135.0)]
    for x, z, heading in corners[:background_views]:
        if scene.is_free_point(x, z):
            cameras.append(AgentState(x=x, z=z, heading=heading, y=scene.camera_height))
    return cameras


@dataclass
class QueryFixture:
    text: str
    emb_path: str
    goals: list[list[float]]
    embedding: np.ndarray


@dataclass
class LocalizationFixture:
    root: Path
    world: WorldSpec
    memory: SceneMemory
    manifest_path: Path
    emb_path: Path
    index: EmbeddingIndex
    mask_dir: Path
    rerank_table: Path
    gt_path: Path
    queries: list[QueryFixture]
    embeddings: np.ndarray
    frame_label_idx: list[int | None]
    visible_masks: dict[tuple[int, str], np.ndarray] = field(default_factory=dict)


def _render_frames(scene, cameras, intr):
    frames = []
    for fid, agent in enumerate(cameras):
        depth, hits = render_view(scene, agent, intr)
        frames.append((fid, agent, depth, hits))
    return frames


def _primary_label(hits: np.ndarray, world: WorldSpec, min_pixels: int):
    counts = {}
    for oi, label in enumerate(world.object_labels):
        n = int((hits == oi).sum())
        if n >= min_pixels:
            counts[oi] = n
    if not counts:
        return None, {}
    best_obj = max(counts, key=lambda oi: (counts[oi], -oi))
    return world.labels.index(world.object_labels[best_obj]), counts


def _write_frame_files(root, fid, depth, hits, intr, agent, compress_level=0):
    rgb = np.zeros((intr.height, intr.width, 3), dtype=np.uint8)
    rgb[..., 0] = ((hits + 3) * 37 % 256).astype(np.uint8)
    rgb[..., 1] = np.clip(depth.values * 12, 0, 255).astype(np.uint8)
    rgb[..., 2] = 128
    rgb_path = root / f"rgb_{fid:06d}.png"
    depth_path = root / f"depth_{fid:06d}.png"
    write_rgb_png(rgb_path, rgb, compress_level)
    write_depth_png(depth_path, depth, compress_level)
    return Keyframe(
        id=fid,
        rgb_ref=str(rgb_path),
        depth=depth,
        pose=agent.pose(),
        intrinsics=intr,
        depth_ref=str(depth_path),
    )


def _write_mask_dir(mask_dir: Path, entries: list[dict]) -> None:
    mask_dir.mkdir(parents=True, exist_ok=True)
    (mask_dir / "index.json").write_text(json.dumps(entries, indent=1, sort_keys=True))


def _mask_png(mask_dir: Path, name: str, mask: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray((mask.astype(np.uint8)) * 255).save(
        mask_dir / name, format="PNG", compress_level=0
    )


def write_localization_fixture(
    seed: int,
    root,
    n_objects: int = 2,
    duplicate_label: bool = False,
    width: int = 96,
    height: int = 72,
) -> LocalizationFixture:
    """Generate a full on-disk scene: manifest, PNGs, embeddings, masks,
    re-rank table, queries, and ground truth."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    world = make_localization_world(seed, n_objects=n_objects, duplicate_label=duplicate_label)
    intr = intrinsics_for(width, height)
    cameras = plan_cameras(world, intr)
    frames = _render_frames(world.scene, cameras, intr)

    n_frames = len(frames)
    n_labels = len(world.labels)
    keyframes = []
    vectors = []
    frame_label_idx: list[int | None] = []
    mask_entries = []
    rerank_entries = []
    visible_masks: dict[tuple[int, str], np.ndarray] = {}
    mask_dir = root / "masks"
    mask_dir.mkdir(parents=True, exist_ok=True)

    for fid, agent, depth, hits in frames:
        keyframes.append(_write_frame_files(root, fid, depth, hits, intr, agent))
        label_idx, counts = _primary_label(hits, world, MIN_VISIBLE_PIXELS)
        frame_label_idx.append(label_idx)
        vectors.append(frame_embedding(fid, label_idx, n_labels, n_frames))
        # one mask per visible instance; same-label instances in one view
        # become separate masks ranked by size, like a real segmenter
        by_label: dict[str, list[tuple[int, int]]] = {}
        for oi, n_px in sorted(counts.items()):
            by_label.setdefault(world.object_labels[oi], []).append((n_px, oi))
        for label, instances in sorted(by_label.items()):
            instances.sort(key=lambda t: (-t[0], t[1]))
            records = []
            for rank, (_, oi) in enumerate(instances):
                name = f"mask_{fid:06d}_{label}_{rank}.png"
                _mask_png(mask_dir, name, hits == oi)
                records.append({"file": name, "confidence": 0.9 - 0.05 * rank})
            mask_entries.append(
                {"image_id": str(fid), "prompt": label, "masks": records}
            )
            visible_masks[(fid, label)] = hits == instances[0][1]
        for label in world.labels:
            raw = "yes 8" if label in by_label else "no 2"
            rerank_entries.append({"image_id": str(fid), "query": label, "raw": raw})

    memory = SceneMemory(keyframes, scene_id=f"synthetic-{seed}")
    manifest_path = root / "manifest.jsonl"
    write_manifest(memory, manifest_path)

    vectors = np.array(vectors)
    emb_path = root / "frames.emb1"
    write_emb1(emb_path, vectors, ids=[kf.id for kf in keyframes])
    index = EmbeddingIndex(vectors, [kf.id for kf in keyframes])

    _write_mask_dir(mask_dir, mask_entries)
    rerank_table = root / "rerank_table.json"
    rerank_table.write_text(json.dumps(rerank_entries, indent=1, sort_keys=True))

    queries = []
    gt_episodes = []
    for label in world.labels:
        label_idx = world.labels.index(label)
        q_emb = query_embedding(label_idx, n_labels, n_frames)
        q_path = root / f"query_{label}.emb1"
        write_emb1(q_path, q_emb[None, :])
        goals = [
            [float(v) for v in obj.center]
            for obj, ol in zip(world.scene.objects, world.object_labels)
            if ol == label
        ]
        queries.append(QueryFixture(text=label, emb_path=str(q_path), goals=goals, embedding=q_emb))
        gt_episodes.append({"query": label, "goals": goals})
    gt_path = root / "ground_truth.json"
    gt_path.write_text(json.dumps({"episodes": gt_episodes}, indent=1, sort_keys=True))
    world.scene.to_file(root / "scene.yaml")

    return LocalizationFixture(
        root=root,
        world=world,
        memory=memory,
        manifest_path=manifest_path,
        emb_path=emb_path,
        index=index,
        mask_dir=mask_dir,
        rerank_table=rerank_table,
        gt_path=gt_path,
        queries=queries,
        embeddings=vectors,
        frame_label_idx=frame_label_idx,
        visible_masks=visible_masks,
    )


@dataclass
class TrajectoryFixture:
    root: Path
    world: WorldSpec
    full_memory: SceneMemory
    selected_indices: list[int]
    reduced_memory: SceneMemory
    reduced_manifest: Path
    reduced_emb_path: Path
    reduced_index: EmbeddingIndex
    reduced_mask_dir: Path
    queries: list[QueryFixture]
    gt_path: Path


def sweep_poses(world: WorldSpec, n_frames: int) -> list[AgentState]:
    """Closed orbit with an oscillating gaze sweep across the room."""
    scene = world.scene
    cx, cz = scene.bounds[0] / 2, scene.bounds[1] / 2
    radius = min(cx, cz) - 1.3
    states = []
    for t in range(n_frames):
        phi = t * 0.02 / radius  # arc speed 0.02 m per frame
        x = cx + radius * math.sin(phi)
        z = cz + radius * math.cos(phi)
        gaze = math.degrees(math.atan2(cx - x, cz - z))
        heading = gaze + 55.0 * math.sin(2 * math.pi * t / 180.0)
        states.append(AgentState(x=x, z=z, heading=heading, y=scene.camera_height))
    return states


def write_trajectory_fixture(
    seed: int,
    root,
    n_frames: int = 1000,
    factor: int = 4,
    width: int = 160,
    height: int = 120,
    selection: KeyframeSelectionConfig = KeyframeSelectionConfig(),
) -> TrajectoryFixture:
    """1000-frame sweep, keyframed and downsampled, with assets for both."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    grid = open_room(16, 0.5)
    labels = [LABEL_PALETTE[i] for i in rng.permutation(len(LABEL_PALETTE))[:2]]
    centers = [(4.0 - 0.9, 4.0), (4.0 + 0.9, 4.0)]
    objects = [
        SceneObject(
            label,
            np.array([cx - 0.35, 0.25, cz - 0.35]),
            np.array([cx + 0.35, 1.15, cz + 0.35]),
        )
        for label, (cx, cz) in zip(labels, centers)
    ]
    scene = SyntheticScene(grid, 0.5, wall_height=1.8, objects=objects, camera_height=0.8)
    world = WorldSpec(scene=scene, labels=sorted(labels), object_labels=labels)

    intr = intrinsics_for(width, height)
    states = sweep_poses(world, n_frames)

    full_dir = root / "full"
    full_dir.mkdir(exist_ok=True)
    keyframes = []
    hit_maps = []
    for fid, agent in enumerate(states):
        depth, hits = render_view(scene, agent, intr)
        keyframes.append(_write_frame_files(full_dir, fid, depth, hits, intr, agent))
        hit_maps.append(hits)
    full_memory = SceneMemory(keyframes, scene_id=f"sweep-{seed}")
    write_manifest(full_memory, full_dir / "manifest.jsonl")

    selected = select_keyframes([kf.pose for kf in keyframes], selection)
    reduced_dir = root / "reduced"
    reduced_memory = downsample_memory(
        subset_memory(full_memory, selected), factor, reduced_dir, compress_level=0
    )

    n_labels = len(world.labels)
    mask_entries = []
    vectors = []
    ids = []
    mask_dir = root / "reduced_masks"
    mask_dir.mkdir(exist_ok=True)
    queries_goals = {
        label: [
            [float(v) for v in obj.center]
            for obj, ol in zip(objects, world.object_labels)
            if ol == label
        ]
        for label in world.labels
    }
    for kf in reduced_memory:
        hits = hit_maps[kf.id][::factor, ::factor]
        label_idx, counts = _primary_label(hits, world, MIN_VISIBLE_PIXELS // (factor * factor))
        vectors.append(frame_embedding(kf.id, label_idx, n_labels, n_frames))
        ids.append(kf.id)
        for oi in sorted(counts):
            label = world.object_labels[oi]
            mask = hits == oi
            name = f"mask_{kf.id:06d}_{label}.png"
            _mask_png(mask_dir, name, mask)
            mask_entries.append(
                {
                    "image_id": str(kf.id),
                    "prompt": label,
                    "masks": [{"file": name, "confidence": 0.9}],
                }
            )
    _write_mask_dir(mask_dir, mask_entries)
    vectors = np.array(vectors)
    emb_path = root / "reduced.emb1"
    write_emb1(emb_path, vectors, ids=ids)

    queries = []
    gt_episodes = []
    for label in world.labels:
        q_emb = query_embedding(world.labels.index(label), n_labels, n_frames)
        q_path = root / f"query_{label}.emb1"
        write_emb1(q_path, q_emb[None, :])
        queries.append(
            QueryFixture(text=label, emb_path=str(q_path), goals=queries_goals[label], embedding=q_emb)
        )
        gt_episodes.append({"query": label, "goals": queries_goals[label]})
    gt_path = root / "ground_truth.json"
    gt_path.write_text(json.dumps({"episodes": gt_episodes}, indent=1, sort_keys=True))

    return TrajectoryFixture(
        root=root,
        world=world,
        full_memory=full_memory,
        selected_indices=selected,
        reduced_memory=reduced_memory,
        reduced_manifest=reduced_dir / "manifest.jsonl",
        reduced_emb_path=emb_path,
        reduced_index=EmbeddingIndex(vectors, ids),
        reduced_mask_dir=mask_dir,
        queries=queries,
        gt_path=gt_path,
    )
