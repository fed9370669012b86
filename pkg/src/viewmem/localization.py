"""Query-time 3D localization: per-view segmentation, instance grouping,
multi-view fusion, density filtering, and goal-center extraction."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import geometry
from .embedding_index import Candidate, EmbeddingIndex, Query, retrieve
from .geometry import BoundingBox, DepthRange, Mask
from .providers import ProviderError, SegmentationProvider
from .rerank import rerank as rerank_candidates
from .scene_memory import Keyframe, SceneMemory

log = logging.getLogger(__name__)


class TargetNotFound(RuntimeError):
    """No goal candidate survived segmentation and fusion."""


@dataclass
class FusionConfig:
    max_nearby_views: int = 5
    nearby_radius: float = 3.0  # meters, camera to seed centroid
    overlap_merge: float = 0.15  # fraction of the smaller cloud
    merge_dist: float = 0.5  # meters, min point distance for grouping
    far_view_median: float = 4.0  # meters, median masked depth gate
    min_confirming_views: int = 2
    largest_cluster_floor: float = 0.05
    overlap_radius: float = 0.10  # neighbor radius for overlap tests
    dbscan_eps: float = 0.10
    dbscan_min_pts: int = 10
    voxel_size: float = 0.02

    def __post_init__(self):
        if not 0 < self.overlap_merge < 1:
            raise ValueError("overlap_merge must be in (0, 1)")
        for name in (
            "max_nearby_views",
            "nearby_radius",
            "merge_dist",
            "far_view_median",
            "min_confirming_views",
            "largest_cluster_floor",
            "overlap_radius",
            "dbscan_eps",
            "dbscan_min_pts",
            "voxel_size",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class ViewPrediction:
    frame_id: int
    mask: Mask
    cloud: np.ndarray
    stage1_score: float = 0.0
    stage2_confidence: float | None = None


@dataclass
class Cluster:
    members: list[ViewPrediction]
    merged: np.ndarray  # concatenation of member clouds


@dataclass
class GoalCandidate:
    member_predictions: list[ViewPrediction]
    fused_cloud: np.ndarray
    center: np.ndarray
    distance_to_agent: float | None = None

    @property
    def member_frames(self) -> list[int]:
        return [p.frame_id for p in self.member_predictions]

    @property
    def confidence(self) -> float:
        seed = self.member_predictions[0]
        if seed.stage2_confidence is not None:
            return seed.stage2_confidence
        return seed.stage1_score


def segment_and_backproject(
    frame: Keyframe,
    prompt: str,
    seg_provider: SegmentationProvider,
    depth_range: DepthRange,
    far_view_median: float,
) -> ViewPrediction | None:
    """Segment one view and lift the best mask to a world cloud.

    Returns None (view discarded) when the provider finds nothing, the
    median masked depth exceeds the far-view gate, or no valid-depth
    pixels remain.
    """
    try:
        masks = seg_provider.segment(str(frame.id), prompt)
    except ProviderError as exc:
        log.warning("frame %d: segmentation failed (%s)", frame.id, exc)
        return None
    if not masks:
        return None
    best = max(masks, key=lambda m: m.confidence)
    if best.empty:
        return None
    median = geometry.median_masked_depth(frame.depth, best)
    if median > far_view_median:
        log.debug("frame %d: median masked depth %.2f m, view discarded", frame.id, median)
        return None
    cloud = geometry.backproject(frame.depth, best, frame.intrinsics, frame.pose, depth_range)
    if len(cloud) == 0:
        return None
    return ViewPrediction(frame_id=frame.id, mask=best, cloud=cloud)


def group_instances(preds: list[ViewPrediction], cfg: FusionConfig) -> list[Cluster]:
    """Greedy instance grouping in rank order.

    Each prediction joins the first existing cluster (creation order) whose
    accumulated cloud it overlaps by >= overlap_merge or approaches closer
    than merge_dist; otherwise it seeds a new cluster.
    """
    clusters: list[Cluster] = []
    for pred in preds:
        placed = False
        for cluster in clusters:
            overlap = geometry.cloud_overlap(pred.cloud, cluster.merged, cfg.overlap_radius)
            if overlap >= cfg.overlap_merge or (
                geometry.min_point_distance(pred.cloud, cluster.merged) < cfg.merge_dist
            ):
                cluster.members.append(pred)
                cluster.merged = np.vstack([cluster.merged, pred.cloud])
                placed = True
                break
        if not placed:
            clusters.append(Cluster(members=[pred], merged=pred.cloud.copy()))
    return clusters


def dbscan_labels(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Deterministic Euclidean DBSCAN labels (-1 = noise).

    Neighborhoods are closed balls (distance <= eps); a point is core when
    its neighborhood, itself included, holds >= min_pts points. Expansion
    is FIFO from the lowest-index unlabelled core point, visiting neighbor
    lists in index order, so labels are reproducible.
    """
    n = len(points)
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    tree = cKDTree(points)
    neighbors = tree.query_ball_point(points, eps * (1 + 1e-12))
    neighbors = [sorted(nb) for nb in neighbors]
    core = np.array([len(nb) >= min_pts for nb in neighbors])
    cluster_id = 0
    for start in range(n):
        if labels[start] != -1 or not core[start]:
            continue
        labels[start] = cluster_id
        queue = [start]
        head = 0
        while head < len(queue):
            current = queue[head]
            head += 1
            for nb in neighbors[current]:
                if labels[nb] == -1:
                    labels[nb] = cluster_id
                    if core[nb]:
                        queue.append(nb)
        cluster_id += 1
    return labels


def density_filter(cloud: np.ndarray, cfg: FusionConfig) -> np.ndarray:
    """Keep the densest blob; fall back to the input when it is too small.

    Clustering runs on a voxel-downsampled copy; original points inherit
    the label of their voxel. The largest cluster (ties: smallest first
    member index) is returned unless it holds < largest_cluster_floor of
    the input points, in which case the input passes through unchanged.
    """
    cloud = geometry.as_cloud(cloud)
    if len(cloud) == 0:
        raise ValueError("density filter on empty cloud")
    keys = np.floor(cloud / cfg.voxel_size).astype(np.int64)
    unique_keys, inverse = np.unique(keys, axis=0, return_inverse=True)
    reps = np.zeros((len(unique_keys), 3))
    np.add.at(reps, inverse, cloud)
    reps /= np.bincount(inverse)[:, None]

    rep_labels = dbscan_labels(reps, cfg.dbscan_eps, cfg.dbscan_min_pts)
    labels = rep_labels[inverse]

    best_label, best_size, best_first = -1, 0, len(cloud)
    for label in range(rep_labels.max() + 1):
        members = np.nonzero(labels == label)[0]
        size = len(members)
        first = int(members[0]) if size else len(cloud)
        if size > best_size or (size == best_size and first < best_first):
            best_label, best_size, best_first = label, size, first
    if best_label < 0 or best_size < cfg.largest_cluster_floor * len(cloud):
        return cloud
    return cloud[labels == best_label]


def fuse_cluster(
    cluster: Cluster,
    scene: SceneMemory,
    seg_provider: SegmentationProvider,
    cfg: FusionConfig,
    prompt: str,
    depth_range: DepthRange = DepthRange(),
) -> GoalCandidate:
    """Fuse one instance cluster into a goal candidate.

    The top-ranked member seeds the fused cloud; other members join when
    they overlap the accumulated cloud. If too few views confirm, nearby
    scene cameras whose frustum holds the seed are segmented and checked
    the same way (nearest first, capped). The fused cloud is density
    filtered and its bounding-box center becomes the goal.
    """
    if not cluster.members:
        raise ValueError("empty cluster")
    seed = cluster.members[0]
    confirmed = [seed]
    fused = seed.cloud.copy()
    for member in cluster.members[1:]:
        if geometry.cloud_overlap(member.cloud, fused, cfg.overlap_radius) >= cfg.overlap_merge:
            confirmed.append(member)
            fused = np.vstack([fused, member.cloud])

    if len(confirmed) < cfg.min_confirming_views:
        member_ids = {p.frame_id for p in cluster.members}
        centroid = seed.cloud.mean(axis=0)
        nearby: list[tuple[float, int]] = []
        for kf in scene:
            if kf.id in member_ids:
                continue
            dist = float(np.linalg.norm(kf.pose.translation - centroid))
            if dist > cfg.nearby_radius:
                continue
            if not geometry.frustum_contains(kf.intrinsics, kf.pose, seed.cloud):
                continue
            nearby.append((dist, kf.id))
        nearby.sort()
        for _, frame_id in nearby[: cfg.max_nearby_views]:
            pred = segment_and_backproject(
                scene.frame(frame_id), prompt, seg_provider, depth_range, cfg.far_view_median
            )
            if pred is None:
                continue
            if geometry.cloud_overlap(pred.cloud, fused, cfg.overlap_radius) >= cfg.overlap_merge:
                confirmed.append(pred)
                fused = np.vstack([fused, pred.cloud])

    fused = density_filter(fused, cfg)
    if len(fused) == 0:
        raise TargetNotFound("no valid geometry for candidate")
    center = BoundingBox.of_cloud(fused).center
    return GoalCandidate(member_predictions=confirmed, fused_cloud=fused, center=center)


def localize(
    query: Query,
    scene: SceneMemory,
    index: EmbeddingIndex,
    seg_provider: SegmentationProvider,
    cfg: FusionConfig,
    k: int = 10,
    rerank_provider=None,
    agent_pos=None,
    mode: str = "nav",
    depth_range: DepthRange = DepthRange(),
    sim_max: float = 0.9,
    max_workers: int = 1,
) -> list[GoalCandidate]:
    """Full query pipeline: retrieve, optionally re-rank, segment, fuse.

    mode "nav" groups predictions into instances and orders candidates by
    distance to agent_pos; mode "benchmark" fuses each retrieved view
    independently and orders by stage-2 then stage-1 score.
    """
    if mode not in ("nav", "benchmark"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "nav" and agent_pos is None:
        raise ValueError("nav mode requires an agent position")

    cands = retrieve(index, query, k, rerank_enabled=rerank_provider is not None, sim_max=sim_max)
    prompt = query.prompt_text

    stage2: dict[int, float] = {}
    if rerank_provider is not None:
        ranked = rerank_candidates(cands, rerank_provider, prompt, max_workers=max_workers)
        stage2 = {rc.candidate.frame_id: rc.verdict.confidence for rc in ranked}
        cands = [rc.candidate for rc in ranked]

    preds: list[ViewPrediction] = []
    for cand in cands:
        pred = segment_and_backproject(
            scene.frame(cand.frame_id), prompt, seg_provider, depth_range, cfg.far_view_median
        )
        if pred is None:
            continue
        pred.stage1_score = cand.score
        pred.stage2_confidence = stage2.get(cand.frame_id)
        preds.append(pred)
    if not preds:
        raise TargetNotFound("target not found")

    if mode == "benchmark":
        clusters = [Cluster(members=[p], merged=p.cloud.copy()) for p in preds]
    else:
        clusters = group_instances(preds, cfg)

    candidates = [
        fuse_cluster(c, scene, seg_provider, cfg, prompt, depth_range) for c in clusters
    ]
    if mode == "nav":
        agent = np.asarray(agent_pos, dtype=np.float64).reshape(3)
        for cand in candidates:
            cand.distance_to_agent = float(np.linalg.norm(cand.center - agent))
        candidates.sort(key=lambda c: (c.distance_to_agent, c.member_frames[0]))
    else:
        candidates.sort(
            key=lambda c: (
                -(c.member_predictions[0].stage2_confidence or 0.0),
                -c.member_predictions[0].stage1_score,
                c.member_frames[0],
            )
        )
    return candidates


def report_dict(query: Query, candidates: list[GoalCandidate], mode: str) -> dict:
    """Localization report payload (JSON-serializable, deterministic)."""
    return {
        "query": query.payload,
        "query_kind": query.kind,
        "mode": mode,
        "candidates": [
            {
                "center": [float(x) for x in cand.center],
                "num_points": int(len(cand.fused_cloud)),
                "member_frames": cand.member_frames,
                "confidence": float(cand.confidence),
                "distance_to_agent": (
                    None if cand.distance_to_agent is None else float(cand.distance_to_agent)
                ),
                "points": [[float(v) for v in p] for p in cand.fused_cloud],
            }
            for cand in candidates
        ],
    }


def write_report(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_goal_candidates(report_path) -> list[GoalCandidate]:
    """Rebuild goal candidates (clouds included) from a localization report."""
    payload = json.loads(open(report_path).read())
    out = []
    for rec in payload["candidates"]:
        cloud = np.asarray(rec["points"], dtype=np.float64).reshape(-1, 3)
        out.append(
            GoalCandidate(
                member_predictions=[],
                fused_cloud=cloud,
                center=np.asarray(rec["center"], dtype=np.float64),
                distance_to_agent=rec.get("distance_to_agent"),
            )
        )
    return out
