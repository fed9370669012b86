"""Localization and navigation metrics plus build/storage/latency profiling.

All metrics fold over plain records so they can score JSON report files
produced by earlier runs; nothing here touches the live pipeline.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class MetricConfig:
    tau: float = 1.5  # meters, localization hit threshold (strict <)
    k: int = 10
    success_radius: float = 0.1

    def __post_init__(self):
        if self.tau <= 0 or self.k < 1 or self.success_radius <= 0:
            raise ValueError("metric parameters must be positive")


@dataclass
class LocalizationEpisode:
    predictions: list  # ordered candidate centers, each a 3-vector
    ground_truth: list  # goal positions, each a 3-vector

    def __post_init__(self):
        self.predictions = [np.asarray(p, dtype=np.float64).reshape(3) for p in self.predictions]
        self.ground_truth = [np.asarray(g, dtype=np.float64).reshape(3) for g in self.ground_truth]
        if not self.ground_truth:
            raise ValueError("episode without ground-truth goals")


def d_xz(a, b) -> float:
    """Euclidean distance on the xz plane, height ignored."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return math.hypot(a[0] - b[0], a[2] - b[2])


def episode_hit(episode: LocalizationEpisode, cfg: MetricConfig) -> bool:
    """An episode succeeds when any of the first K predictions lands
    strictly within tau of any goal (xz plane)."""
    for pred in episode.predictions[: cfg.k]:
        for goal in episode.ground_truth:
            if d_xz(pred, goal) < cfg.tau:
                return True
    return False


def sr_at_k(episodes: list[LocalizationEpisode], cfg: MetricConfig) -> float:
    if not episodes:
        raise ValueError("sr_at_k needs at least one episode")
    return sum(episode_hit(ep, cfg) for ep in episodes) / len(episodes)


def _as_nav_record(result) -> tuple[bool, float, float | None]:
    if isinstance(result, dict):
        return bool(result["success"]), float(result["path_length"]), result.get("geodesic_optimum")
    return bool(result.success), float(result.path_length), result.geodesic_optimum


def success_rate(results) -> float:
    if not results:
        raise ValueError("no episodes")
    return sum(_as_nav_record(r)[0] for r in results) / len(results)


def spl(results) -> float:
    """Success weighted by optimal-over-actual path length.

    Failed episodes contribute 0; a success whose geodesic optimum is 0
    (start already at goal) contributes 1.
    """
    if not results:
        raise ValueError("no episodes")
    total = 0.0
    for result in results:
        success, length, optimum = _as_nav_record(result)
        if not success:
            continue
        if optimum is None:
            raise ValueError("successful episode without a geodesic optimum")
        if optimum == 0.0:
            total += 1.0
        else:
            total += optimum / max(length, optimum)
    return total / len(results)


def ar_at_k(ranked_ids: list[list[int]], relevant_ids: list, k: int) -> tuple[float, int]:
    """Fraction of queries with a relevant hit in the top-K.

    Queries with an empty relevant set are excluded; the exclusion count
    is returned alongside. Raises when no scorable query remains.
    """
    if k < 1:
        raise ValueError("K must be >= 1")
    if len(ranked_ids) != len(relevant_ids):
        raise ValueError("ranked/relevant list lengths differ")
    hits = 0
    scored = 0
    excluded = 0
    for ranked, relevant in zip(ranked_ids, relevant_ids):
        relevant = set(relevant)
        if not relevant:
            excluded += 1
            continue
        scored += 1
        if any(r in relevant for r in ranked[:k]):
            hits += 1
    if scored == 0:
        raise ValueError("no query has a non-empty relevant set")
    return hits / scored, excluded


@dataclass
class ProfileResult:
    build_seconds: float
    store_bytes: int
    latencies: list[float] = field(default_factory=list)

    @property
    def mean_latency(self) -> float:
        return sum(self.latencies) / len(self.latencies) if self.latencies else 0.0

    def to_dict(self) -> dict:
        return {
            "build_seconds": self.build_seconds,
            "store_bytes": self.store_bytes,
            "query_count": len(self.latencies),
            "mean_latency_seconds": self.mean_latency,
            "latencies_seconds": self.latencies,
        }


def profile(build_fn, query_fn, queries) -> ProfileResult:
    """Wall-clock build time, artifact bytes, and per-query latency.

    build_fn() must return the stored artifact size in bytes; query_fn is
    timed once per query.
    """
    start = time.perf_counter()
    store_bytes = int(build_fn())
    build_seconds = time.perf_counter() - start
    latencies = []
    for query in queries:
        t0 = time.perf_counter()
        query_fn(query)
        latencies.append(time.perf_counter() - t0)
    return ProfileResult(build_seconds, store_bytes, latencies)


def load_ground_truth(path) -> dict[str, list]:
    """Ground-truth goals keyed by query string."""
    payload = json.loads(Path(path).read_text())
    return {ep["query"]: ep["goals"] for ep in payload["episodes"]}


def localization_report(episodes: list[LocalizationEpisode], cfg: MetricConfig) -> dict:
    terms = [episode_hit(ep, cfg) for ep in episodes]
    return {
        "metric": f"sr@{cfg.k}",
        "tau_m": cfg.tau,
        "episodes": [{"hit": bool(t)} for t in terms],
        "sr": sum(terms) / len(terms),
    }


def navigation_report(results) -> dict:
    records = [
        r.to_dict() if hasattr(r, "to_dict") else dict(r) for r in results
    ]
    return {
        "episodes": records,
        "sr": success_rate(records),
        "spl": spl(records),
    }


def write_csv(path, rows: list[dict]) -> None:
    """Flat CSV mirroring the tabular SR/SPL layout."""
    if not rows:
        raise ValueError("no rows to write")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
