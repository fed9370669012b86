"""Command-line interface: index a scene, localize queries, run the
navigation simulator, evaluate reports, and profile builds.

Exit codes: 0 success, 2 target not found, 3 I/O error, 4 config error,
5 provider error. A config file of `key = value` lines (unknown keys
rejected) supplies defaults; explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import metrics
from .embedding_index import (
    EmbeddingIndex,
    FormatError,
    Query,
    load_query_embedding,
    read_emb1,
    read_emb1_ids,
    retrieve,
    write_emb1,
)
from .localization import (
    FusionConfig,
    TargetNotFound,
    localize,
    load_goal_candidates,
    report_dict,
    write_report,
)
from .nav_sim import AgentState, SimConfig, SyntheticScene, run_episode
from .providers import (
    HttpRerankProvider,
    HttpSegmentationProvider,
    MockRerankProvider,
    MockSegmentationProvider,
    ProviderError,
    memory_image_loader,
)
from .scene_memory import KeyframeSelectionConfig, load_manifest, storage_stats

EXIT_OK = 0
EXIT_NOT_FOUND = 2
EXIT_IO = 3
EXIT_CONFIG = 4
EXIT_PROVIDER = 5

log = logging.getLogger("viewmem")


@dataclass
class RunConfig:
    """Union of all tunables; defaults follow the pipeline's standard
    operating point (K=10, 15 deg / 0.25 m keyframing, 5 nearby views
    within 3 m, tau=1.5 m)."""

    k: int = 10
    rerank: bool = False
    sim_max: float = 0.9
    # keyframe selection
    theta_rot: float = 15.0
    theta_trans: float = 0.25
    # fusion
    max_nearby_views: int = 5
    nearby_radius: float = 3.0
    overlap_merge: float = 0.15
    merge_dist: float = 0.5
    far_view_median: float = 4.0
    min_confirming_views: int = 2
    largest_cluster_floor: float = 0.05
    overlap_radius: float = 0.10
    dbscan_eps: float = 0.10
    dbscan_min_pts: int = 10
    voxel_size: float = 0.02
    # depth gating
    depth_min: float = 0.1
    depth_max: float = 20.0
    # simulator
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
    # metrics
    tau: float = 1.5
    # run plumbing
    seed: int = 0
    jobs: int = 1

    def fusion(self) -> FusionConfig:
        return FusionConfig(
            max_nearby_views=self.max_nearby_views,
            nearby_radius=self.nearby_radius,
            overlap_merge=self.overlap_merge,
            merge_dist=self.merge_dist,
            far_view_median=self.far_view_median,
            min_confirming_views=self.min_confirming_views,
            largest_cluster_floor=self.largest_cluster_floor,
            overlap_radius=self.overlap_radius,
            dbscan_eps=self.dbscan_eps,
            dbscan_min_pts=self.dbscan_min_pts,
            voxel_size=self.voxel_size,
        )

    def sim(self) -> SimConfig:
        return SimConfig(
            turn_deg=self.turn_deg,
            step_m=self.step_m,
            hfov_deg=self.hfov_deg,
            max_steps=self.max_steps,
            success_radius=self.success_radius,
            stop_visibility_floor=self.stop_visibility_floor,
            stuck_window=self.stuck_window,
            stuck_displacement=self.stuck_displacement,
            visibility_margin=self.visibility_margin,
            image_width=self.image_width,
            image_height=self.image_height,
        )

    def selection(self) -> KeyframeSelectionConfig:
        return KeyframeSelectionConfig(self.theta_rot, self.theta_trans)

    def depth_range(self):
        from .geometry import DepthRange

        return DepthRange(self.depth_min, self.depth_max)


_CONFIG_FIELDS = {f.name for f in fields(RunConfig)}


def parse_config_file(path) -> dict:
    """Flat `key = value` file; values parse as JSON scalars when possible."""
    out = {}
    for line_no, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{line_no}: expected key = value")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _CONFIG_FIELDS:
            raise ValueError(f"{path}:{line_no}: unknown config key {key!r}")
        value = value.strip()
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(parse_config_file(args.config))
    for name in _CONFIG_FIELDS:
        flag = getattr(args, f"cfg_{name}", None)
        if flag is not None:
            values[name] = flag
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ValueError(f"bad config: {exc}") from exc


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _add_common(parser, *names):
    mapping = {
        "k": ("--top-k", int, "candidates per query (default 10)"),
        "tau": ("--tau", float, "localization hit threshold in meters (default 1.5)"),
        "theta_rot": ("--theta-rot", float, "keyframe rotation threshold, degrees (default 15)"),
        "theta_trans": ("--theta-trans", float, "keyframe translation threshold, meters (default 0.25)"),
        "max_nearby_views": ("--max-nearby-views", int, "fusion expansion cap (default 5)"),
        "nearby_radius": ("--nearby-radius", float, "fusion camera radius, meters (default 3)"),
        "max_steps": ("--max-steps", int, "episode step budget (default 500)"),
        "sim_max": ("--dedup-sim", float, "near-duplicate cosine threshold (default 0.9)"),
        "jobs": ("--jobs", int, "worker cap for provider calls (default 1)"),
        "seed": ("--seed", int, "seed recorded in reports (default 0)"),
    }
    for name in names:
        flag, typ, help_text = mapping[name]
        parser.add_argument(flag, dest=f"cfg_{name}", type=typ, default=None, help=help_text)


_DEFAULTS_EPILOG = (
    "standard defaults: K=10 candidates; keyframe thresholds 15 deg rotation / "
    "0.25 m translation; fusion expands to max 5 nearby views within 3 m; "
    "near-duplicate cosine 0.9; simulator 30 deg turn, 0.25 m step, 79 deg HFOV, "
    "max 500 steps; localization threshold tau = 1.5 m"
)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="viewmem", description=__doc__, epilog=_DEFAULTS_EPILOG)
    parser.add_argument("--log-level", default="WARNING")
    parser.add_argument("--config", help="key = value config file; flags override it")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-index", help="embed file + manifest -> persisted index")
    p.add_argument("--scene", required=True, help="scene manifest (JSON lines)")
    p.add_argument("--embeddings", required=True, help="EMB1 embedding file")
    p.add_argument("--out", required=True, help="output directory")
    _add_common(p, "seed")
    p.set_defaults(handler=cmd_build_index)

    p = sub.add_parser("localize", help="query the memory for 3D goal candidates")
    p.add_argument("--index", required=True, help="index EMB1 file or build-index output dir")
    p.add_argument("--scene", required=True, help="scene manifest")
    p.add_argument("--query", help="query text")
    p.add_argument("--query-image", help="reference image path (needs --label)")
    p.add_argument("--query-kind", choices=["text", "category", "image"], default=None)
    p.add_argument("--query-emb", required=True, help="EMB1 file with the query embedding")
    p.add_argument("--label", help="category label for image queries")
    p.add_argument("--seg-url", help="segmentation provider endpoint")
    p.add_argument("--seg-dir", help="mock segmentation mask directory")
    p.add_argument("--rerank-url", help="re-rank provider endpoint (enables stage 2)")
    p.add_argument("--rerank-table", help="mock re-rank lookup table (enables stage 2)")
    p.add_argument("--mode", choices=["benchmark", "nav"], default="benchmark")
    p.add_argument("--agent", help="agent position x,y,z (required for nav mode)")
    p.add_argument("--out", required=True, help="report JSON path")
    _add_common(p, "k", "max_nearby_views", "nearby_radius", "sim_max", "jobs", "seed")
    p.set_defaults(handler=cmd_localize)

    p = sub.add_parser("sim-nav", help="navigate a synthetic scene toward goal candidates")
    p.add_argument("--scene-file", required=True, help="synthetic scene YAML/JSON")
    p.add_argument("--report", required=True, help="localization report with goal candidates")
    p.add_argument("--trace", help="episode trace JSONL output")
    p.add_argument("--out", required=True, help="episode results JSON")
    _add_common(p, "max_steps", "seed")
    p.set_defaults(handler=cmd_sim_nav)

    p = sub.add_parser("eval", help="score localization or navigation reports")
    p.add_argument("--pred", required=True, help="predictions/episodes JSON")
    p.add_argument("--gt", help="ground-truth goals JSON (localization only)")
    p.add_argument("--out", help="metric report JSON")
    p.add_argument("--csv", help="metric CSV export")
    _add_common(p, "k", "tau", "seed")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("profile", help="index build time, storage, query latency")
    p.add_argument("--scene", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--queries", required=True, help="EMB1 file, one row per query")
    p.add_argument("--out", required=True)
    _add_common(p, "k", "seed")
    p.set_defaults(handler=cmd_profile)

    return parser


def _load_index_arg(index_arg: str) -> EmbeddingIndex:
    path = Path(index_arg)
    if path.is_dir():
        path = path / "index.emb1"
    vectors = read_emb1(path)
    ids = read_emb1_ids(path)
    return EmbeddingIndex(vectors, ids)


def cmd_build_index(args, cfg: RunConfig) -> int:
    memory = load_manifest(args.scene)
    vectors = read_emb1(args.embeddings)
    if len(vectors) != len(memory):
        raise ValueError(
            f"row-count mismatch: {len(vectors)} embedding rows, {len(memory)} manifest frames"
        )
    try:
        ids = read_emb1_ids(args.embeddings)
    except FileNotFoundError:
        ids = memory.ids
    if ids != memory.ids:
        raise ValueError("embedding sidecar ids do not match manifest ids")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    index = EmbeddingIndex(vectors, ids)  # validates and normalizes
    index_path = out_dir / "index.emb1"
    write_emb1(index_path, index.vectors.astype(np.float32), ids=ids)
    build_seconds = time.perf_counter() - start
    bytes_total = index_path.stat().st_size + Path(str(index_path) + ".ids").stat().st_size
    stats = {
        "n": len(index),
        "dim": index.dim,
        "build_seconds": build_seconds,
        "bytes": bytes_total,
    }
    (out_dir / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    print(json.dumps(stats, sort_keys=True))
    return EXIT_OK


def _segmentation_provider(args):
    if bool(args.seg_url) == bool(args.seg_dir):
        raise ValueError("exactly one of --seg-url / --seg-dir is required")
    if args.seg_url:
        return HttpSegmentationProvider(args.seg_url)
    return MockSegmentationProvider(args.seg_dir)


def _rerank_provider(args, memory):
    if args.rerank_url and args.rerank_table:
        raise ValueError("use either --rerank-url or --rerank-table, not both")
    if args.rerank_url:
        return HttpRerankProvider(args.rerank_url, image_loader=memory_image_loader(memory))
    if args.rerank_table:
        return MockRerankProvider(args.rerank_table)
    return None


def cmd_localize(args, cfg: RunConfig) -> int:
    memory = load_manifest(args.scene)
    index = _load_index_arg(args.index)
    if bool(args.query) == bool(args.query_image):
        raise ValueError("exactly one of --query / --query-image is required")
    if args.query_image:
        kind = "image"
        payload = args.query_image
        if not args.label:
            raise ValueError("--query-image requires --label for segmentation prompts")
    else:
        kind = args.query_kind or "text"
        if kind == "image":
            raise ValueError("image queries use --query-image")
        payload = args.query
    query = Query(
        kind=kind,
        payload=payload,
        embedding=load_query_embedding(args.query_emb),
        label=args.label or payload,
    )
    seg = _segmentation_provider(args)
    rr = _rerank_provider(args, memory)
    agent_pos = None
    if args.agent:
        agent_pos = [float(v) for v in args.agent.split(",")]
        if len(agent_pos) != 3:
            raise ValueError("--agent expects x,y,z")

    candidates = localize(
        query,
        memory,
        index,
        seg,
        cfg.fusion(),
        k=cfg.k,
        rerank_provider=rr,
        agent_pos=agent_pos,
        mode=args.mode,
        depth_range=cfg.depth_range(),
        sim_max=cfg.sim_max,
        max_workers=cfg.jobs,
    )
    payload = report_dict(query, candidates, args.mode)
    payload["config"] = asdict(cfg)
    write_report(args.out, payload)
    print(f"{len(candidates)} candidate(s) -> {args.out}")
    return EXIT_OK


def cmd_sim_nav(args, cfg: RunConfig) -> int:
    scene = SyntheticScene.from_file(args.scene_file)
    goals = load_goal_candidates(args.report)
    if not goals:
        raise TargetNotFound("report has no goal candidates")
    if not scene.starts:
        raise ValueError("scene file defines no start states")
    sim_cfg = cfg.sim()
    episodes = []
    for i, start in enumerate(scene.starts):
        agent = AgentState(
            x=float(start["position"][0]),
            z=float(start["position"][1]),
            heading=float(start.get("heading", 0.0)),
            y=scene.camera_height,
        )
        trace = None
        if args.trace:
            trace = args.trace if len(scene.starts) == 1 else f"{args.trace}.{i}"
        result = run_episode(scene, agent, goals, sim_cfg, trace_path=trace)
        episodes.append(result.to_dict())
    payload = {
        "config": asdict(cfg),
        "episodes": episodes,
        "sr": metrics.success_rate(episodes),
        "spl": metrics.spl(episodes),
    }
    Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(json.dumps({"sr": payload["sr"], "spl": payload["spl"]}, sort_keys=True))
    return EXIT_OK


def _localization_episodes(pred_payload: dict, gt_path) -> list[metrics.LocalizationEpisode]:
    if gt_path is None:
        raise ValueError("--gt is required for localization evaluation")
    gt = metrics.load_ground_truth(gt_path)
    episodes = []
    if "candidates" in pred_payload:  # single localization report
        query = pred_payload["query"]
        preds = [c["center"] for c in pred_payload["candidates"]]
        episodes.append(metrics.LocalizationEpisode(preds, gt[query]))
    else:
        for ep in pred_payload["episodes"]:
            episodes.append(
                metrics.LocalizationEpisode(ep["predictions"], gt[ep["query"]])
            )
    return episodes


def cmd_eval(args, cfg: RunConfig) -> int:
    pred_payload = json.loads(Path(args.pred).read_text())
    rows = []
    if isinstance(pred_payload, dict) and pred_payload.get("episodes") and (
        "path_length" in pred_payload["episodes"][0]
    ):
        report = metrics.navigation_report(pred_payload["episodes"])
        rows = [
            {"metric": "sr", "value": report["sr"]},
            {"metric": "spl", "value": report["spl"]},
        ]
    else:
        mcfg = metrics.MetricConfig(tau=cfg.tau, k=cfg.k)
        episodes = _localization_episodes(pred_payload, args.gt)
        report = metrics.localization_report(episodes, mcfg)
        rows = [{"metric": f"sr@{mcfg.k}", "value": report["sr"]}]
    report["config"] = asdict(cfg)
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if args.csv:
        metrics.write_csv(args.csv, rows)
    print(json.dumps({r["metric"]: r["value"] for r in rows}, sort_keys=True))
    return EXIT_OK


def cmd_profile(args, cfg: RunConfig) -> int:
    memory = load_manifest(args.scene)
    vectors = read_emb1(args.embeddings)
    if len(vectors) != len(memory):
        raise ValueError(
            f"row-count mismatch: {len(vectors)} embedding rows, {len(memory)} manifest frames"
        )
    query_rows = read_emb1(args.queries)
    holder: dict = {}

    def build() -> int:
        holder["index"] = EmbeddingIndex(vectors, memory.ids)
        _, mem_bytes = storage_stats(memory)
        return mem_bytes + Path(args.embeddings).stat().st_size

    def run_query(row) -> None:
        query = Query(kind="text", payload="profile", embedding=row)
        retrieve(holder["index"], query, cfg.k, rerank_enabled=False, sim_max=cfg.sim_max)

    result = metrics.profile(build, run_query, list(query_rows))
    payload = result.to_dict()
    payload["config"] = asdict(cfg)
    Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(
        json.dumps(
            {
                "build_seconds": payload["build_seconds"],
                "store_bytes": payload["store_bytes"],
                "mean_latency_seconds": payload["mean_latency_seconds"],
            },
            sort_keys=True,
        )
    )
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.WARNING))
    try:
        cfg = resolve_config(args)
        return args.handler(args, cfg)
    except TargetNotFound as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NOT_FOUND
    except ProviderError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except (FileNotFoundError, IsADirectoryError, NotADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
