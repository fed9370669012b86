"""Adapter command line: batch embedding and protocol servers.

All commands accept --stub backends so the full workflow runs without
model weights; pass model ids to use real checkpoints.
"""

from __future__ import annotations

import argparse
import sys

from .backends import (
    AdapterConfig,
    make_embedding_backend,
    make_segmentation_backend,
    make_vlm_backend,
)
from .embed import embed_query, embed_scene
from .servers import ImageStore, serve_rerank, serve_segment


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="viewmem-adapters", description=__doc__)
    parser.add_argument("--device", default="cpu")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("embed-scene", help="manifest -> EMB1 embedding file")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", default="stub", help="embedding model id or 'stub'")
    p.add_argument("--batch-size", type=int, default=8)

    p = sub.add_parser("embed-query", help="text or image query -> single-row EMB1")
    p.add_argument("--out", required=True)
    p.add_argument("--model", default="stub")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--text")
    group.add_argument("--image")

    p = sub.add_parser("serve-segment", help="run the /segment protocol server")
    p.add_argument("--scene", required=True, help="manifest used to resolve image ids")
    p.add_argument("--model", default="stub")
    p.add_argument("--port", type=int, default=8001)

    p = sub.add_parser("serve-rerank", help="run the /rerank protocol server")
    p.add_argument("--scene", required=True)
    p.add_argument("--model", default="stub")
    p.add_argument("--port", type=int, default=8002)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "embed-scene":
        cfg = AdapterConfig(embed_model=args.model, device=args.device,
                            batch_size=args.batch_size)
        n, d = embed_scene(args.scene, make_embedding_backend(cfg), args.out,
                           batch_size=cfg.batch_size)
        print(f"wrote {n} x {d} embeddings -> {args.out}")
        return 0
    if args.command == "embed-query":
        cfg = AdapterConfig(embed_model=args.model, device=args.device)
        embed_query(make_embedding_backend(cfg), args.out, text=args.text,
                    image_path=args.image)
        print(f"wrote query embedding -> {args.out}")
        return 0
    if args.command == "serve-segment":
        cfg = AdapterConfig(segment_model=args.model, device=args.device,
                            segment_port=args.port)
        serve_segment(make_segmentation_backend(cfg), ImageStore(args.scene), cfg.segment_port)
        return 0
    if args.command == "serve-rerank":
        cfg = AdapterConfig(vlm_model=args.model, device=args.device,
                            rerank_port=args.port)
        serve_rerank(make_vlm_backend(cfg), ImageStore(args.scene), cfg.rerank_port)
        return 0
    return 2


if __name__ == "__main__":
    sys.exit(main())
