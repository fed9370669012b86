"""Protocol servers for /segment and /rerank.

Both apps resolve image ids through an engine scene manifest. Responses
are bit-conformant to the engine's provider protocols: segmentation
returns COCO-style RLE masks with confidences, re-ranking returns the raw
model string. Unknown ids are 404, malformed bodies 422, backend errors
500 (the engine treats 5xx per its provider-failure contract).
"""

from __future__ import annotations

import base64
import io
import logging
from pathlib import Path

from fastapi import FastAPI, HTTPException
from PIL import Image
from pydantic import BaseModel

from .backends import SegmentationBackend, VlmBackend
from .formats import load_manifest_images, rle_encode

log = logging.getLogger(__name__)


class SegmentRequest(BaseModel):
    image_id: str
    prompt: str


class RerankRequest(BaseModel):
    query: str
    image_id: str
    image_b64: str | None = None


class ImageStore:
    def __init__(self, manifest_path=None):
        self.table = load_manifest_images(manifest_path) if manifest_path else {}

    def load(self, image_id: str) -> Image.Image:
        path = self.table.get(image_id)
        if path is None or not Path(path).exists():
            raise HTTPException(status_code=404, detail=f"unknown image id {image_id!r}")
        return Image.open(path).convert("RGB")


def create_segment_app(backend: SegmentationBackend, store: ImageStore) -> FastAPI:
    app = FastAPI(title="segment-adapter")

    @app.post("/segment")
    def segment(request: SegmentRequest):
        image = store.load(request.image_id)
        try:
            results = backend.segment(image, request.prompt)
        except HTTPException:
            raise
        except Exception as exc:
            log.exception("segmentation backend failed")
            raise HTTPException(status_code=500, detail=str(exc)) from exc
        return {
            "masks": [
                {"rle": rle_encode(mask), "confidence": float(conf)}
                for mask, conf in results
            ]
        }

    return app


def create_rerank_app(backend: VlmBackend, store: ImageStore) -> FastAPI:
    app = FastAPI(title="rerank-adapter")

    @app.post("/rerank")
    def rerank(request: RerankRequest):
        if request.image_b64 is not None:
            try:
                image = Image.open(io.BytesIO(base64.b64decode(request.image_b64))).convert("RGB")
            except Exception as exc:
                raise HTTPException(status_code=422, detail="undecodable image_b64") from exc
        else:
            image = store.load(request.image_id)
        prompt = (
            f"Is a {request.query} visible in this image? "
            "Reply ONLY: yes/no <visibility 0-10>"
        )
        try:
            raw = backend.answer(image, prompt)
        except HTTPException:
            raise
        except Exception as exc:
            log.exception("VLM backend failed")
            raise HTTPException(status_code=500, detail=str(exc)) from exc
        return {"raw": str(raw)}

    return app


def serve_segment(backend, store: ImageStore, port: int, host: str = "127.0.0.1"):
    import uvicorn

    uvicorn.run(create_segment_app(backend, store), host=host, port=port)


def serve_rerank(backend, store: ImageStore, port: int, host: str = "127.0.0.1"):
    import uvicorn

    uvicorn.run(create_rerank_app(backend, store), host=host, port=port)
