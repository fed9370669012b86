"""Segmentation and re-rank providers: wire protocols and deterministic mocks.

Wire protocols (HTTP, JSON bodies):
  POST /segment  {"image_id": str, "prompt": str}
                 -> {"masks": [{"rle": {"size": [h, w], "counts": [...]},
                                "confidence": float}, ...]}
  POST /rerank   {"query": str, "image_id": str, "image_b64": optional str}
                 -> {"raw": str}

RLE masks use COCO-style uncompressed run lengths: column-major scan,
counts alternating runs of 0s and 1s, starting with the 0-run.

Image ids are the decimal keyframe ids. Mock providers read lookup
tables from disk so tests and fixtures stay fully deterministic.
"""

from __future__ import annotations

import base64
import json
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
import requests
from PIL import Image

from .geometry import Mask


class ProviderError(RuntimeError):
    """Transport-level provider failure (connection, HTTP 5xx, bad payload)."""


def rle_encode(values: np.ndarray) -> dict:
    """Encode a boolean mask as COCO-style uncompressed RLE."""
    values = np.asarray(values, dtype=bool)
    h, w = values.shape
    flat = values.flatten(order="F").astype(np.int8)
    if flat.size == 0:
        return {"size": [h, w], "counts": []}
    change = np.nonzero(np.diff(flat))[0] + 1
    boundaries = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(boundaries).tolist()
    if flat[0] == 1:  # counts must start with the 0-run
        counts = [0] + counts
    return {"size": [h, w], "counts": [int(c) for c in counts]}


def rle_decode(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    counts = rle["counts"]
    total = sum(counts)
    if total != h * w:
        raise ValueError(f"RLE counts sum to {total}, expected {h * w}")
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    value = False
    for count in counts:
        if value:
            flat[pos : pos + count] = True
        pos += count
        value = not value
    return flat.reshape((h, w), order="F")


class SegmentationProvider(Protocol):
    def segment(self, image_id: str, prompt: str) -> list[Mask]: ...


class RerankProvider(Protocol):
    def score(self, image_id: str, query: str) -> str: ...


class MockSegmentationProvider:
    """Directory-backed provider: PNG masks plus an index.json table.

    index.json: [{"image_id": str, "prompt": str,
                  "masks": [{"file": relpath, "confidence": float}]}]
    Unknown (image_id, prompt) pairs yield no masks.
    """

    def __init__(self, mask_dir):
        self.mask_dir = Path(mask_dir)
        index_path = self.mask_dir / "index.json"
        if not index_path.exists():
            raise FileNotFoundError(f"mock mask index {index_path} not found")
        self._table: dict[tuple[str, str], list[dict]] = {}
        for entry in json.loads(index_path.read_text()):
            self._table[(entry["image_id"], entry["prompt"])] = entry["masks"]
        self.calls = 0

    def segment(self, image_id: str, prompt: str) -> list[Mask]:
        self.calls += 1
        masks = []
        for rec in self._table.get((image_id, prompt), []):
            arr = np.asarray(Image.open(self.mask_dir / rec["file"]).convert("L"))
            masks.append(Mask(arr > 0, confidence=float(rec["confidence"])))
        return masks


class MockRerankProvider:
    """Lookup-table provider: JSON list of {"image_id", "query", "raw"}."""

    def __init__(self, table_path):
        entries = json.loads(Path(table_path).read_text())
        self._table = {(e["image_id"], e["query"]): e["raw"] for e in entries}
        self.calls = 0

    def score(self, image_id: str, query: str) -> str:
        self.calls += 1
        try:
            return self._table[(image_id, query)]
        except KeyError:
            raise ProviderError(
                f"no mock verdict for image {image_id!r}, query {query!r}"
            ) from None


class HttpSegmentationProvider:
    def __init__(self, endpoint: str, timeout: float = 30.0):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout

    def segment(self, image_id: str, prompt: str) -> list[Mask]:
        try:
            resp = requests.post(
                f"{self.endpoint}/segment",
                json={"image_id": image_id, "prompt": prompt},
                timeout=self.timeout,
            )
            resp.raise_for_status()
            payload = resp.json()
        except requests.RequestException as exc:
            raise ProviderError(f"segment call failed: {exc}") from exc
        try:
            return [
                Mask(rle_decode(m["rle"]), confidence=float(m["confidence"]))
                for m in payload["masks"]
            ]
        except (KeyError, TypeError, ValueError) as exc:
            raise ProviderError(f"bad /segment payload: {exc}") from exc


class HttpRerankProvider:
    """POSTs /rerank; attaches base64 PNG bytes when an image loader is given."""

    def __init__(
        self,
        endpoint: str,
        image_loader: Callable[[str], bytes | None] | None = None,
        timeout: float = 60.0,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.image_loader = image_loader
        self.timeout = timeout

    def score(self, image_id: str, query: str) -> str:
        body = {"query": query, "image_id": image_id}
        if self.image_loader is not None:
            raw = self.image_loader(image_id)
            if raw is not None:
                body["image_b64"] = base64.b64encode(raw).decode("ascii")
        try:
            resp = requests.post(
                f"{self.endpoint}/rerank", json=body, timeout=self.timeout
            )
            resp.raise_for_status()
            payload = resp.json()
        except requests.RequestException as exc:
            raise ProviderError(f"rerank call failed: {exc}") from exc
        try:
            return str(payload["raw"])
        except (KeyError, TypeError) as exc:
            raise ProviderError(f"bad /rerank payload: {exc}") from exc


def memory_image_loader(memory) -> Callable[[str], bytes | None]:
    """Image loader that serves keyframe RGB file bytes by decimal id."""

    def load(image_id: str) -> bytes | None:
        try:
            kf = memory.frame(int(image_id))
        except (KeyError, ValueError):
            return None
        if kf.rgb_ref is None:
            return None
        return Path(kf.rgb_ref).read_bytes()

    return load
