"""Batch-embed scene keyframes and queries into EMB1 files."""

from __future__ import annotations

import numpy as np
from PIL import Image

from .backends import EmbeddingBackend
from .formats import load_manifest_images, validate_emb1, write_emb1


def embed_scene(manifest_path, backend: EmbeddingBackend, out_path, batch_size: int = 8) -> tuple[int, int]:
    """One embedding row per manifest line, in manifest order.

    Aborts naming the frame when an image cannot be read. The output file
    is self-validated before returning (N, d).
    """
    table = load_manifest_images(manifest_path)
    ids = list(table.keys())
    rows = []
    for start in range(0, len(ids), batch_size):
        chunk = ids[start : start + batch_size]
        images = []
        for frame_id in chunk:
            path = table[frame_id]
            try:
                images.append(Image.open(path).convert("RGB"))
            except OSError as exc:
                raise RuntimeError(f"frame {frame_id}: unreadable image {path}") from exc
        rows.append(backend.embed_images(images))
    vectors = np.concatenate(rows) if rows else np.empty((0, 0), dtype=np.float64)
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    vectors = vectors / np.where(norms == 0, 1.0, norms)
    write_emb1(out_path, vectors, ids=[int(i) for i in ids])
    return validate_emb1(out_path, expect_rows=len(ids))


def embed_query(
    backend: EmbeddingBackend, out_path, text: str | None = None, image_path=None
) -> tuple[int, int]:
    """Single-row EMB1 for a text or reference-image query."""
    if (text is None) == (image_path is None):
        raise ValueError("provide exactly one of text / image_path")
    if text is not None:
        vector = backend.embed_text(text)
    else:
        image = Image.open(image_path).convert("RGB")
        vector = backend.embed_images([image])[0]
    vector = np.asarray(vector, dtype=np.float64)
    vector = vector / np.linalg.norm(vector)
    write_emb1(out_path, vector[None, :])
    return validate_emb1(out_path, expect_rows=1)
