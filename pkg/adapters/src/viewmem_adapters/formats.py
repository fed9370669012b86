"""Engine file formats and wire encodings, implemented from their specs.

EMB1 (little-endian): magic "EMB1", u32 count N, u32 dim d, then N*d
float32 row-major; rows must be L2-normalized. A text sidecar
(`<file>.ids`) lists one keyframe id per row.

Masks travel as COCO-style uncompressed RLE: column-major scan, counts
alternating 0-runs and 1-runs, starting with the 0-run.

Scene manifests are JSON lines with at least {"id": int, "rgb": path}.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

EMB1_MAGIC = b"EMB1"


def write_emb1(path, vectors: np.ndarray, ids=None) -> None:
    vectors = np.ascontiguousarray(np.asarray(vectors, dtype=np.float32))
    if vectors.ndim != 2:
        raise ValueError("vectors must be (N, d)")
    norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
    if len(vectors) and np.abs(norms - 1.0).max() > 1e-4:
        raise ValueError("rows must be L2-normalized before writing")
    n, d = vectors.shape
    with open(path, "wb") as fh:
        fh.write(EMB1_MAGIC)
        fh.write(struct.pack("<II", n, d))
        fh.write(vectors.astype("<f4").tobytes())
    if ids is not None:
        ids = list(ids)
        if len(ids) != n:
            raise ValueError("sidecar id count must match rows")
        Path(str(path) + ".ids").write_text("".join(f"{int(i)}\n" for i in ids))


def validate_emb1(path, expect_rows: int | None = None) -> tuple[int, int]:
    """Structural self-check mirroring the engine's format rules."""
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != EMB1_MAGIC:
        raise ValueError(f"{path}: not an EMB1 file")
    n, d = struct.unpack("<II", data[4:12])
    if len(data) != 12 + n * d * 4:
        raise ValueError(f"{path}: size mismatch")
    vectors = np.frombuffer(data, dtype="<f4", offset=12).reshape(n, d)
    if n:
        norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
        if np.abs(norms - 1.0).max() > 1e-4:
            raise ValueError(f"{path}: rows not normalized")
    if expect_rows is not None and n != expect_rows:
        raise ValueError(f"{path}: {n} rows, expected {expect_rows}")
    return n, d


def rle_encode(mask: np.ndarray) -> dict:
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    flat = mask.flatten(order="F").astype(np.int8)
    if flat.size == 0:
        return {"size": [h, w], "counts": []}
    change = np.nonzero(np.diff(flat))[0] + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat[0] == 1:
        counts = [0] + counts
    return {"size": [h, w], "counts": [int(c) for c in counts]}


def load_manifest_images(manifest_path) -> dict[str, Path]:
    """Map decimal frame ids to RGB paths from an engine scene manifest."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    table = {}
    for line in manifest_path.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        rec = json.loads(line)
        table[str(rec["id"])] = base / rec["rgb"]
    return table
