from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def scene_dir(tmp_path_factory):
    """Tiny engine-format scene: manifest + RGB/depth PNGs.

    Frame 1 duplicates frame 0 exactly; frame 2 is a near-duplicate;
    frame 3 is distinct content.
    """
    root = tmp_path_factory.mktemp("scene")
    rng = np.random.default_rng(0)
    base = rng.integers(0, 255, size=(48, 64, 3), dtype=np.uint8)
    near = base.copy()
    near[:4, :4] = 255 - near[:4, :4]
    distinct = np.zeros((48, 64, 3), dtype=np.uint8)
    distinct[:, :32] = (255, 40, 10)
    frames = [base, base.copy(), near, distinct]
    lines = []
    for i, rgb in enumerate(frames):
        rgb_name = f"rgb_{i:06d}.png"
        depth_name = f"depth_{i:06d}.png"
        Image.fromarray(rgb).save(root / rgb_name)
        Image.fromarray(np.full((48, 64), 2000, dtype=np.uint16)).save(root / depth_name)
        pose = np.eye(4)
        pose[0, 3] = float(i)
        lines.append(json.dumps({
            "id": i, "rgb": rgb_name, "depth": depth_name,
            "pose": [float(v) for v in pose.reshape(-1)],
            "fx": 40.0, "fy": 40.0, "cx": 31.5, "cy": 23.5,
            "width": 64, "height": 48, "depth_scale": 0.001,
        }))
    (root / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    return root


@pytest.fixture(scope="session")
def conformance_corpus():
    return json.loads((DATA / "conformance.json").read_text())
