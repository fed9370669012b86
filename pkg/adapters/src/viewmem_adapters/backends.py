"""Model backends behind the adapter endpoints.

Stub backends are fully deterministic and run anywhere; they exist so the
protocol surfaces can be driven and conformance-tested without model
weights. Real backends load lazily from `transformers` and are selected
by configuration.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Protocol

import numpy as np
from PIL import Image


@dataclass
class AdapterConfig:
    embed_model: str = "stub"
    segment_model: str = "stub"
    vlm_model: str = "stub"
    device: str = "cpu"
    batch_size: int = 8
    segment_port: int = 8001
    rerank_port: int = 8002
    embed_dim: int = 64  # stub embedding dimensionality

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        for port in (self.segment_port, self.rerank_port):
            if not 0 < port < 65536:
                raise ValueError(f"invalid port {port}")


class EmbeddingBackend(Protocol):
    def embed_images(self, images: list[Image.Image]) -> np.ndarray: ...
    def embed_text(self, text: str) -> np.ndarray: ...


class SegmentationBackend(Protocol):
    def segment(self, image: Image.Image, prompt: str) -> list[tuple[np.ndarray, float]]: ...


class VlmBackend(Protocol):
    def answer(self, image: Image.Image | None, prompt: str) -> str: ...


def _hash_fraction(*parts: str) -> float:
    digest = hashlib.sha256("\x1f".join(parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") / 2**64


class StubEmbeddingBackend:
    """Thumbnail-statistics embedding: deterministic, and near-duplicate
    images land close in cosine while distinct content separates."""

    def __init__(self, dim: int = 64):
        if dim < 8:
            raise ValueError("stub embedding dim must be >= 8")
        self.dim = dim

    def _embed_one(self, image: Image.Image) -> np.ndarray:
        side = int(np.ceil(np.sqrt(self.dim / 3)))
        thumb = np.asarray(
            image.convert("RGB").resize((side, side), Image.BILINEAR), dtype=np.float64
        )
        v = thumb.reshape(-1)[: self.dim]
        if len(v) < self.dim:
            v = np.pad(v, (0, self.dim - len(v)))
        v = v - v.mean()
        norm = np.linalg.norm(v)
        if norm == 0:
            v = np.ones(self.dim)
            norm = np.linalg.norm(v)
        return v / norm

    def embed_images(self, images: list[Image.Image]) -> np.ndarray:
        return np.stack([self._embed_one(img) for img in images])

    def embed_text(self, text: str) -> np.ndarray:
        rng = np.random.default_rng(int(_hash_fraction("text", text) * 2**32))
        v = rng.normal(size=self.dim)
        return v / np.linalg.norm(v)


class StubSegmentationBackend:
    """One centered box mask whose size and confidence derive from the
    prompt, keeping responses deterministic and dimension-correct."""

    def segment(self, image: Image.Image, prompt: str) -> list[tuple[np.ndarray, float]]:
        w, h = image.size
        frac = 0.2 + 0.3 * _hash_fraction("seg", prompt)
        mask = np.zeros((h, w), dtype=bool)
        dy, dx = int(h * frac / 2), int(w * frac / 2)
        mask[h // 2 - dy : h // 2 + dy + 1, w // 2 - dx : w // 2 + dx + 1] = True
        confidence = round(0.5 + 0.5 * _hash_fraction("conf", prompt), 4)
        return [(mask, confidence)]


class StubVlmBackend:
    """Grammar-conformant verdicts derived from the prompt hash."""

    def answer(self, image: Image.Image | None, prompt: str) -> str:
        fraction = _hash_fraction("vlm", prompt)
        score = int(fraction * 11) % 11
        return f"yes {score}" if fraction >= 0.5 else f"no {score}"


class TransformersEmbeddingBackend:
    """Contrastive image/text tower loaded via AutoModel (CLIP/SigLIP-family checkpoints)."""

    def __init__(self, model_id: str, device: str = "cpu"):
        from transformers import AutoModel, AutoProcessor  # lazy: heavy import

        self.model = AutoModel.from_pretrained(model_id).to(device).eval()
        self.processor = AutoProcessor.from_pretrained(model_id)
        self.device = device

    def embed_images(self, images):
        import torch

        with torch.no_grad():
            inputs = self.processor(images=images, return_tensors="pt").to(self.device)
            feats = self.model.get_image_features(**inputs)
            feats = feats / feats.norm(dim=-1, keepdim=True)
        return feats.cpu().numpy().astype(np.float64)

    def embed_text(self, text):
        import torch

        with torch.no_grad():
            inputs = self.processor(
                text=[text], padding="max_length", return_tensors="pt"
            ).to(self.device)
            feats = self.model.get_text_features(**inputs)
            feats = feats / feats.norm(dim=-1, keepdim=True)
        return feats.cpu().numpy()[0].astype(np.float64)


class TransformersSegmentationBackend:
    """Text-prompted segmentation (e.g. a CLIPSeg checkpoint); the sigmoid
    map is thresholded and its peak value reported as confidence."""

    def __init__(self, model_id: str, device: str = "cpu", threshold: float = 0.4):
        from transformers import AutoProcessor, CLIPSegForImageSegmentation

        self.model = CLIPSegForImageSegmentation.from_pretrained(model_id).to(device).eval()
        self.processor = AutoProcessor.from_pretrained(model_id)
        self.device = device
        self.threshold = threshold

    def segment(self, image, prompt):
        import torch

        with torch.no_grad():
            inputs = self.processor(
                text=[prompt], images=[image], return_tensors="pt"
            ).to(self.device)
            logits = self.model(**inputs).logits
            probs = torch.sigmoid(logits)[0].cpu().numpy()
        probs = np.asarray(
            Image.fromarray((probs * 255).astype(np.uint8)).resize(image.size, Image.BILINEAR),
            dtype=np.float64,
        ) / 255.0
        mask = probs >= self.threshold
        if not mask.any():
            return []
        return [(mask, float(probs.max()))]


class TransformersVlmBackend:
    """Image-text-to-text chat model answering the fixed verdict prompt."""

    def __init__(self, model_id: str, device: str = "cpu", max_new_tokens: int = 8):
        from transformers import pipeline  # lazy: heavy import

        self.pipe = pipeline("image-text-to-text", model=model_id, device=device)
        self.max_new_tokens = max_new_tokens

    def answer(self, image, prompt):
        messages = [
            {
                "role": "user",
                "content": (
                    [{"type": "image", "image": image}] if image is not None else []
                )
                + [{"type": "text", "text": prompt}],
            }
        ]
        out = self.pipe(text=messages, max_new_tokens=self.max_new_tokens)
        return out[0]["generated_text"][-1]["content"]


def make_embedding_backend(cfg: AdapterConfig) -> EmbeddingBackend:
    if cfg.embed_model == "stub":
        return StubEmbeddingBackend(cfg.embed_dim)
    return TransformersEmbeddingBackend(cfg.embed_model, cfg.device)


def make_segmentation_backend(cfg: AdapterConfig) -> SegmentationBackend:
    if cfg.segment_model == "stub":
        return StubSegmentationBackend()
    return TransformersSegmentationBackend(cfg.segment_model, cfg.device)


def make_vlm_backend(cfg: AdapterConfig) -> VlmBackend:
    if cfg.vlm_model == "stub":
        return StubVlmBackend()
    return TransformersVlmBackend(cfg.vlm_model, cfg.device)
