"""Joint image/text embedding backends used by dense realness mapping.

Two backends ship here. :class:`ClipBackend` wraps a pretrained contrastive
vision-language model through ``transformers``; :class:`MockFieldBackend` is
a deterministic stand-in whose patch vectors depend only on patch geometry,
so localization can be checked against closed-form expectations.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import kernels
from .errors import BackendError, ConfigurationError, InvalidInputError


@dataclass(frozen=True, eq=False)
class EmbeddingVector:
    """A finite, nonzero vector in a joint embedding space."""

    values: np.ndarray
    dim: int = field(default=-1)

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64).reshape(-1)
        dim = arr.shape[0] if self.dim == -1 else self.dim
        if dim <= 0 or arr.shape[0] != dim:
            raise InvalidInputError(f"expected {dim} values, got {arr.shape[0]}")
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError("embedding contains non-finite values")
        if not np.any(arr):
            raise InvalidInputError("zero vector is not a valid embedding")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "dim", dim)

    def __eq__(self, other):
        if not isinstance(other, EmbeddingVector):
            return NotImplemented
        return self.dim == other.dim and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash(self.values.tobytes())

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def normalized(self) -> "EmbeddingVector":
        return EmbeddingVector(self.values / self.norm)


def cosine_similarity(a: EmbeddingVector, b: EmbeddingVector) -> float:
    """Cosine of the angle between two embeddings, clamped to [-1, 1]."""
    if a.dim != b.dim:
        raise InvalidInputError(f"dimension mismatch: {a.dim} vs {b.dim}")
    cos = float(np.dot(a.values, b.values) / (a.norm * b.norm))
    return min(1.0, max(-1.0, cos))


def cosine_similarity_matrix(vectors: np.ndarray, text: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity of an (n, d) matrix against one d-vector."""
    vectors = np.asarray(vectors, dtype=np.float64)
    text = np.asarray(text, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[1] != text.shape[0]:
        raise InvalidInputError(f"dimension mismatch: {vectors.shape} vs {text.shape}")
    norms = np.linalg.norm(vectors, axis=1) * np.linalg.norm(text)
    if np.any(norms == 0):
        raise InvalidInputError("zero vector is not a valid embedding")
    return np.clip(vectors @ text / norms, -1.0, 1.0)


class PatchBox(NamedTuple):
    """Half-open pixel rectangle ``[x0, x1) x [y0, y1)``."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def area(self) -> int:
        return max(0, self.x1 - self.x0) * max(0, self.y1 - self.y0)


@dataclass(frozen=True)
class BackendDescriptor:
    name: str
    embedding_dim: int
    max_batch: int

    def __post_init__(self):
        if self.embedding_dim <= 0 or self.max_batch <= 0:
            raise ConfigurationError("embedding_dim and max_batch must be positive")


def _as_boxes(patches) -> np.ndarray:
    boxes = np.asarray([tuple(p) for p in patches], dtype=np.int64).reshape(-1, 4)
    if len(boxes) and np.any((boxes[:, 2] <= boxes[:, 0]) | (boxes[:, 3] <= boxes[:, 1])):
        bad = int(np.argmax((boxes[:, 2] <= boxes[:, 0]) | (boxes[:, 3] <= boxes[:, 1])))
        raise InvalidInputError(f"patch {bad} has zero area: {tuple(boxes[bad])}")
    return boxes


class EmbeddingBackend:
    """Base class for patch/text encoders.

    Subclasses implement ``_encode_text`` and ``_encode_batch``. Batching,
    validation and error wrapping live here so that every backend batches
    the same way and preserves input order.
    """

    descriptor: BackendDescriptor

    def encode_text(self, description: str) -> EmbeddingVector:
        if not isinstance(description, str) or not description.strip():
            raise InvalidInputError("description must be a non-empty string")
        try:
            raw = self._encode_text(description.strip())
        except (InvalidInputError, ConfigurationError):
            raise
        except Exception as exc:
            raise BackendError(f"{self.descriptor.name}: text encoding failed") from exc
        return self._check(raw)

    def encode_patch_matrix(self, image, patches: Sequence) -> np.ndarray:
        """Encode patches into an ``(n, dim)`` float64 matrix, batching internally."""
        boxes = _as_boxes(patches)
        step = self.descriptor.max_batch
        out = np.empty((len(boxes), self.descriptor.embedding_dim), dtype=np.float64)
        for start in range(0, len(boxes), step):
            chunk = boxes[start:start + step]
            try:
                rows = np.asarray(self._encode_batch(image, chunk), dtype=np.float64)
            except (InvalidInputError, ConfigurationError):
                raise
            except Exception as exc:
                raise BackendError(f"{self.descriptor.name}: patch encoding failed") from exc
            if rows.shape != (len(chunk), self.descriptor.embedding_dim):
                raise BackendError(
                    f"{self.descriptor.name}: expected {(len(chunk), self.descriptor.embedding_dim)}, "
                    f"got {rows.shape}"
                )
            out[start:start + len(chunk)] = rows
        if not np.all(np.isfinite(out)) or np.any(~out.any(axis=1)):
            raise BackendError(f"{self.descriptor.name}: emitted a zero or non-finite vector")
        return out

    def encode_patches(self, image, patches: Sequence) -> list[EmbeddingVector]:
        return [EmbeddingVector(row) for row in self.encode_patch_matrix(image, patches)]

    def _check(self, raw) -> EmbeddingVector:
        vec = EmbeddingVector(np.asarray(raw, dtype=np.float64).reshape(-1))
        if vec.dim != self.descriptor.embedding_dim:
            raise BackendError(
                f"{self.descriptor.name}: emitted dim {vec.dim}, declared {self.descriptor.embedding_dim}"
            )
        return vec

    def _encode_text(self, description: str):
        raise NotImplementedError

    def _encode_batch(self, image, boxes: np.ndarray):
        raise NotImplementedError


@dataclass(frozen=True)
class PlantedRegion:
    box: PatchBox
    vector: EmbeddingVector


class MockFieldBackend(EmbeddingBackend):
    """Geometry-only backend for oracle tests.

    Each patch gets the normalized convex combination of the base vector and
    every planted region's vector, weighted by the fraction of the patch area
    that the region covers. Text always encodes to ``text_vector``. The image
    argument is ignored apart from being passed through.
    """

    def __init__(self, base_vector, text_vector, regions=(), max_batch=64, name="mock"):
        self.base_vector = _coerce(base_vector)
        self.text_vector = _coerce(text_vector)
        self.regions = [
            r if isinstance(r, PlantedRegion) else PlantedRegion(PatchBox(*r[0]), _coerce(r[1]))
            for r in regions
        ]
        dim = self.base_vector.dim
        if self.text_vector.dim != dim or any(r.vector.dim != dim for r in self.regions):
            raise InvalidInputError("all mock vectors must share one dimension")
        self.descriptor = BackendDescriptor(name, dim, max_batch)
        self._region_boxes = np.asarray([tuple(r.box) for r in self.regions], dtype=np.int64).reshape(-1, 4)
        self._region_vecs = np.asarray([r.vector.values for r in self.regions]).reshape(-1, dim)
        self.batch_calls = 0

    @classmethod
    def from_config(cls, cfg: dict) -> "MockFieldBackend":
        regions = [(tuple(r["box"]), r["vector"]) for r in cfg.get("regions", [])]
        return cls(cfg["base_vector"], cfg["text_vector"], regions, max_batch=cfg.get("max_batch", 64))

    def _encode_text(self, description):
        return self.text_vector.values

    def _encode_batch(self, image, boxes):
        self.batch_calls += 1
        frac = kernels.overlap_fractions(boxes, self._region_boxes)
        weight_base = np.clip(1.0 - frac.sum(axis=1), 0.0, None)
        mixed = weight_base[:, None] * self.base_vector.values + frac @ self._region_vecs
        return mixed / np.linalg.norm(mixed, axis=1, keepdims=True)


def _coerce(v) -> EmbeddingVector:
    return v if isinstance(v, EmbeddingVector) else EmbeddingVector(v)


class ClipBackend(EmbeddingBackend):
    """Pretrained contrastive vision-language model via ``transformers``.

    Each patch is cropped from the image and resized independently by the
    model's processor to its native input resolution. Weights load lazily on
    first use; a lock makes concurrent first calls safe.
    """

    DEFAULT_MODEL = "openai/clip-vit-base-patch32"

    def __init__(self, model_path: str | None = None, max_batch: int = 32, device: str = "cpu",
                 embedding_dim: int = 512):
        self.model_path = model_path or self.DEFAULT_MODEL
        self.device = device
        self.descriptor = BackendDescriptor("clip", embedding_dim, max_batch)
        self._model = None
        self._processor = None
        self._lock = threading.Lock()

    def _load(self):
        with self._lock:
            if self._model is None:
                try:
                    from transformers import CLIPModel, CLIPProcessor

                    processor = CLIPProcessor.from_pretrained(self.model_path)
                    model = CLIPModel.from_pretrained(self.model_path).to(self.device).eval()
                except Exception as exc:
                    raise ConfigurationError(f"cannot load CLIP weights from {self.model_path!r}") from exc
                if model.config.projection_dim != self.descriptor.embedding_dim:
                    raise ConfigurationError(
                        f"model projects to {model.config.projection_dim}-D, "
                        f"backend declared {self.descriptor.embedding_dim}-D"
                    )
                self._processor, self._model = processor, model
        return self._model, self._processor

    def _encode_text(self, description):
        import torch

        model, processor = self._load()
        inputs = processor(text=[description], return_tensors="pt", padding=True, truncation=True)
        with torch.no_grad():
            feats = model.get_text_features(**{k: v.to(self.device) for k, v in inputs.items()})
        return _features(feats)[0]

    def _encode_batch(self, image, boxes):
        import torch

        model, processor = self._load()
        crops = [image.crop(tuple(int(v) for v in box)) for box in boxes]
        inputs = processor(images=crops, return_tensors="pt")
        with torch.no_grad():
            feats = model.get_image_features(pixel_values=inputs["pixel_values"].to(self.device))
        return _features(feats)


def _features(out) -> np.ndarray:
    # newer transformers may wrap projected features in a model output
    tensor = getattr(out, "pooler_output", out)
    return tensor.detach().cpu().double().numpy()


def get_backend(config: dict | str) -> EmbeddingBackend:
    """Build a backend from ``{"name": ..., ...}`` or a bare name."""
    if isinstance(config, str):
        config = {"name": config}
    name = config.get("name", "clip")
    if name == "clip":
        return ClipBackend(
            model_path=config.get("model_path"),
            max_batch=int(config.get("max_batch", 32)),
            device=config.get("device", "cpu"),
            embedding_dim=int(config.get("embedding_dim", 512)),
        )
    if name == "mock":
        try:
            return MockFieldBackend.from_config(config)
        except KeyError as exc:
            raise ConfigurationError(f"mock backend config missing {exc}") from exc
    raise ConfigurationError(f"unknown embedding backend {name!r}")


def encode_text(description: str, backend: EmbeddingBackend) -> EmbeddingVector:
    return backend.encode_text(description)


def encode_patches(image, patches, backend: EmbeddingBackend) -> list[EmbeddingVector]:
    return backend.encode_patches(image, patches)
