"""Dense realness mapping.

Overlapping square windows are scored against a text description of what
looks wrong in the image: a window whose embedding is close to the text gets
a low realness score (one minus cosine similarity). Scores are averaged per
pixel over every window covering it, scales are fused elementwise and the
result is min-max normalized to [0, 1].
"""

from __future__ import annotations

import hashlib
import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .embedding import EmbeddingBackend, EmbeddingVector, cosine_similarity, cosine_similarity_matrix
from .errors import InvalidInputError

FUSIONS = ("max", "min")
EDGE_POLICIES = ("edge-aligned-extra-window",)


@dataclass(frozen=True)
class DreamConfig:
    windows: tuple[int, ...] = (128, 64, 32)
    stride: int = 4
    fusion: str = "max"
    edge_policy: str = "edge-aligned-extra-window"

    def __post_init__(self):
        object.__setattr__(self, "windows", tuple(int(w) for w in self.windows))
        if not self.windows or any(w <= 0 for w in self.windows):
            raise InvalidInputError(f"windows must be positive, got {self.windows}")
        if self.stride < 1:
            raise InvalidInputError(f"stride must be >= 1, got {self.stride}")
        if self.fusion not in FUSIONS:
            raise InvalidInputError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.edge_policy not in EDGE_POLICIES:
            raise InvalidInputError(f"unknown edge policy {self.edge_policy!r}")


@dataclass(frozen=True)
class PatchGrid:
    window: int
    stride: int
    positions: np.ndarray  # (n, 2) int64 of (x0, y0), row-major
    image_size: tuple[int, int]  # (height, width)

    def boxes(self) -> np.ndarray:
        """(n, 4) array of half-open ``(x0, y0, x1, y1)`` rectangles."""
        return np.concatenate([self.positions, self.positions + self.window], axis=1)

    def __len__(self):
        return len(self.positions)


@dataclass
class ScaleMap:
    window: int
    sum_grid: np.ndarray
    count_grid: np.ndarray
    mean_grid: np.ndarray


@dataclass
class RealnessMap:
    fused_grid: np.ndarray
    final_grid: np.ndarray
    scales_used: list[int]
    description: str
    scale_maps: list[ScaleMap] = field(default_factory=list, repr=False)
    full_frame: bool = False

    @property
    def shape(self):
        return self.final_grid.shape


def _axis_starts(length: int, window: int, stride: int) -> list[int]:
    starts = list(range(0, length - window + 1, stride))
    if starts[-1] != length - window:
        starts.append(length - window)
    return starts


def extract_positions(image_size: tuple[int, int], window: int, stride: int) -> PatchGrid | None:
    """Sliding-window grid with extra edge-aligned windows for full coverage.

    Returns ``None`` when the window does not fit inside the image, which
    callers treat as "skip this scale". A stride larger than the window would
    leave gaps, so it is clamped to the window.
    """
    height, width = image_size
    if stride < 1 or window < 1:
        raise InvalidInputError(f"window and stride must be positive, got {window}, {stride}")
    if window > min(height, width):
        return None
    stride = min(stride, window)
    ys = _axis_starts(height, window, stride)
    xs = _axis_starts(width, window, stride)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    positions = np.stack([xx.ravel(), yy.ravel()], axis=1).astype(np.int64)
    return PatchGrid(window, stride, positions, (height, width))


def patch_realness(u: EmbeddingVector, v: EmbeddingVector) -> float:
    return 1.0 - cosine_similarity(u, v)


def patch_realness_batch(patch_vectors: np.ndarray, text: EmbeddingVector) -> np.ndarray:
    return 1.0 - cosine_similarity_matrix(patch_vectors, text.values)


def accumulate_scale(grid: PatchGrid, scores: Sequence[float]) -> ScaleMap:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(scores) != len(grid):
        raise InvalidInputError(f"{len(grid)} positions but {len(scores)} scores")
    height, width = grid.image_size
    total, count = kernels.accumulate_windows(grid.positions, grid.window, scores, height, width)
    if np.any(count < 1):
        raise InvalidInputError("patch grid leaves pixels uncovered")
    return ScaleMap(grid.window, total, count, total / count)


def fuse_scales(maps: Sequence[ScaleMap], fusion: str = "max") -> np.ndarray:
    if not maps:
        raise InvalidInputError("no scale maps to fuse")
    shape = maps[0].mean_grid.shape
    if any(m.mean_grid.shape != shape for m in maps):
        raise InvalidInputError("scale maps differ in shape")
    stack = np.stack([m.mean_grid for m in maps])
    if fusion == "max":
        return stack.max(axis=0)
    if fusion == "min":
        return stack.min(axis=0)
    raise InvalidInputError(f"fusion must be one of {FUSIONS}, got {fusion!r}")


def normalize_map(grid: np.ndarray) -> np.ndarray:
    """Global min-max to [0, 1]; a constant grid maps to 0.5 everywhere."""
    grid = np.asarray(grid, dtype=np.float64)
    if not np.all(np.isfinite(grid)):
        raise InvalidInputError("grid contains non-finite values")
    lo, hi = grid.min(), grid.max()
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.full_like(grid, 0.5)
    return (grid - lo) / (hi - lo)


def image_size_of(image) -> tuple[int, int]:
    if hasattr(image, "size") and not isinstance(image, np.ndarray):
        width, height = image.size
        return height, width
    arr = np.asarray(image)
    if arr.ndim < 2:
        raise InvalidInputError("image must be at least 2-D")
    return int(arr.shape[0]), int(arr.shape[1])


def _as_pil(image):
    if isinstance(image, np.ndarray):
        from PIL import Image

        arr = image
        if arr.dtype != np.uint8:
            arr = np.clip(arr * (255.0 if arr.max() <= 1.0 else 1.0), 0, 255).astype(np.uint8)
        return Image.fromarray(arr).convert("RGB")
    return image


def score_scale(image, grid: PatchGrid, text: EmbeddingVector, backend: EmbeddingBackend) -> ScaleMap:
    vectors = backend.encode_patch_matrix(image, grid.boxes())
    return accumulate_scale(grid, patch_realness_batch(vectors, text))


def compute_realness_map(image, description: str, backend: EmbeddingBackend,
                         config: DreamConfig | None = None, workers: int = 1) -> RealnessMap:
    """Full pipeline: positions, encoding, patch scores, per-scale means, fusion, normalization.

    ``workers > 1`` scores scales concurrently; results are assembled in the
    configured window order, so the output does not depend on scheduling.
    """
    config = config or DreamConfig()
    height, width = image_size_of(image)
    if height == 0 or width == 0:
        raise InvalidInputError("empty image")
    text = backend.encode_text(description)
    image = _as_pil(image) if backend.descriptor.name == "clip" else image

    grids = [g for g in (extract_positions((height, width), w, config.stride) for w in config.windows)
             if g is not None]
    full_frame = not grids
    if full_frame:
        vectors = backend.encode_patch_matrix(image, [(0, 0, width, height)])
        r = float(patch_realness_batch(vectors, text)[0])
        scale_maps = [ScaleMap(0, np.full((height, width), r), np.ones((height, width), np.int64),
                               np.full((height, width), r))]
    elif workers > 1 and len(grids) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scale_maps = list(pool.map(lambda g: score_scale(image, g, text, backend), grids))
    else:
        scale_maps = [score_scale(image, g, text, backend) for g in grids]

    fused = fuse_scales(scale_maps, config.fusion)
    return RealnessMap(
        fused_grid=fused,
        final_grid=normalize_map(fused),
        scales_used=[g.window for g in grids],
        description=description,
        scale_maps=scale_maps,
        full_frame=full_frame,
    )


@dataclass
class HeatmapRender:
    heatmap: np.ndarray  # (h, w, 3) uint8 colormapped realness
    overlay: np.ndarray  # (h, w, 3) uint8 heatmap blended over the image


def render_heatmap(rmap: RealnessMap, image=None, cmap: str = "RdYlGn", alpha: float = 0.5) -> HeatmapRender:
    """Colormap the final grid; with the default colormap low realness is red."""
    from matplotlib import colormaps

    grid = rmap.final_grid
    rgb = (colormaps[cmap](grid)[..., :3] * 255.0).round().astype(np.uint8)
    if image is None:
        return HeatmapRender(rgb, rgb.copy())
    base = np.asarray(_as_pil(image).convert("RGB"), dtype=np.float64)
    if base.shape[:2] != grid.shape:
        raise InvalidInputError(f"image is {base.shape[:2]}, map is {grid.shape}")
    overlay = ((1 - alpha) * base + alpha * rgb).round().clip(0, 255).astype(np.uint8)
    return HeatmapRender(rgb, overlay)


GRID_MAGIC = b"RLMGRID1"


def description_hash(description: str) -> str:
    return hashlib.sha256(description.encode("utf-8")).hexdigest()


def save_grid(path, grid: np.ndarray, scales_used: Sequence[int] = (), description: str = "") -> Path:
    """Write a float64 grid as ``magic | u32 header length | JSON header | raw little-endian data``."""
    grid = np.ascontiguousarray(grid, dtype="<f8")
    header = json.dumps({
        "height": int(grid.shape[0]),
        "width": int(grid.shape[1]),
        "dtype": "<f8",
        "scales_used": [int(s) for s in scales_used],
        "description_sha256": description_hash(description),
    }).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(grid.tobytes())
    return path


def load_grid(path) -> tuple[np.ndarray, dict]:
    with open(path, "rb") as fh:
        if fh.read(len(GRID_MAGIC)) != GRID_MAGIC:
            raise InvalidInputError(f"{path}: not a realness grid file")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n).decode("utf-8"))
        data = fh.read()
    grid = np.frombuffer(data, dtype=header["dtype"]).reshape(header["height"], header["width"])
    return grid.copy(), header


def save_heatmap(path, rgb: np.ndarray) -> Path:
    from PIL import Image

    Image.fromarray(rgb).save(path)
    return Path(path)
