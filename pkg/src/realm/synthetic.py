"""Synthetic image/text/MOS sets for smoke training and tests.

Each image is a mid-grey canvas with a square whose brightness is the planted
visual feature. The description names one of four severity phrases. MOS is a
deterministic function of both, so either modality alone explains only part
of the target.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .dataset import DatasetManifest, RealnessRecord, save_manifest

SEVERITY_PHRASES = (
    "No. Nothing looks unrealistic.",
    "Somewhat. Slightly uneven lighting on the square object.",
    "Yes. The square object has warped, inconsistent edges.",
    "Yes. The square object is badly distorted and melts into the background.",
)


def smoke_mos(brightness: float, severity: int) -> float:
    """Realness on a 0-100 scale: brighter square and milder description are more real."""
    return 100.0 * (0.6 * brightness + 0.4 * (1.0 - severity / (len(SEVERITY_PHRASES) - 1)))


def make_smoke_dataset(out_dir, n: int = 32, size: int = 32, seed: int = 0) -> Path:
    """Write ``n`` PNG images plus ``manifest.jsonl`` into ``out_dir``; return the manifest path."""
    from PIL import Image

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        brightness = float(rng.uniform(0.0, 1.0))
        severity = int(rng.integers(0, len(SEVERITY_PHRASES)))
        canvas = np.full((size, size, 3), 0.5)
        canvas += rng.normal(0.0, 0.02, canvas.shape)
        lo, hi = size // 4, 3 * size // 4
        canvas[lo:hi, lo:hi, :] = brightness
        img = (np.clip(canvas, 0, 1) * 255).round().astype(np.uint8)
        name = f"images/smoke_{i:03d}.png"
        Image.fromarray(img).save(out_dir / name)
        phrase = SEVERITY_PHRASES[severity]
        verdict, _, description = phrase.partition(". ")
        records.append(RealnessRecord(
            id=f"smoke_{i:03d}",
            image_ref=name,
            mos=round(smoke_mos(brightness, severity), 6),
            verdict=verdict.lower(),
            description="" if verdict == "No" else description,
            source="synthetic",
        ))
    path = out_dir / "manifest.jsonl"
    save_manifest(DatasetManifest(records, provenance=[f"synthetic smoke set, seed={seed}"]), path)
    return path
