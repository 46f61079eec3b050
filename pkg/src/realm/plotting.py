"""Static figures: prediction-vs-MOS scatter."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import EvalReport  # noqa: E402


def scatter_plot(reports: Sequence[EvalReport], path, labels: Sequence[str] | None = None,
                 title: str = "Predicted realness vs. MOS") -> Path:
    """Overlay one scatter per report with a y = x reference line."""
    labels = labels or [r.model or r.split for r in reports]
    fig, ax = plt.subplots(figsize=(5, 5))
    lo, hi = float("inf"), float("-inf")
    for rep, label in zip(reports, labels):
        mos = [s[1] for s in rep.samples]
        pred = [s[2] for s in rep.samples]
        lo = min(lo, min(mos), min(pred))
        hi = max(hi, max(mos), max(pred))
        ax.scatter(mos, pred, s=14, alpha=0.7, label=f"{label} (SROCC {rep.srocc:.3f})")
    ax.plot([lo, hi], [lo, hi], "k--", linewidth=1)
    ax.set_xlabel("MOS")
    ax.set_ylabel("Prediction")
    ax.set_title(title)
    ax.legend(loc="upper left", fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
