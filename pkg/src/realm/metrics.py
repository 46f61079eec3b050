"""SROCC / PLCC and evaluation reports."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import InvalidInputError


def _pair(predictions, targets) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(predictions, dtype=np.float64).reshape(-1)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise InvalidInputError(f"length mismatch: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise InvalidInputError("need at least two samples for a correlation")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise InvalidInputError("non-finite values in correlation input")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise InvalidInputError("correlation undefined for constant input")
    return x, y


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt(np.dot(xc, xc)) * np.sqrt(np.dot(yc, yc))
    if not np.isfinite(denom) or denom == 0.0:
        raise InvalidInputError("correlation undefined: input has no variance at float precision")
    r = float(np.dot(xc, yc) / denom)
    return min(1.0, max(-1.0, r))


def plcc(predictions: Sequence[float], targets: Sequence[float]) -> float:
    """Pearson correlation on raw values (no logistic pre-fit)."""
    return _pearson(*_pair(predictions, targets))


def srocc(predictions: Sequence[float], targets: Sequence[float]) -> float:
    """Spearman correlation: Pearson of average-tie ranks."""
    x, y = _pair(predictions, targets)
    return _pearson(rankdata(x, method="average"), rankdata(y, method="average"))


@dataclass
class EvalReport:
    split: str
    n: int
    srocc: float
    plcc: float
    samples: list[tuple[str, float, float]] = field(default_factory=list)  # (id, mos, prediction)
    model: str = ""

    @classmethod
    def from_predictions(cls, split, ids, mos, predictions, model=""):
        ids = list(ids)
        if not ids:
            raise InvalidInputError("cannot evaluate an empty record set")
        return cls(
            split=split,
            n=len(ids),
            srocc=srocc(predictions, mos),
            plcc=plcc(predictions, mos),
            samples=[(i, float(m), float(p)) for i, m, p in zip(ids, mos, predictions)],
            model=model,
        )

    def write(self, path) -> Path:
        """Line-delimited records: one summary line then one line per sample."""
        path = Path(path)
        with open(path, "w", encoding="utf-8") as fh:
            summary = {k: v for k, v in asdict(self).items() if k != "samples"}
            fh.write(json.dumps({"summary": summary}) + "\n")
            for sid, mos, pred in self.samples:
                fh.write(json.dumps({"id": sid, "mos": mos, "prediction": pred}) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "EvalReport":
        with open(path, encoding="utf-8") as fh:
            lines = [json.loads(line) for line in fh if line.strip()]
        if not lines or "summary" not in lines[0]:
            raise InvalidInputError(f"{path}: missing report summary line")
        summary = lines[0]["summary"]
        samples = [(r["id"], r["mos"], r["prediction"]) for r in lines[1:]]
        return cls(samples=samples, **summary)

    def summary_line(self) -> str:
        label = f"{self.model} / {self.split}" if self.model else self.split
        return f"{label:<32} n={self.n:<6d} SROCC={self.srocc:.4f}  PLCC={self.plcc:.4f}"


def format_table(rows: Sequence[tuple[str, float, float]], title: str = "") -> str:
    """Plain-text table of (label, SROCC, PLCC) rows."""
    width = max([len("Inputs")] + [len(r[0]) for r in rows])
    lines = [title] if title else []
    lines.append(f"{'Inputs':<{width}}  {'SROCC':>7}  {'PLCC':>7}")
    lines.append("-" * (width + 18))
    for label, s, p in rows:
        lines.append(f"{label:<{width}}  {s:>7.4f}  {p:>7.4f}")
    return "\n".join(lines)


def evaluate(model, records, mode="joint", split="test", batch_size=16) -> EvalReport:
    """Predict every record and correlate with MOS."""
    from .core import predict_batch

    records = list(records)
    if not records:
        raise InvalidInputError("cannot evaluate an empty record set")
    preds = predict_batch(model, records, mode, batch_size=batch_size)
    return EvalReport.from_predictions(
        split, [r.id for r in records], [r.mos for r in records], preds, model=str(mode)
    )
