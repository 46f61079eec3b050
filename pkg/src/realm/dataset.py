"""Realness-annotated manifests and train/test splitting.

A manifest is a JSON-lines file, one record per line::

    {"id": "img_0001", "image_ref": "images/img_0001.png", "mos": 62.4,
     "verdict": "somewhat", "description": "The text on the sign ...", "source": "raise"}

An optional first line ``{"_manifest": {"schema_version": 1, "provenance": [...]}}``
carries file-level metadata. Relative ``image_ref`` paths resolve against the
manifest's directory.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import InvalidInputError, SchemaError

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
VERDICTS = ("yes", "no", "somewhat", "unknown")
SOURCES = ("raise", "agin", "synthetic", "other")
REQUIRED = ("id", "image_ref", "mos")

RAISE_TEST_COUNT = 90
# per fold: 605 test, 610 validation, 4834 train out of 6049 AGIN images
AGIN_PROTOCOL = {"k": 5, "test_count": 605, "val_count": 610}


@dataclass(frozen=True)
class RealnessRecord:
    id: str
    image_ref: str
    mos: float
    description: str = ""
    verdict: str = "unknown"
    source: str = "other"
    annotation: dict | None = None  # provider + template version when machine-annotated

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "image_ref": self.image_ref,
            "mos": self.mos,
            "verdict": self.verdict,
            "description": self.description,
            "source": self.source,
        }
        if self.annotation is not None:
            d["annotation"] = self.annotation
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RealnessRecord":
        missing = [k for k in REQUIRED if k not in d]
        if missing:
            raise SchemaError(f"missing required field(s): {', '.join(missing)}", record_id=d.get("id"))
        try:
            mos = float(d["mos"])
        except (TypeError, ValueError):
            raise SchemaError(f"mos is not a number: {d['mos']!r}", record_id=d.get("id")) from None
        return cls(
            id=str(d["id"]),
            image_ref=str(d["image_ref"]),
            mos=mos,
            description=d.get("description") or "",
            verdict=d.get("verdict") or "unknown",
            source=d.get("source") or "other",
            annotation=d.get("annotation"),
        )

    def resolve(self, base_dir: Path | None = None) -> Path:
        p = Path(self.image_ref)
        if not p.is_absolute() and base_dir is not None:
            p = Path(base_dir) / p
        return p


def validate_record(record: RealnessRecord, base_dir: Path | None = None, strict: bool = False) -> list[str]:
    """Return a list of human-readable violations; empty when the record is valid.

    Image paths are only checked when ``strict`` is set, since manifests often
    travel without their image payloads.
    """
    violations = []
    if not record.id:
        violations.append("id: empty")
    if not isinstance(record.mos, (int, float)) or not math.isfinite(record.mos):
        violations.append(f"mos: not finite ({record.mos!r})")
    if record.verdict not in VERDICTS:
        violations.append(f"verdict: {record.verdict!r} not in {VERDICTS}")
    if record.source not in SOURCES:
        violations.append(f"source: {record.source!r} not in {SOURCES}")
    if record.verdict in ("yes", "somewhat") and not record.description.strip():
        violations.append(f"description: empty for verdict {record.verdict!r}")
    if strict and not record.resolve(base_dir).exists():
        violations.append(f"image_ref: not found ({record.image_ref})")
    return violations


@dataclass
class DatasetManifest:
    records: list[RealnessRecord]
    schema_version: int = SCHEMA_VERSION
    provenance: list[str] = field(default_factory=list)
    base_dir: Path | None = None
    has_header: bool = False

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def by_id(self) -> dict[str, RealnessRecord]:
        return {r.id: r for r in self.records}

    def with_records(self, records) -> "DatasetManifest":
        return replace(self, records=list(records))

    def image_path(self, record: RealnessRecord) -> Path:
        return record.resolve(self.base_dir)


def _check_unique(records: Sequence[RealnessRecord], lines: Sequence[int] | None = None):
    seen = {}
    for i, r in enumerate(records):
        if r.id in seen:
            line = lines[i] if lines else None
            raise SchemaError(f"duplicate id {r.id!r} (first seen at record {seen[r.id] + 1})",
                              line=line, record_id=r.id)
        seen[r.id] = i


def load_manifest(path, strict: bool = False) -> DatasetManifest:
    """Parse and validate a JSON-lines manifest.

    Every malformed line is collected and reported together, each with its
    line number. Missing image files are logged as warnings, or raised
    under ``strict``.
    """
    path = Path(path)
    records, lines, errors = [], [], []
    header = None
    with open(path, encoding="utf-8") as fh:
        for lineno, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                obj = json.loads(text)
            except json.JSONDecodeError as exc:
                errors.append(f"line {lineno}: invalid JSON ({exc.msg})")
                continue
            if not isinstance(obj, dict):
                errors.append(f"line {lineno}: expected an object")
                continue
            if "_manifest" in obj:
                if records or header is not None:
                    errors.append(f"line {lineno}: manifest header must be the first line")
                header = obj["_manifest"]
                continue
            try:
                rec = RealnessRecord.from_dict(obj)
            except SchemaError as exc:
                errors.append(f"line {lineno}: {exc}")
                continue
            problems = validate_record(rec, path.parent, strict=strict)
            if problems:
                errors.extend(f"line {lineno}: {rec.id}: {p}" for p in problems)
                continue
            records.append(rec)
            lines.append(lineno)
    if errors:
        raise SchemaError("; ".join(errors))
    if not records:
        raise InvalidInputError(f"{path}: manifest has no records")
    _check_unique(records, lines)
    if not strict:
        missing = [r.id for r in records if not r.resolve(path.parent).exists()]
        if missing:
            log.warning("%d image(s) not found, e.g. %s", len(missing), missing[0])
    header = header or {}
    return DatasetManifest(
        records=records,
        schema_version=int(header.get("schema_version", SCHEMA_VERSION)),
        provenance=list(header.get("provenance", [])),
        base_dir=path.parent,
        has_header=bool(header),
    )


def save_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        if manifest.has_header or manifest.provenance or manifest.schema_version != SCHEMA_VERSION:
            fh.write(json.dumps({"_manifest": {"schema_version": manifest.schema_version,
                                               "provenance": manifest.provenance}}) + "\n")
        for r in manifest.records:
            fh.write(json.dumps(r.to_dict(), ensure_ascii=False) + "\n")
    tmp.replace(path)
    return path


@dataclass(frozen=True)
class SplitSpec:
    kind: str = "holdout"
    test_count: int | None = None  # holdout falls back to RAISE_TEST_COUNT
    k: int = 5
    seed: int = 0
    val_count: int = 0

    def __post_init__(self):
        if self.kind not in ("holdout", "kfold"):
            raise InvalidInputError(f"split kind must be holdout or kfold, got {self.kind!r}")
        if self.kind == "kfold" and self.k < 2:
            raise InvalidInputError(f"k must be >= 2, got {self.k}")


class Fold(NamedTuple):
    train: list[RealnessRecord]
    test: list[RealnessRecord]
    val: list[RealnessRecord] = []


def _permutation(n: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).permutation(n)


def split_holdout(manifest: DatasetManifest, spec: SplitSpec | int = RAISE_TEST_COUNT,
                  seed: int | None = None) -> tuple[list[RealnessRecord], list[RealnessRecord]]:
    """Seeded random train/test partition. Records keep manifest order inside each side."""
    if isinstance(spec, int):
        spec = SplitSpec("holdout", test_count=spec, seed=0 if seed is None else seed)
    elif seed is not None:
        spec = replace(spec, seed=seed)
    n = len(manifest.records)
    tc = RAISE_TEST_COUNT if spec.test_count is None else spec.test_count
    if tc is None or not 0 < tc < n:
        raise InvalidInputError(f"test_count must be in [1, {n - 1}], got {tc}")
    test_idx = set(_permutation(n, spec.seed)[:tc].tolist())
    train = [r for i, r in enumerate(manifest.records) if i not in test_idx]
    test = [r for i, r in enumerate(manifest.records) if i in test_idx]
    return train, test


def split_from_ids(manifest: DatasetManifest, test_ids: Sequence[str]):
    """Holdout split from an explicit list of test ids (e.g. a published partition)."""
    wanted = set(test_ids)
    unknown = wanted - set(manifest.ids())
    if unknown:
        raise InvalidInputError(f"{len(unknown)} test id(s) not in manifest, e.g. {sorted(unknown)[0]!r}")
    if not wanted or len(wanted) >= len(manifest):
        raise InvalidInputError("test id list must be a nonempty proper subset")
    train = [r for r in manifest.records if r.id not in wanted]
    test = [r for r in manifest.records if r.id in wanted]
    return train, test


def split_kfold(manifest: DatasetManifest, k: int = 5, seed: int = 0,
                test_count: int | None = None, val_count: int = 0) -> list[Fold]:
    """K-fold splits over a seeded permutation.

    Without ``test_count`` the test folds partition the whole manifest, with
    the remainder spread one extra record over the first folds. With
    ``test_count`` each fold tests on its own disjoint block of that size
    (``AGIN_PROTOCOL`` uses this). ``val_count`` records following the test
    block, cyclically, are held out for validation.
    """
    n = len(manifest.records)
    if k < 2:
        raise InvalidInputError(f"k must be >= 2, got {k}")
    if k > n:
        raise InvalidInputError(f"k={k} exceeds {n} records")
    perm = _permutation(n, seed)
    if test_count is None:
        blocks = np.array_split(perm, k)
        starts = np.cumsum([0] + [len(b) for b in blocks[:-1]])
    else:
        if test_count < 1 or k * test_count > n:
            raise InvalidInputError(f"{k} folds of {test_count} test records exceed {n} records")
        starts = [i * test_count for i in range(k)]
        blocks = [perm[s:s + test_count] for s in starts]
    folds = []
    for start, block in zip(starts, blocks):
        if len(block) + val_count >= n:
            raise InvalidInputError("validation and test leave no training records")
        val_pos = (start + len(block) + np.arange(val_count)) % n
        test_set = set(block.tolist())
        val_set = set(perm[val_pos].tolist())
        folds.append(Fold(
            train=[r for i, r in enumerate(manifest.records) if i not in test_set and i not in val_set],
            test=[r for i, r in enumerate(manifest.records) if i in test_set],
            val=[r for i, r in enumerate(manifest.records) if i in val_set],
        ))
    return folds


def carve_validation(train: Sequence[RealnessRecord], val_count: int, seed: int = 0) -> Fold:
    """Move a seeded sample of ``val_count`` training records into a validation set.

    The returned fold has an empty test side; the caller's test set is untouched.
    """
    if val_count < 0 or val_count >= len(train):
        raise InvalidInputError(f"val_count must be in [0, {len(train) - 1}], got {val_count}")
    picked = set(_permutation(len(train), seed)[:val_count].tolist())
    return Fold(train=[r for i, r in enumerate(train) if i not in picked], test=[],
                val=[r for i, r in enumerate(train) if i in picked])


def split(manifest: DatasetManifest, spec: SplitSpec):
    if spec.kind == "holdout":
        train, test = split_holdout(manifest, spec)
        carved = carve_validation(train, spec.val_count, spec.seed)
        return [Fold(carved.train, test, carved.val)]
    return split_kfold(manifest, spec.k, spec.seed, spec.test_count, spec.val_count)
