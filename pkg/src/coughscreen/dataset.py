"""Manifest parsing, fold splits, patch datasets and class balancing."""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .spectro import Patch, load_png, save_png

MANIFEST_COLUMNS = ("id", "path", "label", "gender", "fold")
TEST_FOLD = "test"
LABELS = {"negative": 0, "positive": 1, "n": 0, "p": 1, "0": 0, "1": 1}
LABEL_NAMES = ("negative", "positive")
GENDER_TOKENS = {"female": "female", "male": "male", "f": "female", "m": "male"}


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class SampleRecord:
    id: str
    path: str
    label: int | None  # 0 negative, 1 positive, None when unknown
    gender: str | None
    fold: int | str  # fold index, or TEST_FOLD

    @property
    def is_test(self) -> bool:
        return self.fold == TEST_FOLD


def _parse_row(row: dict, line: int, base: Path) -> SampleRecord:
    rid = (row.get("id") or "").strip()
    if not rid:
        raise ManifestError(f"line {line}, column 'id': empty id")
    label_tok = (row.get("label") or "").strip().lower()
    if label_tok == "":
        label = None
    elif label_tok in LABELS:
        label = LABELS[label_tok]
    else:
        raise ManifestError(f"line {line}, column 'label': unknown label {row.get('label')!r}")
    gender_tok = (row.get("gender") or "").strip().lower()
    if gender_tok == "":
        gender = None
    elif gender_tok in GENDER_TOKENS:
        gender = GENDER_TOKENS[gender_tok]
    else:
        raise ManifestError(f"line {line}, column 'gender': unknown gender {row.get('gender')!r}")
    fold_tok = (row.get("fold") or "").strip().lower()
    if fold_tok == TEST_FOLD:
        fold: int | str = TEST_FOLD
    else:
        try:
            fold = int(fold_tok)
        except ValueError:
            raise ManifestError(f"line {line}, column 'fold': expected an integer or 'test', got {row.get('fold')!r}") from None
        if fold < 0:
            raise ManifestError(f"line {line}, column 'fold': negative fold {fold}")
    path = (row.get("path") or "").strip()
    if path and not Path(path).is_absolute():
        path = str(base / path)
    return SampleRecord(rid, path, label, gender, fold)


def load_manifest(path) -> list[SampleRecord]:
    """Read and validate a ``id,path,label,gender,fold`` CSV.

    Relative audio paths are resolved against the manifest's directory.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        missing = [c for c in MANIFEST_COLUMNS if c not in header]
        if missing:
            raise ManifestError(f"{path}: missing columns {missing}")
        reader.fieldnames = header
        records = []
        seen: set[str] = set()
        for line, row in enumerate(reader, start=2):
            rec = _parse_row(row, line, path.parent)
            if rec.id in seen:
                raise ManifestError(f"line {line}, column 'id': duplicate id {rec.id!r}")
            seen.add(rec.id)
            records.append(rec)
    return records


def write_manifest(path, records) -> None:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_COLUMNS)
        for r in records:
            label = "" if r.label is None else LABEL_NAMES[r.label]
            w.writerow([r.id, r.path, label, r.gender or "", r.fold])


def class_counts(records) -> tuple[int, int]:
    """(negatives, positives) among labelled records."""
    c = Counter(r.label for r in records if r.label is not None)
    return c[0], c[1]


def split_folds(records, k: int, val_fold: int) -> tuple[list[SampleRecord], list[SampleRecord]]:
    """Validation = records in ``val_fold``; train = every other non-test record."""
    if not 0 <= val_fold < k:
        raise ValueError(f"val_fold {val_fold} outside [0, {k - 1}]")
    train, val = [], []
    for r in records:
        if r.is_test:
            continue
        if not 0 <= r.fold < k:
            raise ValueError(f"record {r.id!r} has fold {r.fold} outside [0, {k - 1}]")
        (val if r.fold == val_fold else train).append(r)
    return train, val


def assign_stratified_folds(labels, k: int, rng: np.random.Generator) -> np.ndarray:
    """Fold ids such that each class is spread round-robin over ``k`` folds after a shuffle."""
    labels = np.asarray(labels)
    folds = np.empty(len(labels), dtype=np.int64)
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(len(idx))]
        folds[idx] = np.arange(len(idx)) % k
    return folds


def shuffle_labels(records, rng: np.random.Generator) -> list[SampleRecord]:
    """Permute labels across labelled records (a leakage control: AUC should drop to chance)."""
    records = list(records)
    idx = [i for i, r in enumerate(records) if r.label is not None]
    perm = rng.permutation(len(idx))
    labels = [records[i].label for i in idx]
    out = list(records)
    for j, i in enumerate(idx):
        out[i] = replace(records[i], label=labels[perm[j]])
    return out


# --- patch datasets ---------------------------------------------------------

@dataclass(frozen=True)
class PatchItem:
    patch: Patch
    label: int
    gender: str | None
    source_id: str


class PatchDataset:
    """Immutable sequence of labelled patches."""

    def __init__(self, items):
        self.items: tuple[PatchItem, ...] = tuple(items)

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def __getitem__(self, i):
        return self.items[i]

    @property
    def labels(self) -> np.ndarray:
        return np.array([it.label for it in self.items], dtype=np.int64)

    def source_ids(self) -> set[str]:
        return {it.source_id for it in self.items}

    def counts(self) -> tuple[int, int]:
        c = Counter(it.label for it in self.items)
        return c[0], c[1]

    def subset(self, predicate) -> "PatchDataset":
        return PatchDataset(it for it in self.items if predicate(it))

    @classmethod
    def from_records(cls, records, patches_by_id: dict[str, list[Patch]]) -> "PatchDataset":
        items = []
        for r in records:
            if r.id not in patches_by_id:
                raise KeyError(f"no patches for recording {r.id!r}")
            if r.label is None:
                raise ValueError(f"recording {r.id!r} has no label")
            items.extend(PatchItem(p, r.label, r.gender, r.id) for p in patches_by_id[r.id])
        return cls(items)


def balance_by_replication(ds: PatchDataset) -> PatchDataset:
    """Replicate minority-class patches until both classes have equal counts.

    With ``k = n_major // n_minor``, every minority item appears ``k`` times and
    the first ``n_major - k * n_minor`` of them once more. Replicas are the
    same objects as the originals; the majority class is untouched. Order is
    originals first, then replicas; shuffling is the caller's job.
    """
    n_neg, n_pos = ds.counts()
    if n_neg == 0 or n_pos == 0:
        raise ValueError(f"cannot balance: class counts negative={n_neg}, positive={n_pos}")
    if n_neg == n_pos:
        return ds
    minority = 1 if n_pos < n_neg else 0
    n_major, n_minor = max(n_neg, n_pos), min(n_neg, n_pos)
    k = n_major // n_minor
    extra = n_major - k * n_minor
    minor_items = [it for it in ds.items if it.label == minority]
    replicas = []
    for i, it in enumerate(minor_items):
        replicas.extend([it] * (k - 1 + (1 if i < extra else 0)))
    return PatchDataset(ds.items + tuple(replicas))


# --- on-disk patch cache ----------------------------------------------------

INDEX_FILE = "index.csv"


def write_patch_cache(cache_dir, source_id: str, patches) -> list[tuple[str, int, str]]:
    """Store one recording's patches as ``<cache>/<id>/<start_ms>.png``; returns index rows."""
    cache_dir = Path(cache_dir)
    rec_dir = cache_dir / source_id
    rec_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for p in patches:
        rel = f"{source_id}/{p.start_ms}.png"
        save_png(p.image, cache_dir / rel)
        rows.append((source_id, p.start_ms, rel))
    return rows


def write_cache_index(cache_dir, rows) -> Path:
    path = Path(cache_dir) / INDEX_FILE
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("id", "start_ms", "file"))
        for row in sorted(rows, key=lambda r: (r[0], int(r[1]))):
            w.writerow(row)
    return path


def read_patch_cache(cache_dir, ids=None) -> dict[str, list[Patch]]:
    """Load cached patches grouped by recording id (in start-time order)."""
    cache_dir = Path(cache_dir)
    wanted = None if ids is None else set(ids)
    out: dict[str, list[Patch]] = {}
    with open(cache_dir / INDEX_FILE, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            rid = row["id"]
            if wanted is not None and rid not in wanted:
                continue
            image = load_png(cache_dir / row["file"])
            out.setdefault(rid, []).append(Patch(image, rid, int(row["start_ms"]) / 1000.0))
    for plist in out.values():
        plist.sort(key=lambda p: p.start_s)
    return out
