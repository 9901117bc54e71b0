"""Dataset manifests, class grouping, fold subsampling and dataset merging.

Manifest file format (UTF-8, comma separated)::

    # name=covid
    # class_names=Covid|Non-Covid|Normal
    sample_id,path,label,split
    a001,train/covid/a001.png,0,train
    ...

Header comment lines are optional; without ``class_names`` the class count is
inferred as ``max(label) + 1``. Optional extra columns ``fold`` and
``observed_label`` are read when present and written when set.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from nlbench.rng import derive_seed

REQUIRED_COLUMNS = ("sample_id", "path", "label", "split")
SPLITS = ("train", "test")


class ManifestError(ValueError):
    """Raised for malformed manifests or grouping files."""


@dataclass(frozen=True)
class Record:
    sample_id: str
    path: str
    label: int
    split: str
    fold: int | None = None
    observed: int | None = None

    @property
    def train_label(self) -> int:
        """Label seen by a supervised learner: the observed (possibly noisy) one if set."""
        return self.label if self.observed is None else self.observed


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[Record, ...]
    class_names: tuple[str, ...]
    name: str = "dataset"
    base_dir: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        c = len(self.class_names)
        seen: set[str] = set()
        for r in self.records:
            if r.sample_id in seen:
                raise ManifestError(f"duplicate sample_id {r.sample_id!r}")
            seen.add(r.sample_id)
            if not 0 <= r.label < c:
                raise ManifestError(f"label {r.label} of {r.sample_id!r} outside [0, {c})")
            if r.observed is not None and not 0 <= r.observed < c:
                raise ManifestError(f"observed label {r.observed} of {r.sample_id!r} outside [0, {c})")
            if r.split not in SPLITS:
                raise ManifestError(f"unknown split {r.split!r} for {r.sample_id!r}")
            if r.split == "test" and r.fold is not None:
                raise ManifestError(f"test record {r.sample_id!r} carries a fold")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def split(self, split: str) -> list[Record]:
        return [r for r in self.records if r.split == split]

    @property
    def train(self) -> list[Record]:
        return self.split("train")

    @property
    def test(self) -> list[Record]:
        return self.split("test")

    def labels(self, split: str = "train", observed: bool = False) -> np.ndarray:
        recs = self.split(split)
        return np.array([r.train_label if observed else r.label for r in recs], dtype=np.int64)

    def class_counts(self, split: str = "train") -> np.ndarray:
        return np.bincount(self.labels(split), minlength=self.num_classes)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        if p.is_absolute() or self.base_dir is None:
            return p
        return Path(self.base_dir) / p

    def unlabeled_view(self, split: str = "train") -> "UnlabeledView":
        recs = self.split(split)
        return UnlabeledView(
            sample_ids=tuple(r.sample_id for r in recs),
            paths=tuple(str(self.resolve(r.path)) for r in recs),
            name=self.name,
        )

    def with_observed(self, observed: Sequence[int]) -> "DatasetManifest":
        """Attach observed labels to the train records, in train order."""
        train_ids = [i for i, r in enumerate(self.records) if r.split == "train"]
        if len(observed) != len(train_ids):
            raise ManifestError(f"{len(observed)} observed labels for {len(train_ids)} train records")
        recs = list(self.records)
        for i, o in zip(train_ids, observed):
            recs[i] = replace(recs[i], observed=int(o))
        return replace(self, records=tuple(recs))


@dataclass(frozen=True)
class UnlabeledView:
    """Label-free view of one split, handed to self-supervised code."""

    sample_ids: tuple[str, ...]
    paths: tuple[str, ...]
    name: str = "dataset"

    def __len__(self) -> int:
        return len(self.sample_ids)


@dataclass(frozen=True)
class GroupingMap:
    group_names: tuple[str, ...]
    assignment: dict[int, int] = field(hash=False)

    def __post_init__(self):
        object.__setattr__(self, "group_names", tuple(self.group_names))
        used = sorted(set(self.assignment.values()))
        if used != list(range(len(self.group_names))):
            raise ManifestError("group indices must be contiguous from 0 and every group must be non-empty")

    @property
    def num_groups(self) -> int:
        return len(self.group_names)

    def members(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in self.group_names]
        for cls, g in sorted(self.assignment.items()):
            out[g].append(cls)
        return out

    @classmethod
    def identity(cls, class_names: Sequence[str]) -> "GroupingMap":
        return cls(tuple(class_names), {i: i for i in range(len(class_names))})

    @classmethod
    def from_groups(cls, class_names: Sequence[str], groups: Sequence[Sequence[str]],
                    group_names: Sequence[str] | None = None) -> "GroupingMap":
        index = {n: i for i, n in enumerate(class_names)}
        assignment: dict[int, int] = {}
        for g, members in enumerate(groups):
            for m in members:
                if m not in index:
                    raise ManifestError(f"unknown class {m!r} in grouping")
                if index[m] in assignment:
                    raise ManifestError(f"class {m!r} assigned to two groups")
                assignment[index[m]] = g
        names = tuple(group_names) if group_names else tuple("+".join(m) for m in groups)
        return cls(names, assignment)


def _parse_header_comments(lines: list[str]) -> dict[str, str]:
    meta = {}
    for line in lines:
        body = line.lstrip("#").strip()
        if "=" in body:
            k, v = body.split("=", 1)
            meta[k.strip()] = v.strip()
    return meta


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    text = path.read_text(encoding="utf-8")
    comments = [ln for ln in text.splitlines() if ln.startswith("#")]
    body = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    meta = _parse_header_comments(comments)
    reader = csv.DictReader(io.StringIO("\n".join(body)))
    missing = [c for c in REQUIRED_COLUMNS if c not in (reader.fieldnames or [])]
    if missing:
        raise ManifestError(f"{path}: missing columns {missing}")
    records = []
    for lineno, row in enumerate(reader, start=2):
        try:
            label = int(row["label"])
            fold = int(row["fold"]) if row.get("fold") not in (None, "") else None
            observed = int(row["observed_label"]) if row.get("observed_label") not in (None, "") else None
        except ValueError as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from None
        if label < 0:
            raise ManifestError(f"{path}:{lineno}: negative label")
        records.append(Record(row["sample_id"], row["path"], label, row["split"].strip(), fold, observed))
    if "class_names" in meta:
        class_names = tuple(meta["class_names"].split("|"))
    elif "num_classes" in meta:
        class_names = tuple(str(i) for i in range(int(meta["num_classes"])))
    else:
        n = max((r.label for r in records), default=-1) + 1
        class_names = tuple(str(i) for i in range(n))
    if "num_classes" in meta and int(meta["num_classes"]) != len(class_names):
        raise ManifestError(f"{path}: num_classes={meta['num_classes']} disagrees with class_names")
    try:
        return DatasetManifest(tuple(records), class_names, name=meta.get("name", path.stem),
                               base_dir=str(path.parent))
    except ManifestError as exc:
        raise ManifestError(f"{path}: {exc}") from None


def dump_manifest(manifest: DatasetManifest) -> str:
    has_fold = any(r.fold is not None for r in manifest.records)
    has_obs = any(r.observed is not None for r in manifest.records)
    cols = list(REQUIRED_COLUMNS) + (["fold"] if has_fold else []) + (["observed_label"] if has_obs else [])
    buf = io.StringIO()
    buf.write(f"# name={manifest.name}\n")
    buf.write(f"# num_classes={manifest.num_classes}\n")
    buf.write(f"# class_names={'|'.join(manifest.class_names)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in manifest.records:
        row = [r.sample_id, r.path, r.label, r.split]
        if has_fold:
            row.append("" if r.fold is None else r.fold)
        if has_obs:
            row.append("" if r.observed is None else r.observed)
        w.writerow(row)
    return buf.getvalue()


def save_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if manifest.base_dir is not None and Path(manifest.base_dir).resolve() != path.parent.resolve():
        # keep relative paths pointing at the same files
        base = Path(manifest.base_dir)
        manifest = replace(manifest, records=tuple(
            r if Path(r.path).is_absolute() else replace(r, path=str((base / r.path).resolve()))
            for r in manifest.records))
    path.write_text(dump_manifest(manifest), encoding="utf-8")
    return path


def load_grouping(path: str | Path, class_names: Sequence[str]) -> GroupingMap:
    """Read an ``original_class,group`` file; group order follows first appearance."""
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        reader = csv.DictReader(line for line in fh if not line.startswith("#"))
        if reader.fieldnames is None or set(reader.fieldnames) < {"original_class", "group"}:
            raise ManifestError(f"{path}: expected header original_class,group")
        order: list[str] = []
        pairs: list[tuple[str, str]] = []
        for row in reader:
            g = row["group"].strip()
            if g not in order:
                order.append(g)
            pairs.append((row["original_class"].strip(), g))
    groups = [[c for c, g in pairs if g == name] for name in order]
    return GroupingMap.from_groups(class_names, groups, order)


def apply_grouping(manifest: DatasetManifest, grouping: GroupingMap) -> DatasetManifest:
    missing = [i for i in range(manifest.num_classes) if i not in grouping.assignment]
    if missing:
        names = [manifest.class_names[i] for i in missing]
        raise ManifestError(f"grouping does not cover classes {names}")
    a = grouping.assignment
    recs = tuple(
        replace(r, label=a[r.label], observed=None if r.observed is None else a[r.observed])
        for r in manifest.records
    )
    return replace(manifest, records=recs, class_names=grouping.group_names)


def subsample(manifest: DatasetManifest, n: int, seed: int, num_folds: int = 1,
              disjoint: bool = True) -> list[DatasetManifest]:
    """Draw ``num_folds`` training subsets of size ``n``; the test split is copied unchanged.

    Folds are disjoint slices of one seeded permutation when the pool is large
    enough (and ``disjoint`` is set), otherwise independent draws with
    fold-derived seeds.
    """
    train = manifest.train
    test = manifest.test
    if num_folds < 1:
        raise ValueError("num_folds must be >= 1")
    if n > len(train):
        raise ValueError(f"cannot draw {n} samples from {len(train)} train records")
    if n < 0:
        raise ValueError("n must be non-negative")
    if disjoint and num_folds * n <= len(train):
        perm = np.random.default_rng(derive_seed(seed, 0)).permutation(len(train))
        picks = [perm[f * n:(f + 1) * n] for f in range(num_folds)]
    else:
        picks = [np.random.default_rng(derive_seed(seed, f + 1)).choice(len(train), n, replace=False)
                 for f in range(num_folds)]
    out = []
    for f, idx in enumerate(picks):
        recs = tuple(replace(train[i], fold=f) for i in idx) + tuple(test)
        out.append(replace(manifest, records=recs))
    return out


def merge_datasets(manifests: Sequence[DatasetManifest]) -> DatasetManifest:
    """Disjoint union of class spaces; sample ids become ``<dataset name>/<sample id>``."""
    if len(manifests) < 2:
        raise ValueError("merge_datasets needs at least two manifests")
    names = [m.name for m in manifests]
    if len(set(names)) != len(names):
        raise ValueError(f"dataset names must be unique for namespacing, got {names}")
    records: list[Record] = []
    class_names: list[str] = []
    offset = 0
    for m in manifests:
        for r in m.records:
            records.append(Record(
                sample_id=f"{m.name}/{r.sample_id}",
                path=str(m.resolve(r.path)),
                label=r.label + offset,
                split=r.split,
                fold=r.fold,
                observed=None if r.observed is None else r.observed + offset,
            ))
        class_names.extend(f"{m.name}/{c}" for c in m.class_names)
        offset += m.num_classes
    return DatasetManifest(tuple(records), tuple(class_names), name="+".join(names))


@dataclass(frozen=True)
class ClassWeights:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if np.any(w < 1.0):
            raise ValueError("class weights must be >= 1")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)


def class_weights(manifest: DatasetManifest | Iterable[int]) -> ClassWeights:
    """Weight each class by (largest class count) / (class count) over the train split."""
    counts = manifest.class_counts("train") if isinstance(manifest, DatasetManifest) else np.asarray(list(manifest))
    if np.any(counts == 0):
        raise ValueError(f"classes {np.flatnonzero(counts == 0).tolist()} have no train records")
    return ClassWeights(counts.max() / counts.astype(np.float64))

