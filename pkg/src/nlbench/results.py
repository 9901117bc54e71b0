"""Results store: one JSON document per run plus an append-only index."""
from __future__ import annotations

import fnmatch
import glob
import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from filelock import FileLock

from nlbench import __version__
from nlbench.metrics import MetricReport, aggregate, last_of

RESULTS_ENV = "NLBENCH_RESULTS"
DEFAULT_ROOT = "results"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def make_run_id(config: dict, seed: int) -> str:
    """Content hash of the config snapshot and seed."""
    return hashlib.sha256(canonical_json({"config": config, "seed": int(seed)}).encode()).hexdigest()[:20]


@dataclass(frozen=True)
class RunRecord:
    run_id: str
    config: dict
    seed: int
    report: MetricReport
    wall_clock: float
    version: str = __version__
    kind: str = "train"
    extra: dict = field(default_factory=dict)

    @classmethod
    def create(cls, config: dict, seed: int, report: MetricReport, wall_clock: float, **kw) -> "RunRecord":
        return cls(make_run_id(config, seed), config, int(seed), report, float(wall_clock), **kw)

    @property
    def best(self) -> float:
        return self.report.best

    @property
    def last(self) -> float:
        return self.report.last

    def to_dict(self) -> dict:
        per_epoch = self.report.per_epoch
        return {
            "run_id": self.run_id,
            "kind": self.kind,
            "config": self.config,
            "seed": self.seed,
            "per_epoch": [e.to_dict() for e in per_epoch],
            "best": self.report.best,
            "last": self.report.last,
            "confusion_final": per_epoch[-1].confusion if per_epoch else None,
            "wall_clock": self.wall_clock,
            "version": self.version,
            "meta": self.report.meta,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        report = MetricReport.from_dict({"per_epoch": d["per_epoch"], "best": d["best"], "last": d["last"],
                                         "meta": d.get("meta", {})})
        return cls(d["run_id"], d["config"], int(d["seed"]), report, float(d["wall_clock"]), d.get("version", "?"),
                   d.get("kind", "train"), dict(d.get("extra", {})))


def recompute_best_last(record: RunRecord) -> tuple[float, float]:
    series = record.report.series
    return max(series), last_of(series)


def aggregate_records(records) -> dict:
    records = list(records)
    return {
        "run_ids": [r.run_id for r in records],
        "seeds": [r.seed for r in records],
        "best": aggregate(r.best for r in records),
        "last": aggregate(r.last for r in records),
    }


def results_root(path: str | Path | None = None) -> Path:
    return Path(path or os.environ.get(RESULTS_ENV) or DEFAULT_ROOT)


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


class ResultsStore:
    """``<root>/runs/<run_id>.json``, ``<root>/aggregates/<name>.json`` and ``<root>/index.jsonl``.

    Run documents are immutable: rewriting an existing id with different
    content raises. The index is rewritten to a temporary file and renamed
    into place under a file lock, so concurrent writers never lose lines.
    """

    def __init__(self, root: str | Path | None = None):
        self.root = results_root(root)
        self.runs = self.root / "runs"
        self.aggregates = self.root / "aggregates"
        self.index = self.root / "index.jsonl"

    def _append_index(self, entry: dict) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        with FileLock(str(self.index) + ".lock"):
            old = self.index.read_text(encoding="utf-8") if self.index.exists() else ""
            _atomic_write(self.index, old + canonical_json(entry) + "\n")

    def write(self, record: RunRecord) -> Path:
        path = self.runs / f"{record.run_id}.json"
        doc = record.to_dict()
        if path.exists():
            existing = json.loads(path.read_text(encoding="utf-8"))
            same = {k: existing.get(k) for k in ("config", "seed", "per_epoch")} == \
                {k: json.loads(canonical_json(doc[k])) for k in ("config", "seed", "per_epoch")}
            if not same:
                raise FileExistsError(f"run {record.run_id} already stored with different content")
            return path
        _atomic_write(path, json.dumps(doc, indent=1, sort_keys=True))
        self._append_index({"run_id": record.run_id, "kind": record.kind, "seed": record.seed,
                            "best": record.best, "last": record.last, "path": str(path.relative_to(self.root))})
        return path

    def write_aggregate(self, name: str, payload: dict) -> Path:
        path = self.aggregates / f"{name}.json"
        _atomic_write(path, json.dumps(payload, indent=1, sort_keys=True))
        self._append_index({"aggregate": name, "path": str(path.relative_to(self.root))})
        return path

    def read(self, run_id: str) -> RunRecord:
        path = self.runs / f"{run_id}.json"
        if not path.is_file():
            raise FileNotFoundError(f"no run {run_id} under {self.root}")
        return RunRecord.from_dict(json.loads(path.read_text(encoding="utf-8")))

    def records(self, pattern: str = "*") -> list[RunRecord]:
        """Stored runs whose id matches the glob ``pattern``, sorted by id."""
        if not self.runs.is_dir():
            return []
        paths = sorted(p for p in self.runs.glob("*.json") if fnmatch.fnmatch(p.stem, pattern))
        return [RunRecord.from_dict(json.loads(p.read_text(encoding="utf-8"))) for p in paths]


def load_records(pattern: str | Path) -> list[RunRecord]:
    """Run documents matching a filesystem glob (files or results directories)."""
    pattern = str(pattern)
    paths: list[Path] = []
    candidates = [Path(pattern)] if not any(ch in pattern for ch in "*?[") else \
        sorted(Path(p) for p in glob.glob(pattern, recursive=True))
    for p in candidates:
        if p.is_dir():
            paths.extend(sorted((p / "runs").glob("*.json")) if (p / "runs").is_dir() else sorted(p.glob("*.json")))
        elif p.is_file() and p.suffix == ".json":
            paths.append(p)
    records = []
    for p in paths:
        doc = json.loads(p.read_text(encoding="utf-8"))
        if "run_id" in doc and "per_epoch" in doc:
            records.append(RunRecord.from_dict(doc))
    return records
