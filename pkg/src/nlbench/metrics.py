"""Classification metrics, BEST/LAST tracking, robustness score and Fisher class separability."""
from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

LAST_WINDOW = 5


class FlaggedValue(NamedTuple):
    """A metric value plus a flag raised when a sentinel (e.g. +inf) was returned."""

    value: float
    flagged: bool = False


def _check_pair(predictions, labels, num_classes):
    p = np.asarray(predictions, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {y.shape}")
    for name, v in (("predictions", p), ("labels", y)):
        if v.size and (v.min() < 0 or v.max() >= num_classes):
            raise ValueError(f"{name} outside [0, {num_classes})")
    return p, y


def confusion_matrix(predictions, labels, num_classes: int) -> np.ndarray:
    """Entry ``(k, i)`` counts samples of true class ``k`` predicted as ``i``."""
    p, y = _check_pair(predictions, labels, num_classes)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y, p), 1)
    return cm


def f1_from_confusion(cm: np.ndarray) -> tuple[float, np.ndarray]:
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    denom = cm.sum(axis=0) + cm.sum(axis=1)  # 2TP + FP + FN
    per_class = np.where(denom > 0, 2 * tp / np.where(denom > 0, denom, 1), 0.0)
    return float(per_class.mean()), per_class


def macro_f1(predictions, labels, num_classes: int) -> tuple[float, np.ndarray]:
    """Unweighted mean of per-class F1; a class absent from both inputs scores 0."""
    return f1_from_confusion(confusion_matrix(predictions, labels, num_classes))


@dataclass
class EpochMetrics:
    epoch: int
    macro_f1: float
    per_class_f1: list[float]
    confusion: list[list[int]]
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "macro_f1": self.macro_f1, "per_class_f1": self.per_class_f1,
                "confusion": self.confusion, "extras": self.extras}

    @classmethod
    def from_dict(cls, d: dict) -> "EpochMetrics":
        return cls(d["epoch"], d["macro_f1"], list(d["per_class_f1"]), [list(r) for r in d["confusion"]],
                   dict(d.get("extras", {})))


def last_of(values: Sequence[float], window: int = LAST_WINDOW) -> float:
    tail = list(values)[-window:]
    return sum(tail) / len(tail)


@dataclass
class MetricReport:
    """Per-epoch test metrics. ``best`` is the peak macro-F1, ``last`` the mean of the final five."""

    per_epoch: list[EpochMetrics] = field(default_factory=list)
    best: float = float("nan")
    last: float = float("nan")
    meta: dict = field(default_factory=dict)

    @property
    def series(self) -> list[float]:
        return [e.macro_f1 for e in self.per_epoch]

    def to_dict(self) -> dict:
        return {"per_epoch": [e.to_dict() for e in self.per_epoch], "best": self.best, "last": self.last,
                "meta": self.meta}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls([EpochMetrics.from_dict(e) for e in d["per_epoch"]], d["best"], d["last"], dict(d.get("meta", {})))


def track(report: MetricReport, entry: EpochMetrics) -> MetricReport:
    """Append one epoch and update BEST/LAST in place."""
    if report.per_epoch and entry.epoch <= report.per_epoch[-1].epoch:
        raise ValueError(f"epoch {entry.epoch} appended after epoch {report.per_epoch[-1].epoch}")
    report.per_epoch.append(entry)
    report.best = entry.macro_f1 if len(report.per_epoch) == 1 else max(report.best, entry.macro_f1)
    report.last = last_of(report.series)
    return report


def evaluate_predictions(epoch: int, predictions, labels, num_classes: int, **extras) -> EpochMetrics:
    cm = confusion_matrix(predictions, labels, num_classes)
    f1, per_class = f1_from_confusion(cm)
    return EpochMetrics(epoch, f1, per_class.tolist(), cm.tolist(), dict(extras))


def aggregate(values: Iterable[float]) -> dict:
    """Mean and sample standard deviation (0 for a single value)."""
    v = list(values)
    return {"mean": statistics.fmean(v), "std": statistics.stdev(v) if len(v) > 1 else 0.0, "n": len(v)}


@dataclass(frozen=True)
class RobustnessCurve:
    points: tuple[tuple[float, float], ...]

    def __post_init__(self):
        pts = tuple((float(e), float(tp)) for e, tp in sorted(self.points))
        eps = [e for e, _ in pts]
        if len(set(eps)) != len(eps):
            raise ValueError("noise rates must be distinct")
        if not eps or eps[0] != 0.0:
            raise ValueError("robustness curve needs a point at noise rate 0")
        if any(not 0.0 <= tp <= 1.0 for _, tp in pts):
            raise ValueError("test performance must lie in [0, 1]")
        object.__setattr__(self, "points", pts)

    def restrict(self, max_rate: float) -> "RobustnessCurve":
        return RobustnessCurve(tuple(p for p in self.points if p[0] <= max_rate))


def robustness_score(curve: RobustnessCurve | Sequence[tuple[float, float]]) -> FlaggedValue:
    """Number of evaluated noise rates (including 0) over the summed drops from the clean score.

    Scores are taken at their shortest decimal representation and summed
    exactly, so hand-written curves give hand-computed answers. A non-positive
    denominator returns ``+inf`` flagged.
    """
    if not isinstance(curve, RobustnessCurve):
        curve = RobustnessCurve(tuple(curve))
    tps = [Fraction(repr(tp)) for _, tp in curve.points]
    drop = sum((tps[0] - tp for tp in tps), Fraction(0))
    if drop <= 0:
        return FlaggedValue(math.inf, True)
    return FlaggedValue(float(Fraction(len(tps)) / drop), False)


@dataclass(frozen=True)
class EmbeddingMatrix:
    vectors: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if v.ndim != 2 or y.shape != (v.shape[0],):
            raise ValueError("vectors must be n x D with one label per row")
        _, counts = np.unique(y, return_counts=True)
        if np.any(counts < 2):
            raise ValueError("every class needs at least two embeddings")
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "labels", y)


def scatter_traces(emb: EmbeddingMatrix) -> tuple[float, float]:
    """Traces of the between-class (count weighted) and pooled within-class scatter."""
    x, y = emb.vectors, emb.labels
    mu = x.mean(axis=0)
    between = within = 0.0
    for k in np.unique(y):
        xk = x[y == k]
        mk = xk.mean(axis=0)
        between += len(xk) * float(np.sum((mk - mu) ** 2))
        within += float(np.sum((xk - mk) ** 2))
    return between, within


def fisher_css(embeddings: EmbeddingMatrix) -> FlaggedValue:
    """[tr(S_B)/(c-1)] / [tr(S_W)/(n-c)]; zero within-class scatter gives flagged +inf."""
    classes = np.unique(embeddings.labels)
    c, n = len(classes), len(embeddings.labels)
    if c < 2:
        raise ValueError("fisher_css needs at least two classes")
    between, within = scatter_traces(embeddings)
    if within <= 0.0:
        return FlaggedValue(math.inf, True)
    return FlaggedValue((between / (c - 1)) / (within / (n - c)), False)


# -- dataset difficulty sweeps ------------------------------------------------

SWEEP_CLASS_COUNTS = (3, 6, 7, 13)
SWEEP_SIZES = (1000, 3000, 5000, 7000, 15000, 27000, 36000, 100000)


@dataclass
class SweepTable:
    axis: str
    rows: list[dict] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"axis": self.axis, "rows": self.rows, "skipped": self.skipped}

    def to_text(self, delimiter: str = ",") -> str:
        lines = [delimiter.join(["dataset", self.axis, "mean_f1", "std_f1", "folds"])]
        for r in self.rows:
            lines.append(delimiter.join([r["dataset"], str(r["value"]), repr(r["mean"]), repr(r["std"]), str(r["folds"])]))
        return "\n".join(lines) + "\n"


def difficulty_sweep(
    datasets: Mapping[str, "object"],
    train_fn: Callable[["object"], float],
    axis: str,
    values: Sequence[int] | None = None,
    groupings: Mapping[str, Mapping[int, "object"]] | None = None,
    n: int = 7000,
    num_folds: int = 6,
    seed: int = 0,
    size_grouping: Mapping[str, "object"] | None = None,
) -> SweepTable:
    """Test performance versus number of classes (``axis="classes"``) or training size (``axis="size"``).

    ``datasets`` maps names to manifests. For the class axis each dataset is
    regrouped to every requested class count it supports (``groupings[name][k]``,
    identity at its native count) and ``num_folds`` folds of ``n`` samples are
    drawn. For the size axis datasets are optionally regrouped with
    ``size_grouping[name]`` and subsampled at each size their train split can
    hold. ``train_fn`` trains on one fold and returns its test macro-F1.
    Infeasible points are listed in ``skipped``.
    """
    from nlbench.dataman import GroupingMap, apply_grouping, subsample

    if axis not in ("classes", "size"):
        raise ValueError("axis must be 'classes' or 'size'")
    values = tuple(values or (SWEEP_CLASS_COUNTS if axis == "classes" else SWEEP_SIZES))
    table = SweepTable(axis=axis)
    for name, manifest in datasets.items():
        for value in values:
            if axis == "classes":
                native = manifest.num_classes
                if value > native:
                    table.skipped.append({"dataset": name, "value": value, "reason": f"only {native} classes"})
                    continue
                if value == native:
                    grouping = GroupingMap.identity(manifest.class_names)
                else:
                    grouping = (groupings or {}).get(name, {}).get(value)
                    if grouping is None:
                        table.skipped.append({"dataset": name, "value": value, "reason": "no grouping"})
                        continue
                base, size = apply_grouping(manifest, grouping), n
            else:
                g = (size_grouping or {}).get(name)
                base = apply_grouping(manifest, g) if g is not None else manifest
                size = value
            available = len(base.train)
            if size > available:
                table.skipped.append({"dataset": name, "value": value,
                                      "reason": f"needs {size} train samples, has {available}"})
                continue
            folds = subsample(base, size, seed=seed, num_folds=num_folds)
            scores = [float(train_fn(f)) for f in folds]
            agg = aggregate(scores)
            table.rows.append({"dataset": name, "value": value, "mean": agg["mean"], "std": agg["std"],
                               "folds": len(scores), "scores": scores})
    return table
