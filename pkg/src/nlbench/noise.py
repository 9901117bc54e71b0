"""Label-noise models: transition matrices, injection, audit and posterior theory."""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from nlbench.rng import keyed_uniform

ROW_SUM_TOL = 1e-12
POSTERIOR_TOL = 1e-9


@dataclass(frozen=True)
class NoiseSpec:
    """Declarative noise model.

    ``groups`` lists the dependency groups for class-dependent noise; a class
    that is in no group (or in a singleton group) never changes label.
    """

    kind: Literal["symmetric", "class_dependent"]
    epsilon: float
    groups: tuple[tuple[int, ...], ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("symmetric", "class_dependent"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.groups is not None:
            object.__setattr__(self, "groups", tuple(tuple(int(c) for c in g) for g in self.groups))
            _check_disjoint(self.groups)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "epsilon": self.epsilon,
            "groups": None if self.groups is None else [list(g) for g in self.groups],
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSpec":
        return cls(kind=d["kind"], epsilon=float(d["epsilon"]), groups=d.get("groups"), seed=int(d.get("seed", 0)))


@dataclass(frozen=True)
class TransitionMatrix:
    """Row-stochastic matrix; entry ``(k, i)`` is P(observed = i | clean = k)."""

    entries: np.ndarray

    def __post_init__(self):
        m = np.array(self.entries, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"transition matrix must be square, got shape {m.shape}")
        if np.any(m < 0) or np.any(m > 1):
            raise ValueError("transition probabilities must lie in [0, 1]")
        bad = np.abs(m.sum(axis=1) - 1.0) > ROW_SUM_TOL
        if np.any(bad):
            raise ValueError(f"rows {np.flatnonzero(bad).tolist()} do not sum to 1")
        m.setflags(write=False)
        object.__setattr__(self, "entries", m)

    @property
    def num_classes(self) -> int:
        return self.entries.shape[0]

    def to_text(self, class_names: Sequence[str] | None = None, delimiter: str = ",") -> str:
        buf = io.StringIO()
        names = list(class_names) if class_names is not None else [str(i) for i in range(self.num_classes)]
        buf.write(delimiter.join(["true\\observed", *names]) + "\n")
        for name, row in zip(names, self.entries):
            buf.write(delimiter.join([name, *(repr(float(v)) for v in row)]) + "\n")
        return buf.getvalue()


@dataclass(frozen=True)
class NoisyLabelSet:
    observed: np.ndarray
    flipped: np.ndarray
    source_spec: NoiseSpec | None = None


@dataclass(frozen=True)
class AuditResult:
    """Empirical transition matrix; rows of absent clean classes are zero and flagged."""

    matrix: np.ndarray
    counts: np.ndarray
    empty_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def _check_disjoint(groups) -> None:
    seen: set[int] = set()
    for g in groups:
        if len(set(g)) != len(g):
            raise ValueError(f"group {g} repeats a class")
        overlap = seen.intersection(g)
        if overlap:
            raise ValueError(f"dependency groups overlap on classes {sorted(overlap)}")
        seen.update(g)


def build_symmetric_matrix(num_classes: int, epsilon: float) -> TransitionMatrix:
    if num_classes < 2:
        raise ValueError("symmetric noise needs at least two classes")
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    m = np.full((num_classes, num_classes), epsilon / (num_classes - 1))
    np.fill_diagonal(m, 1.0 - epsilon)
    return TransitionMatrix(m)


def build_dependent_matrix(num_classes: int, epsilon: float, groups: Sequence[Sequence[int]]) -> TransitionMatrix:
    """Flip only within dependency groups, spreading ``epsilon`` uniformly over the other members.

    Classes outside every group, or alone in their group, keep their label.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    groups = [tuple(int(c) for c in g) for g in groups]
    _check_disjoint(groups)
    for g in groups:
        for c in g:
            if not 0 <= c < num_classes:
                raise ValueError(f"group member {c} out of range for {num_classes} classes")
    m = np.eye(num_classes)
    for g in groups:
        spread = len(g) - 1
        if spread == 0:
            continue
        for k in g:
            for i in g:
                m[k, i] = 1.0 - epsilon if i == k else epsilon / spread
    return TransitionMatrix(m)


def build_matrix(spec: NoiseSpec, num_classes: int) -> TransitionMatrix:
    if spec.kind == "symmetric":
        return build_symmetric_matrix(num_classes, spec.epsilon)
    return build_dependent_matrix(num_classes, spec.epsilon, spec.groups or ())


def inject(labels, matrix: TransitionMatrix, seed: int, spec: NoiseSpec | None = None) -> NoisyLabelSet:
    """Resample every label from its matrix row.

    Sample ``i`` uses the uniform keyed on ``(seed, i)``, so the result is
    independent of evaluation order.
    """
    labels = np.asarray(labels, dtype=np.int64)
    c = matrix.num_classes
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    cum = np.cumsum(matrix.entries, axis=1)
    u = keyed_uniform((int(seed),), np.arange(labels.size))
    rows = cum[labels]
    observed = (u[:, None] >= rows).sum(axis=1)
    # u can exceed a row's cumulative total by rounding; fall back to the last class with mass
    last_nonzero = np.array([np.flatnonzero(r > 0)[-1] for r in matrix.entries])
    overflow = observed >= c
    observed[overflow] = last_nonzero[labels[overflow]]
    observed = observed.astype(np.int64)
    return NoisyLabelSet(observed=observed, flipped=observed != labels, source_spec=spec)


def audit(clean, noisy: NoisyLabelSet | np.ndarray, num_classes: int | None = None) -> AuditResult:
    clean = np.asarray(clean, dtype=np.int64)
    observed = np.asarray(noisy.observed if isinstance(noisy, NoisyLabelSet) else noisy, dtype=np.int64)
    if clean.shape != observed.shape:
        raise ValueError(f"length mismatch: {clean.shape} vs {observed.shape}")
    if num_classes is None:
        num_classes = int(max(clean.max(initial=-1), observed.max(initial=-1)) + 1)
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (clean, observed), 1)
    support = counts.sum(axis=1)
    empty = support == 0
    matrix = np.zeros_like(counts, dtype=np.float64)
    matrix[~empty] = counts[~empty] / support[~empty, None]
    return AuditResult(matrix=matrix, counts=counts, empty_rows=empty)


def noisy_posterior(clean_posterior, matrix: TransitionMatrix) -> np.ndarray:
    """P(noisy = i | x) = sum_k P(clean = k | x) * eta_ki. Accepts a vector or a batch of rows."""
    p = np.asarray(clean_posterior, dtype=np.float64)
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > POSTERIOR_TOL):
        raise ValueError("clean posterior must sum to 1")
    if p.shape[-1] != matrix.num_classes:
        raise ValueError("posterior length does not match matrix dimension")
    return p @ matrix.entries


def flipping_threshold(spec: NoiseSpec, num_classes: int) -> float:
    """Noise rate above which the noisy posterior can stop preserving the clean argmax.

    Symmetric noise gives ``(c - 1) / c``. For class-dependent noise the value is
    the theoretical within-group bound ``s / (s + 1)`` minimised over groups, where
    ``s`` is the group's spread.
    """
    if spec.kind == "symmetric":
        if num_classes < 2:
            raise ValueError("need at least two classes")
        return (num_classes - 1) / num_classes
    spreads = [len(g) - 1 for g in (spec.groups or ()) if len(g) >= 2]
    if not spreads:
        raise ValueError("class-dependent spec has no group with two or more classes")
    return min(s / (s + 1) for s in spreads)
