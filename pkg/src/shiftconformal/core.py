"""Shared domain types and dataset splitting.

Datasets are ordered collections of labeled, domain-tagged points. Labels are
dense integers 1..K. The splitting logic produces the four index sets used by
the calibration pipeline: a source training half (s1), a source calibration
half (s2), a labeled target calibration set (t) and a target test set.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

__all__ = [
    "Domain",
    "LabeledPoint",
    "Dataset",
    "SplitPlan",
    "Alpha",
    "InsufficientDataError",
    "EmptyCalibrationClassError",
    "split_dataset",
    "class_index_sets",
    "STREAM_SAMPLING",
    "STREAM_RELABELING",
    "STREAM_SPLITTING",
]


class Domain(Enum):
    SOURCE = "source"
    TARGET = "target"


class InsufficientDataError(ValueError):
    """A requested split or calibration set came out empty."""


class EmptyCalibrationClassError(ValueError):
    """No calibration points exist for the requested class."""


# rng stream ids: keep fixed so that changing one pipeline stage never
# perturbs the draws of another
STREAM_SAMPLING = 1
STREAM_RELABELING = 2
STREAM_SPLITTING = 3


@dataclass(frozen=True)
class LabeledPoint:
    """One observation: feature vector, class label in 1..K, domain tag."""

    features: tuple[float, ...]
    label: int
    domain: Domain

    def __post_init__(self) -> None:
        if self.label < 1:
            raise ValueError(f"label must be a positive class index, got {self.label}")
        if not all(np.isfinite(v) for v in self.features):
            raise ValueError("features must be finite")


@dataclass(frozen=True)
class Dataset:
    """Ordered list of points sharing a feature dimension and label range 1..K."""

    points: tuple[LabeledPoint, ...]
    n_classes: int
    dim: int

    def __post_init__(self) -> None:
        for i, p in enumerate(self.points):
            if len(p.features) != self.dim:
                raise ValueError(
                    f"point {i} has dimension {len(p.features)}, expected {self.dim}"
                )
            if p.label > self.n_classes:
                raise ValueError(
                    f"point {i} has label {p.label} outside 1..{self.n_classes}"
                )

    def __len__(self) -> int:
        return len(self.points)

    def feature_matrix(self, indices=None) -> np.ndarray:
        idx = range(len(self.points)) if indices is None else indices
        return np.array([self.points[i].features for i in idx], dtype=float)

    def labels(self, indices=None) -> np.ndarray:
        idx = range(len(self.points)) if indices is None else indices
        return np.array([self.points[i].label for i in idx], dtype=int)

    def domains(self) -> np.ndarray:
        return np.array([p.domain is Domain.TARGET for p in self.points], dtype=bool)


@dataclass(frozen=True)
class SplitPlan:
    """Disjoint index sets: source train (s1), source calibration (s2),
    target calibration (t), target test (test)."""

    s1: tuple[int, ...]
    s2: tuple[int, ...]
    t: tuple[int, ...]
    test: tuple[int, ...]
    seed: int

    def __post_init__(self) -> None:
        all_idx = self.s1 + self.s2 + self.t + self.test
        if len(set(all_idx)) != len(all_idx):
            raise ValueError("split index sets overlap")


@dataclass(frozen=True)
class Alpha:
    """Miscoverage level in (0,1)."""

    value: float

    def __post_init__(self) -> None:
        if not 0.0 < self.value < 1.0:
            raise ValueError(f"alpha must lie in (0,1), got {self.value}")


def _largest_remainder(total: int, fractions: list[float]) -> list[int]:
    """Integer sizes summing exactly to total, proportional to fractions.

    Ties in the fractional remainders are broken by position (earlier set wins),
    so the result is deterministic.
    """
    raw = [total * f for f in fractions]
    sizes = [int(np.floor(x)) for x in raw]
    leftover = total - sum(sizes)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[:leftover]:
        sizes[i] += 1
    return sizes


def split_dataset(
    data: Dataset,
    ratios: tuple[float, float, float],
    seed: int,
) -> SplitPlan:
    """Split a two-domain dataset into (s1, s2, t, test) index sets.

    ``ratios`` gives the (source train, target train, target test) shares of
    the whole dataset. Source-tagged points are shuffled and split 50/50 into
    s1 and s2 (sizes differ by at most one); target-tagged points are shuffled
    and split t:test according to the last two ratio entries, renormalized.
    Deterministic for a fixed seed.
    """
    if any(f <= 0 for f in ratios):
        raise ValueError(f"ratios must be positive, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {ratios}")

    src = [i for i, p in enumerate(data.points) if p.domain is Domain.SOURCE]
    tgt = [i for i, p in enumerate(data.points) if p.domain is Domain.TARGET]
    if not src:
        raise InsufficientDataError("insufficient data: no source points")
    if not tgt:
        raise InsufficientDataError("insufficient data: no target points")

    rng = np.random.default_rng([seed, STREAM_SPLITTING])
    src_perm = [src[i] for i in rng.permutation(len(src))]
    tgt_perm = [tgt[i] for i in rng.permutation(len(tgt))]

    n_s1, n_s2 = _largest_remainder(len(src), [0.5, 0.5])
    tt = ratios[1] + ratios[2]
    n_t, n_test = _largest_remainder(len(tgt), [ratios[1] / tt, ratios[2] / tt])

    sets = {
        "s1": src_perm[:n_s1],
        "s2": src_perm[n_s1:],
        "t": tgt_perm[:n_t],
        "test": tgt_perm[n_t:],
    }
    for name, members in sets.items():
        if not members:
            raise InsufficientDataError(f"insufficient data: split set '{name}' is empty")
    return SplitPlan(
        s1=tuple(sets["s1"]),
        s2=tuple(sets["s2"]),
        t=tuple(sets["t"]),
        test=tuple(sets["test"]),
        seed=seed,
    )


def class_index_sets(
    data: Dataset, plan: SplitPlan, j: int
) -> tuple[tuple[int, ...], int, int]:
    """Calibration indices for class j and the per-domain counts.

    Returns (R_j, n_source, n_target) where R_j lists, in plan order, the
    class-j members of s2 followed by the class-j members of t.
    """
    if not 1 <= j <= data.n_classes:
        raise ValueError(f"class {j} outside 1..{data.n_classes}")
    from_s2 = [i for i in plan.s2 if data.points[i].label == j]
    from_t = [i for i in plan.t if data.points[i].label == j]
    if not from_s2 and not from_t:
        raise EmptyCalibrationClassError(f"empty calibration class {j}")
    return tuple(from_s2 + from_t), len(from_s2), len(from_t)
