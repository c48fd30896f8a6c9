"""Manhattan-ball coverage of the p x p grid by a training set.

``covered`` always means strict distance: some train pair lies at Manhattan
distance ``< radius``.  Two metrics are offered: ``torus`` (coordinates wrap
mod p, the default) and ``grid`` (no wrap).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .rng import make_rng
from .zp_dataset import DatasetSplit, ResidueClasses, label_grid

Metric = Literal["torus", "grid"]
METRICS = ("torus", "grid")


@dataclass(frozen=True)
class CoverageConfig:
    radius: int
    metric: Metric = "torus"

    def __post_init__(self):
        if self.radius < 1:
            raise ValueError("radius must be >= 1")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")


@dataclass
class CoverageReport:
    prop: float
    ball_size: int
    alpha_threshold: float
    full_coverage_bound: float
    min_distance_histogram: dict[str, int] = field(default_factory=dict)
    radius: int = 1
    metric: str = "torus"
    train_size: int = 0
    test_size: int = 0

    def to_dict(self) -> dict:
        return {
            "prop": self.prop,
            "C": self.ball_size,
            "alpha_threshold": self.alpha_threshold,
            "full_coverage_bound": self.full_coverage_bound,
            "min_distance_histogram": self.min_distance_histogram,
            "radius": self.radius,
            "metric": self.metric,
            "train_size": self.train_size,
            "test_size": self.test_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CoverageReport":
        return cls(
            prop=d["prop"],
            ball_size=d["C"],
            alpha_threshold=d["alpha_threshold"],
            full_coverage_bound=d["full_coverage_bound"],
            min_distance_histogram=dict(d["min_distance_histogram"]),
            radius=d["radius"],
            metric=d["metric"],
            train_size=d["train_size"],
            test_size=d["test_size"],
        )


def _check_metric(metric: str) -> None:
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}, got {metric!r}")


def ball_size(radius: int, metric: Metric = "torus", p: int | None = None) -> int:
    """Number of points at Manhattan distance < ``radius`` from a point.

    Returns ``1 + sum_{d=1}^{radius-1} 4d``.  On a torus small enough that the
    ball wraps onto itself (radius > p // 2) the exact wrapped count is used.
    """
    if radius < 1:
        raise ValueError("radius must be >= 1")
    _check_metric(metric)
    if metric == "torus" and p is not None and radius > p // 2:
        d = np.minimum(np.arange(p), p - np.arange(p))
        return int(np.count_nonzero(d[:, None] + d[None, :] < radius))
    return 2 * radius * radius - 2 * radius + 1


def _dilate(mask: np.ndarray, metric: str) -> np.ndarray:
    out = mask.copy()
    if metric == "torus":
        for axis in (0, 1):
            for shift in (1, -1):
                out |= np.roll(mask, shift, axis=axis)
    else:
        out[1:, :] |= mask[:-1, :]
        out[:-1, :] |= mask[1:, :]
        out[:, 1:] |= mask[:, :-1]
        out[:, :-1] |= mask[:, 1:]
    return out


def distance_transform(sources: np.ndarray, metric: Metric = "torus", max_dist: int | None = None) -> np.ndarray:
    """Multi-source BFS Manhattan distance to the nearest ``True`` cell.

    Unreached cells (no sources, or beyond ``max_dist``) get ``-1``.
    """
    _check_metric(metric)
    dist = np.full(sources.shape, -1, dtype=np.int64)
    reached = sources.astype(bool).copy()
    dist[reached] = 0
    if not reached.any():
        return dist
    limit = max_dist if max_dist is not None else sum(sources.shape)
    d = 0
    while d < limit and not reached.all():
        d += 1
        grown = _dilate(reached, metric)
        new = grown & ~reached
        if not new.any():
            break
        dist[new] = d
        reached = grown
    return dist


def coverage_proportion(split: DatasetSplit, config: CoverageConfig) -> float:
    if len(split.test) == 0:
        raise ValueError("test set is empty")
    dist = distance_transform(split.train_mask(), config.metric, max_dist=config.radius)
    d = dist[split.test[:, 0], split.test[:, 1]]
    return float(np.count_nonzero((d >= 0) & (d < config.radius)) / len(d))


def min_distance_histogram(split: DatasetSplit, metric: Metric = "torus") -> dict[str, int]:
    dist = distance_transform(split.train_mask(), metric)
    d = dist[split.test[:, 0], split.test[:, 1]]
    hist: dict[str, int] = {}
    for value, count in zip(*np.unique(d, return_counts=True)):
        hist["inf" if value < 0 else str(int(value))] = int(count)
    return hist


def alpha_threshold(p: int, C: float) -> float:
    if C < 1:
        raise ValueError("C must be >= 1")
    return 2.0 * math.log(p) / C


def full_coverage_bound(p: int, C: int, m: int) -> float:
    """Union-bound lower estimate ``max(0, 1 - N (1 - C/N)^m)`` with N = p^2."""
    N = p * p
    if not 0 <= m <= N:
        raise ValueError(f"m must be in [0, {N}]")
    if not 0 <= C <= N:
        raise ValueError(f"C must be in [0, {N}]")
    return max(0.0, 1.0 - N * (1.0 - C / N) ** m)


def coverage_report(split: DatasetSplit, config: CoverageConfig) -> CoverageReport:
    p = split.p
    C = ball_size(config.radius, config.metric, p)
    return CoverageReport(
        prop=coverage_proportion(split, config),
        ball_size=C,
        alpha_threshold=alpha_threshold(p, C),
        full_coverage_bound=full_coverage_bound(p, min(C, p * p), len(split.train)),
        min_distance_histogram=min_distance_histogram(split, config.metric),
        radius=config.radius,
        metric=config.metric,
        train_size=len(split.train),
        test_size=len(split.test),
    )


# ------------------------------------------------------ condition (i) audit


def _ball_offsets(radius: int) -> list[tuple[int, int]]:
    return [
        (a, b)
        for a in range(-(radius - 1), radius)
        for b in range(-(radius - 1), radius)
        if abs(a) + abs(b) < radius
    ]


def _shift(arr: np.ndarray, a: int, b: int, metric: str, fill) -> np.ndarray:
    """``out[i, j] = arr[i + a, j + b]`` (wrapped, or ``fill`` off-grid)."""
    if metric == "torus":
        return np.roll(arr, (-a, -b), axis=(0, 1))
    p, q = arr.shape
    out = np.full_like(arr, fill)
    src_i = slice(max(a, 0), p + min(a, 0))
    dst_i = slice(max(-a, 0), p + min(-a, 0))
    src_j = slice(max(b, 0), q + min(b, 0))
    dst_j = slice(max(-b, 0), q + min(-b, 0))
    out[dst_i, dst_j] = arr[src_i, src_j]
    return out


@dataclass
class ConditionReport:
    D1: int
    metric: str
    overall: float
    per_class: list[float | None]
    satisfied: np.ndarray  # bool, aligned with split.test

    def to_dict(self) -> dict:
        return {"D1": self.D1, "metric": self.metric, "overall": self.overall, "per_class": self.per_class}


def condition_i_report(
    split: DatasetSplit, classes: ResidueClasses, D1: int, metric: Metric = "torus"
) -> ConditionReport:
    """For each test pair: is there a same-class train pair at distance < D1?"""
    if D1 < 1:
        raise ValueError("D1 must be >= 1")
    _check_metric(metric)
    p = split.p
    labels = np.full((p, p), -1, dtype=np.int64)
    for c, members in enumerate(classes.classes):
        for i, j in members:
            labels[i, j] = c
    if (labels < 0).any() or not np.array_equal(labels, label_grid(split.task)):
        raise ValueError("residue classes do not match the split's task")
    train = split.train_mask()
    train_label = np.where(train, labels, -1)
    hit = np.zeros((p, p), dtype=bool)
    for a, b in _ball_offsets(D1):
        hit |= _shift(train_label, a, b, metric, -1) == labels
    ti, tj = split.test[:, 0], split.test[:, 1]
    satisfied = hit[ti, tj]
    test_labels = labels[ti, tj]
    per_class: list[float | None] = []
    for c in range(p):
        sel = test_labels == c
        per_class.append(float(satisfied[sel].mean()) if sel.any() else None)
    overall = float(satisfied.mean()) if len(satisfied) else 0.0
    return ConditionReport(D1, metric, overall, per_class, satisfied)


# ------------------------------------------------------------ Monte Carlo


def _random_train_mask(p: int, m: int, rng: np.random.Generator) -> np.ndarray:
    mask = np.zeros(p * p, dtype=bool)
    mask[rng.choice(p * p, size=m, replace=False)] = True
    return mask.reshape(p, p)


def _train_size(p: int, alpha: float) -> int:
    return min(p * p, max(1, math.floor(alpha * p * p)))


def monte_carlo_expected_prop(
    p: int, alpha: float, radius: int, metric: Metric = "torus", trials: int = 20, seed: int = 0
) -> tuple[float, float]:
    """Mean and standard error of ``prop`` over random train sets of size floor(alpha p^2).

    A trial whose train set is the whole grid has no test points; it counts as
    fully covered (prop = 1).
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    _check_metric(metric)
    m = _train_size(p, alpha)
    props = np.empty(trials)
    for t in range(trials):
        rng = make_rng(seed, "coverage", t)
        train = _random_train_mask(p, m, rng)
        test = ~train
        if not test.any():
            props[t] = 1.0
            continue
        dist = distance_transform(train, metric, max_dist=radius)
        d = dist[test]
        props[t] = np.count_nonzero((d >= 0) & (d < radius)) / d.size
    sem = float(props.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    return float(props.mean()), sem


def monte_carlo_full_coverage(
    p: int, m: int, radius: int, metric: Metric = "torus", trials: int = 200, seed: int = 0
) -> float:
    """Fraction of random m-point train sets that cover every grid point."""
    _check_metric(metric)
    hits = 0
    for t in range(trials):
        rng = make_rng(seed, "coverage", 10_000_000 + t)
        dist = distance_transform(_random_train_mask(p, m, rng), metric, max_dist=radius)
        hits += bool(np.all((dist >= 0) & (dist < radius)))
    return hits / trials
