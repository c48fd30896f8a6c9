"""Embedding progress measures and separability probes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .zp_dataset import ResidueClasses


def med(rows: np.ndarray, raw: bool = False) -> float:
    """Main embedding diff: mean norm of cyclic consecutive row differences.

    ``raw=True`` returns the sum instead of the mean.
    """
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 2:
        raise ValueError("med needs a (p, d) matrix with p >= 2")
    diffs = np.roll(rows, -1, axis=0) - rows
    total = float(np.sqrt((diffs * diffs).sum(axis=1)).sum())
    return total if raw else total / rows.shape[0]


@dataclass
class UniformityReport:
    centroids: dict[int, np.ndarray]
    dispersions: dict[int, float]
    separation_ratio: float
    excluded: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "centroids": {str(c): v.tolist() for c, v in self.centroids.items()},
            "dispersions": {str(c): v for c, v in self.dispersions.items()},
            "separation_ratio": self.separation_ratio,
            "excluded": self.excluded,
        }


def class_uniformity(rows: np.ndarray, train_pairs: np.ndarray, classes: ResidueClasses) -> UniformityReport:
    """Cluster tightness of ``phi(i) + phi(j)`` within residue classes of the train pairs.

    ``separation_ratio`` is the largest class radius divided by the smallest
    distance between two class centroids; it is ``inf`` when fewer than two
    classes are represented.
    """
    rows = np.asarray(rows, dtype=np.float64)
    p = len(classes.sizes)
    pairs = np.asarray(train_pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) and (pairs.min() < 0 or pairs.max() >= p):
        raise ValueError("train pair outside [0, p)^2")
    label = np.empty((p, p), dtype=np.int64)
    for c, members in enumerate(classes.classes):
        for i, j in members:
            label[i, j] = c
    sums = rows[pairs[:, 0]] + rows[pairs[:, 1]]
    lab = label[pairs[:, 0], pairs[:, 1]]

    centroids, dispersions, excluded = {}, {}, []
    for c in range(p):
        pts = sums[lab == c]
        if len(pts) < 1:
            excluded.append(c)
            continue
        k = pts.mean(axis=0)
        centroids[c] = k
        dispersions[c] = float(np.sqrt(((pts - k) ** 2).sum(axis=1)).max())

    if len(centroids) < 2:
        ratio = math.inf
    else:
        K = np.stack(list(centroids.values()))
        sq = (K * K).sum(axis=1)
        d2 = sq[:, None] + sq[None, :] - 2.0 * K @ K.T
        np.fill_diagonal(d2, np.inf)
        min_sep = math.sqrt(max(float(d2.min()), 0.0))
        max_disp = max(dispersions.values())
        ratio = math.inf if min_sep == 0.0 else max_disp / min_sep
    return UniformityReport(centroids, dispersions, ratio, excluded)


# ------------------------------------------------------------ hull distance


@dataclass
class HullDistance:
    distance: float
    converged: bool
    iterations: int
    witness: np.ndarray  # closest point of Conv(A) - Conv(B) to the origin


def _affine_min_norm(S: np.ndarray) -> np.ndarray:
    """Coefficients (summing to 1) of the min-norm point in the affine hull of rows of S."""
    k = len(S)
    kkt = np.zeros((k + 1, k + 1))
    kkt[:k, :k] = S @ S.T
    kkt[:k, k] = 1.0
    kkt[k, :k] = 1.0
    rhs = np.zeros(k + 1)
    rhs[k] = 1.0
    sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    return sol[:k]


def hull_distance(A, B, tol: float = 1e-7, max_iters: int = 10_000) -> HullDistance:
    """Distance between the convex hulls of two finite point sets.

    Wolfe's minimum-norm-point iteration on the Minkowski difference
    ``Conv(A) - Conv(B)``.  Only the support map of the difference is used:
    the vertex minimising ``<x, a - b>`` is ``argmin_a <x, a> - argmax_b <x, b>``.
    Returns distance 0 when the hulls intersect (within ``tol``).
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.size == 0 or B.size == 0:
        raise ValueError("point sets must be non-empty")
    if A.shape[1] != B.shape[1]:
        raise ValueError("point sets must share a dimension")

    def support(x):
        return A[np.argmin(A @ x)] - B[np.argmax(B @ x)]

    scale2 = max(float((A * A).sum(axis=1).max()), float((B * B).sum(axis=1).max()), 1.0)
    eps = 1e-12 * scale2
    S = (A[0] - B[0])[None, :]
    lam = np.ones(1)
    x = S[0].copy()
    for it in range(1, max_iters + 1):
        xx = float(x @ x)
        if math.sqrt(xx) <= tol:
            return HullDistance(0.0, True, it, x)
        s = support(x)
        if xx - float(x @ s) <= eps or any(np.array_equal(s, row) for row in S):
            return HullDistance(math.sqrt(xx), True, it, x)
        S = np.vstack([S, s])
        lam = np.append(lam, 0.0)
        while True:  # minor cycle: move toward the affine min-norm point, dropping vertices
            alpha = _affine_min_norm(S)
            if np.all(alpha > 1e-14):
                lam = alpha
                break
            neg = alpha <= 1e-14
            with np.errstate(divide="ignore", invalid="ignore"):
                ratios = np.where(neg, lam / (lam - alpha), np.inf)
            theta = float(np.clip(ratios.min(), 0.0, 1.0))
            lam = theta * alpha + (1.0 - theta) * lam
            keep = lam > 1e-14
            if keep.all():
                keep[np.argmin(np.where(neg, lam, np.inf))] = False
            S, lam = S[keep], lam[keep] / lam[keep].sum()
        x = lam @ S
    return HullDistance(math.sqrt(float(x @ x)), False, max_iters, x)


def projected_separability(A, B, basis, tol: float = 1e-7) -> tuple[bool, float]:
    """Hull separability after orthogonal projection onto ``span(basis rows)``."""
    basis = np.atleast_2d(np.asarray(basis, dtype=np.float64))
    gram = basis @ basis.T
    if not np.allclose(gram, np.eye(len(basis)), atol=1e-8, rtol=0.0):
        raise ValueError("basis rows must be orthonormal")
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    res = hull_distance(A @ basis.T, B @ basis.T, tol=tol)
    return res.distance > tol, res.distance


def principal_directions(points: np.ndarray, k: int) -> np.ndarray:
    """Top-``k`` principal directions (rows, orthonormal) of a centred point cloud."""
    X = np.asarray(points, dtype=np.float64)
    X = X - X.mean(axis=0)
    _, _, vt = np.linalg.svd(X, full_matrices=False)
    return vt[:k]


def class_sum_points(rows: np.ndarray, pairs: np.ndarray) -> np.ndarray:
    """``phi(i) + phi(j)`` for each pair."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    return rows[pairs[:, 0]] + rows[pairs[:, 1]]
