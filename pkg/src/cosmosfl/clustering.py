"""Pseudo-label distances and greedy threshold clustering of clients."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .errors import ParameterError, ValidationError


@dataclass(frozen=True)
class ClusterAssignment:
    clusters: tuple[tuple[int, ...], ...]
    pi: tuple[int, ...]
    center_of: tuple[int, ...]

    @property
    def K(self) -> int:
        return len(self.clusters)

    @classmethod
    def from_labels(cls, labels, centers) -> ClusterAssignment:
        labels = [int(v) for v in labels]
        k = max(labels) + 1 if labels else 0
        clusters = tuple(tuple(i for i, c in enumerate(labels) if c == j) for j in range(k))
        return cls(clusters=clusters, pi=tuple(labels), center_of=tuple(int(c) for c in centers))

    @classmethod
    def single(cls, n: int) -> ClusterAssignment:
        return cls(clusters=(tuple(range(n)),), pi=(0,) * n, center_of=(0,))

    def validate(self, n: int):
        seen = sorted(i for c in self.clusters for i in c)
        if seen != list(range(n)):
            raise ValidationError("clusters do not partition the clients")
        for k, members in enumerate(self.clusters):
            if any(self.pi[i] != k for i in members):
                raise ValidationError("pi disagrees with the cluster lists")


def pairwise_distance(p_i: np.ndarray, p_j: np.ndarray) -> float:
    """Entrywise l1 distance between two pseudo-label matrices."""
    p_i = np.asarray(p_i, dtype=np.float64)
    p_j = np.asarray(p_j, dtype=np.float64)
    if p_i.shape != p_j.shape:
        raise ValidationError(f"shape mismatch {p_i.shape} vs {p_j.shape}")
    return float(np.abs(p_i - p_j).sum())


def distance_matrix(pseudolabels: Sequence[np.ndarray]) -> np.ndarray:
    shapes = {np.shape(p) for p in pseudolabels}
    if len(shapes) != 1:
        raise ValidationError(f"pseudo-label matrices disagree in shape: {sorted(shapes)}")
    return kernels.l1_distance_matrix(np.stack(pseudolabels))


def greedy_cluster(dist: np.ndarray, b0: float) -> ClusterAssignment:
    """Repeatedly carve out the remaining client with the most ``b0``-close
    remaining neighbours, together with those neighbours.

    Ties go to the lowest client index. The number of clusters is whatever
    falls out.
    """
    dist = np.asarray(dist, dtype=np.float64)
    if dist.ndim != 2 or dist.shape[0] != dist.shape[1]:
        raise ValidationError("distance matrix must be square")
    if b0 < 0:
        raise ParameterError("b0 must be >= 0")
    if dist.shape[0] == 0:
        return ClusterAssignment((), (), ())
    labels, centers = kernels.greedy_cluster(dist, min(float(b0), np.finfo(np.float64).max))
    return ClusterAssignment.from_labels(labels, centers)


def within_cluster_bound(assignment: ClusterAssignment, dist: np.ndarray) -> float:
    """Largest pairwise distance between two clients of the same cluster."""
    dist = np.asarray(dist, dtype=np.float64)
    return max((cluster_diameter(members, dist) for members in assignment.clusters), default=0.0)


def cluster_diameter(members: Sequence[int], dist: np.ndarray) -> float:
    if len(members) < 2:
        return 0.0
    idx = np.asarray(members)
    return float(dist[np.ix_(idx, idx)].max())


@dataclass(frozen=True)
class Calibration:
    b0: float
    K: int
    sweep: list[tuple[float, int]]
    rule: str = "largest"


CALIBRATION_RULES = ("largest", "tightest")


def calibrate_b0(dist: np.ndarray, target_k: int, rule: str = "largest") -> Calibration:
    """Pick a threshold from an exact sweep of the cluster count.

    K only changes where ``b0`` crosses a pairwise distance, so evaluating
    every distinct distance (plus 0) covers all behaviours. Each threshold
    ``t_j`` stands for the interval ``[t_j, t_{j+1})``.

    ``largest``: the last interval with K >= target_k.
    ``tightest``: the first interval with K == target_k, falling back to
    ``largest`` when no threshold yields exactly target_k. On noisy
    distances this avoids one absorbing cluster plus singleton outliers.

    The returned ``b0`` is the interval midpoint, or the largest distance
    when the interval is unbounded.
    """
    if rule not in CALIBRATION_RULES:
        raise ParameterError(f"rule must be one of {CALIBRATION_RULES}")
    dist = np.asarray(dist, dtype=np.float64)
    n = dist.shape[0]
    iu = np.triu_indices(n, k=1)
    thresholds = np.unique(np.concatenate([[0.0], dist[iu]]))
    sweep = [(float(t), greedy_cluster(dist, t).K) for t in thresholds]
    ks = [k for _, k in sweep]
    if not 1 <= target_k <= max(ks):
        raise ParameterError(
            f"target K={target_k} unreachable; achievable K range is [{min(ks)}, {max(ks)}]"
        )
    exact = [j for j, k in enumerate(ks) if k == target_k]
    if rule == "tightest" and exact:
        pick = exact[0]
    else:
        pick = max(j for j, k in enumerate(ks) if k >= target_k)
    if pick + 1 < len(thresholds):
        b0 = 0.5 * (thresholds[pick] + thresholds[pick + 1])
    else:
        b0 = float(thresholds[pick])
    return Calibration(b0=float(b0), K=greedy_cluster(dist, b0).K, sweep=sweep, rule=rule)


def export_distance_csv(dist: np.ndarray, path):
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for row in np.asarray(dist):
            writer.writerow([repr(float(v)) for v in row])
