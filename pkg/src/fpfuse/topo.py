"""Per-sample topological descriptors from a Vietoris-Rips filtration.

A normalized fingerprint f in R^d is embedded as the planar curve
{(i, f_i)}_{i=1..d}. Connected-component structure (H0) comes from the
single-linkage minimum spanning tree: one finite bar (0, w) per MST edge.
Loops (H1) come from Z/2 boundary-matrix reduction of triangle columns over
edge rows, with the complex capped at the enclosing radius
min_i max_j dist(i, j) past which no one-dimensional class survives.

Each diagram is summarized by its pair count and its persistence entropy
(Shannon entropy of normalized bar lengths, natural log).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .preprocess import NormStats

MAX_CLOUD = 64  # complexity guard: the Rips complex grows as O(n^3) triangles


@dataclass(frozen=True, eq=False)
class PersistenceDiagram:
    """Finite (birth, death) pairs for H0 and H1, each sorted ascending."""

    h0: np.ndarray  # (k, 2); births all zero, deaths = MST edge weights
    h1: np.ndarray  # (m, 2); positive-persistence loop pairs

    def __post_init__(self):
        for name in ("h0", "h1"):
            arr = np.asarray(getattr(self, name), dtype=float).reshape(-1, 2)
            if arr.size and (np.any(arr[:, 1] < arr[:, 0]) or np.any(arr < 0)):
                raise ValueError(f"{name}: need 0 <= birth <= death")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)


@dataclass(frozen=True)
class PhFeatures:
    """The four topological scalars: [count_h0, entropy_h0, count_h1, entropy_h1]."""

    nop0: int
    pe0: float
    nop1: int
    pe1: float

    def __post_init__(self):
        if self.nop0 < 0 or self.nop1 < 0 or self.pe0 < 0 or self.pe1 < 0:
            raise ValueError("counts and entropies are non-negative")

    def as_array(self) -> np.ndarray:
        return np.array([self.nop0, self.pe0, self.nop1, self.pe1], dtype=float)


def embed_curve(f_norm: np.ndarray) -> np.ndarray:
    """Lift a d-vector to the d planar points (i, f_i), i starting at 1."""
    f = np.asarray(f_norm, dtype=float)
    if f.ndim != 1 or f.size < 2:
        raise ValueError("need a 1-D vector with at least 2 entries")
    return np.column_stack([np.arange(1, f.size + 1, dtype=float), f])


def _pairwise_distances(cloud: np.ndarray) -> np.ndarray:
    dx = cloud[:, 0][:, None] - cloud[:, 0][None, :]
    dy = cloud[:, 1][:, None] - cloud[:, 1][None, :]
    return np.sqrt(dx * dx + dy * dy)


def _mst_weights(dist: np.ndarray) -> np.ndarray:
    """Prim's algorithm on the complete graph; returns sorted edge weights."""
    n = len(dist)
    best = dist[0].copy()
    best[0] = np.inf
    weights = np.empty(n - 1)
    for k in range(n - 1):
        j = int(np.argmin(best))
        weights[k] = best[j]
        best[j] = np.inf
        np.minimum(best, dist[j], out=best, where=np.isfinite(best))
    weights.sort()
    return weights


def _h1_pairs(dist: np.ndarray) -> list[tuple[float, float]]:
    """Reduce triangle boundary columns over edge rows (Z/2 coefficients)."""
    n = len(dist)
    if n < 3:
        return []
    enclosing = float(np.min(np.max(dist + np.diag(np.full(n, -np.inf)), axis=1)))

    edges = []  # (weight, i, j) for i < j, capped at the enclosing radius
    for i in range(n):
        for j in range(i + 1, n):
            w = dist[i, j]
            if w <= enclosing:
                edges.append((w, i, j))
    edges.sort()
    edge_rank = {(i, j): r for r, (_, i, j) in enumerate(edges)}
    edge_weight = [w for w, _, _ in edges]

    triangles = []  # (filtration, i, j, k)
    for i in range(n):
        for j in range(i + 1, n):
            dij = dist[i, j]
            if dij > enclosing:
                continue
            for k in range(j + 1, n):
                filt = max(dij, dist[i, k], dist[j, k])
                if filt <= enclosing:
                    triangles.append((filt, i, j, k))
    triangles.sort()

    low_to_col: dict[int, frozenset] = {}
    pairs = []
    for filt, i, j, k in triangles:
        col = frozenset((edge_rank[(i, j)], edge_rank[(i, k)],
                         edge_rank[(j, k)]))
        while col:
            low = max(col)
            other = low_to_col.get(low)
            if other is None:
                break
            col = col ^ other
        if col:
            low = max(col)
            low_to_col[low] = col
            birth = edge_weight[low]
            if filt > birth:  # zero-persistence loop pairs are dropped
                pairs.append((birth, filt))
    pairs.sort()
    return pairs


def vr_persistence(cloud: np.ndarray) -> PersistenceDiagram:
    """H0/H1 persistence of the Rips filtration on a small planar cloud."""
    cloud = np.asarray(cloud, dtype=float)
    if cloud.ndim != 2 or cloud.shape[1] != 2 or len(cloud) < 2:
        raise ValueError("need an (n, 2) cloud with n >= 2")
    if len(cloud) > MAX_CLOUD:
        raise ValueError(f"cloud size {len(cloud)} exceeds the {MAX_CLOUD}-point guard")
    dist = _pairwise_distances(cloud)
    h0 = np.column_stack([np.zeros(len(cloud) - 1), _mst_weights(dist)])
    h1 = np.array(_h1_pairs(dist), dtype=float).reshape(-1, 2)
    return PersistenceDiagram(h0, h1)


def _entropy(lengths: np.ndarray) -> float:
    lengths = lengths[lengths > 0]
    total = lengths.sum()
    if lengths.size == 0 or total <= 0:
        return 0.0
    p = lengths / total
    return float(-(p * np.log(p)).sum())


def ph_features(diagram: PersistenceDiagram) -> PhFeatures:
    """Counts and persistence entropies; zero-length bars do not enter the entropy."""
    pe0 = _entropy(diagram.h0[:, 1] - diagram.h0[:, 0]) if diagram.h0.size else 0.0
    pe1 = _entropy(diagram.h1[:, 1] - diagram.h1[:, 0]) if diagram.h1.size else 0.0
    return PhFeatures(len(diagram.h0), pe0, len(diagram.h1), pe1)


def features_for_vector(f_norm: np.ndarray) -> PhFeatures:
    return ph_features(vr_persistence(embed_curve(f_norm)))


def features_matrix(F_norm: np.ndarray) -> np.ndarray:
    """Stack the four descriptors for every row of an (N, d) matrix."""
    F_norm = np.atleast_2d(np.asarray(F_norm, dtype=float))
    return np.array([features_for_vector(row).as_array() for row in F_norm])


def augment(f_norm: np.ndarray, feats: PhFeatures,
            feat_stats: NormStats) -> np.ndarray:
    """Append the z-scored topological descriptors to the normalized vector."""
    if feat_stats.d != 4:
        raise ValueError("feature stats must cover exactly the 4 descriptors")
    z = (feats.as_array() - feat_stats.mu) / feat_stats.sigma
    return np.concatenate([np.asarray(f_norm, dtype=float), z])
