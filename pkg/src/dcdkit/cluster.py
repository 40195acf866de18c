"""Clustering primitives: k-means, average-linkage agglomerative, divisive 2-means,
the gap statistic, silhouette and Jaccard distances."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class ClusterError(ValueError):
    pass


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def canonical_labels(labels) -> np.ndarray:
    """Relabel clusters 0..K-1 in order of first appearance."""
    labels = np.asarray(labels)
    out = np.empty(len(labels), dtype=np.int64)
    seen: dict = {}
    for i, c in enumerate(labels):
        out[i] = seen.setdefault(int(c), len(seen))
    return out


# --- distances -----------------------------------------------------------------


def jaccard_distance(bi, bj) -> float:
    bi = np.asarray(bi, bool)
    bj = np.asarray(bj, bool)
    if bi.shape != bj.shape:
        raise ClusterError(f"length mismatch: {bi.shape} vs {bj.shape}")
    union = np.count_nonzero(bi | bj)
    if union == 0:
        return 0.0  # two empty supports are treated as identical
    return 1.0 - np.count_nonzero(bi & bj) / union


def jaccard_matrix(B) -> np.ndarray:
    B = np.asarray(B, dtype=np.float64)
    inter = B @ B.T
    cnt = B.sum(1)
    union = cnt[:, None] + cnt[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        D = np.where(union > 0, 1.0 - inter / np.where(union > 0, union, 1.0), 0.0)
    np.fill_diagonal(D, 0.0)
    return D


def sq_euclidean(X, C) -> np.ndarray:
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


# --- k-means -------------------------------------------------------------------


def _kmeanspp(X, K, rng) -> np.ndarray:
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = sq_euclidean(X, centers[0][None])[:, 0]
    for _ in range(1, K):
        tot = d2.sum()
        if tot <= 0:
            idx = rng.integers(n)
        else:
            idx = min(int(np.searchsorted(np.cumsum(d2), rng.random() * tot, side="right")), n - 1)
        centers.append(X[idx])
        d2 = np.minimum(d2, sq_euclidean(X, X[idx][None])[:, 0])
    return np.array(centers)


def _lloyd(X, C, max_iter: int):
    K = C.shape[0]
    labels = None
    for _ in range(max_iter):
        D = sq_euclidean(X, C)
        new = D.argmin(1)
        counts = np.bincount(new, minlength=K)
        for c in np.flatnonzero(counts == 0):
            # re-seed an empty cluster at the point farthest from its own centroid
            far = int(D[np.arange(len(X)), new].argmax())
            new[far] = c
            D[far] = 0.0
            counts = np.bincount(new, minlength=K)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        C = np.stack([X[labels == c].mean(0) for c in range(K)])
    D = sq_euclidean(X, C)
    inertia = float(((X - C[labels]) ** 2).sum())
    return labels, C, inertia


@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    inertia: float  # W_K


def kmeans(X, K: int, n_init: int = 5, seed: int = 0, max_iter: int = 100) -> KMeansResult:
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if not 1 <= K <= n:
        raise ClusterError(f"K={K} outside [1, {n}]")
    best: Optional[KMeansResult] = None
    for run in range(n_init):
        rng = _rng(seed, K, run)
        labels, C, w = _lloyd(X, _kmeanspp(X, K, rng), max_iter)
        if best is None or w < best.inertia:
            best = KMeansResult(labels, C, w)
    return best


def cluster_kmeans(X, K: int, n_init: int = 5, seed: int = 0) -> tuple[np.ndarray, float]:
    r = kmeans(X, K, n_init, seed)
    return canonical_labels(r.labels), r.inertia


# --- agglomerative -------------------------------------------------------------


@dataclass
class Dendrogram:
    merges: list  # (slot_i, slot_j, height, new_size)
    labels: np.ndarray


def agglomerative_average(D, K: int) -> Dendrogram:
    """Average linkage on a precomputed distance matrix, stopped at K clusters.

    Each cluster lives in the slot of its smallest member; among equal
    distances the merge with the smallest (i, j) slot pair wins.
    """
    D = np.array(D, dtype=np.float64)
    n = D.shape[0]
    if D.shape != (n, n):
        raise ClusterError("distance matrix must be square")
    if not 1 <= K <= n:
        raise ClusterError(f"K={K} outside [1, {n}]")
    size = np.ones(n)
    active = np.ones(n, bool)
    owner = np.arange(n)
    work = D.copy()
    work[np.tril_indices(n)] = np.inf
    merges = []
    for _ in range(n - K):
        flat = int(np.argmin(work))
        i, j = divmod(flat, n)
        h = work[i, j]
        ni, nj = size[i], size[j]
        row = (ni * D[i] + nj * D[j]) / (ni + nj)
        D[i, :] = row
        D[:, i] = row
        D[i, i] = 0.0
        size[i] = ni + nj
        active[j] = False
        owner[owner == j] = i
        work[j, :] = np.inf
        work[:, j] = np.inf
        for t in np.flatnonzero(active):
            if t < i:
                work[t, i] = row[t]
            elif t > i:
                work[i, t] = row[t]
        merges.append((i, j, float(h), int(size[i])))
    return Dendrogram(merges, canonical_labels(owner))


def cluster_agglomerative(D, K: int) -> np.ndarray:
    return agglomerative_average(D, K).labels


# --- divisive ------------------------------------------------------------------


def _sse(X) -> float:
    if len(X) < 2:
        return 0.0
    return float(((X - X.mean(0)) ** 2).sum())


def cluster_divisive(X, K: int, seed: int = 0, n_init: int = 5) -> np.ndarray:
    """Split the cluster with the largest within-cluster sum of squares by 2-means
    until K clusters exist."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if not 1 <= K <= n:
        raise ClusterError(f"K={K} outside [1, {n}]")
    labels = np.zeros(n, dtype=np.int64)
    for step in range(1, K):
        sse = [(_sse(X[labels == c]), -c) for c in range(step)]
        target = -max(sse)[1]
        members = np.flatnonzero(labels == target)
        if len(members) < 2:
            target = next(c for c in range(step) if np.count_nonzero(labels == c) >= 2)
            members = np.flatnonzero(labels == target)
        sub = kmeans(X[members], 2, n_init, seed + step).labels
        labels[members[sub == 1]] = step
    return canonical_labels(labels)


# --- gap statistic ---------------------------------------------------------------


@dataclass
class GapResult:
    K_star: int
    Ks: list
    gap: list
    s: list
    W: list
    ref_logW_mean: list
    labels: dict = field(default_factory=dict)  # K -> data k-means labels
    fallback: bool = False

    def to_json(self) -> dict:
        return {"K_star": self.K_star, "Ks": self.Ks, "gap": self.gap, "s_K": self.s, "W_K": self.W,
                "ref_logW_mean": self.ref_logW_mean, "fallback": self.fallback}


_TINY = 1e-300


def gap_statistic(X, K_range: Sequence[int], B: int = 20, seed: int = 0, n_init: int = 5) -> GapResult:
    X = np.asarray(X, dtype=np.float64)
    Ks = [int(k) for k in K_range]
    if any(a >= b for a, b in zip(Ks, Ks[1:])) or not Ks:
        raise ClusterError("K_range must be sorted ascending")
    if B < 2:
        raise ClusterError("B must be >= 2")
    lo, hi = X.min(0), X.max(0)
    if np.all(hi - lo == 0):
        raise ClusterError("degenerate bounding box: all points identical")
    Ks = [k for k in Ks if k <= X.shape[0]]
    if not Ks:
        raise ClusterError("every K in range exceeds the number of points")
    rng = _rng(seed, 0xB0C5)
    refs = [lo + (hi - lo) * rng.random(X.shape) for _ in range(B)]
    gap, s, W, refm, labels = [], [], [], [], {}
    for K in Ks:
        km = kmeans(X, K, n_init, seed)
        labels[K] = canonical_labels(km.labels)
        logW = np.log(max(km.inertia, _TINY))
        lw = np.array([np.log(max(kmeans(R, K, n_init, seed + 1 + b).inertia, _TINY))
                       for b, R in enumerate(refs)])
        m = float(lw.sum() / B)
        sd = float(np.sqrt(((lw - m) ** 2).sum() / B))
        gap.append(m - float(logW))
        s.append(sd * np.sqrt(1.0 + 1.0 / B))
        W.append(km.inertia)
        refm.append(m)
    K_star, fallback = None, False
    for i in range(len(Ks) - 1):
        if gap[i] >= gap[i + 1] - s[i + 1]:
            K_star = Ks[i]
            break
    if K_star is None:
        K_star, fallback = Ks[int(np.argmax(gap))], True
    return GapResult(K_star, Ks, gap, s, W, refm, labels, fallback)


# --- silhouette -------------------------------------------------------------------


def silhouette_samples(labels, D) -> np.ndarray:
    labels = np.asarray(labels)
    D = np.asarray(D, dtype=np.float64)
    ids = np.unique(labels)
    if len(ids) < 2:
        raise ClusterError("silhouette needs at least two clusters")
    n = len(labels)
    sums = np.stack([D[:, labels == c].sum(1) for c in ids], axis=1)  # (n, K)
    counts = np.array([np.count_nonzero(labels == c) for c in ids])
    own = np.searchsorted(ids, labels)
    out = np.zeros(n)
    for i in range(n):
        c = own[i]
        if counts[c] == 1:
            continue  # singleton convention
        a = sums[i, c] / (counts[c] - 1)
        others = [sums[i, k] / counts[k] for k in range(len(ids)) if k != c]
        b = min(others)
        m = max(a, b)
        out[i] = 0.0 if m == 0 else (b - a) / m
    return out


def silhouette(labels, D) -> float:
    s = silhouette_samples(labels, D)
    return float(s.sum() / len(s))
