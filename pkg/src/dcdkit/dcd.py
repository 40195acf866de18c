"""Data-driven circuit discovery: group examples by their attribution patterns,
then discover one circuit per group. Includes the three comparison baselines."""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import attribution as attr
from . import cluster as cl
from .circuits import DEFAULT_GRID, Circuit, ranking, select_circuit
from .cluster import ClusterError

log = logging.getLogger(__name__)

ALGORITHMS = ("kmeans", "agglomerative", "divisive")
REDUCTIONS = ("pca", "truncated_svd")
K_RANGE_DESK = tuple(range(2, 13))
K_RANGE_WIDE = (5, 10, 15, 20, 25, 30, 35, 40)
_MAGIC_B = b"DCDB"


# --- binarization ----------------------------------------------------------------


@dataclass
class BinaryAttribution:
    rows: np.ndarray  # (n, n_edges) bool
    gamma: float
    counts: np.ndarray  # retained edges per row
    empty_rows: list  # indices of all-zero rows

    def save(self, path, manifest_hash: str = "") -> None:
        n, E = self.rows.shape
        header = json.dumps({"manifest_hash": manifest_hash, "gamma": self.gamma, "n_examples": n,
                             "n_edges": E, "bitorder": "little"}, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(_MAGIC_B)
            fh.write(struct.pack("<HI", 1, len(header)))
            fh.write(header)
            fh.write(np.packbits(self.rows, axis=1, bitorder="little").tobytes())

    @classmethod
    def load(cls, path) -> "BinaryAttribution":
        data = Path(path).read_bytes()
        if data[:4] != _MAGIC_B:
            raise ValueError(f"{path}: not a binary attribution file")
        _, hlen = struct.unpack_from("<HI", data, 4)
        h = json.loads(data[10 : 10 + hlen])
        n, E = h["n_examples"], h["n_edges"]
        packed = np.frombuffer(data, np.uint8, offset=10 + hlen).reshape(n, -1)
        rows = np.unpackbits(packed, axis=1, count=E, bitorder="little").astype(bool)
        counts = rows.sum(1)
        return cls(rows, h["gamma"], counts, [int(i) for i in np.flatnonzero(counts == 0)])


def retained_prefix(row, gamma: float) -> np.ndarray:
    """Indices of the smallest top-|s| prefix whose mass reaches gamma of the total."""
    order = ranking(row)
    mags = np.abs(np.asarray(row, dtype=np.float64))[order]
    total = math.fsum(mags)
    if total <= 0:
        return np.empty(0, dtype=np.int64)
    target = gamma * total
    # the float cumsum gives the candidate; correctly rounded sums settle ties at the boundary
    p = min(int(np.searchsorted(np.cumsum(mags), target, side="left")) + 1, len(mags))
    while p > 1 and math.fsum(mags[: p - 1]) >= target:
        p -= 1
    while p < len(mags) and math.fsum(mags[:p]) < target:
        p += 1
    return order[:p]


def binarize(rows, gamma: float = 0.99) -> BinaryAttribution:
    if not 0 < gamma <= 1:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    if isinstance(rows, attr.AttributionMatrix):
        rows = rows.rows
    rows = np.asarray(rows, dtype=np.float64)
    out = np.zeros(rows.shape, bool)
    empty = []
    for i, r in enumerate(rows):
        keep = retained_prefix(r, gamma)
        if len(keep) == 0:
            empty.append(i)
        out[i, keep] = True
    if empty:
        log.warning("%d all-zero attribution rows binarize to empty sets", len(empty))
    return BinaryAttribution(out, gamma, out.sum(1), empty)


# --- reduction -------------------------------------------------------------------


@dataclass
class ReducedEmbedding:
    coords: np.ndarray  # (n, r)
    method: str
    r: int
    components: np.ndarray  # (r, n_features), orthonormal rows
    mean: Optional[np.ndarray]
    explained: np.ndarray  # variance (pca) or squared singular values per component
    seed: int = 42

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if self.mean is not None:
            X = X - self.mean
        return X @ self.components.T


def reduce(rows, method: str = "pca", r: int = 20, seed: int = 42) -> ReducedEmbedding:
    """Project onto the top-r principal axes (pca, centred) or right singular
    vectors (truncated_svd, uncentred). Each axis is signed so that its
    largest-magnitude entry is positive. The dense SVD is deterministic, so
    ``seed`` is only recorded."""
    if method not in REDUCTIONS:
        raise ValueError(f"unknown reduction {method!r}")
    X = np.asarray(rows, dtype=np.float64)
    n, p = X.shape
    if n < 2:
        raise ValueError("reduction needs at least two examples")
    if not 1 <= r <= min(n, p):
        raise ValueError(f"r={r} must lie in [1, min(n, |E|) = {min(n, p)}]")
    mean = X.mean(0) if method == "pca" else None
    Xc = X - mean if mean is not None else X
    _, sv, Vt = np.linalg.svd(Xc, full_matrices=False)
    comps = Vt[:r].copy()
    for i, c in enumerate(comps):
        if c[int(np.argmax(np.abs(c)))] < 0:
            comps[i] = -c
    explained = sv[:r] ** 2 / ((n - 1) if method == "pca" else 1)
    return ReducedEmbedding(Xc @ comps.T, method, r, comps, mean, explained, seed)


# --- pipeline ----------------------------------------------------------------------


@dataclass
class DCDConfig:
    method: str = "eap_ig"
    ig_steps: int = attr.DEFAULT_IG_STEPS
    binarize: bool = True
    gamma: float = 0.99
    reduction: str = "pca"
    r: int = 20
    algorithm: str = "kmeans"
    K_range: tuple = K_RANGE_DESK
    B: int = 20
    n_init: int = 5
    seed: int = 42
    sizes: tuple = DEFAULT_GRID
    min_cluster: int = 3

    def validate(self) -> "DCDConfig":
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown clustering algorithm {self.algorithm!r}")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"unknown reduction {self.reduction!r}")
        return self


@dataclass
class ClusterResult:
    assignment: np.ndarray
    K_star: int
    algorithm: str
    reduction: str
    gap: cl.GapResult
    silhouettes: dict  # K -> mean silhouette (None when undefined)
    cluster_rows: np.ndarray  # (K, n_edges) mean attribution per cluster
    circuits: dict  # size -> list of Circuit, one per cluster
    manifest_hash: str = ""
    warnings: list = field(default_factory=list)
    binary: Optional[BinaryAttribution] = None
    distances: Optional[np.ndarray] = None

    @property
    def clusters(self) -> list:
        return [np.flatnonzero(self.assignment == k) for k in range(self.K_star)]

    def to_json(self, circuit_files: Optional[dict] = None) -> dict:
        return {
            "assignments": [int(a) for a in self.assignment],
            "K_star": self.K_star,
            "algorithm": self.algorithm,
            "reduction": self.reduction,
            "gap_curve": self.gap.to_json(),
            "silhouettes": {str(k): v for k, v in self.silhouettes.items()},
            "per_cluster_circuit_files": circuit_files or {},
            "warnings": self.warnings,
        }


def cluster_means(rows, assignment, K: int) -> np.ndarray:
    rows = np.asarray(rows)
    return np.stack([attr.mean_row(rows[assignment == k]) for k in range(K)])


def circuits_for_rows(score_rows, sizes, manifest_hash: str, method: str, tag: str) -> dict:
    return {
        float(k): [select_circuit(s, k, manifest_hash, method, f"{tag}{i}") for i, s in enumerate(score_rows)]
        for k in sizes
    }


def cluster_matrix(matrix: attr.AttributionMatrix, config: DCDConfig) -> ClusterResult:
    """Everything after per-example attribution: binarize, reduce, pick K*, cluster,
    and build per-cluster circuits."""
    config.validate()
    rows = matrix.rows.astype(np.float64)
    n, E = rows.shape
    warnings = []
    binary = binarize(rows, config.gamma) if config.binarize else None
    feats = binary.rows.astype(np.float64) if binary is not None else rows
    r = min(config.r, n, E)
    if r < config.r:
        warnings.append(f"r reduced from {config.r} to {r} (n={n}, |E|={E})")
    emb = reduce(feats, config.reduction, r, config.seed)
    Ks = [k for k in config.K_range if k <= n]
    if binary is not None:
        D = cl.jaccard_matrix(binary.rows)
    else:
        diff = emb.coords[:, None, :] - emb.coords[None, :, :]
        D = np.sqrt((diff * diff).sum(-1))
    try:
        gap = cl.gap_statistic(emb.coords, Ks, config.B, config.seed, config.n_init)
    except ClusterError as exc:
        # identical embeddings: a single group is the only sensible answer
        warnings.append(f"gap statistic unavailable ({exc}); using one cluster")
        gap = cl.GapResult(1, [], [], [], [], [], {}, True)
    K = gap.K_star
    if K == 1:
        labels = np.zeros(n, dtype=np.int64)
    elif config.algorithm == "kmeans":
        labels = gap.labels[K]
    elif config.algorithm == "agglomerative":
        labels = cl.cluster_agglomerative(D, K)
    else:
        labels = cl.cluster_divisive(emb.coords, K, config.seed, config.n_init)
    sil = {}
    for k, lab in gap.labels.items():
        sil[k] = cl.silhouette(lab, D) if len(np.unique(lab)) >= 2 else None
    sizes = np.bincount(labels, minlength=K)
    for k, s in enumerate(sizes):
        if s < config.min_cluster:
            warnings.append(f"cluster {k} has only {s} examples")
    for w in warnings:
        log.warning(w)
    means = cluster_means(rows, labels, K)
    circuits = circuits_for_rows(means, config.sizes, matrix.manifest_hash, matrix.method, "cluster")
    return ClusterResult(labels, K, config.algorithm, config.reduction, gap, sil, means, circuits,
                         matrix.manifest_hash, warnings, binary, D)


def run_dcd(params, dataset, method: Optional[str] = None, config: Optional[DCDConfig] = None,
            matrix: Optional[attr.AttributionMatrix] = None) -> ClusterResult:
    config = config or DCDConfig()
    if method is not None:
        config = DCDConfig(**{**asdict(config), "method": method})
    dataset = list(dataset)
    if not dataset:
        raise ValueError("empty dataset")
    if matrix is None:
        mp = {"steps": config.ig_steps} if config.method == "eap_ig" else {}
        matrix = attr.attribute_dataset(params, dataset, config.method, mp)
    return cluster_matrix(matrix, config)


# --- baselines ---------------------------------------------------------------------


def baseline_random_edges(graph, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).random(graph.n_edges)


def medoid(members: Sequence[int], D) -> int:
    members = np.sort(np.asarray(members, dtype=np.int64))
    tot = np.asarray(D)[np.ix_(members, members)].sum(1)
    return int(members[int(np.argmin(tot))])  # argmin takes the first, i.e. lowest index


def baseline_k_representative(result: ClusterResult, rows, D=None, sizes=None) -> tuple[list, dict]:
    """Per cluster, the medoid (Jaccard on binary rows) and its own top-k circuit."""
    D = result.distances if D is None else D
    rows = np.asarray(rows, dtype=np.float64)
    meds = [medoid(m, D) for m in result.clusters]
    sizes = sizes or list(result.circuits.keys())
    return meds, circuits_for_rows(rows[meds], sizes, result.manifest_hash, "k_representative", "medoid")


def random_partition(n: int, K: int, seed: int) -> np.ndarray:
    if not 1 <= K <= n:
        raise ValueError(f"K={K} outside [1, {n}]")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, K, size=n)
    perm = rng.permutation(n)
    labels[perm[:K]] = np.arange(K)  # every part gets at least one member
    return labels


def baseline_k_random(rows, K: int, seed: int, sizes=DEFAULT_GRID, manifest_hash: str = "",
                      method: str = "k_random") -> tuple[np.ndarray, dict]:
    rows = np.asarray(rows, dtype=np.float64)
    labels = random_partition(rows.shape[0], K, seed)
    means = cluster_means(rows, labels, K)
    return labels, circuits_for_rows(means, sizes, manifest_hash, method, "part")


def purity_table(assignment, labels: Sequence, K: int) -> tuple[list, np.ndarray, np.ndarray]:
    """Counts of each (task, variant) label per cluster, and per-cluster purity."""
    names = sorted({tuple(l) for l in labels})
    counts = np.zeros((K, len(names)), dtype=np.int64)
    for a, l in zip(assignment, labels):
        counts[a, names.index(tuple(l))] += 1
    purity = counts.max(1) / np.maximum(counts.sum(1), 1)
    return names, counts, purity
