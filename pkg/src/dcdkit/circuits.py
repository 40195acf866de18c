"""Circuits as top-|score| edge sets, and their faithfulness under patching."""
from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import engine
from .metrics import LogitDiff, metric_logit_diff  # noqa: F401  (re-exported)
from .model import Params

DEFAULT_GRID = (0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0)
DEGENERATE_EPS = 1e-6


class CircuitError(ValueError):
    pass


class DegenerateDenominator(ArithmeticError):
    """|m(G) - m(empty)| is below the degeneracy threshold."""


@dataclass
class Circuit:
    manifest_hash: str
    size_fraction: float
    edges: np.ndarray  # canonical indices, ascending
    scores: np.ndarray  # score of each selected edge
    n_total: int
    method: str = ""
    dataset_id: str = ""

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if len(np.unique(self.edges)) != len(self.edges):
            raise CircuitError("duplicate edges in circuit")

    @property
    def edge_set(self) -> frozenset:
        return frozenset(int(e) for e in self.edges)

    def mask(self) -> np.ndarray:
        m = np.zeros(self.n_total, bool)
        m[self.edges] = True
        return m

    def nodes(self, graph) -> list:
        """Node set derived from the edge endpoints."""
        ids = set()
        for e in self.edges:
            ed = graph.edges[e]
            ids.add(graph.node_index[ed.src])
            ids.add(graph.node_index[ed.dst])
        return [graph.nodes[i] for i in sorted(ids)]

    def to_json(self, graph) -> dict:
        return {
            "manifest_hash": self.manifest_hash,
            "method": self.method,
            "size_fraction": self.size_fraction,
            "dataset_id": self.dataset_id,
            "edges": [
                {"index": int(e), "src": graph.edges[e].src.name, "dst": graph.edges[e].dst.name,
                 "channel": graph.edges[e].channel, "score": float(s)}
                for e, s in zip(self.edges, self.scores)
            ],
        }

    def save(self, path, graph) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(graph), fh, indent=1)

    @classmethod
    def from_json(cls, d: dict, n_total: int) -> "Circuit":
        edges = [e["index"] for e in d["edges"]]
        scores = [e["score"] for e in d["edges"]]
        return cls(d["manifest_hash"], d["size_fraction"], edges, scores, n_total,
                   d.get("method", ""), d.get("dataset_id", ""))


def n_selected(k: float, n_edges: int) -> int:
    # round away float noise before the ceiling so 0.05 * 100 gives 5, not 6
    return min(n_edges, int(math.ceil(round(k * n_edges, 9))))


def ranking(scores) -> np.ndarray:
    """Edge indices by descending |score|, ties to the lower index."""
    s = np.abs(np.asarray(scores, dtype=np.float64))
    return np.lexsort((np.arange(len(s)), -s))


def select_circuit(scores, k: float, manifest_hash: str = "", method: str = "",
                   dataset_id: str = "") -> Circuit:
    if not 0 < k <= 1:
        raise CircuitError(f"size fraction must lie in (0, 1], got {k}")
    scores = np.asarray(scores, dtype=np.float64)
    n = n_selected(k, len(scores))
    chosen = np.sort(ranking(scores)[:n])
    return Circuit(manifest_hash, k, chosen, scores[chosen], len(scores), method, dataset_id)


def jaccard(c1: Circuit, c2: Circuit) -> float:
    if c1.manifest_hash != c2.manifest_hash:
        raise CircuitError("circuits come from different graphs")
    a, b = c1.edge_set, c2.edge_set
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)


# --- evaluation ---------------------------------------------------------------


@dataclass
class ExampleMetrics:
    """Per-example metric values: full model, empty circuit, and each mask."""

    m_G: np.ndarray  # (n,)
    m_empty: np.ndarray  # (n,)
    m_C: np.ndarray  # (n, n_masks)


def example_metrics(params: Params, pairs: Sequence, masks: Sequence[np.ndarray],
                    zero_ablation: bool = False, batch_size: int = 128) -> ExampleMetrics:
    """Evaluate circuits (boolean edge masks, True = in circuit) on each pair.

    Non-circuit edges read the corrupted run's source outputs. ``m_empty`` is
    the all-corrupted patched run, so an empty circuit reproduces it exactly.
    """
    graph = engine.graph_for(params)
    pairs = list(pairs)
    n = len(pairs)
    masks = [np.asarray(m, bool) for m in masks]
    mG, mE = np.empty(n), np.empty(n)
    mC = np.empty((n, len(masks)))
    groups = defaultdict(list)
    for i, p in enumerate(pairs):
        groups[len(p.clean)].append(i)
    all_corrupt = np.ones(graph.n_edges, bool)
    for idx in groups.values():
        for lo in range(0, len(idx), batch_size):
            chunk = idx[lo : lo + batch_size]
            sub = [pairs[i] for i in chunk]
            clean = np.array([p.clean for p in sub])
            metric = LogitDiff.from_pairs(sub)
            cache = engine.run(params, clean)
            if zero_ablation:
                src = [np.zeros_like(o) for o in cache.outputs]
            else:
                src = engine.run(params, np.array([p.corrupt for p in sub])).outputs
            mG[chunk] = metric.value(cache.logits)
            mE[chunk] = metric.value(engine.run(params, clean, corrupt=src, mask=all_corrupt).logits)
            for j, m in enumerate(masks):
                if m.all():
                    mC[chunk, j] = mG[chunk]
                else:
                    mC[chunk, j] = metric.value(engine.run(params, clean, corrupt=src, mask=~m).logits)
    return ExampleMetrics(mG, mE, mC)


@dataclass
class Faithfulness:
    f: float
    m_C: float
    m_G: float
    m_empty: float
    degenerate: bool = False

    def to_json(self) -> dict:
        return {"f": self.f, "m_C": self.m_C, "m_G": self.m_G, "m_empty": self.m_empty,
                "degenerate": self.degenerate}


def faithfulness_value(m_C: float, m_G: float, m_empty: float, eps: float = DEGENERATE_EPS) -> Faithfulness:
    den = m_G - m_empty
    if abs(den) < eps:
        return Faithfulness(float("nan"), m_C, m_G, m_empty, True)
    return Faithfulness((m_C - m_empty) / den, m_C, m_G, m_empty)


def _mean(x) -> float:
    return float(np.sum(x) / len(x))


def faithfulness(params: Params, circuit: Circuit, eval_dataset, zero_ablation: bool = False) -> Faithfulness:
    """Dataset-level f from dataset-mean metric values.

    A degenerate denominator is flagged (``degenerate=True``, ``f`` NaN) rather
    than raised; callers decide whether to stop.
    """
    em = example_metrics(params, eval_dataset, [circuit.mask()], zero_ablation)
    return faithfulness_value(_mean(em.m_C[:, 0]), _mean(em.m_G), _mean(em.m_empty))


@dataclass
class FaithfulnessCurve:
    sizes: list
    f: list
    m_C: list
    m_G: float
    m_empty: float
    degenerate: bool = False
    label: str = ""

    def points(self) -> list:
        return list(zip(self.sizes, self.f))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["size", "f"])
            for k, f in self.points():
                w.writerow([repr(float(k)), repr(float(f))])

    def summary(self) -> dict:
        return {"cpr": cpr(self), "cmd_prime": cmd_prime(self), "m_G": self.m_G, "m_empty": self.m_empty}


def check_grid(grid) -> list:
    grid = [float(k) for k in grid]
    if not grid or any(not 0 < k <= 1 for k in grid) or any(a >= b for a, b in zip(grid, grid[1:])):
        raise CircuitError("size grid must be strictly increasing in (0, 1]")
    return grid


def faithfulness_curve(params: Params, scores, eval_dataset, grid=DEFAULT_GRID,
                       zero_ablation: bool = False, label: str = "") -> FaithfulnessCurve:
    grid = check_grid(grid)
    circuits = [select_circuit(scores, k) for k in grid]
    em = example_metrics(params, eval_dataset, [c.mask() for c in circuits], zero_ablation)
    mG, mE = _mean(em.m_G), _mean(em.m_empty)
    fs, mcs = [], []
    for j in range(len(grid)):
        r = faithfulness_value(_mean(em.m_C[:, j]), mG, mE)
        fs.append(r.f)
        mcs.append(r.m_C)
    return FaithfulnessCurve(grid, fs, mcs, mG, mE, abs(mG - mE) < DEGENERATE_EPS, label)


def _curve_xy(curve):
    if isinstance(curve, FaithfulnessCurve):
        pts = curve.points()
    else:
        pts = list(curve)
    if not pts:
        raise CircuitError("empty curve")
    k = np.array([p[0] for p in pts], dtype=np.float64)
    f = np.array([p[1] for p in pts], dtype=np.float64)
    if k[0] > 0:
        k = np.concatenate([[0.0], k])
        f = np.concatenate([[f[0]], f])
    return k, f


def _trapz(k, y) -> float:
    return float(np.sum((k[1:] - k[:-1]) * (y[1:] + y[:-1]) / 2.0))


def cpr(curve) -> float:
    """Area under f over size, trapezoid rule, first value held back to k = 0."""
    return _trapz(*_curve_xy(curve))


def cmd_prime(curve) -> float:
    k, f = _curve_xy(curve)
    return _trapz(k, np.maximum(0.0, 1.0 - f))


def cmd(curve) -> float:
    """Two-sided variant: integral of |1 - f|."""
    k, f = _curve_xy(curve)
    return _trapz(k, np.abs(1.0 - f))


@dataclass
class BestOfK:
    value: float
    per_example: np.ndarray  # f*(x_i), NaN where degenerate
    matrix: np.ndarray  # (n_examples, n_circuits) per-example f
    degenerate: np.ndarray  # bool per example
    n_degenerate: int = 0
    extra: dict = field(default_factory=dict)


def per_example_faithfulness(em: ExampleMetrics, eps: float = DEGENERATE_EPS):
    den = em.m_G - em.m_empty
    degen = np.abs(den) < eps
    safe = np.where(degen, 1.0, den)
    F = (em.m_C - em.m_empty[:, None]) / safe[:, None]
    F[degen] = np.nan
    return F, degen


def best_of_k_faithfulness(params: Params, circuits: Sequence[Circuit], eval_dataset,
                           zero_ablation: bool = False) -> BestOfK:
    if not circuits:
        raise CircuitError("need at least one circuit")
    em = example_metrics(params, eval_dataset, [c.mask() for c in circuits], zero_ablation)
    return best_of_k_from_metrics(em)


def best_of_k_from_metrics(em: ExampleMetrics, columns=None) -> BestOfK:
    F, degen = per_example_faithfulness(em)
    if columns is not None:
        F = F[:, list(columns)]
    if degen.all():
        raise DegenerateDenominator("every example has a degenerate denominator")
    best = np.full(F.shape[0], np.nan)
    best[~degen] = F[~degen].max(axis=1)
    return BestOfK(_mean(best[~degen]), best, F, degen, int(degen.sum()))
