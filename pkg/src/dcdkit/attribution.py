"""Per-edge attribution scores: exact patching (E-Act), EAP and EAP-IG.

All three share one sign convention: ``s(e) > 0`` means corrupting ``e``
lowers the metric. For an edge ``u -> (v, channel)`` with clean source output
``z_u``, corrupted output ``z'_u`` and metric gradient ``g`` at the site,

    EAP     s(e) = sum_pos (z_u - z'_u) . g
    E-Act   s(e) = m(clean) - m(clean with only e reading z'_u)

so EAP is the first-order Taylor estimate of E-Act.
"""
from __future__ import annotations

import json
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import engine
from .engine import InputError
from .metrics import LogitDiff
from .model import Params

METHODS = ("e_act", "eap", "eap_ig")
DEFAULT_IG_STEPS = 5
_MAGIC = b"DCDA"
_VERSION = 1


class AttributionError(ValueError):
    pass


# --- core kernels -------------------------------------------------------------


def _pair_arrays(pairs) -> tuple[np.ndarray, np.ndarray, LogitDiff]:
    lengths = {len(p.clean) for p in pairs}
    if len(lengths) != 1:
        raise InputError("batched pairs must share one sequence length")
    clean = np.array([p.clean for p in pairs], dtype=np.int64)
    corrupt = np.array([p.corrupt for p in pairs], dtype=np.int64)
    return clean, corrupt, LogitDiff.from_pairs(pairs)


def eap_scores(graph, clean_outputs, corrupt_outputs, site_grads) -> np.ndarray:
    """``(B, n_edges)`` EAP scores from stacked source outputs and site gradients.

    ``clean_outputs``/``corrupt_outputs``: ``(n_sources, B, T, d)``;
    ``site_grads``: ``(n_sites, B, T, d)``.
    """
    delta = np.asarray(clean_outputs) - np.asarray(corrupt_outputs)
    S, B = delta.shape[:2]
    D = delta.transpose(1, 0, 2, 3).reshape(B, S, -1)
    Gs = np.asarray(site_grads)
    Gm = Gs.transpose(1, 0, 2, 3).reshape(B, Gs.shape[0], -1)
    M = D @ Gm.transpose(0, 2, 1)  # (B, n_sources, n_sites)
    return M[:, graph.edge_src, graph.edge_site]


def _stack(outputs, B) -> np.ndarray:
    return np.stack([np.broadcast_to(o, (B,) + o.shape[1:]) for o in outputs])


def eap_batch(params: Params, pairs, corrupt_outputs=None) -> np.ndarray:
    """EAP rows for pairs of equal length.

    ``corrupt_outputs`` overrides the corrupted run's source outputs (used for
    the interpolated-corruption check).
    """
    graph = engine.graph_for(params)
    clean, corrupt, metric = _pair_arrays(pairs)
    cache = engine.run(params, clean)
    gc = engine.backward_metric(params, cache, metric)
    if corrupt_outputs is None:
        corrupt_outputs = engine.run(params, corrupt).outputs
    B = len(pairs)
    return eap_scores(graph, _stack(cache.outputs, B), _stack(corrupt_outputs, B), np.stack(gc.site_grads))


def eap_ig_batch(params: Params, pairs, steps: int = DEFAULT_IG_STEPS) -> np.ndarray:
    """EAP-IG rows: site gradients averaged over ``alpha = j/steps, j = 1..steps``.

    The interpolation is on the input embeddings; source-output differences
    still come from the plain clean and corrupted runs.
    """
    if steps < 1:
        raise AttributionError("steps must be >= 1")
    graph = engine.graph_for(params)
    clean, corrupt, metric = _pair_arrays(pairs)
    B, T = clean.shape
    e_clean = engine.embed(params, clean)
    e_corr = engine.embed(params, corrupt)
    embs = []
    for j in range(1, steps + 1):
        if j == steps:
            embs.append(e_clean)  # alpha = 1 exactly
        else:
            a = j / steps
            embs.append(e_corr + a * (e_clean - e_corr))
    emb = np.stack(embs, axis=1).reshape(B * steps, T, -1)  # example-major
    cache = engine.run(params, np.repeat(clean, steps, axis=0), embedding=emb)
    gc = engine.backward_metric(params, cache, metric.repeat(steps))
    G = np.stack(gc.site_grads).reshape(len(gc.site_grads), B, steps, T, -1)
    G = G.sum(axis=2) / steps
    clean_cache = engine.run(params, clean)
    corr_cache = engine.run(params, corrupt)
    return eap_scores(graph, _stack(clean_cache.outputs, B), _stack(corr_cache.outputs, B), G)


def e_act_row(params: Params, pair, corrupt_outputs=None, chunk: int = 256) -> np.ndarray:
    """Exact single-edge patching for one pair; rows of the patch batch are edges."""
    graph = engine.graph_for(params)
    clean, corrupt, metric = _pair_arrays([pair])
    m_clean = metric.value(engine.run(params, clean).logits)[0]
    if corrupt_outputs is None:
        corrupt_outputs = engine.run(params, corrupt).outputs
    E = graph.n_edges
    out = np.empty(E)
    for lo in range(0, E, chunk):
        hi = min(E, lo + chunk)
        mask = np.zeros((hi - lo, E), bool)
        mask[np.arange(hi - lo), np.arange(lo, hi)] = True
        logits = engine.run(params, clean, corrupt=corrupt_outputs, mask=mask).logits
        out[lo:hi] = m_clean - metric.value(logits)
    return out


def attribute_e_act(params: Params, pair, metric_spec=None) -> np.ndarray:
    _check_metric(pair, metric_spec)
    return e_act_row(params, pair)


def attribute_eap(params: Params, pair, metric_spec=None) -> np.ndarray:
    _check_metric(pair, metric_spec)
    return eap_batch(params, [pair])[0]


def attribute_eap_ig(params: Params, pair, metric_spec=None, steps: int = DEFAULT_IG_STEPS) -> np.ndarray:
    _check_metric(pair, metric_spec)
    return eap_ig_batch(params, [pair], steps)[0]


def _check_metric(pair, metric_spec):
    # The logit-difference metric is the only one supported; its labels live on the pair.
    if metric_spec not in (None, "logit_diff"):
        raise AttributionError(f"unsupported metric {metric_spec!r}")


# --- dataset level ------------------------------------------------------------


@dataclass
class AttributionMatrix:
    """Per-example score rows (stored as float32) and their float64 mean.

    Rows are quantized to float32 on construction so that the file format
    round-trips exactly and the mean row is always the mean of the stored rows.
    """

    manifest_hash: str
    method: str
    rows: np.ndarray
    params: dict = field(default_factory=dict)
    labels: list = field(default_factory=list)  # (task, variant) per row
    mean: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise AttributionError(f"unknown method {self.method!r}")
        self.rows = np.ascontiguousarray(self.rows, dtype=np.float32)
        if self.rows.ndim != 2 or self.rows.shape[0] == 0:
            raise AttributionError("attribution matrix needs at least one row")
        if not np.isfinite(self.rows).all():
            raise AttributionError("non-finite attribution scores")
        if self.mean is None:
            self.mean = mean_row(self.rows)

    @property
    def n_examples(self) -> int:
        return self.rows.shape[0]

    @property
    def n_edges(self) -> int:
        return self.rows.shape[1]

    def subset(self, idx) -> "AttributionMatrix":
        idx = np.asarray(idx, dtype=np.int64)
        labels = [self.labels[i] for i in idx] if self.labels else []
        return AttributionMatrix(self.manifest_hash, self.method, self.rows[idx], dict(self.params), labels)

    def save(self, path) -> None:
        header = json.dumps(
            {
                "manifest_hash": self.manifest_hash,
                "method": self.method,
                "params": self.params,
                "n_examples": self.n_examples,
                "n_edges": self.n_edges,
                "labels": [list(x) for x in self.labels],
            },
            sort_keys=True,
        ).encode()
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<HI", _VERSION, len(header)))
            fh.write(header)
            fh.write(self.mean.astype("<f8").tobytes())
            fh.write(self.rows.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "AttributionMatrix":
        data = Path(path).read_bytes()
        if data[:4] != _MAGIC:
            raise AttributionError(f"{path}: not an attribution matrix file")
        version, hlen = struct.unpack_from("<HI", data, 4)
        if version != _VERSION:
            raise AttributionError(f"{path}: unsupported version {version}")
        off = 10
        h = json.loads(data[off : off + hlen])
        off += hlen
        n, E = h["n_examples"], h["n_edges"]
        mean = np.frombuffer(data, "<f8", E, off).astype(np.float64)
        off += 8 * E
        rows = np.frombuffer(data, "<f4", n * E, off).reshape(n, E).astype(np.float32)
        return cls(h["manifest_hash"], h["method"], rows, h["params"],
                   [tuple(x) for x in h["labels"]], mean)


def mean_row(rows: np.ndarray) -> np.ndarray:
    """Mean over rows in float64 with a fixed sequential summation order."""
    acc = np.zeros(rows.shape[1])
    for r in rows:
        acc += r
    return acc / rows.shape[0]


def _by_length(pairs) -> dict:
    groups = defaultdict(list)
    for i, p in enumerate(pairs):
        groups[len(p.clean)].append(i)
    return groups


def attribute_rows(params: Params, pairs: Sequence, method: str, steps: int = DEFAULT_IG_STEPS,
                   batch_size: int = 64) -> np.ndarray:
    """float64 ``(n, n_edges)`` score rows in dataset order."""
    if method not in METHODS:
        raise AttributionError(f"unknown method {method!r}")
    pairs = list(pairs)
    graph = engine.graph_for(params)
    out = np.empty((len(pairs), graph.n_edges))
    if method == "e_act":
        for i, p in enumerate(pairs):
            out[i] = e_act_row(params, p)
        return out
    bs = batch_size if method == "eap" else max(1, batch_size // steps)
    for idx in _by_length(pairs).values():
        for lo in range(0, len(idx), bs):
            chunk = idx[lo : lo + bs]
            sub = [pairs[i] for i in chunk]
            rows = eap_batch(params, sub) if method == "eap" else eap_ig_batch(params, sub, steps)
            out[chunk] = rows
    return out


def attribute_dataset(params: Params, pairs: Sequence, method: str = "eap_ig",
                      method_params: Optional[dict] = None) -> AttributionMatrix:
    pairs = list(pairs)
    if not pairs:
        raise AttributionError("empty dataset")
    method_params = dict(method_params or {})
    if method == "eap_ig":
        method_params.setdefault("steps", DEFAULT_IG_STEPS)
    rows = attribute_rows(params, pairs, method, steps=method_params.get("steps", DEFAULT_IG_STEPS))
    graph = engine.graph_for(params)
    return AttributionMatrix(graph.manifest_hash, method, rows, method_params,
                             [(p.task, p.variant) for p in pairs])
