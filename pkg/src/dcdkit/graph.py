"""Computation graph G = (N, E) of a :class:`ModelConfig`.

Nodes are the input embedding, every attention head, every MLP and the
logits. Computation order is ``input < layer-0 heads < layer-0 MLP <
layer-1 heads < ... < logits``. Every destination reads from a *prefix* of
that order (heads do not read from heads of their own layer), which is what
lets the engine reuse running residual sums.

Canonical edge order is destination-major: for each destination node in
computation order, for each of its input channels (q, k, v for heads; ``in``
otherwise), one edge per source node in computation order.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np

from .model import ModelConfig

CHANNELS_HEAD = ("q", "k", "v")


@dataclass(frozen=True, order=True)
class NodeId:
    kind: str  # input | attn_head | mlp | logits
    layer: Optional[int] = None
    head: Optional[int] = None

    @property
    def name(self) -> str:
        if self.kind == "input":
            return "input"
        if self.kind == "logits":
            return "logits"
        if self.kind == "mlp":
            return f"m{self.layer}"
        return f"a{self.layer}.{self.head}"

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class EdgeId:
    src: NodeId
    dst: NodeId
    channel: str
    index: int

    @property
    def name(self) -> str:
        suffix = f"<{self.channel}>" if self.channel != "in" else ""
        return f"{self.src.name}->{self.dst.name}{suffix}"


@dataclass(frozen=True)
class Site:
    """One node-input site: a destination node read through one channel."""

    dst: int  # node index
    channel: str
    n_preds: int  # sources are node indices [0, n_preds)
    edge_offset: int  # first edge index of this site

    @property
    def edge_slice(self) -> slice:
        return slice(self.edge_offset, self.edge_offset + self.n_preds)


class ComputationGraph:
    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        nodes = [NodeId("input")]
        for layer in range(config.n_layers):
            nodes += [NodeId("attn_head", layer, h) for h in range(config.n_heads)]
            if config.d_mlp > 0:
                nodes.append(NodeId("mlp", layer))
        nodes.append(NodeId("logits"))
        self.nodes: list[NodeId] = nodes
        self.node_index = {n: i for i, n in enumerate(nodes)}

        sites: list[Site] = []
        edges: list[EdgeId] = []
        for i, node in enumerate(nodes[1:], start=1):
            if node.kind == "attn_head":
                n_preds = self.node_index[NodeId("attn_head", node.layer, 0)]
                channels = CHANNELS_HEAD
            else:
                n_preds = i
                channels = ("in",)
            for ch in channels:
                sites.append(Site(i, ch, n_preds, len(edges)))
                for u in range(n_preds):
                    edges.append(EdgeId(nodes[u], node, ch, len(edges)))
        self.sites: list[Site] = sites
        self.edges: list[EdgeId] = edges
        self.site_index = {(s.dst, s.channel): j for j, s in enumerate(sites)}

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_sources(self) -> int:
        return len(self.nodes) - 1

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def edge_src(self) -> np.ndarray:
        return np.array([self.node_index[e.src] for e in self.edges], dtype=np.int64)

    @cached_property
    def edge_site(self) -> np.ndarray:
        out = np.empty(self.n_edges, dtype=np.int64)
        for j, s in enumerate(self.sites):
            out[s.edge_slice] = j
        return out

    def edge(self, src: str, dst: str, channel: str = "in") -> EdgeId:
        s = self._by_name(src)
        d = self._by_name(dst)
        site = self.sites[self.site_index[(d, channel)]]
        if s >= site.n_preds:
            raise KeyError(f"no edge {src}->{dst}<{channel}>")
        return self.edges[site.edge_offset + s]

    def _by_name(self, name: str) -> int:
        for i, n in enumerate(self.nodes):
            if n.name == name:
                return i
        raise KeyError(name)

    def descendants(self, node: int) -> set[int]:
        """Node indices reachable from ``node`` (excluding itself)."""
        out: set[int] = set()
        frontier = [node]
        while frontier:
            u = frontier.pop()
            for s in self.sites:
                if u < s.n_preds and s.dst not in out:
                    out.add(s.dst)
                    frontier.append(s.dst)
        return out

    def manifest(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "nodes": [n.name for n in self.nodes],
            "edges": [
                {"index": e.index, "src": e.src.name, "dst": e.dst.name, "channel": e.channel}
                for e in self.edges
            ],
        }

    @cached_property
    def manifest_hash(self) -> str:
        # The seed does not change the graph, so it is left out of the hash.
        m = self.manifest()
        m["config"] = {k: v for k, v in m["config"].items() if k != "seed"}
        return hashlib.sha256(json.dumps(m, sort_keys=True).encode()).hexdigest()[:16]

    def write_manifest(self, path) -> None:
        data = self.manifest()
        data["hash"] = self.manifest_hash
        with open(path, "w") as fh:
            json.dump(data, fh, indent=1)


def enumerate_graph(config: ModelConfig) -> ComputationGraph:
    return ComputationGraph(config)

