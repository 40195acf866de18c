from __future__ import annotations

import itertools
import json

import numpy as np
import pytest

from dcdkit import engine
from dcdkit.engine import InputError
from dcdkit.graph import enumerate_graph
from dcdkit.metrics import LogitDiff
from dcdkit.model import ModelConfig, build_model
from dcdkit.patching import PatchPlan, patched_forward, patched_run

from conftest import small_config


def brute_force_edges(L: int, H: int, mlp: bool) -> list:
    """Independent enumeration: every (src, dst, channel) allowed by the block order."""
    order = [("input", -1, 0)]
    for l in range(L):
        order += [("head", l, h) for h in range(H)]
        if mlp:
            order.append(("mlp", l, 0))
    order.append(("logits", L, 0))
    out = []
    for dst in order[1:]:
        chans = ("q", "k", "v") if dst[0] == "head" else ("in",)
        for ch in chans:
            for src in order:
                if src is dst:
                    break
                if dst[0] == "head" and src[0] == "head" and src[1] == dst[1]:
                    continue
                if src[0] == "mlp" and src[1] >= dst[1] and dst[0] != "logits":
                    continue
                out.append((src, dst, ch))
    return out


def test_one_layer_one_head():
    g = enumerate_graph(ModelConfig(1, 1, 8, 4, 0, 10, 8))
    assert [n.name for n in g.nodes] == ["input", "a0.0", "logits"]
    assert [e.name for e in g.edges] == [
        "input->a0.0<q>", "input->a0.0<k>", "input->a0.0<v>", "input->logits", "a0.0->logits"]


@pytest.mark.parametrize("L,H,mlp", [(2, 2, False), (2, 2, True), (3, 4, True), (1, 3, False)])
def test_edge_count_matches_brute_force(L, H, mlp):
    g = enumerate_graph(ModelConfig(L, H, 16, 4, 8 if mlp else 0, 10, 8))
    assert g.n_edges == len(brute_force_edges(L, H, mlp))
    assert g.n_nodes == 1 + L * H + L * int(mlp) + 1


def test_two_layer_two_head_count():
    # layer-0 heads read {input}: 2 heads x 3 channels; layer-1 heads read 3 sources: 2 x 3 x 3;
    # logits read all 5 sources
    assert enumerate_graph(ModelConfig(2, 2, 16, 4, 0, 10, 8)).n_edges == 6 + 18 + 5


def test_ordering_stable_and_topological():
    cfg = ModelConfig(2, 3, 16, 4, 8, 10, 8)
    g1, g2 = enumerate_graph(cfg), enumerate_graph(cfg)
    assert g1.manifest() == g2.manifest()
    for e in g1.edges:
        assert g1.node_index[e.src] < g1.node_index[e.dst]
        assert g1.edges[e.index] is e
    assert g1.manifest_hash == enumerate_graph(ModelConfig(2, 3, 16, 4, 8, 10, 8, seed=9)).manifest_hash


def test_manifest_export(tmp_path):
    g = enumerate_graph(ModelConfig(1, 2, 16, 4, 8, 10, 8))
    g.write_manifest(tmp_path / "g.json")
    data = json.loads((tmp_path / "g.json").read_text())
    assert [e["index"] for e in data["edges"]] == list(range(g.n_edges))
    assert data["hash"] == g.manifest_hash


# --- patching -------------------------------------------------------------------


def _caches(p, clean, corrupt):
    return engine.run(p, clean), engine.run(p, corrupt)


@pytest.mark.parametrize("norm", ["none", "pre_norm"])
def test_identity_plan_bit_equal(norm):
    p = build_model(small_config(norm_mode=norm), init_std=0.1)
    clean, corrupt = np.array([[1, 2, 3, 4, 5]]), np.array([[1, 2, 9, 4, 5]])
    cc, kc = _caches(p, clean, corrupt)
    plan = PatchPlan.clean(engine.graph_for(p), cc, kc)
    assert np.array_equal(patched_forward(p, plan, clean), cc.logits)


@pytest.mark.parametrize("norm", ["none", "pre_norm"])
def test_full_ablation_reproduces_corrupted(norm):
    p = build_model(small_config(norm_mode=norm), init_std=0.1)
    g = engine.graph_for(p)
    clean, corrupt = np.array([[1, 2, 3, 4, 5]]), np.array([[1, 7, 3, 9, 5]])
    cc, kc = _caches(p, clean, corrupt)
    run = patched_run(p, PatchPlan(np.ones(g.n_edges, bool), cc, kc), clean)
    assert np.array_equal(run.logits, kc.logits)
    for a, b in zip(run.outputs[1:], kc.outputs[1:]):
        assert np.array_equal(a, b)
    m = LogitDiff([4], [10], [[11]])
    assert m.value(run.logits)[0] == m.value(kc.logits)[0]


def test_locality(small_model):
    p = small_model
    g = engine.graph_for(p)
    clean, corrupt = np.array([[1, 2, 3, 4, 5]]), np.array([[6, 7, 8, 9, 10]])
    cc, kc = _caches(p, clean, corrupt)
    rng = np.random.default_rng(0)
    for e in rng.choice(g.n_edges, 8, replace=False):
        mask = np.zeros(g.n_edges, bool)
        mask[e] = True
        run = patched_run(p, PatchPlan(mask, cc, kc), clean)
        dst = g.node_index[g.edges[e].dst]
        affected = g.descendants(dst) | {dst}
        for j, site in enumerate(g.sites):
            if site.dst not in affected:
                assert np.array_equal(run.site_inputs[j], cc.site_inputs[j])


def test_single_edge_patch_matches_manual_assembly(small_model):
    """Rebuild one patched site by hand and compare."""
    p = small_model
    g = engine.graph_for(p)
    clean, corrupt = np.array([[1, 2, 3, 4]]), np.array([[5, 2, 3, 6]])
    cc, kc = _caches(p, clean, corrupt)
    e = g.edge("input", "logits")
    mask = np.zeros(g.n_edges, bool)
    mask[e.index] = True
    run = patched_run(p, PatchPlan(mask, cc, kc), clean)
    site = g.site_index[(g.n_nodes - 1, "in")]
    h = kc.outputs[0]
    for u in range(1, g.n_sources):
        h = h + cc.outputs[u]
    assert np.array_equal(run.site_inputs[site], h)
    assert np.array_equal(run.logits, h @ p["W_U"])


def test_alignment_error(small_model):
    cc = engine.run(small_model, [[1, 2, 3]])
    kc = engine.run(small_model, [[1, 2, 3, 4]])
    with pytest.raises(InputError):
        PatchPlan(np.zeros(engine.graph_for(small_model).n_edges, bool), cc, kc)


def test_zero_ablation_mode(small_model):
    p = small_model
    g = engine.graph_for(p)
    clean = np.array([[1, 2, 3, 4]])
    cc = engine.run(p, clean)
    logits = patched_forward(p, PatchPlan(np.ones(g.n_edges, bool), cc, None, zero=True), clean)
    assert np.allclose(logits, 0.0)
