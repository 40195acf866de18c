from __future__ import annotations

import numpy as np
import pytest

from dcdkit import attribution as A
from dcdkit import engine
from dcdkit.graph import NodeId
from dcdkit.metrics import LogitDiff
from dcdkit.model import ModelConfig, build_model
from dcdkit.tasks import PromptPair, gen_ioi

from conftest import small_config


def _pair(clean, corrupt, pos=None, correct=10, cf=(11, 12)):
    pos = len(clean) - 1 if pos is None else pos
    return PromptPair("toy", "x", tuple(clean), tuple(corrupt), pos, correct, tuple(cf))


def frozen_linear_model(seed=0):
    p = build_model(small_config(d_mlp=0, seed=seed), init_std=0.1)
    p.tensors["W_Q"][:] = 0.0
    p.tensors["W_K"][:] = 0.0
    return p


def test_identical_pair_gives_zero(small_model):
    pr = _pair([1, 2, 3, 4], [1, 2, 3, 4])
    for fn in (A.attribute_e_act, A.attribute_eap, A.attribute_eap_ig):
        assert np.all(fn(small_model, pr) == 0)


def test_unchanged_source_gives_zero_e_act(small_model):
    # the corruption only touches the last position; at earlier positions nothing differs,
    # and a metric read at position 1 cannot see it
    pr = _pair([1, 2, 3, 4], [1, 2, 3, 9], pos=1)
    assert np.all(A.attribute_e_act(small_model, pr) == 0)
    assert np.all(A.attribute_eap(small_model, pr) == 0)


def test_eap_equals_e_act_on_linear_fixture():
    p = frozen_linear_model()
    pr = _pair([1, 2, 3, 4, 5], [6, 7, 8, 9, 5])
    ea, eap = A.attribute_e_act(p, pr), A.attribute_eap(p, pr)
    assert np.allclose(ea, eap, rtol=1e-9, atol=1e-12)
    assert np.abs(ea).max() > 1e-3


def test_e_act_brute_force_one_layer_one_head():
    p = build_model(ModelConfig(1, 1, 16, 8, 0, 20, 8, seed=5), init_std=0.3)
    g = engine.graph_for(p)
    assert g.n_edges == 5
    pr = _pair([1, 2, 3, 4], [5, 6, 3, 7], correct=8, cf=(9,))
    row = A.attribute_e_act(p, pr)
    metric = LogitDiff([3], [8], [[9]])
    clean = engine.run(p, [pr.clean])
    corr = engine.run(p, [pr.corrupt])
    base = metric.value(clean.logits)[0]
    # rebuild every patched forward by hand
    x_in, x_in_c = clean.outputs[0], corr.outputs[0]
    from dcdkit.engine import _softmax

    def head(xq, xk, xv):
        q = xq @ p["W_Q"][0, 0]
        k = xk @ p["W_K"][0, 0]
        v = xv @ p["W_V"][0, 0]
        s = q @ k.transpose(0, 2, 1) / np.sqrt(8)
        s = np.where(np.tril(np.ones((4, 4), bool)), s, -np.inf)
        return (_softmax(s) @ v) @ p["W_O"][0, 0]

    expect = []
    for e in range(5):
        xq = x_in_c if e == 0 else x_in
        xk = x_in_c if e == 1 else x_in
        xv = x_in_c if e == 2 else x_in
        a = head(xq, xk, xv)
        res = (x_in_c if e == 3 else x_in) + (corr.outputs[1] if e == 4 else a)
        expect.append(base - metric.value(res @ p["W_U"])[0])
    assert np.allclose(row, expect, rtol=1e-12, atol=1e-14)


def test_eap_zero_where_gradient_vanishes(small_model):
    p = small_model
    g = engine.graph_for(p)
    p.tensors["W_O"][1, 0] = 0.0  # head a1.0 writes nothing, so its inputs carry no gradient
    pr = _pair([1, 2, 3, 4], [5, 6, 7, 8])
    row = A.attribute_eap(p, pr)
    dst = g.node_index[NodeId("attn_head", 1, 0)]
    idx = [e.index for e in g.edges if g.node_index[e.dst] == dst]
    assert np.all(row[idx] == 0)


def test_ig_single_step_is_eap(small_model):
    pr = gen_ioi("abba", 1, seed=4)[0]
    assert np.array_equal(A.attribute_eap_ig(small_model, pr, steps=1), A.attribute_eap(small_model, pr))


def test_ig_steps_validation(small_model):
    pr = gen_ioi("abba", 1)[0]
    with pytest.raises(A.AttributionError):
        A.attribute_eap_ig(small_model, pr, steps=0)


def test_ig_batched_matches_loop(small_model):
    pairs = gen_ioi("abba", 3, seed=9)
    rows = A.eap_ig_batch(small_model, pairs, steps=4)
    for i, pr in enumerate(pairs):
        assert np.allclose(rows[i], A.attribute_eap_ig(small_model, pr, steps=4), rtol=1e-12, atol=1e-15)


def test_ig_manual_average(small_model):
    """Average the site gradients of separately run interpolated inputs."""
    p = small_model
    g = engine.graph_for(p)
    pr = gen_ioi("baba", 1, seed=2)[0]
    steps = 3
    e1, e0 = engine.embed(p, [pr.clean]), engine.embed(p, [pr.corrupt])
    metric = LogitDiff.from_pairs([pr])
    G = 0
    for j in range(1, steps + 1):
        c = engine.run(p, [pr.clean], embedding=e0 + j / steps * (e1 - e0))
        G = G + engine.backward_metric(p, c, metric).stacked()
    G = G / steps
    cc, kc = engine.run(p, [pr.clean]), engine.run(p, [pr.corrupt])
    want = np.array([((cc.outputs[g.edge_src[e]] - kc.outputs[g.edge_src[e]]) * G[g.edge_site[e]]).sum()
                     for e in range(g.n_edges)])
    assert np.allclose(A.attribute_eap_ig(p, pr, steps=steps), want, rtol=1e-9, atol=1e-13)


def test_dataset_mean_and_order(small_model):
    pairs = gen_ioi("mixed", 6, seed=3)
    m = A.attribute_dataset(small_model, pairs, "eap")
    assert m.rows.shape == (6, engine.graph_for(small_model).n_edges)
    assert np.allclose(m.mean, m.rows.astype(np.float64).mean(0), atol=1e-12, rtol=0)
    single = A.attribute_dataset(small_model, pairs[:1], "eap")
    assert np.array_equal(single.mean, single.rows[0].astype(np.float64))
    dup = A.attribute_dataset(small_model, pairs + pairs, "eap")
    assert np.allclose(dup.mean, m.mean, atol=1e-12, rtol=0)
    perm = [5, 2, 0, 4, 1, 3]
    pm = A.attribute_dataset(small_model, [pairs[i] for i in perm], "eap")
    assert np.array_equal(pm.rows, m.rows[perm])
    assert np.allclose(pm.mean, m.mean, atol=1e-12, rtol=0)


def test_dataset_mixed_lengths_keep_order(small_model):
    pairs = gen_ioi("abba", 2, seed=1) + gen_ioi("filler", 2, seed=1) + gen_ioi("abba", 1, seed=5)
    m = A.attribute_dataset(small_model, pairs, "eap_ig", {"steps": 2})
    for i, pr in enumerate(pairs):
        assert np.allclose(m.rows[i], A.attribute_eap_ig(small_model, pr, steps=2).astype(np.float32))


def test_dataset_errors(small_model):
    with pytest.raises(A.AttributionError):
        A.attribute_dataset(small_model, [], "eap")
    with pytest.raises(A.AttributionError):
        A.attribute_dataset(small_model, gen_ioi("abba", 1), "ifr")


def test_matrix_file_roundtrip(tmp_path, small_model):
    m = A.attribute_dataset(small_model, gen_ioi("abba", 5), "eap_ig")
    m.save(tmp_path / "a.dcda")
    back = A.AttributionMatrix.load(tmp_path / "a.dcda")
    assert np.array_equal(back.rows, m.rows) and np.array_equal(back.mean, m.mean)
    assert back.method == "eap_ig" and back.params == {"steps": 5} and back.labels == m.labels
    back.save(tmp_path / "b.dcda")
    assert (tmp_path / "a.dcda").read_bytes() == (tmp_path / "b.dcda").read_bytes()
    assert (tmp_path / "a.dcda").read_bytes()[:4] == b"DCDA"
