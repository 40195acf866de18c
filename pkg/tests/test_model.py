from __future__ import annotations

import numpy as np
import pytest

from dcdkit import engine
from dcdkit.engine import InputError
from dcdkit.graph import enumerate_graph
from dcdkit.metrics import LogitDiff
from dcdkit.model import ConfigError, ModelConfig, build_model, load_checkpoint, save_checkpoint
from dcdkit.tasks import gen_ioi, training_records
from dcdkit.train import (OptimizerSpec, Record, TrainingDiverged, accuracy, loss_and_grad, repeated_segment_records,
                          train)

from conftest import small_config


def test_build_is_deterministic():
    cfg = ModelConfig(2, 4, 64, 16, 0, 99, 36, seed=7)
    assert build_model(cfg).to_bytes() == build_model(cfg).to_bytes()


def test_seed_changes_weights():
    a = build_model(ModelConfig(2, 4, 64, 16, 0, 99, 36, seed=7))
    b = build_model(ModelConfig(2, 4, 64, 16, 0, 99, 36, seed=8))
    assert a.to_bytes() != b.to_bytes()


@pytest.mark.parametrize("field,value", [("vocab_size", 0), ("vocab_size", 1), ("n_heads", 0), ("d_mlp", -1),
                                         ("norm_mode", "post")])
def test_invalid_config(field, value):
    kw = dict(n_layers=1, n_heads=1, d_model=8, d_head=4, d_mlp=0, vocab_size=10, max_seq_len=8)
    kw[field] = value
    with pytest.raises(ConfigError):
        build_model(ModelConfig(**kw))


def test_attention_only_has_no_mlp():
    p = build_model(ModelConfig(1, 1, 8, 4, 0, 10, 8))
    assert not any(k in p.tensors for k in ("W_in", "W_out", "b_in", "b_out"))
    assert p["W_Q"].shape == (1, 1, 8, 4)


def test_init_statistics():
    p = build_model(ModelConfig(2, 4, 64, 16, 64, 99, 36, seed=1))
    assert abs(p["W_E"].std() - 0.02) < 0.002
    assert np.all(p["b_in"] == 0)


def test_checkpoint_roundtrip(tmp_path):
    p = build_model(small_config(norm_mode="pre_norm"))
    save_checkpoint(p, tmp_path / "m.ckpt", {"note": 1})
    q, extra = load_checkpoint(tmp_path / "m.ckpt")
    assert q.config == p.config and extra == {"note": 1}
    assert q.to_bytes() == p.to_bytes()
    save_checkpoint(q, tmp_path / "m2.ckpt", {"note": 1})
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()


def test_forward_pure_and_shapes(small_model):
    toks = np.array([[1, 5, 7, 9, 2]])
    l1, c1 = engine.forward(small_model, toks)
    l2, _ = engine.forward(small_model, toks)
    assert l1.shape == (1, 5, small_model.config.vocab_size)
    assert np.array_equal(l1, l2)
    assert len(c1.outputs) == enumerate_graph(small_model.config).n_sources


def test_zero_unembedding(small_model):
    small_model.tensors["W_U"][:] = 0
    logits, _ = engine.forward(small_model, [3, 4, 5])
    assert np.all(logits == 0)


@pytest.mark.parametrize("norm", ["none", "pre_norm"])
def test_residual_decomposition(norm):
    p = build_model(small_config(norm_mode=norm), init_std=0.1)
    g = enumerate_graph(p.config)
    _, cache = engine.forward(p, np.array([[4, 8, 15, 16, 23, 42]]))
    for j, site in enumerate(g.sites):
        direct = np.zeros_like(cache.outputs[0])
        for u in range(site.n_preds):
            direct = direct + cache.outputs[u]
        assert np.allclose(cache.site_inputs[j], direct, atol=1e-10, rtol=0)


def test_causal_masking(small_model):
    a = np.array([[4, 8, 15, 16, 23, 42]])
    b = a.copy()
    b[0, 4:] = [50, 60]
    la, _ = engine.forward(small_model, a)
    lb, _ = engine.forward(small_model, b)
    assert np.array_equal(la[0, :4], lb[0, :4])
    assert not np.array_equal(la[0, 4:], lb[0, 4:])


def test_input_errors(small_model):
    with pytest.raises(InputError):
        engine.forward(small_model, [0, small_model.config.vocab_size])
    with pytest.raises(InputError):
        engine.forward(small_model, [1] * (small_model.config.max_seq_len + 1))


def test_gradient_zero_at_later_positions(small_model):
    toks = np.array([[3, 9, 27, 81 % 99, 5]])
    _, cache = engine.forward(small_model, toks)
    metric = LogitDiff([1], [10], [[11, 12]])
    gc = engine.backward_metric(small_model, cache, metric)
    for g in gc.site_grads:
        assert np.all(g[0, 2:] == 0)


def test_backward_rejects_other_params(small_model):
    _, cache = engine.forward(small_model, [1, 2, 3])
    other = small_model.copy()
    with pytest.raises(InputError):
        engine.backward_metric(other, cache, LogitDiff([2], [5], [[6]]))


def test_linear_model_gradient_constant():
    # no MLP, no norm, frozen uniform attention: the metric is linear in every site input
    p = build_model(small_config(d_mlp=0), init_std=0.1)
    p.tensors["W_Q"][:] = 0
    p.tensors["W_K"][:] = 0
    metric = LogitDiff([3], [10], [[11]])
    g1 = engine.backward_metric(p, (c := engine.run(p, [[1, 2, 3, 4]])), metric).stacked()
    g2 = engine.backward_metric(p, (c := engine.run(p, [[9, 8, 7, 6]])), metric).stacked()
    assert np.array_equal(g1, g2)


@pytest.mark.parametrize("norm", ["none", "pre_norm"])
def test_parameter_gradients_directional(norm):
    p = build_model(small_config(norm_mode=norm), init_std=0.1)
    recs = training_records(gen_ioi("abba", 4, seed=2))
    _, _, grads = loss_and_grad(p, recs)
    rng = np.random.default_rng(0)
    for name in ("W_E", "W_pos", "W_Q", "W_K", "W_V", "W_O", "W_in", "b_in", "W_out", "b_out", "W_U"):
        u = rng.normal(size=p[name].shape)
        u /= np.linalg.norm(u)
        h = 1e-5
        plus, minus = p.copy(), p.copy()
        plus.tensors[name] = p[name] + h * u
        minus.tensors[name] = p[name] - h * u
        fd = (loss_and_grad(plus, recs, False)[0] - loss_and_grad(minus, recs, False)[0]) / (2 * h)
        an = float((grads[name] * u).sum())
        assert abs(fd - an) <= 1e-5 * max(1.0, abs(an)), name


def test_train_zero_steps_and_zero_lr(small_model):
    recs = training_records(gen_ioi("abba", 8))
    p0, _ = train(small_model, recs, OptimizerSpec(steps=0, batch_size=4))
    assert p0.to_bytes() == small_model.to_bytes()
    p1, _ = train(small_model, recs, OptimizerSpec(steps=3, lr=0.0, batch_size=4))
    assert p1.to_bytes() == small_model.to_bytes()


def test_train_deterministic_and_pure(small_model):
    recs = training_records(gen_ioi("abba", 16))
    before = small_model.to_bytes()
    spec = OptimizerSpec(steps=5, batch_size=4, warmup=2)
    a, rep = train(small_model, recs, spec)
    b, _ = train(small_model, recs, spec)
    assert a.to_bytes() == b.to_bytes() != before
    assert small_model.to_bytes() == before
    assert 0 <= rep["train_accuracy"] <= 1


def test_train_divergence(small_model):
    recs = training_records(gen_ioi("abba", 8))
    small_model.tensors["W_U"][0, 0] = np.inf
    with pytest.raises(TrainingDiverged):
        train(small_model, recs, OptimizerSpec(steps=2, batch_size=4))


def _split(recs):
    # one single-position record per label of each multi-position record
    return [Record(r.tokens, p, t) for r in recs for p, t in r.labels()]


def test_multi_position_records_average_their_labels(small_model):
    recs = repeated_segment_records(3, seed=4, pool=range(10, 26))
    loss, acc, grads = loss_and_grad(small_model, recs)
    # brute force: each record's loss is the mean over its labels, then mean over records
    per = [loss_and_grad(small_model, [s], False)[0] for r in recs for s in _split([r])]
    sizes = [len(r.labels()) for r in recs]
    chunks = np.split(np.array(per), np.cumsum(sizes)[:-1])
    assert np.isclose(loss, np.mean([c.mean() for c in chunks]), rtol=1e-12)
    u = np.random.default_rng(1).normal(size=small_model["W_K"].shape)
    h = 1e-5
    plus, minus = small_model.copy(), small_model.copy()
    plus.tensors["W_K"] = small_model["W_K"] + h * u
    minus.tensors["W_K"] = small_model["W_K"] - h * u
    fd = (loss_and_grad(plus, recs, False)[0] - loss_and_grad(minus, recs, False)[0]) / (2 * h)
    assert abs(fd - (grads["W_K"] * u).sum()) <= 1e-6 * max(1.0, abs(fd))
    assert 0 <= accuracy(small_model, recs) <= 1


def test_single_label_tuple_matches_scalar_record(small_model):
    recs = training_records(gen_ioi("abba", 6, seed=5))
    wrapped = [Record(r.tokens, (r.target_pos,), (r.target,)) for r in recs]
    a, b = loss_and_grad(small_model, recs), loss_and_grad(small_model, wrapped)
    assert a[0] == b[0] and a[1] == b[1]
    assert all(np.array_equal(a[2][k], b[2][k]) for k in a[2])


def test_repeated_segment_records():
    pool = range(10, 26)
    recs = repeated_segment_records(200, seed=0, pool=pool, min_distinct=3, max_distinct=5, max_prefix=3)
    assert recs == repeated_segment_records(200, seed=0, pool=pool)
    periods = set()
    for r in recs:
        toks = r.tokens
        assert set(toks) <= set(pool)
        L = next(L for L in (6, 8, 10) if len(toks) - 2 * L in range(0, 4) and toks[-L:] == toks[-2 * L:-L]
                 and all(toks[-L:].count(t) == 2 for t in toks[-L:]))
        seg = toks[-L:]
        periods.add(L)
        assert all(a != b for a, b in zip(seg, seg[1:]))
        assert r.target_pos == tuple(range(len(toks) - L + 1, len(toks) - 1))
        assert all(toks[p + 1] == t == toks[p + 1 - L] for p, t in r.labels())
        # one token of context is always ambiguous inside the segment
        assert all(seg.count(toks[p]) == 2 for p, _ in r.labels())
    assert periods == {6, 8, 10}
