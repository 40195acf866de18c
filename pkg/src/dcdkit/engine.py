"""Forward and backward passes over the edge-decomposed transformer.

Every node-input site is assembled explicitly as a left-to-right sum of its
source nodes' outputs. In an unpatched run the sum for a site reading sources
``[0, n)`` is the running prefix sum, so the ordinary forward and a patched
forward with nothing corrupted produce bit-identical numbers.

All arrays carry a leading batch axis: tokens ``(B, T)``, activations
``(B, T, d)``. Everything is float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .graph import ComputationGraph
from .model import Params

LN_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)

_graph_cache: dict = {}


def graph_for(params: Params) -> ComputationGraph:
    cfg = params.config
    g = _graph_cache.get(cfg)
    if g is None:
        g = _graph_cache[cfg] = ComputationGraph(cfg)
    return g


class InputError(ValueError):
    """Token ids out of range, over-length input, or mismatched caches."""


@dataclass
class ActivationCache:
    tokens: np.ndarray  # (B, T)
    outputs: list  # per source node: (B, T, d)
    site_inputs: list  # per site: (B, T, d); unpatched sites share memory
    logits: np.ndarray  # (B, T, V)
    patterns: dict = field(default_factory=dict)  # layer -> (H, B, T, T)
    params_id: int = 0
    _store: dict = field(default_factory=dict, repr=False)

    @property
    def batch(self) -> int:
        return self.logits.shape[0]

    def stacked_outputs(self) -> np.ndarray:
        """Source outputs as one ``(n_sources, B, T, d)`` array."""
        return np.stack(self.outputs)


@dataclass
class GradientCache:
    site_grads: list  # per site: (B, T, d)
    embed_grad: np.ndarray  # gradient w.r.t. the input node's output

    def stacked(self) -> np.ndarray:
        return np.stack(self.site_grads)


# --- small numerical pieces -------------------------------------------------


def _ln_fwd(h, g, b):
    mu = h.mean(-1, keepdims=True)
    xc = h - mu
    var = (xc * xc).mean(-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _ln_bwd(dy, g, stats):
    xhat, rstd = stats
    dxhat = dy * g
    dh = rstd * (
        dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True)
    )
    return dh, xhat


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * (x * x * x))))


def _gelu_grad(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def _softmax(s):
    s = s - s.max(-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(-1, keepdims=True)


def _proj(x, W):
    """(Hx, B, T, d) @ (H, d, e) -> (H, B, T, e), Hx in {1, H}."""
    Hx, B, T, d = x.shape
    y = x.reshape(Hx, B * T, d) @ W
    return y.reshape(W.shape[0], B, T, W.shape[-1])


def _outer(a, b):
    """sum over batch and position of a[..., i] * b[..., j]."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _outer_heads(a, b):
    """Per-head version of :func:`_outer`; either operand may have a head axis of 1."""
    a2 = a.reshape(a.shape[0], -1, a.shape[-1]).transpose(0, 2, 1)
    return a2 @ b.reshape(b.shape[0], -1, b.shape[-1])


# --- forward ----------------------------------------------------------------


def check_tokens(params: Params, tokens) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2:
        raise InputError(f"tokens must be 1-D or 2-D, got shape {tokens.shape}")
    cfg = params.config
    if tokens.shape[1] > cfg.max_seq_len:
        raise InputError(f"sequence length {tokens.shape[1]} exceeds max_seq_len {cfg.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise InputError(f"token ids must lie in [0, {cfg.vocab_size})")
    return tokens.astype(np.int64)


def embed(params: Params, tokens) -> np.ndarray:
    tokens = check_tokens(params, tokens)
    return params["W_E"][tokens] + params["W_pos"][: tokens.shape[1]]


def run(
    params: Params,
    tokens,
    *,
    embedding: Optional[np.ndarray] = None,
    corrupt: Optional[Sequence[np.ndarray]] = None,
    mask: Optional[np.ndarray] = None,
    site_delta: Optional[dict] = None,
) -> ActivationCache:
    """Run the model.

    ``corrupt`` holds per-source outputs of a reference (corrupted) run and
    ``mask`` flags edges (``True`` = read the corrupted source output). The
    mask is ``(n_edges,)`` or ``(B_mask, n_edges)`` with ``B_mask`` 1 or B.
    ``site_delta`` maps site index -> additive perturbation of that site's input.
    """
    graph = graph_for(params)
    cfg = params.config
    tokens = check_tokens(params, tokens)
    B, T = tokens.shape
    d = cfg.d_model
    if embedding is None:
        embedding = params["W_E"][tokens] + params["W_pos"][:T]
    else:
        embedding = np.asarray(embedding, dtype=np.float64)
        if embedding.shape[1:] != (T, d):
            raise InputError(f"embedding shape {embedding.shape} does not match tokens {tokens.shape}")
        B = max(B, embedding.shape[0])
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim == 1:
            mask = mask[None, :]
        if mask.shape[1] != graph.n_edges:
            raise InputError(f"mask has {mask.shape[1]} edges, graph has {graph.n_edges}")
        if corrupt is None:
            raise InputError("a patch mask needs corrupted source outputs")
        B = max(B, mask.shape[0])
        if len(corrupt) != graph.n_sources:
            raise InputError("corrupted outputs do not cover every source node")
        if corrupt[0].shape[1] != T:
            raise InputError(
                f"alignment error: corrupted run has length {corrupt[0].shape[1]}, clean has {T}"
            )
    full = (B, T, d)
    if embedding.shape[0] != B:
        embedding = np.broadcast_to(embedding, full)

    outs: list = [embedding]
    prefix: list = [None, embedding]  # prefix[k] = sum of outs[0..k-1]
    site_inputs: list = [None] * len(graph.sites)
    store: dict = {}
    patterns: dict = {}

    def push(out):
        outs.append(out)
        prefix.append(prefix[-1] + out)

    def assemble(j: int) -> np.ndarray:
        site = graph.sites[j]
        h = None
        if mask is not None:
            m = mask[:, site.edge_slice]
            if m.any():
                for u in range(site.n_preds):
                    col = m[:, u]
                    if col.all():
                        x = corrupt[u]
                    elif not col.any():
                        x = outs[u]
                    else:
                        x = np.where(col[:, None, None], corrupt[u], outs[u])
                    h = x if h is None else h + x
                if h.shape != full:
                    h = np.broadcast_to(h, full)
        if h is None:
            h = prefix[site.n_preds]
        if site_delta and j in site_delta:
            h = h + site_delta[j]
        site_inputs[j] = h
        return h

    pre_norm = cfg.norm_mode == "pre_norm"
    H, dh = cfg.n_heads, cfg.d_head
    scale = 1.0 / np.sqrt(dh)
    causal = np.tril(np.ones((T, T), dtype=bool))

    node = 1
    for layer in range(cfg.n_layers):
        chans = {}
        for ch in ("q", "k", "v"):
            xs = [assemble(graph.site_index[(node + j, ch)]) for j in range(H)]
            x = xs[0][None] if all(a is xs[0] for a in xs) else np.stack(xs)
            if pre_norm:
                x, st = _ln_fwd(x, params["ln1_g"][layer], params["ln1_b"][layer])
            else:
                st = None
            chans[ch] = (x, st)
        xq, xk, xv = chans["q"][0], chans["k"][0], chans["v"][0]
        q = _proj(xq, params["W_Q"][layer])
        k = _proj(xk, params["W_K"][layer])
        v = _proj(xv, params["W_V"][layer])
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        scores = np.where(causal, scores, -np.inf)
        A = _softmax(scores)
        z = A @ v
        out = _proj(z, params["W_O"][layer])
        patterns[layer] = A
        store[("attn", layer)] = dict(chans=chans, q=q, k=k, v=v, A=A, z=z)
        for j in range(H):
            push(out[j])
        node += H
        if cfg.d_mlp > 0:
            h = assemble(graph.site_index[(node, "in")])
            if pre_norm:
                x, st = _ln_fwd(h, params["ln2_g"][layer], params["ln2_b"][layer])
            else:
                x, st = h, None
            pre = x @ params["W_in"][layer] + params["b_in"][layer]
            act = _gelu(pre)
            push(act @ params["W_out"][layer] + params["b_out"][layer])
            store[("mlp", layer)] = dict(x=x, st=st, pre=pre, act=act)
            node += 1

    h = assemble(graph.site_index[(node, "in")])
    if pre_norm:
        x, st = _ln_fwd(h, params["lnf_g"], params["lnf_b"])
    else:
        x, st = h, None
    logits = x @ params["W_U"]
    store["final"] = dict(x=x, st=st)
    return ActivationCache(
        tokens=tokens,
        outputs=outs,
        site_inputs=site_inputs,
        logits=logits,
        patterns=patterns,
        params_id=id(params),
        _store=store,
    )


def forward(params: Params, tokens) -> tuple[np.ndarray, ActivationCache]:
    cache = run(params, tokens)
    return cache.logits, cache


# --- backward ---------------------------------------------------------------


def backward(params: Params, cache: ActivationCache, dlogits: np.ndarray, param_grads: bool = False):
    """Backpropagate ``dlogits`` to every node-input site.

    Returns ``(GradientCache, grads)`` where ``grads`` maps parameter names to
    gradients when ``param_grads`` is set, else ``None``.
    """
    if cache.params_id != id(params):
        raise InputError("cache was produced with different parameters")
    graph = graph_for(params)
    cfg = params.config
    pre_norm = cfg.norm_mode == "pre_norm"
    H, dh = cfg.n_heads, cfg.d_head
    scale = 1.0 / np.sqrt(dh)
    st = cache._store
    site_grads: list = [None] * len(graph.sites)
    grads = {name: np.zeros_like(arr) for name, arr in params.tensors.items()} if param_grads else None

    fin = st["final"]
    dx = dlogits @ params["W_U"].T
    if param_grads:
        grads["W_U"] += _outer(fin["x"], dlogits)
    if pre_norm:
        dh_, xhat = _ln_bwd(dx, params["lnf_g"], fin["st"])
        if param_grads:
            grads["lnf_g"] += (dx * xhat).sum((0, 1))
            grads["lnf_b"] += dx.sum((0, 1))
    else:
        dh_ = dx
    site_grads[graph.site_index[(graph.n_nodes - 1, "in")]] = dh_
    G = dh_.copy()

    node = graph.n_nodes - 1
    for layer in reversed(range(cfg.n_layers)):
        if cfg.d_mlp > 0:
            node -= 1
            m = st[("mlp", layer)]
            dact = G @ params["W_out"][layer].T
            dpre = dact * _gelu_grad(m["pre"])
            dx = dpre @ params["W_in"][layer].T
            if param_grads:
                grads["W_out"][layer] += _outer(m["act"], G)
                grads["b_out"][layer] += G.sum((0, 1))
                grads["W_in"][layer] += _outer(m["x"], dpre)
                grads["b_in"][layer] += dpre.sum((0, 1))
            if pre_norm:
                dhm, xhat = _ln_bwd(dx, params["ln2_g"][layer], m["st"])
                if param_grads:
                    grads["ln2_g"][layer] += (dx * xhat).sum((0, 1))
                    grads["ln2_b"][layer] += dx.sum((0, 1))
            else:
                dhm = dx
            site_grads[graph.site_index[(node, "in")]] = dhm
            G = G + dhm

        node -= H
        a = st[("attn", layer)]
        Wq, Wk, Wv, Wo = (params[n][layer] for n in ("W_Q", "W_K", "W_V", "W_O"))
        A, q, k, v, z = a["A"], a["q"], a["k"], a["v"], a["z"]
        dz = _proj(G[None], Wo.transpose(0, 2, 1))
        dA = dz @ v.transpose(0, 1, 3, 2)
        dv = A.transpose(0, 1, 3, 2) @ dz
        dS = A * (dA - (dA * A).sum(-1, keepdims=True)) * scale
        dq = dS @ k
        dk = dS.transpose(0, 1, 3, 2) @ q
        if param_grads:
            grads["W_O"][layer] += _outer_heads(z, G[None])
        total = None
        for ch, dproj, W, pname in (("q", dq, Wq, "W_Q"), ("k", dk, Wk, "W_K"), ("v", dv, Wv, "W_V")):
            x, lst = a["chans"][ch]
            dx = _proj(dproj, W.transpose(0, 2, 1))
            if param_grads:
                grads[pname][layer] += _outer_heads(x, dproj)
            if pre_norm:
                dhx, xhat = _ln_bwd(dx, params["ln1_g"][layer], lst)
                if param_grads:
                    grads["ln1_g"][layer] += (dx * xhat).sum((0, 1, 2))
                    grads["ln1_b"][layer] += dx.sum((0, 1, 2))
            else:
                dhx = dx
            for j in range(H):
                site_grads[graph.site_index[(node + j, ch)]] = dhx[j]
            part = dhx.sum(0)
            total = part if total is None else total + part
        G = G + total

    if param_grads:
        tokens = cache.tokens
        if tokens.shape[0] == G.shape[0]:
            np.add.at(grads["W_E"], tokens, G)
        else:
            np.add.at(grads["W_E"], tokens, G.sum(0, keepdims=True))
        grads["W_pos"][: tokens.shape[1]] += G.sum(0)
    return GradientCache(site_grads=site_grads, embed_grad=G), grads


def backward_metric(params: Params, cache: ActivationCache, metric) -> GradientCache:
    """Gradient of each example's scalar metric w.r.t. every node-input site."""
    if cache.params_id != id(params):
        raise InputError("cache/params mismatch")
    gc, _ = backward(params, cache, metric.grad_logits(cache.logits))
    return gc
