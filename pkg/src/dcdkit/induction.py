"""A hand-wired two-layer induction circuit.

Residual layout (``n`` = number of wired tokens):

    [0, n)        current token, one-hot
    [n, n+2)      position code (cos p*theta, sin p*theta)
    [n+2, 2n+2)   previous token, written by head a0.0
    [2n+2, 3n+2)  predicted next token, written by head a1.0

Head a0.0 attends from position p to p-1 by rotating the position code;
head a1.0 matches the current token against the previous-token slot and
copies the token found there into the output slot, which the unembedding
reads. Every other weight is zero.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .model import ConfigError, ModelConfig, Params, build_model

ATTN_MARGIN = 30.0  # logit gap between the intended key and the runner-up


def build_induction_model(config: ModelConfig, token_ids: Optional[Sequence[int]] = None) -> Params:
    config.validate()
    if config.n_layers < 2:
        raise ConfigError("the induction construction needs at least two layers")
    if config.d_mlp != 0:
        raise ConfigError("the induction construction is attention-only (d_mlp must be 0)")
    if config.norm_mode != "none":
        raise ConfigError("the induction construction requires norm_mode='none'")
    if token_ids is None:
        from .tasks import default_vocab

        token_ids = default_vocab().classes["name"]
    toks = [int(t) for t in token_ids]
    n = len(toks)
    if len(set(toks)) != n or any(not 0 <= t < config.vocab_size for t in toks):
        raise ConfigError("wired token ids must be distinct and inside the vocabulary")
    if 3 * n + 2 > config.d_model:
        raise ConfigError(f"d_model={config.d_model} too small for {n} wired tokens (need {3 * n + 2})")
    if config.d_head < n:
        raise ConfigError(f"d_head={config.d_head} must be at least the number of wired tokens ({n})")

    p = build_model(config)
    for arr in p.tensors.values():
        arr[...] = 0.0
    T, dh = config.max_seq_len, config.d_head
    tok0, pos0, prev0, out0 = 0, n, n + 2, 2 * n + 2
    scale = 1.0 / np.sqrt(dh)

    for i, t in enumerate(toks):
        p["W_E"][t, tok0 + i] = 1.0
    theta = np.pi / T
    ang = theta * np.arange(T)
    p["W_pos"][:, pos0] = np.cos(ang)
    p["W_pos"][:, pos0 + 1] = np.sin(ang)

    # a0.0: query is the position code rotated back by one step
    g0 = ATTN_MARGIN / ((1.0 - np.cos(theta)) * scale)
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[c, -s], [s, c]])  # row-vector form of a rotation by -theta
    p["W_Q"][0, 0, pos0 : pos0 + 2, :2] = g0 * rot
    p["W_K"][0, 0, pos0 : pos0 + 2, :2] = np.eye(2)
    p["W_V"][0, 0, tok0 : tok0 + n, :n] = np.eye(n)
    p["W_O"][0, 0, :n, prev0 : prev0 + n] = np.eye(n)

    # a1.0: current token against previous-token slot, copy the matched token
    g1 = ATTN_MARGIN / scale
    p["W_Q"][1, 0, tok0 : tok0 + n, :n] = g1 * np.eye(n)
    p["W_K"][1, 0, prev0 : prev0 + n, :n] = np.eye(n)
    p["W_V"][1, 0, tok0 : tok0 + n, :n] = np.eye(n)
    p["W_O"][1, 0, :n, out0 : out0 + n] = np.eye(n)

    for i, t in enumerate(toks):
        p["W_U"][out0 + i, t] = 1.0
    p.check()
    return p
