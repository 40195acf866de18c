"""Adam training on next-token cross-entropy at labelled positions.

A record is usually labelled at one position (the task answer). Records may
instead carry tuples of positions and targets; each such record then spreads
unit weight evenly over its positions.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import engine
from .model import Params

log = logging.getLogger(__name__)

PAD = 0


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class Record:
    tokens: tuple
    target_pos: int | tuple
    target: int | tuple

    def labels(self) -> tuple:
        if isinstance(self.target_pos, tuple):
            return tuple(zip(self.target_pos, self.target))
        return ((self.target_pos, self.target),)


@dataclass
class OptimizerSpec:
    steps: int = 3000
    lr: float = 3e-3
    batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    warmup: int = 100
    seed: int = 0
    log_every: int = 0


def pad_batch(seqs: Sequence[Sequence[int]]) -> np.ndarray:
    """Right-pad to a common length. Causal masking keeps earlier positions exact."""
    T = max(len(s) for s in seqs)
    out = np.full((len(seqs), T), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def _flatten(records: Sequence[Record]):
    rows, pos, tgt, w = [], [], [], []
    for i, r in enumerate(records):
        lab = r.labels()
        for p, t in lab:
            rows.append(i)
            pos.append(p)
            tgt.append(t)
            w.append(1.0 / len(lab))
    return np.array(rows), np.array(pos), np.array(tgt), np.array(w)


def loss_and_grad(params: Params, records: Sequence[Record], param_grads: bool = True):
    tokens = pad_batch([r.tokens for r in records])
    b, pos, tgt, w = _flatten(records)
    cache = engine.run(params, tokens)
    B, n = len(records), len(b)
    rows = cache.logits[b, pos]
    rows = rows - rows.max(-1, keepdims=True)
    logp = rows - np.log(np.exp(rows).sum(-1, keepdims=True))
    loss = -(w * logp[np.arange(n), tgt]).sum() / B
    acc = float(((rows.argmax(-1) == tgt) * w).sum() / B)
    if not param_grads:
        return loss, acc, None
    dl = np.zeros_like(cache.logits)
    probs = np.exp(logp)
    probs[np.arange(n), tgt] -= 1.0
    np.add.at(dl, (b, pos), probs * w[:, None] / B)
    _, grads = engine.backward(params, cache, dl, param_grads=True)
    return loss, acc, grads


def accuracy(params: Params, records: Sequence[Record], batch_size: int = 256) -> float:
    """Fraction of labelled positions whose argmax is the target (records weighted equally)."""
    if not records:
        return float("nan")
    hits = 0.0
    for i in range(0, len(records), batch_size):
        chunk = records[i : i + batch_size]
        logits = engine.run(params, pad_batch([r.tokens for r in chunk])).logits
        b, pos, tgt, w = _flatten(chunk)
        hits += float(((logits[b, pos].argmax(-1) == tgt) * w).sum())
    return hits / len(records)


def repeated_segment_records(count: int, seed: int, pool: Sequence[int], min_distinct: int = 3,
                             max_distinct: int = 5, max_prefix: int = 3) -> list:
    """Random segments shown twice after a short random prefix.

    A segment holds k distinct tokens, each twice, with no token adjacent to
    itself. Every position of the second copy after its first token is
    labelled with the next token. The period varies, so a fixed positional
    offset cannot predict the labels, and since each token occurs twice one
    token of context is never enough; the two-token context usually is.
    """
    rng = np.random.default_rng(seed)
    pool = np.asarray(pool)
    out = []
    for _ in range(count):
        k = int(rng.integers(min_distinct, max_distinct + 1))
        base = [int(t) for t in rng.choice(pool, size=k, replace=False)]
        seg = base + base
        while True:
            rng.shuffle(seg)
            if all(a != b for a, b in zip(seg, seg[1:])):
                break
        pre = [int(t) for t in rng.choice(pool, size=int(rng.integers(0, max_prefix + 1)))]
        toks = tuple(pre + seg + seg)
        pos = tuple(range(len(pre) + len(seg) + 1, len(toks) - 1))
        out.append(Record(toks, pos, tuple(toks[q + 1] for q in pos)))
    return out


def train(params: Params, dataset: Sequence[Record], spec: OptimizerSpec) -> tuple[Params, dict]:
    """Return trained parameters and a report with the final training accuracy.

    The input parameters are not modified.
    """
    params = params.copy()
    dataset = list(dataset)
    if not dataset:
        raise ValueError("training dataset is empty")
    rng = np.random.default_rng(spec.seed)
    m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    v = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    history = []
    for step in range(1, spec.steps + 1):
        idx = rng.integers(0, len(dataset), size=spec.batch_size)
        loss, acc, grads = loss_and_grad(params, [dataset[i] for i in idx])
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        lr = spec.lr * min(1.0, step / spec.warmup) if spec.warmup else spec.lr
        for k, g in grads.items():
            m[k] = spec.beta1 * m[k] + (1 - spec.beta1) * g
            v[k] = spec.beta2 * v[k] + (1 - spec.beta2) * g * g
            mhat = m[k] / (1 - spec.beta1**step)
            vhat = v[k] / (1 - spec.beta2**step)
            update = mhat / (np.sqrt(vhat) + spec.eps)
            if spec.weight_decay:
                update = update + spec.weight_decay * params.tensors[k]
            params.tensors[k] = params.tensors[k] - lr * update
        if spec.log_every and step % spec.log_every == 0:
            log.info("step %d loss %.4f acc %.3f", step, loss, acc)
            history.append((step, float(loss), acc))
    report = {"steps": spec.steps, "history": history, "train_accuracy": accuracy(params, dataset)}
    return params, report
