"""Edge-level activation patching between a clean and a corrupted run."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import engine
from .engine import ActivationCache, InputError
from .model import Params


@dataclass
class PatchPlan:
    """Per-edge choice between the clean and the corrupted source output.

    ``corrupted`` is a boolean vector over canonical edge indices, or a
    ``(B, n_edges)`` matrix for one plan per batch row. With ``zero=True`` the
    corrupted side is an all-zero activation instead of ``corrupt_cache``.
    """

    corrupted: np.ndarray
    clean_cache: ActivationCache
    corrupt_cache: Optional[ActivationCache] = None
    zero: bool = False

    def __post_init__(self):
        self.corrupted = np.asarray(self.corrupted, dtype=bool)
        if not self.zero and self.corrupt_cache is None:
            raise InputError("counterfactual patching needs a corrupted cache")
        if self.corrupt_cache is not None:
            tc, tk = self.clean_cache.tokens.shape[1], self.corrupt_cache.tokens.shape[1]
            if tc != tk:
                raise InputError(f"alignment error: clean length {tc}, corrupted length {tk}")
            if self.clean_cache.params_id != self.corrupt_cache.params_id:
                raise InputError("clean and corrupted caches come from different parameters")

    @classmethod
    def clean(cls, graph, clean_cache, corrupt_cache=None, zero=False) -> "PatchPlan":
        return cls(np.zeros(graph.n_edges, bool), clean_cache, corrupt_cache, zero)

    @classmethod
    def from_circuit(cls, graph, edges, clean_cache, corrupt_cache=None, zero=False) -> "PatchPlan":
        """Everything outside ``edges`` reads the corrupted side."""
        m = np.ones(graph.n_edges, bool)
        m[np.asarray(list(edges), dtype=np.int64)] = False
        return cls(m, clean_cache, corrupt_cache, zero)

    def source_outputs(self) -> list:
        if self.zero:
            return [np.zeros_like(o) for o in self.clean_cache.outputs]
        return self.corrupt_cache.outputs


def patched_run(params: Params, plan: PatchPlan, tokens) -> ActivationCache:
    tokens = engine.check_tokens(params, tokens)
    if tokens.shape[1] != plan.clean_cache.tokens.shape[1]:
        raise InputError(
            f"alignment error: tokens have length {tokens.shape[1]}, plan caches {plan.clean_cache.tokens.shape[1]}"
        )
    if plan.clean_cache.params_id != id(params):
        raise InputError("plan caches were produced with different parameters")
    return engine.run(params, tokens, corrupt=plan.source_outputs(), mask=plan.corrupted)


def patched_forward(params: Params, plan: PatchPlan, tokens) -> np.ndarray:
    """Logits of a run whose site inputs mix clean and corrupted source outputs."""
    return patched_run(params, plan, tokens).logits
