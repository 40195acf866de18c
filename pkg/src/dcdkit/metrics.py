"""Logit-difference metric between the correct and counterfactual labels."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class MetricError(ValueError):
    pass


def metric_logit_diff(logits, correct: int, counterfactuals: Sequence[int], position: int) -> float:
    """logit(correct) - mean logit(counterfactuals) at ``position``.

    ``logits`` is ``(T, V)`` for a single sequence.
    """
    cfs = np.asarray(list(counterfactuals), dtype=np.int64)
    if cfs.size == 0:
        raise MetricError("counterfactual set is empty")
    row = np.asarray(logits)[position]
    return float(row[correct] - row[cfs].mean())


@dataclass
class LogitDiff:
    """Batched logit-difference metric, one (position, label set) per row."""

    positions: np.ndarray  # (B,)
    correct: np.ndarray  # (B,)
    counterfactuals: list  # B arrays of token ids

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.int64)
        self.correct = np.asarray(self.correct, dtype=np.int64)
        self.counterfactuals = [np.asarray(c, dtype=np.int64) for c in self.counterfactuals]
        if any(c.size == 0 for c in self.counterfactuals):
            raise MetricError("counterfactual set is empty")

    @classmethod
    def from_pairs(cls, pairs) -> "LogitDiff":
        return cls(
            [p.answer_pos for p in pairs],
            [p.correct for p in pairs],
            [p.counterfactuals for p in pairs],
        )

    def __len__(self) -> int:
        return len(self.positions)

    def repeat(self, n: int) -> "LogitDiff":
        """Each row repeated ``n`` times in place (row i -> rows i*n .. i*n+n-1)."""
        return LogitDiff(
            np.repeat(self.positions, n),
            np.repeat(self.correct, n),
            [c for c in self.counterfactuals for _ in range(n)],
        )

    def value(self, logits: np.ndarray) -> np.ndarray:
        """Metric per batch row. Rows of ``logits`` beyond len(self) are not allowed."""
        B = logits.shape[0]
        if B != len(self):
            if len(self) != 1:
                raise MetricError(f"metric has {len(self)} rows, logits batch is {B}")
            rows = [0] * B
        else:
            rows = range(B)
        out = np.empty(B)
        for b, r in enumerate(rows):
            row = logits[b, self.positions[r]]
            out[b] = row[self.correct[r]] - row[self.counterfactuals[r]].mean()
        return out

    def grad_logits(self, logits: np.ndarray) -> np.ndarray:
        B = logits.shape[0]
        rows = range(B) if B == len(self) else [0] * B
        g = np.zeros_like(logits)
        for b, r in enumerate(rows):
            cf = self.counterfactuals[r]
            np.add.at(g[b, self.positions[r]], cf, -1.0 / cf.size)
            g[b, self.positions[r], self.correct[r]] += 1.0
        return g
