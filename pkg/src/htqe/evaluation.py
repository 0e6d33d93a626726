"""Pearson r, Spearman rho and MSE per quality aspect.

Correlations that are mathematically undefined (a constant input) come back
as ``None`` rather than NaN.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import ASPECTS, Corpus
from .model import QEModel, clamp_scores

UNDEFINED = None


def _pair(x, y, min_len: int) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < min_len:
        raise ValueError(f"need at least {min_len} values, got {x.size}")
    return x, y


def pearson(x: Sequence[float], y: Sequence[float]) -> float | None:
    x, y = _pair(x, y, 2)
    if np.ptp(x) == 0.0 or np.ptp(y) == 0.0:
        return UNDEFINED
    dx = x - x.mean()
    dy = y - y.mean()
    # rescale so tiny inputs do not underflow in the sums of squares
    dx = dx / np.abs(dx).max()
    dy = dy / np.abs(dy).max()
    r = float(np.dot(dx, dy) / (np.sqrt(np.dot(dx, dx)) * np.sqrt(np.dot(dy, dy))))
    return min(1.0, max(-1.0, r))


def average_ranks(x: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the mean of the positions they occupy."""
    x = np.asarray(x, dtype=np.float64).ravel()
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size, dtype=np.float64)
    sorted_x = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x: Sequence[float], y: Sequence[float]) -> float | None:
    x, y = _pair(x, y, 2)
    return pearson(average_ranks(x), average_ranks(y))


def mse(pred: Sequence[float], gold: Sequence[float]) -> float:
    p, g = _pair(pred, gold, 1)
    d = p - g
    return float(np.dot(d, d) / d.size)


@dataclass
class AspectMetrics:
    pearson: float | None
    spearman: float | None
    mse: float


@dataclass
class EvalReport:
    aspects: dict[str, AspectMetrics]
    n: int

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "aspects": {a: {"pearson": m.pearson, "spearman": m.spearman, "mse": m.mse}
                        for a, m in self.aspects.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def render(self) -> str:
        """Plain-text table: one row per aspect, columns r, rho, MSE."""
        def fmt(v):
            return "undef" if v is None else f"{v:.4f}"

        lines = [f"{'Target':<8}{'r':>10}{'rho':>10}{'MSE':>12}"]
        for a, m in self.aspects.items():
            lines.append(f"{a.upper():<8}{fmt(m.pearson):>10}{fmt(m.spearman):>10}{m.mse:>12.4f}")
        lines.append(f"n = {self.n}")
        return "\n".join(lines) + "\n"


def score_matrices(pred: np.ndarray, gold: np.ndarray) -> EvalReport:
    """Metrics column by column from stacked ``N x 4`` prediction/gold matrices."""
    pred = np.asarray(pred, dtype=np.float64)
    gold = np.asarray(gold, dtype=np.float64)
    if pred.shape != gold.shape or pred.ndim != 2 or pred.shape[1] != len(ASPECTS):
        raise ValueError(f"expected matching N x 4 matrices, got {pred.shape} and {gold.shape}")
    if pred.shape[0] == 0:
        raise ValueError("cannot evaluate an empty set")
    aspects = {}
    for j, a in enumerate(ASPECTS):
        p, g = pred[:, j], gold[:, j]
        aspects[a] = AspectMetrics(
            pearson=pearson(p, g) if p.size >= 2 else UNDEFINED,
            spearman=spearman(p, g) if p.size >= 2 else UNDEFINED,
            mse=mse(p, g),
        )
    return EvalReport(aspects, pred.shape[0])


def evaluate(model: QEModel, corpus: Corpus, clamped: bool = False) -> EvalReport:
    """Score a test corpus; raw (unclamped) predictions unless ``clamped``."""
    if len(corpus) == 0:
        raise ValueError("cannot evaluate an empty test set")
    pred = model.predict_raw(list(corpus.examples))
    if clamped:
        pred = clamp_scores(pred)
    return score_matrices(pred, corpus.gold_matrix())
