"""Annotation agreement and error-profile PCA.

Krippendorff's alpha is computed from the coincidence matrix of pairable
values.  PCA works on centered (optionally standardized) error counts;
loadings are eigenvectors scaled by the square roots of their eigenvalues and
may be varimax-rotated with classical pairwise planar rotations.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import ASPECTS, Corpus

log = logging.getLogger(__name__)

ERROR_TYPES = (
    "mistranslation", "omission", "awkward", "punctuation", "undertranslation", "unidiomatic",
    "grammar", "addition", "spelling", "terminology", "untranslated",
)
ERROR_CSV_HEADER = ("id", "label") + ERROR_TYPES
LABELS = ("HT", "MT")


class AnalysisFormatError(ValueError):
    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = str(path)
        self.lineno = lineno


# ---------------------------------------------------------------- agreement

def _delta_matrix(values: np.ndarray, marginals: np.ndarray, metric: str) -> np.ndarray:
    c = values[:, None]
    k = values[None, :]
    if metric == "interval":
        return (c - k) ** 2
    if metric == "nominal":
        return (c != k).astype(np.float64)
    if metric == "ratio":
        with np.errstate(invalid="ignore", divide="ignore"):
            d = ((c - k) / (c + k)) ** 2
        return np.nan_to_num(d, nan=0.0)
    if metric == "ordinal":
        cum = np.concatenate([[0.0], np.cumsum(marginals)])
        idx = np.arange(values.size)
        lo = np.minimum(idx[:, None], idx[None, :])
        hi = np.maximum(idx[:, None], idx[None, :])
        span = cum[hi + 1] - cum[lo]
        return (span - (marginals[:, None] + marginals[None, :]) / 2.0) ** 2
    raise ValueError(f"unknown metric {metric!r}")


def coincidence_matrix(ratings) -> tuple[np.ndarray, np.ndarray]:
    """Distinct values and their coincidence matrix over units with >= 2 ratings."""
    r = np.asarray(ratings, dtype=np.float64)
    if r.ndim != 2:
        raise ValueError("ratings must be a units x annotators matrix")
    present = r[~np.isnan(r)]
    values = np.unique(present)
    pos = {v: i for i, v in enumerate(values)}
    o = np.zeros((values.size, values.size))
    for row in r:
        row = row[~np.isnan(row)]
        m = row.size
        if m < 2:
            continue
        counts = np.zeros(values.size)
        for v in row:
            counts[pos[v]] += 1
        o += (np.outer(counts, counts) - np.diag(counts)) / (m - 1)
    return values, o


def krippendorff_alpha(ratings, metric: str = "interval") -> float | None:
    """Alpha for a ``units x annotators`` matrix; NaN/None cells are missing.

    Returns ``None`` when alpha is undefined (fewer than two pairable values or
    no expected disagreement).
    """
    r = np.array([[np.nan if v is None else v for v in row] for row in ratings], dtype=np.float64) \
        if not isinstance(ratings, np.ndarray) else ratings.astype(np.float64)
    if r.ndim != 2 or r.shape[1] < 2:
        raise ValueError("need a units x annotators matrix with at least 2 annotators")
    values, o = coincidence_matrix(r)
    marginals = o.sum(axis=1)
    n = marginals.sum()
    if n < 2:
        return None
    delta = _delta_matrix(values, marginals, metric)
    expected = float((np.outer(marginals, marginals) * delta).sum())
    if expected == 0.0:
        return None
    observed = float((o * delta).sum())
    return 1.0 - (n - 1.0) * observed / expected


def read_ratings_csv(path) -> dict[str, np.ndarray]:
    """Long-format ratings ``unit,annotator,ut,ts,iw,tm``; empty cells are missing.

    Returns one ``units x annotators`` matrix per aspect (NaN where missing).
    """
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ["unit", "annotator", *ASPECTS]
        if header is None or [h.strip() for h in header] != expected:
            raise AnalysisFormatError(path, 1, f"header must be {','.join(expected)}")
        units: dict[str, int] = {}
        annotators: dict[str, int] = {}
        cells: list[tuple[int, int, list[float]]] = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(expected):
                raise AnalysisFormatError(path, lineno, f"expected {len(expected)} fields, got {len(row)}")
            u = units.setdefault(row[0], len(units))
            a = annotators.setdefault(row[1], len(annotators))
            vals = []
            for aspect, cell in zip(ASPECTS, row[2:]):
                cell = cell.strip()
                if not cell:
                    vals.append(np.nan)
                    continue
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise AnalysisFormatError(path, lineno, f"{aspect} rating {cell!r} is not numeric") from None
            cells.append((u, a, vals))
    if len(annotators) < 2:
        raise AnalysisFormatError(path, 1, "need ratings from at least 2 annotators")
    out = {a: np.full((len(units), len(annotators)), np.nan) for a in ASPECTS}
    for u, a, vals in cells:
        for aspect, v in zip(ASPECTS, vals):
            out[aspect][u, a] = v
    return out


# ---------------------------------------------------------------- descriptives

DESCRIPTIVE_ROWS = (("min", "Min."), ("q1", "1st Quartile"), ("median", "Median"),
                    ("mean", "Mean"), ("q3", "3rd Quartile"), ("max", "Max."))


def describe_values(x: Sequence[float]) -> dict[str, float]:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("no values to describe")
    q1, med, q3 = np.quantile(x, [0.25, 0.5, 0.75], method="linear")
    return {"min": float(x.min()), "q1": float(q1), "median": float(med), "mean": float(x.mean()),
            "q3": float(q3), "max": float(x.max())}


def score_descriptives(corpus: Corpus) -> dict[str, dict[str, float]]:
    """Per-aspect summary plus the total ("score") column."""
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    gold = corpus.gold_matrix()
    out = {a: describe_values(gold[:, j]) for j, a in enumerate(ASPECTS)}
    out["score"] = describe_values(gold.sum(axis=1))
    return out


def render_descriptives(stats: dict[str, dict[str, float]], alphas: dict[str, float | None] | None = None) -> str:
    cols = list(stats)
    lines = [f"{'':<22}" + "".join(f"{c.upper():>9}" for c in cols)]
    for key, label in DESCRIPTIVE_ROWS:
        lines.append(f"{label:<22}" + "".join(f"{stats[c][key]:>9.2f}" for c in cols))
    if alphas:
        cells = []
        for c in cols:
            a = alphas.get(c)
            cells.append(f"{'':>9}" if c not in alphas else f"{'undef' if a is None else f'{a:.2f}':>9}")
        lines.append(f"{'Krippendorff alpha':<22}" + "".join(cells))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- PCA

@dataclass
class PcaResult:
    components: np.ndarray          # types x k, orthonormal columns
    eigenvalues: np.ndarray         # k
    explained_variance_ratio: np.ndarray
    loadings: np.ndarray            # components scaled by sqrt(eigenvalue)
    scores: np.ndarray              # instances x k
    all_scores: np.ndarray          # instances x rank, for cos2
    rotated_loadings: np.ndarray | None = None
    rotation: np.ndarray | None = None
    rank_deficient: bool = False
    zero_profiles: np.ndarray | None = None  # bool per instance: raw row is all zero

    @property
    def n_components(self) -> int:
        return self.components.shape[1]

    @property
    def rotated_scores(self) -> np.ndarray | None:
        return None if self.rotation is None else self.scores @ self.rotation


def pca(matrix, n_components: int = 3, standardize: bool = False, rotate: bool = True) -> PcaResult:
    x = np.asarray(matrix, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("PCA needs a 2-d matrix with at least 2 instances")
    centered = x - x.mean(axis=0)
    if standardize:
        sd = centered.std(axis=0, ddof=1)
        sd[sd == 0.0] = 1.0
        centered = centered / sd
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    eig_all = s ** 2 / (x.shape[0] - 1)
    total = eig_all.sum()
    tol = s.max(initial=0.0) * max(centered.shape) * np.finfo(np.float64).eps
    rank = int((s > tol).sum())
    comps = vt[:rank].T.copy()
    # largest-magnitude loading of each component is positive
    signs = np.sign(comps[np.abs(comps).argmax(axis=0), np.arange(rank)])
    signs[signs == 0] = 1.0
    comps *= signs
    all_scores = centered @ comps
    k = min(n_components, rank)
    if k < n_components:
        log.warning("data rank %d < %d requested components", rank, n_components)
    eig = eig_all[:k]
    ratio = eig / total if total > 0 else np.zeros(k)
    result = PcaResult(
        components=comps[:, :k],
        eigenvalues=eig,
        explained_variance_ratio=ratio,
        loadings=comps[:, :k] * np.sqrt(eig),
        scores=all_scores[:, :k],
        all_scores=all_scores,
        rank_deficient=k < n_components,
        zero_profiles=(x == 0.0).all(axis=1),
    )
    if rotate and k >= 1:
        result.rotated_loadings, result.rotation = varimax(result.loadings)
    return result


def varimax_criterion(loadings: np.ndarray) -> float:
    """Sum over columns of the variance of squared loadings."""
    sq = np.asarray(loadings, dtype=np.float64) ** 2
    return float((sq ** 2).mean(axis=0).sum() - (sq.mean(axis=0) ** 2).sum())


def _pair_angle(x: np.ndarray, y: np.ndarray) -> float:
    p = x.size
    u = x * x - y * y
    v = 2.0 * x * y
    num = 2.0 * (u @ v) - 2.0 * u.sum() * v.sum() / p
    den = (u @ u - v @ v) - (u.sum() ** 2 - v.sum() ** 2) / p
    return float(np.arctan2(num, den) / 4.0)


def varimax(loadings, tol: float = 1e-6, max_iter: int = 100,
            return_trace: bool = False):
    """Orthogonal varimax rotation via sweeps of pairwise planar rotations.

    Returns ``(rotated, rotation)`` with ``rotated = loadings @ rotation``; with
    ``return_trace`` also the criterion after every sweep.
    """
    a = np.array(loadings, dtype=np.float64)
    p, k = a.shape
    rot = np.eye(k)
    trace = [varimax_criterion(a)]
    if k >= 2:
        for _ in range(max_iter):
            for i in range(k - 1):
                for j in range(i + 1, k):
                    theta = _pair_angle(a[:, i], a[:, j])
                    c, s = np.cos(theta), np.sin(theta)
                    plane = np.array([[c, -s], [s, c]])
                    a[:, [i, j]] = a[:, [i, j]] @ plane
                    rot[:, [i, j]] = rot[:, [i, j]] @ plane
            trace.append(varimax_criterion(a))
            if trace[-1] - trace[-2] < tol:
                break
    if return_trace:
        return a, rot, trace
    return a, rot


@dataclass
class Cos2Result:
    cos2: np.ndarray       # instances x dims (NaN rows where undefined)
    defined: np.ndarray    # bool per instance
    first_two: np.ndarray  # cos2 summed over dims 1-2
    shaded: np.ndarray     # first_two < threshold


def cos2_contributions(result: PcaResult, threshold: float = 0.5) -> Cos2Result:
    """Undefined for all-zero profiles and for instances sitting on the centroid."""
    s2 = result.all_scores ** 2
    norms = s2.sum(axis=1)
    floor = (1e-10 ** 2) * norms.max(initial=0.0)
    defined = norms > floor
    if result.zero_profiles is not None:
        defined &= ~result.zero_profiles
    cos2 = np.full_like(s2, np.nan)
    cos2[defined] = s2[defined] / norms[defined, None]
    first_two = cos2[:, :2].sum(axis=1)
    shaded = np.where(defined, first_two < threshold, False)
    return Cos2Result(cos2, defined, first_two, shaded)


# ---------------------------------------------------------------- error profiles

@dataclass(frozen=True)
class ErrorProfile:
    id: str
    label: str
    counts: tuple[int, ...]
    source_id: str | None = None


def read_error_profiles(path) -> list[ErrorProfile]:
    path = Path(path)
    profiles = []
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != ERROR_CSV_HEADER:
            raise AnalysisFormatError(path, 1, "header must be " + ",".join(ERROR_CSV_HEADER))
        seen = set()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(ERROR_CSV_HEADER):
                raise AnalysisFormatError(path, lineno,
                                          f"expected {len(ERROR_CSV_HEADER)} fields, got {len(row)}")
            ident, label = row[0].strip(), row[1].strip()
            if label not in LABELS:
                raise AnalysisFormatError(path, lineno, f"label must be HT or MT, got {label!r}")
            if ident in seen:
                raise AnalysisFormatError(path, lineno, f"duplicate id {ident!r}")
            seen.add(ident)
            counts = []
            for name, cell in zip(ERROR_TYPES, row[2:]):
                cell = cell.strip()
                if not cell.isdigit():
                    raise AnalysisFormatError(path, lineno,
                                              f"{name} count {cell!r} is not a non-negative integer")
                counts.append(int(cell))
            profiles.append(ErrorProfile(ident, label, tuple(counts)))
    if len(profiles) < 2:
        raise AnalysisFormatError(path, 1, "need at least 2 error profiles")
    return profiles


def _list(a):
    return None if a is None else np.asarray(a).tolist()


def analyze_error_profiles(profiles: Sequence[ErrorProfile], n_components: int = 3,
                           standardize: bool = False) -> dict:
    """PCA + varimax + cos2 summary, ready to dump as JSON for plotting."""
    matrix = np.array([p.counts for p in profiles], dtype=np.float64)
    result = pca(matrix, n_components=n_components, standardize=standardize)
    c2 = cos2_contributions(result)
    rotated_scores = result.rotated_scores
    instances = []
    for i, p in enumerate(profiles):
        instances.append({
            "id": p.id,
            "label": p.label,
            "scores": result.scores[i].tolist(),
            "rotated_scores": None if rotated_scores is None else rotated_scores[i].tolist(),
            "cos2": None if not c2.defined[i] else c2.cos2[i, :result.n_components].tolist(),
            "cos2_dims12": None if not c2.defined[i] else float(c2.first_two[i]),
            "shaded": bool(c2.shaded[i]),
        })
    return {
        "error_types": list(ERROR_TYPES),
        "n_components": result.n_components,
        "standardized": standardize,
        "rank_deficient": result.rank_deficient,
        "eigenvalues": result.eigenvalues.tolist(),
        "explained_variance_ratio": result.explained_variance_ratio.tolist(),
        "components": result.components.tolist(),
        "loadings": result.loadings.tolist(),
        "rotated_loadings": _list(result.rotated_loadings),
        "rotation": _list(result.rotation),
        "instances": instances,
    }
