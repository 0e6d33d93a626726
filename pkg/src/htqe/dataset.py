"""Annotated sentence-pair corpus: TSV parsing, splitting, batching, synthetic data."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .embeddings import PAD

ASPECTS = ("ut", "ts", "iw", "tm")
ASPECT_MAX = {"ut": 35.0, "ts": 25.0, "iw": 25.0, "tm": 15.0}
MAXIMA = np.array([ASPECT_MAX[a] for a in ASPECTS])


class CorpusFormatError(ValueError):
    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = str(path)
        self.lineno = lineno


@dataclass(frozen=True)
class ScoreVector:
    ut: float
    ts: float
    iw: float
    tm: float

    def __post_init__(self):
        for aspect in ASPECTS:
            value = getattr(self, aspect)
            if not (0.0 <= value <= ASPECT_MAX[aspect]):
                raise ValueError(f"{aspect.upper()} score {value} outside [0, {ASPECT_MAX[aspect]:g}]")

    def total(self) -> float:
        return self.ut + self.ts + self.iw + self.tm

    def as_array(self) -> np.ndarray:
        return np.array([self.ut, self.ts, self.iw, self.tm], dtype=np.float64)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> ScoreVector:
        return cls(*(float(v) for v in values))


@dataclass(frozen=True)
class Example:
    source_tokens: tuple[str, ...]
    target_tokens: tuple[str, ...]
    gold: ScoreVector | None
    id: str

    def __post_init__(self):
        if not self.source_tokens or not self.target_tokens:
            raise ValueError(f"example {self.id}: empty source or target")


@dataclass(frozen=True)
class Corpus:
    examples: tuple[Example, ...]

    def __post_init__(self):
        ids = [ex.id for ex in self.examples]
        if len(set(ids)) != len(ids):
            raise ValueError("corpus ids are not unique")

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self) -> Iterator[Example]:
        return iter(self.examples)

    def __getitem__(self, i):
        return self.examples[i]

    def gold_matrix(self) -> np.ndarray:
        return np.array([ex.gold.as_array() for ex in self.examples]).reshape(len(self), 4)


def _tokens(text: str) -> tuple[str, ...]:
    return tuple(t for t in text.split(" ") if t)


def parse_tsv(path, id_prefix: str | None = None) -> Corpus:
    """source<TAB>target<TAB>ut<TAB>ts<TAB>iw<TAB>tm, one pair per line, no header."""
    path = Path(path)
    prefix = id_prefix if id_prefix is not None else path.stem
    examples = []
    with path.open("r", encoding="utf-8", newline="\n") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 6:
                raise CorpusFormatError(path, lineno, f"expected 6 tab-separated fields, got {len(fields)}")
            src, tgt = _tokens(fields[0]), _tokens(fields[1])
            if not src:
                raise CorpusFormatError(path, lineno, "empty source text")
            if not tgt:
                raise CorpusFormatError(path, lineno, "empty target text")
            scores = []
            for aspect, value in zip(ASPECTS, fields[2:]):
                try:
                    score = float(value)
                except ValueError:
                    raise CorpusFormatError(path, lineno, f"{aspect.upper()} score {value!r} is not numeric") from None
                if not (0.0 <= score <= ASPECT_MAX[aspect]):
                    raise CorpusFormatError(
                        path, lineno,
                        f"{aspect.upper()} score {value} outside [0, {ASPECT_MAX[aspect]:g}]")
                scores.append(score)
            examples.append(Example(src, tgt, ScoreVector(*scores), f"{prefix}:{lineno}"))
    return Corpus(tuple(examples))


def parse_pairs_tsv(path) -> Corpus:
    """Two-column source<TAB>target file for prediction (no gold scores)."""
    path = Path(path)
    examples = []
    with path.open("r", encoding="utf-8", newline="\n") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise CorpusFormatError(path, lineno, f"expected 2 tab-separated fields, got {len(fields)}")
            src, tgt = _tokens(fields[0]), _tokens(fields[1])
            if not src or not tgt:
                raise CorpusFormatError(path, lineno, "empty text field")
            examples.append(Example(src, tgt, None, f"{path.stem}:{lineno}"))
    return Corpus(tuple(examples))


def format_score(x: float) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() else repr(x)


def serialize_tsv(corpus: Corpus) -> str:
    lines = []
    for ex in corpus:
        g = ex.gold
        lines.append("\t".join([" ".join(ex.source_tokens), " ".join(ex.target_tokens),
                                *(format_score(getattr(g, a)) for a in ASPECTS)]))
    return "".join(line + "\n" for line in lines)


def write_tsv(corpus: Corpus, path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(serialize_tsv(corpus))


def split(corpus: Corpus, n_train: int, seed: int) -> tuple[Corpus, Corpus]:
    """Seeded shuffle, then the first ``n_train`` examples form the training part."""
    if not 0 < n_train < len(corpus):
        raise ValueError(f"n_train={n_train} must lie strictly between 0 and {len(corpus)}")
    order = np.random.default_rng(seed).permutation(len(corpus))
    examples = [corpus.examples[i] for i in order]
    return Corpus(tuple(examples[:n_train])), Corpus(tuple(examples[n_train:]))


@dataclass
class Batch:
    examples: list[Example]
    source: list[list[str]]
    target: list[list[str]]
    source_mask: np.ndarray
    target_mask: np.ndarray

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def gold(self) -> np.ndarray:
        return np.array([ex.gold.as_array() for ex in self.examples]).reshape(len(self), 4)


def _pad(seqs: Sequence[Sequence[str]], max_len: int | None) -> tuple[list[list[str]], np.ndarray]:
    seqs = [list(s[:max_len]) if max_len else list(s) for s in seqs]
    width = max(len(s) for s in seqs)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        mask[i, :len(s)] = True
    return [s + [PAD] * (width - len(s)) for s in seqs], mask


def collate(examples: Sequence[Example], max_len: int | None = None) -> Batch:
    """Right-pad both sides to the batch maximum and record true lengths in masks."""
    examples = list(examples)
    src, src_mask = _pad([ex.source_tokens for ex in examples], max_len)
    tgt, tgt_mask = _pad([ex.target_tokens for ex in examples], max_len)
    return Batch(examples, src, tgt, src_mask, tgt_mask)


def make_batches(corpus: Corpus, batch_size: int, seed: int = 0, shuffle: bool = True,
                 max_len: int | None = None) -> list[Batch]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(corpus) == 0:
        raise ValueError("cannot batch an empty corpus")
    order = np.random.default_rng(seed).permutation(len(corpus)) if shuffle else np.arange(len(corpus))
    return [collate([corpus.examples[i] for i in order[lo:lo + batch_size]], max_len)
            for lo in range(0, len(corpus), batch_size)]


# A toy bilingual lexicon; target side uses CJK characters so the pipeline
# exercises non-ASCII tokens end to end.
_LEXICON = {
    "the": "这", "cat": "猫", "dog": "狗", "sees": "看见", "a": "一个", "big": "大",
    "small": "小", "red": "红", "house": "房子", "tree": "树", "runs": "跑", "eats": "吃",
    "fish": "鱼", "bird": "鸟", "water": "水", "under": "下面", "near": "附近", "old": "老",
    "man": "男人", "woman": "女人", "book": "书", "reads": "读", "city": "城市", "river": "河",
}
_SOURCE_WORDS = tuple(_LEXICON)
_TARGET_WORDS = tuple(_LEXICON.values())
_NOISE_WORDS = ("了", "的", "在", "是", "很", "和")


def _half_points(x: float, top: float) -> float:
    return float(min(top, max(0.0, round(2.0 * x) / 2.0)))


def gen_synthetic(n: int, seed: int) -> Corpus:
    """Pseudo translation pairs whose scores follow from lexical accuracy and length fit.

    Each source word is translated correctly with an example-specific
    probability, otherwise replaced by a wrong target word; words may also be
    dropped or padded with filler.  Accuracy drives UT/TS, the target/source
    length ratio drives TM, and IW mixes both.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    examples = []
    for k in range(n):
        length = int(rng.integers(3, 9))
        src = [_SOURCE_WORDS[i] for i in rng.integers(0, len(_SOURCE_WORDS), size=length)]
        p_correct = rng.uniform(0.0, 1.0)
        p_drop = rng.uniform(0.0, 0.6)
        n_extra = int(rng.integers(0, 4))
        tgt, correct = [], 0
        for word in src:
            if rng.uniform() < p_drop:
                continue
            if rng.uniform() < p_correct:
                tgt.append(_LEXICON[word])
                correct += 1
            else:
                wrong = [w for w in _TARGET_WORDS if w != _LEXICON[word]]
                tgt.append(wrong[int(rng.integers(0, len(wrong)))])
        for _ in range(n_extra):
            pos = int(rng.integers(0, len(tgt) + 1))
            tgt.insert(pos, _NOISE_WORDS[int(rng.integers(0, len(_NOISE_WORDS)))])
        if not tgt:
            tgt = [_NOISE_WORDS[0]]
        accuracy = correct / length
        length_fit = max(0.0, 1.0 - abs(len(tgt) / length - 1.0))
        gold = ScoreVector(
            ut=_half_points(35.0 * (0.85 * accuracy + 0.15 * length_fit), 35.0),
            ts=_half_points(25.0 * accuracy ** 1.5, 25.0),
            iw=_half_points(25.0 * (0.5 * accuracy + 0.5 * length_fit), 25.0),
            tm=_half_points(15.0 * length_fit, 15.0),
        )
        examples.append(Example(tuple(src), tuple(tgt), gold, f"syn-{k:05d}"))
    return Corpus(tuple(examples))
