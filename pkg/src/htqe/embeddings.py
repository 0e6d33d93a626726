"""Pre-trained word vectors and the token -> row mapping."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad

log = logging.getLogger(__name__)

PAD = "<pad>"
UNK = "<unk>"
UNK_SCALE = 0.05


class EmbeddingFormatError(ValueError):
    """Malformed embedding file; carries the offending line number."""

    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = str(path)
        self.lineno = lineno


@dataclass
class EmbeddingTable:
    dim: int
    vocab: dict[str, int]
    matrix: ad.Tensor
    pad_index: int
    unk_index: int
    lowercase: bool = False
    duplicates: int = field(default=0, compare=False)

    def __len__(self) -> int:
        return len(self.vocab)

    def index(self, token: str) -> int:
        if self.lowercase:
            token = token.lower()
        return self.vocab.get(token, self.unk_index)

    def indices(self, tokens: Sequence[str]) -> np.ndarray:
        return np.array([self.index(t) for t in tokens], dtype=np.intp)

    def tokens(self) -> list[str]:
        """Vocabulary in index order."""
        out = [""] * len(self.vocab)
        for tok, i in self.vocab.items():
            out[i] = tok
        return out


def _with_reserved(tokens: list[str], rows: np.ndarray, dim: int, rng: np.random.Generator,
                   lowercase: bool, duplicates: int = 0) -> EmbeddingTable:
    vocab = {tok: i for i, tok in enumerate(tokens)}
    unk_index = len(tokens)
    pad_index = len(tokens) + 1
    vocab[UNK] = unk_index
    vocab[PAD] = pad_index
    unk = rng.uniform(-UNK_SCALE, UNK_SCALE, size=(1, dim))
    matrix = np.vstack([rows.reshape(len(tokens), dim), unk, np.zeros((1, dim))])
    return EmbeddingTable(dim=dim, vocab=vocab, matrix=ad.parameter(matrix),
                          pad_index=pad_index, unk_index=unk_index,
                          lowercase=lowercase, duplicates=duplicates)


def load_embeddings(path, expected_dim: int, seed: int = 0, lowercase: bool = False) -> EmbeddingTable:
    """Read a GloVe/word2vec-style text file.

    A leading ``count dim`` header line is skipped.  Duplicate tokens keep the
    first occurrence; the number of dropped lines is logged and stored on the
    table.
    """
    path = Path(path)
    tokens: list[str] = []
    rows: list[np.ndarray] = []
    seen: set[str] = set()
    duplicates = 0
    with path.open("r", encoding="utf-8", newline="\n") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            fields = line.split(" ")
            if lineno == 1 and len(fields) == 2 and all(f.isdigit() for f in fields):
                continue
            if len(fields) != expected_dim + 1:
                raise EmbeddingFormatError(
                    path, lineno, f"expected token + {expected_dim} floats, got {len(fields) - 1} values")
            token = fields[0].lower() if lowercase else fields[0]
            try:
                vec = np.array([float(x) for x in fields[1:]], dtype=np.float64)
            except ValueError as exc:
                raise EmbeddingFormatError(path, lineno, f"bad float: {exc}") from None
            if token in seen:
                duplicates += 1
                continue
            seen.add(token)
            tokens.append(token)
            rows.append(vec)
    if duplicates:
        log.warning("%s: skipped %d duplicate token line(s)", path, duplicates)
    matrix = np.array(rows).reshape(len(rows), expected_dim)
    return _with_reserved(tokens, matrix, expected_dim, np.random.default_rng(seed),
                          lowercase, duplicates)


def random_embeddings(tokens: Iterable[str], dim: int, seed: int = 0, scale: float = 0.1,
                      lowercase: bool = False) -> EmbeddingTable:
    """Seeded uniform(-scale, scale) vectors for a vocabulary built from data."""
    ordered: list[str] = []
    seen: set[str] = set()
    for tok in tokens:
        tok = tok.lower() if lowercase else tok
        if tok not in seen and tok not in (PAD, UNK):
            seen.add(tok)
            ordered.append(tok)
    rng = np.random.default_rng(seed)
    rows = rng.uniform(-scale, scale, size=(len(ordered), dim))
    return _with_reserved(ordered, rows, dim, rng, lowercase)


def lookup(table: EmbeddingTable, tokens: Sequence[str]) -> ad.Tensor:
    """``len(tokens) x dim`` rows; unknown tokens read the UNK row."""
    if not tokens:
        raise ValueError("lookup needs at least one token")
    return ad.take_rows(table.matrix, table.indices(tokens))


def save_embeddings(table: EmbeddingTable, path) -> None:
    """Write the table (minus reserved rows) in the text format ``load_embeddings`` reads."""
    data = table.matrix.data
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for tok, i in table.vocab.items():
            if i in (table.pad_index, table.unk_index):
                continue
            fh.write(tok + " " + " ".join(repr(float(x)) for x in data[i]) + "\n")
