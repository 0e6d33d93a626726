"""MSE + L2 objective, Adam, the epoch loop and the checkpoint format."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .dataset import ASPECTS, Corpus, make_batches, split
from .embeddings import PAD, UNK, EmbeddingTable, random_embeddings
from .evaluation import score_matrices
from .model import ModelConfig, QEModel

log = logging.getLogger(__name__)

# Named sub-streams of the run seed.
SUBSEEDS = {"split": 1, "init": 2, "batching": 3, "dropout": 4, "embeddings": 5}


def sub_rng(seed: int, name: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng([seed, SUBSEEDS[name], *extra])


def sub_seed(seed: int, name: str, *extra: int) -> int:
    return int(np.random.SeedSequence([seed, SUBSEEDS[name], *extra]).generate_state(1)[0])


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    l2_lambda: float = 1e-3
    dropout: float = 0.5
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    dev_fraction: float = 0.1
    l2_embeddings: bool = False
    l2_biases: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 <= self.dev_fraction < 1.0:
            raise ValueError("dev_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


# ---------------------------------------------------------------- objective

def is_regularized(name: str, cfg: TrainConfig) -> bool:
    if name.endswith(".embed"):
        return cfg.l2_embeddings
    if name.endswith(".b"):
        return cfg.l2_biases
    return True


def loss(predictions: ad.Tensor, gold, params: Mapping[str, ad.Tensor] | None = None,
         l2_lambda: float = 0.0) -> ad.Tensor:
    """(1 / (B*k)) * sum of squared errors + l2_lambda * sum of squared parameters."""
    gold = ad.as_tensor(gold)
    if predictions.shape != gold.shape or predictions.data.ndim != 2:
        raise ad.ShapeError(f"loss: predictions {predictions.shape} vs gold {gold.shape}")
    B, k = predictions.shape
    total = ad.sum(ad.square(predictions - gold)) * (1.0 / (B * k))
    if l2_lambda and params:
        for p in params.values():
            total = total + ad.sum(ad.square(p)) * l2_lambda
    return total


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: Mapping[str, ad.Tensor], state: AdamState, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update using each parameter's ``.grad``."""
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ValueError(f"missing gradient for parameter(s): {', '.join(missing)}")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


# ---------------------------------------------------------------- loop

def build_vocabularies(corpus: Corpus, dim: int, seed: int, lowercase_source: bool = False):
    src = random_embeddings((t for ex in corpus for t in ex.source_tokens), dim,
                            seed=sub_seed(seed, "embeddings", 0), lowercase=lowercase_source)
    tgt = random_embeddings((t for ex in corpus for t in ex.target_tokens), dim,
                            seed=sub_seed(seed, "embeddings", 1))
    return src, tgt


def mean_pearson(dev_pearson: Mapping[str, float | None]) -> float:
    values = [v for v in dev_pearson.values() if v is not None]
    return float(np.mean(values)) if values else float("-inf")


def best_record(history: list[dict]) -> dict:
    """Earliest epoch with the highest mean dev Pearson."""
    best = history[0]
    for record in history[1:]:
        if mean_pearson(record["dev_pearson"]) > mean_pearson(best["dev_pearson"]):
            best = record
    return best


def train(model_config: ModelConfig, train_config: TrainConfig, corpus: Corpus,
          src_vocab: EmbeddingTable | None = None, tgt_vocab: EmbeddingTable | None = None,
          freeze_embeddings: bool = False,
          on_epoch: Callable[[dict], None] | None = None) -> tuple[QEModel, list[dict]]:
    """Fit a model; returns the parameters of the best dev epoch and the history.

    With ``dev_fraction == 0`` (or a corpus too small to hold out one example)
    model selection uses the training set itself.
    """
    if len(corpus) == 0:
        raise ValueError("cannot train on an empty corpus")
    cfg = train_config
    seed = cfg.seed
    n_dev = int(round(len(corpus) * cfg.dev_fraction))
    if n_dev >= 1 and len(corpus) - n_dev >= 1:
        train_set, dev_set = split(corpus, len(corpus) - n_dev, sub_seed(seed, "split"))
    else:
        train_set, dev_set = corpus, corpus
    if src_vocab is None or tgt_vocab is None:
        built_src, built_tgt = build_vocabularies(train_set, model_config.embed_dim, seed)
        src_vocab = src_vocab or built_src
        tgt_vocab = tgt_vocab or built_tgt
    model = QEModel(model_config, src_vocab, tgt_vocab, seed=sub_seed(seed, "init"),
                    freeze_embeddings=freeze_embeddings)
    trainable = model.trainable()
    regularized = {k: p for k, p in trainable.items() if is_regularized(k, cfg)}
    pad_rows = {f"{side}.embed": model.vocabs[side].pad_index for side in ("src", "tgt")}
    state = AdamState()
    dropout_rng = sub_rng(seed, "dropout")
    dev_gold = dev_set.gold_matrix()

    history: list[dict] = []
    best_score = float("-inf")
    best_params = {k: p.data.copy() for k, p in model.params.items()}
    for epoch in range(1, cfg.epochs + 1):
        batches = make_batches(train_set, cfg.batch_size, seed=sub_seed(seed, "batching", epoch),
                               shuffle=True, max_len=model_config.max_len)
        total, count = 0.0, 0
        for b_idx, batch in enumerate(batches, start=1):
            for p in trainable.values():
                p.grad = None
            out = model.forward(batch, dropout=cfg.dropout, rng=dropout_rng)
            value = loss(out, ad.constant(batch.gold), regularized, cfg.l2_lambda)
            if not np.isfinite(value.item()):
                raise TrainingDiverged(epoch, b_idx, value.item())
            value.backward()
            for name, row in pad_rows.items():
                if name in trainable:
                    trainable[name].grad[row] = 0.0
            adam_step(trainable, state, cfg)
            total += value.item() * len(batch)
            count += len(batch)
        report = score_matrices(model.predict_raw(list(dev_set.examples)), dev_gold)
        record = {
            "epoch": epoch,
            "train_loss": total / count,
            "dev_pearson": {a: report.aspects[a].pearson for a in ASPECTS},
            "dev_mse": {a: report.aspects[a].mse for a in ASPECTS},
        }
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        score = mean_pearson(record["dev_pearson"])
        log.info("epoch %d loss %.4f dev pearson %.4f", epoch, record["train_loss"], score)
        if score > best_score:
            best_score = score
            best_params = {k: p.data.copy() for k, p in model.params.items()}
    for k, p in model.params.items():
        p.data[...] = best_params[k]
    return model, history


# ---------------------------------------------------------------- checkpoints

MAGIC = b"HTQECKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: QEModel
    manifest: dict


def save_checkpoint(model: QEModel, path, meta: dict | None = None, dtype: str = "float64") -> None:
    """Layout: 8-byte magic, uint64 LE manifest length, UTF-8 JSON manifest, raw LE tensors."""
    if dtype not in ("float64", "float32"):
        raise ValueError("dtype must be float64 or float32")
    np_dtype = np.dtype("<f8" if dtype == "float64" else "<f4")
    tensors, payloads, offset = [], [], 0
    for name, p in model.params.items():
        blob = np.ascontiguousarray(p.data, dtype=np_dtype).tobytes()
        tensors.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": len(blob)})
        payloads.append(blob)
        offset += len(blob)
    vocab = {}
    for side, table in model.vocabs.items():
        vocab[side] = {"tokens": table.tokens(), "pad_index": table.pad_index,
                       "unk_index": table.unk_index, "lowercase": table.lowercase}
    manifest = {
        "format": "htqe-checkpoint",
        "version": FORMAT_VERSION,
        "dtype": dtype,
        "model_config": model.config.to_dict(),
        "freeze_embeddings": model.freeze_embeddings,
        "meta": meta or {},
        "vocab": vocab,
        "tensors": tensors,
    }
    head = json.dumps(manifest, ensure_ascii=False, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for blob in payloads:
            fh.write(blob)


def _table_from_manifest(side: str, entry: dict, dim: int) -> EmbeddingTable:
    tokens = entry["tokens"]
    vocab = {tok: i for i, tok in enumerate(tokens)}
    if len(vocab) != len(tokens):
        raise CheckpointError(f"{side} vocabulary has duplicate tokens")
    if tokens[entry["pad_index"]] != PAD or tokens[entry["unk_index"]] != UNK:
        raise CheckpointError(f"{side} vocabulary reserved indices are inconsistent")
    return EmbeddingTable(dim=dim, vocab=vocab, matrix=ad.parameter(np.zeros((len(tokens), dim))),
                          pad_index=entry["pad_index"], unk_index=entry["unk_index"],
                          lowercase=entry.get("lowercase", False))


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (head_len,) = struct.unpack("<Q", raw[8:16])
    if 16 + head_len > len(raw):
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[16:16 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest: {exc}") from None
    if manifest.get("format") != "htqe-checkpoint" or manifest.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format/version")
    try:
        config = ModelConfig.from_dict(manifest["model_config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad model_config: {exc}") from None
    if expected_config is not None and expected_config != config:
        raise CheckpointError(f"{path}: config mismatch: checkpoint has {config.to_dict()}, "
                              f"expected {expected_config.to_dict()}")
    np_dtype = np.dtype("<f8" if manifest["dtype"] == "float64" else "<f4")
    src = _table_from_manifest("src", manifest["vocab"]["src"], config.embed_dim)
    tgt = _table_from_manifest("tgt", manifest["vocab"]["tgt"], config.embed_dim)
    model = QEModel(config, src, tgt, freeze_embeddings=manifest.get("freeze_embeddings", False))
    expected = model.parameter_shapes()
    body = memoryview(raw)[16 + head_len:]
    seen = set()
    for entry in manifest["tensors"]:
        name = entry["name"]
        shape = tuple(entry["shape"])
        if name not in expected:
            raise CheckpointError(f"{path}: unknown tensor {name!r}")
        if shape != expected[name]:
            raise CheckpointError(f"{path}: tensor {name!r} has manifest shape {shape}, "
                                  f"config implies {expected[name]}")
        count = int(np.prod(shape))
        nbytes = count * np_dtype.itemsize
        if entry["nbytes"] != nbytes:
            raise CheckpointError(f"{path}: tensor {name!r} byte count {entry['nbytes']} != {nbytes}")
        lo = entry["offset"]
        if lo + nbytes > len(body):
            raise CheckpointError(f"{path}: truncated payload for tensor {name!r}")
        values = np.frombuffer(body[lo:lo + nbytes], dtype=np_dtype).astype(np.float64)
        model.params[name].data[...] = values.reshape(shape)
        seen.add(name)
    absent = set(expected) - seen
    if absent:
        raise CheckpointError(f"{path}: missing tensors {sorted(absent)}")
    return Checkpoint(model, manifest)
