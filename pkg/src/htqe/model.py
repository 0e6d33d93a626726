"""Twin CNN -> BiLSTM -> cross-attention encoders with a linear score head.

All encoder functions work on padded batches: activations are ``B x n x ...``
and a boolean ``B x n`` mask marks real tokens.  Padding never leaks into a
real position's output.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .dataset import ASPECTS, MAXIMA, Batch, Example, ScoreVector, collate
from .embeddings import EmbeddingTable

log = logging.getLogger(__name__)

NUM_ASPECTS = 4
SIDES = ("src", "tgt")


@dataclass
class ModelConfig:
    embed_dim: int = 200
    conv_widths: tuple[int, ...] = (2,)
    conv_channels: int = 100
    lstm_hidden: int = 100
    attention_dim: int | None = None  # None -> 2 * lstm_hidden
    num_lstm_layers: int = 1
    share_attention: bool = False
    max_len: int | None = None

    def __post_init__(self):
        self.conv_widths = tuple(int(k) for k in self.conv_widths)
        if self.attention_dim is None:
            self.attention_dim = 2 * self.lstm_hidden
        if not self.conv_widths:
            raise ValueError("conv_widths must not be empty")
        for name in ("embed_dim", "conv_channels", "lstm_hidden", "attention_dim", "num_lstm_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if any(k < 1 for k in self.conv_widths):
            raise ValueError("conv widths must be positive")

    @property
    def feature_dim(self) -> int:
        return self.conv_channels * len(self.conv_widths)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_widths"] = list(self.conv_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**{**d, "conv_widths": tuple(d["conv_widths"])})


# ---------------------------------------------------------------- building blocks

def _mask_like(mask: np.ndarray, width: int) -> ad.Tensor:
    return ad.constant(np.repeat(mask[:, :, None].astype(np.float64), width, axis=2))


def conv_context(embeds: ad.Tensor, convs: Sequence[tuple[int, ad.Tensor, ad.Tensor]],
                 mask: np.ndarray) -> ad.Tensor:
    """relu(<H, w[i-k:i+k]> + b) at every position, zero padding k on each side.

    ``convs`` holds ``(k, H, b)`` with ``H`` of shape ``channels x d x (2k+1)``;
    outputs for all widths are concatenated feature-wise.
    """
    B, n, d = embeds.shape
    outputs = []
    for k, kernel, bias in convs:
        m = kernel.shape[0]
        if kernel.shape != (m, d, 2 * k + 1):
            raise ad.ShapeError(f"conv kernel for width {k} has shape {kernel.shape}, "
                                f"expected ({m}, {d}, {2 * k + 1})")
        zeros = ad.constant(np.zeros((B, k, d)))
        padded = ad.concat([zeros, embeds, zeros], axis=1)
        windows = ad.concat([padded[:, j:j + n, :] for j in range(2 * k + 1)], axis=2)
        flat = ad.reshape(windows, (B * n, (2 * k + 1) * d))
        weight = ad.reshape(ad.transpose(kernel, (2, 1, 0)), ((2 * k + 1) * d, m))
        pre = flat @ weight + ad.expand(ad.reshape(bias, (1, m)), (B * n, m))
        outputs.append(ad.reshape(ad.relu(pre), (B, n, m)))
    feats = ad.concat(outputs, axis=2)
    return feats * _mask_like(mask, feats.shape[2])


@dataclass
class LSTMWeights:
    w_input: ad.Tensor   # F x 4h, gate order i, f, g, o
    w_hidden: ad.Tensor  # h x 4h
    bias: ad.Tensor      # 4h


def lstm_direction(x: ad.Tensor, mask: np.ndarray, w: LSTMWeights, reverse: bool = False) -> ad.Tensor:
    """One LSTM pass; the state is frozen across padded steps.

    Running in reverse, each sequence starts from a zero state at its own last
    real token because padded steps leave the initial zeros untouched.
    """
    B, n, F = x.shape
    h_dim = w.w_hidden.shape[0]
    xw = ad.reshape(ad.reshape(x, (B * n, F)) @ w.w_input, (B, n, 4 * h_dim))
    xw = xw + ad.expand(ad.reshape(w.bias, (1, 1, 4 * h_dim)), (B, n, 4 * h_dim))
    h = ad.constant(np.zeros((B, h_dim)))
    c = ad.constant(np.zeros((B, h_dim)))
    outs: list[ad.Tensor | None] = [None] * n
    steps = range(n - 1, -1, -1) if reverse else range(n)
    for t in steps:
        z = xw[:, t, :] + h @ w.w_hidden
        i = ad.sigmoid(z[:, :h_dim])
        f = ad.sigmoid(z[:, h_dim:2 * h_dim])
        g = ad.tanh(z[:, 2 * h_dim:3 * h_dim])
        o = ad.sigmoid(z[:, 3 * h_dim:])
        c_new = f * c + i * g
        h_new = o * ad.tanh(c_new)
        if mask[:, t].all():
            c, h = c_new, h_new
        else:
            keep = np.repeat(mask[:, t:t + 1].astype(np.float64), h_dim, axis=1)
            on, off = ad.constant(keep), ad.constant(1.0 - keep)
            c = on * c_new + off * c
            h = on * h_new + off * h
        outs[t] = h
    return ad.stack(outs, axis=1)


def bilstm_encode(features: ad.Tensor, mask: np.ndarray,
                  layers: Sequence[tuple[LSTMWeights, LSTMWeights]]) -> ad.Tensor:
    """Forward state at i concatenated with backward state at i; PAD rows zeroed."""
    out = features
    for fwd, bwd in layers:
        out = ad.concat([lstm_direction(out, mask, fwd), lstm_direction(out, mask, bwd, reverse=True)],
                        axis=2)
        out = out * _mask_like(mask, out.shape[2])
    return out


def masked_mean(states: ad.Tensor, mask: np.ndarray) -> ad.Tensor:
    """Uniform average over the unmasked rows of each sequence."""
    B, n, D = states.shape
    counts = mask.sum(axis=1).astype(np.float64)
    if (counts == 0).any():
        raise ValueError("masked_mean: a sequence has no unmasked positions")
    total = ad.sum(states * _mask_like(mask, D), axis=1)
    return total * ad.constant(np.repeat((1.0 / counts)[:, None], D, axis=1))


@dataclass
class AttentionWeights:
    v: ad.Tensor     # d_a
    w_a1: ad.Tensor  # d_a x 2h, applied to the context vector
    w_a2: ad.Tensor  # d_a x 2h, applied to each position


def attention_pool(states: ad.Tensor, context: ad.Tensor, mask: np.ndarray,
                   w: AttentionWeights) -> tuple[ad.Tensor, ad.Tensor]:
    """Score each row with v^T tanh(W_a1 ctx + W_a2 h_i), softmax, weighted sum.

    Returns the pooled ``B x 2h`` vectors and the ``B x n`` weights, which are
    exactly zero on masked positions.
    """
    B, n, D = states.shape
    d_a = w.v.shape[0]
    from_ctx = ad.reshape(context @ ad.transpose(w.w_a1), (B, 1, d_a))
    from_rows = ad.reshape(ad.reshape(states, (B * n, D)) @ ad.transpose(w.w_a2), (B, n, d_a))
    hidden = ad.tanh(ad.expand(from_ctx, (B, n, d_a)) + from_rows)
    scores = ad.reshape(ad.reshape(hidden, (B * n, d_a)) @ ad.reshape(w.v, (d_a, 1)), (B, n))
    alphas = ad.softmax(scores, mask=mask, axis=1)
    weighted = states * ad.expand(ad.reshape(alphas, (B, n, 1)), (B, n, D))
    return ad.sum(weighted, axis=1), alphas


# ---------------------------------------------------------------- the model

def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class Prediction:
    raw: np.ndarray
    clamped: ScoreVector


@dataclass
class AttentionRecord:
    source_tokens: list[str]
    source_weights: list[float]
    target_tokens: list[str]
    target_weights: list[float]
    scores_raw: list[float] = field(default_factory=list)
    scores_clamped: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "source": [{"token": t, "weight": w} for t, w in zip(self.source_tokens, self.source_weights)],
            "target": [{"token": t, "weight": w} for t, w in zip(self.target_tokens, self.target_weights)],
            "scores_raw": dict(zip(ASPECTS, self.scores_raw)),
            "scores_clamped": dict(zip(ASPECTS, self.scores_clamped)),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=2)


def clamp_scores(raw: np.ndarray) -> np.ndarray:
    return np.clip(raw, 0.0, MAXIMA)


class QEModel:
    """Parameters plus forward pass for the sentence-pair score regressor."""

    def __init__(self, config: ModelConfig, src_vocab: EmbeddingTable, tgt_vocab: EmbeddingTable,
                 seed: int = 0, freeze_embeddings: bool = False):
        for side, table in zip(SIDES, (src_vocab, tgt_vocab)):
            if table.dim != config.embed_dim:
                raise ValueError(f"{side} embeddings have dim {table.dim}, config expects {config.embed_dim}")
        self.config = config
        self.vocabs = {"src": src_vocab, "tgt": tgt_vocab}
        self.freeze_embeddings = freeze_embeddings
        self.params: dict[str, ad.Tensor] = {}
        self._init_params(np.random.default_rng(seed))
        log.info("model has %d parameters", self.num_parameters)

    # -- parameters

    def _add(self, name: str, data: np.ndarray) -> None:
        self.params[name] = ad.parameter(data, name=name)

    def _init_params(self, rng: np.random.Generator) -> None:
        cfg = self.config
        d, m, h, d_a = cfg.embed_dim, cfg.conv_channels, cfg.lstm_hidden, cfg.attention_dim
        for side in SIDES:
            table = self.vocabs[side].matrix
            table.requires_grad = not self.freeze_embeddings
            table.name = f"{side}.embed"
            self.params[f"{side}.embed"] = table
            for k in cfg.conv_widths:
                self._add(f"{side}.conv{k}.H", _glorot(rng, (m, d, 2 * k + 1), d * (2 * k + 1), m))
                self._add(f"{side}.conv{k}.b", np.zeros(m))
            in_dim = cfg.feature_dim
            for layer in range(cfg.num_lstm_layers):
                for direction in ("fwd", "bwd"):
                    prefix = f"{side}.lstm{layer}.{direction}"
                    self._add(f"{prefix}.Wx", _glorot(rng, (in_dim, 4 * h), in_dim, 4 * h))
                    self._add(f"{prefix}.Wh", _glorot(rng, (h, 4 * h), h, 4 * h))
                    bias = np.zeros(4 * h)
                    bias[h:2 * h] = 1.0  # forget gate
                    self._add(f"{prefix}.b", bias)
                in_dim = 2 * h
        for side in (("shared",) if cfg.share_attention else SIDES):
            self._add(f"{side}.att.v", _glorot(rng, (d_a,), d_a, 1))
            self._add(f"{side}.att.Wa1", _glorot(rng, (d_a, 2 * h), 2 * h, d_a))
            self._add(f"{side}.att.Wa2", _glorot(rng, (d_a, 2 * h), 2 * h, d_a))
        self._add("out.W", _glorot(rng, (NUM_ASPECTS, 4 * h), 4 * h, NUM_ASPECTS))
        self._add("out.b", np.zeros(NUM_ASPECTS))

    @property
    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def trainable(self) -> dict[str, ad.Tensor]:
        return {k: p for k, p in self.params.items() if p.requires_grad}

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: p.shape for k, p in self.params.items()}

    def _convs(self, side):
        return [(k, self.params[f"{side}.conv{k}.H"], self.params[f"{side}.conv{k}.b"])
                for k in self.config.conv_widths]

    def _lstm(self, side):
        layers = []
        for layer in range(self.config.num_lstm_layers):
            pair = []
            for direction in ("fwd", "bwd"):
                prefix = f"{side}.lstm{layer}.{direction}"
                pair.append(LSTMWeights(self.params[f"{prefix}.Wx"], self.params[f"{prefix}.Wh"],
                                        self.params[f"{prefix}.b"]))
            layers.append(tuple(pair))
        return layers

    def _attention(self, side) -> AttentionWeights:
        key = "shared" if self.config.share_attention else side
        return AttentionWeights(self.params[f"{key}.att.v"], self.params[f"{key}.att.Wa1"],
                                self.params[f"{key}.att.Wa2"])

    # -- forward

    def encode_side(self, side: str, tokens: list[list[str]], mask: np.ndarray,
                    dropout: float = 0.0, rng: np.random.Generator | None = None) -> ad.Tensor:
        table = self.vocabs[side]
        idx = np.array([table.indices(seq) for seq in tokens], dtype=np.intp)
        embeds = ad.take_rows(table.matrix, idx)
        embeds = embeds * _mask_like(mask, table.dim)
        feats = conv_context(embeds, self._convs(side), mask)
        if dropout > 0.0:
            if rng is None:
                raise ValueError("dropout needs an rng")
            keep = (rng.random(feats.shape) >= dropout) / (1.0 - dropout)
            feats = feats * ad.constant(keep)
        return bilstm_encode(feats, mask, self._lstm(side))

    def forward_batch(self, batch: Batch, dropout: float = 0.0,
                      rng: np.random.Generator | None = None):
        """Raw ``B x 4`` scores and both sides' attention weights.

        ``dropout > 0`` is training mode: conv features are dropped with that
        rate using ``rng``.
        """
        h_src = self.encode_side("src", batch.source, batch.source_mask, dropout, rng)
        h_tgt = self.encode_side("tgt", batch.target, batch.target_mask, dropout, rng)
        ctx_src = masked_mean(h_src, batch.source_mask)
        ctx_tgt = masked_mean(h_tgt, batch.target_mask)
        s_src, a_src = attention_pool(h_src, ctx_tgt, batch.source_mask, self._attention("src"))
        s_tgt, a_tgt = attention_pool(h_tgt, ctx_src, batch.target_mask, self._attention("tgt"))
        feats = ad.concat([s_src, s_tgt], axis=1)
        B = feats.shape[0]
        out = feats @ ad.transpose(self.params["out.W"]) \
            + ad.expand(ad.reshape(self.params["out.b"], (1, NUM_ASPECTS)), (B, NUM_ASPECTS))
        return out, a_src, a_tgt

    def forward(self, batch: Batch, dropout: float = 0.0,
                rng: np.random.Generator | None = None) -> ad.Tensor:
        return self.forward_batch(batch, dropout, rng)[0]

    def predict_raw(self, examples: Sequence[Example], batch_size: int = 64) -> np.ndarray:
        rows = []
        for lo in range(0, len(examples), batch_size):
            batch = collate(examples[lo:lo + batch_size], self.config.max_len)
            rows.append(self.forward(batch).data)
        return np.vstack(rows) if rows else np.zeros((0, NUM_ASPECTS))

    def predict(self, examples: Sequence[Example], batch_size: int = 64) -> list[Prediction]:
        raw = self.predict_raw(list(examples), batch_size)
        return [Prediction(r.copy(), ScoreVector.from_array(clamp_scores(r))) for r in raw]

    def attention_weights(self, example: Example) -> AttentionRecord:
        batch = collate([example], self.config.max_len)
        out, a_src, a_tgt = self.forward_batch(batch)
        raw = out.data[0]
        return AttentionRecord(
            source_tokens=list(example.source_tokens[:a_src.shape[1]]),
            source_weights=[float(w) for w in a_src.data[0]],
            target_tokens=list(example.target_tokens[:a_tgt.shape[1]]),
            target_weights=[float(w) for w in a_tgt.data[0]],
            scores_raw=[float(x) for x in raw],
            scores_clamped=[float(x) for x in clamp_scores(raw)],
        )
