"""Post-norm Transformer encoder-decoder on top of :mod:`mg2p.nn`."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import BOS_ID, EOS_ID, PAD_ID, PronunciationEntry, Vocabulary, tag_source
from .nn import Tensor
from .nn import functional as F

NEG_INF = -1e9


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 6
    hidden_size: int = 512
    embed_size: int = 512
    ff_size: int = 2048
    num_heads: int = 8
    dropout_p: float = 0.1
    max_positions: int = 128
    label_smoothing: float = 0.0
    # Xavier gain of the output projection; < 1 keeps untrained logits near uniform
    output_init_gain: float = 0.25

    def __post_init__(self):
        for name in ("num_layers", "hidden_size", "embed_size", "ff_size", "num_heads", "max_positions"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.embed_size != self.hidden_size:
            raise ConfigError("embed_size must equal hidden_size")
        if self.hidden_size % self.num_heads:
            raise ConfigError(f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must lie in [0, 1)")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must lie in [0, 1)")

    @classmethod
    def micro(cls, **overrides) -> "ModelConfig":
        """Desk-scale configuration: 2 layers, width 64, 2 heads, ff 256."""
        base = dict(num_layers=2, hidden_size=64, embed_size=64, ff_size=256, num_heads=2)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


def parameter_shapes(config: ModelConfig, src_vocab_size: int, tgt_vocab_size: int) -> List[Tuple[str, tuple]]:
    h, f = config.hidden_size, config.ff_size
    shapes: List[Tuple[str, tuple]] = [("src_embed", (src_vocab_size, h)), ("tgt_embed", (tgt_vocab_size, h))]

    def attention(prefix):
        for proj in ("q", "k", "v", "o"):
            shapes.append((f"{prefix}.w{proj}", (h, h)))
            shapes.append((f"{prefix}.b{proj}", (h,)))

    def feed_forward(prefix):
        shapes.extend([(f"{prefix}.w1", (h, f)), (f"{prefix}.b1", (f,)), (f"{prefix}.w2", (f, h)), (f"{prefix}.b2", (h,))])

    def norm(prefix):
        shapes.extend([(f"{prefix}.gamma", (h,)), (f"{prefix}.beta", (h,))])

    for i in range(config.num_layers):
        attention(f"enc{i}.self")
        norm(f"enc{i}.norm1")
        feed_forward(f"enc{i}.ff")
        norm(f"enc{i}.norm2")
    for i in range(config.num_layers):
        attention(f"dec{i}.self")
        norm(f"dec{i}.norm1")
        attention(f"dec{i}.cross")
        norm(f"dec{i}.norm2")
        feed_forward(f"dec{i}.ff")
        norm(f"dec{i}.norm3")
    shapes.extend([("out.w", (h, tgt_vocab_size)), ("out.b", (tgt_vocab_size,))])
    return shapes


def sinusoidal_positions(max_positions: int, size: int) -> np.ndarray:
    pos = np.arange(max_positions)[:, None]
    dim = np.arange(0, size, 2)[None, :]
    angle = pos / np.power(10000.0, dim / size)
    table = np.zeros((max_positions, size))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : size // 2])
    return table


class TransformerModel:
    """Parameters live as views into one flat buffer so the optimizer can
    update them with a handful of vectorized ops."""

    def __init__(self, config: ModelConfig, src_vocab_size: int, tgt_vocab_size: int, dtype=np.float32):
        self.config = config
        self.src_vocab_size = src_vocab_size
        self.tgt_vocab_size = tgt_vocab_size
        self.shapes = parameter_shapes(config, src_vocab_size, tgt_vocab_size)
        total = sum(int(np.prod(s)) for _, s in self.shapes)
        self.flat = np.zeros(total, dtype=dtype)
        self.flat_grad = np.zeros(total, dtype=dtype)
        self.params: Dict[str, Tensor] = {}
        self._grad_views: Dict[str, np.ndarray] = {}
        offset = 0
        for name, shape in self.shapes:
            n = int(np.prod(shape))
            t = Tensor(self.flat[offset: offset + n].reshape(shape))
            t.requires_grad = True
            t._inplace_grad = True
            self.params[name] = t
            self._grad_views[name] = self.flat_grad[offset: offset + n].reshape(shape)
            offset += n
        self.positions = sinusoidal_positions(config.max_positions, config.hidden_size).astype(dtype)
        self.training = False
        self.rng: Optional[np.random.Generator] = None

    @property
    def dtype(self):
        return self.flat.dtype

    def num_parameters(self) -> int:
        return int(self.flat.size)

    def train(self, rng: np.random.Generator) -> "TransformerModel":
        self.training = True
        self.rng = rng
        return self

    def eval(self) -> "TransformerModel":
        self.training = False
        return self

    def zero_grad(self) -> None:
        self.flat_grad[...] = 0
        for name, t in self.params.items():
            t.grad = self._grad_views[name]

    def astype(self, dtype) -> "TransformerModel":
        clone = TransformerModel(self.config, self.src_vocab_size, self.tgt_vocab_size, dtype=dtype)
        clone.flat[...] = self.flat
        return clone

    def copy(self) -> "TransformerModel":
        return self.astype(self.dtype)

    def load_flat(self, flat: np.ndarray) -> None:
        if flat.shape != self.flat.shape:
            raise ValueError(f"parameter buffer has {flat.size} values, model needs {self.flat.size}")
        self.flat[...] = flat

    # -- building blocks -------------------------------------------------

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _dropout(self, x: Tensor) -> Tensor:
        return F.dropout(x, self.config.dropout_p, self.rng, self.training)

    def _attention(self, prefix: str, query: Tensor, memory: Tensor, mask: Optional[np.ndarray]) -> Tensor:
        b, tq, h = query.shape
        tk = memory.shape[1]
        heads = self.config.num_heads
        d = h // heads
        p = self._p

        def split(x, t):
            return F.transpose(F.reshape(x, (b, t, heads, d)), (0, 2, 1, 3))

        q = split(F.linear(query, p(f"{prefix}.wq"), p(f"{prefix}.bq")), tq)
        k = split(F.linear(memory, p(f"{prefix}.wk"), p(f"{prefix}.bk")), tk)
        v = split(F.linear(memory, p(f"{prefix}.wv"), p(f"{prefix}.bv")), tk)
        scores = F.mul(F.matmul(q, F.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
        if mask is not None:
            scores = F.masked_fill(scores, mask, NEG_INF)
        weights = self._dropout(F.softmax(scores, axis=-1))
        ctx = F.transpose(F.matmul(weights, v), (0, 2, 1, 3))
        return F.linear(F.reshape(ctx, (b, tq, h)), p(f"{prefix}.wo"), p(f"{prefix}.bo"))

    def _feed_forward(self, prefix: str, x: Tensor) -> Tensor:
        p = self._p
        hidden = self._dropout(F.relu(F.linear(x, p(f"{prefix}.w1"), p(f"{prefix}.b1"))))
        return F.linear(hidden, p(f"{prefix}.w2"), p(f"{prefix}.b2"))

    def _norm(self, prefix: str, x: Tensor) -> Tensor:
        return F.layer_norm(x, self._p(f"{prefix}.gamma"), self._p(f"{prefix}.beta"))

    def _embed(self, table: str, ids: np.ndarray) -> Tensor:
        t = ids.shape[1]
        if t > self.config.max_positions:
            raise ValueError(f"sequence length {t} exceeds max_positions {self.config.max_positions}")
        x = F.mul(F.embedding(self._p(table), ids), math.sqrt(self.config.hidden_size))
        return self._dropout(F.add(x, Tensor(self.positions[:t])))

    # -- public forward API ----------------------------------------------

    def encode(self, src_ids: np.ndarray, src_pad: Optional[np.ndarray] = None) -> Tensor:
        """(B, S) ids -> (B, S, H) memory. ``src_pad`` is true at padding."""
        src_ids = np.asarray(src_ids, dtype=np.int64)
        if src_ids.max(initial=0) >= self.src_vocab_size:
            raise ValueError("source id out of vocabulary range")
        if src_pad is None:
            src_pad = src_ids == PAD_ID
        mask = src_pad[:, None, None, :]
        x = self._embed("src_embed", src_ids)
        for i in range(self.config.num_layers):
            x = self._norm(f"enc{i}.norm1", F.add(x, self._dropout(self._attention(f"enc{i}.self", x, x, mask))))
            x = self._norm(f"enc{i}.norm2", F.add(x, self._dropout(self._feed_forward(f"enc{i}.ff", x))))
        return x

    def decode(self, memory: Tensor, src_pad: np.ndarray, tgt_in: np.ndarray) -> Tensor:
        """Teacher-forced decoder pass: (B, T) prefix ids -> (B, T, V) logits."""
        tgt_in = np.asarray(tgt_in, dtype=np.int64)
        t = tgt_in.shape[1]
        causal = np.triu(np.ones((t, t), dtype=bool), k=1)[None, None]
        cross_mask = src_pad[:, None, None, :]
        y = self._embed("tgt_embed", tgt_in)
        for i in range(self.config.num_layers):
            y = self._norm(f"dec{i}.norm1", F.add(y, self._dropout(self._attention(f"dec{i}.self", y, y, causal))))
            y = self._norm(f"dec{i}.norm2", F.add(y, self._dropout(self._attention(f"dec{i}.cross", y, memory, cross_mask))))
            y = self._norm(f"dec{i}.norm3", F.add(y, self._dropout(self._feed_forward(f"dec{i}.ff", y))))
        return F.linear(y, self._p("out.w"), self._p("out.b"))

    def decode_distributions(self, memory: Tensor, src_pad: np.ndarray, prefix_ids: np.ndarray) -> np.ndarray:
        """Next-token distributions at every prefix position, shape (B, T, V)."""
        prefix_ids = np.asarray(prefix_ids, dtype=np.int64)
        if prefix_ids.ndim != 2 or prefix_ids.shape[1] == 0:
            raise ValueError("decode needs a non-empty prefix")
        if not (prefix_ids[:, 0] == BOS_ID).all():
            raise ValueError("decoder prefix must start with BOS")
        return F.softmax_array(self.decode(memory, src_pad, prefix_ids).data, axis=-1)

    def decode_step(self, memory: Tensor, src_pad: np.ndarray, prefix_ids: np.ndarray) -> np.ndarray:
        """Distribution over the next target token for each batch element, (B, V)."""
        return self.decode_distributions(memory, src_pad, prefix_ids)[:, -1, :]


def init_model(
    config: ModelConfig,
    src_vocab_size: int,
    tgt_vocab_size: int,
    seed: int,
    dtype=np.float32,
) -> TransformerModel:
    """Xavier-uniform weights, zero biases, unit layer-norm gains."""
    model = TransformerModel(config, src_vocab_size, tgt_vocab_size, dtype=dtype)
    rng = np.random.default_rng(seed)
    for name, shape in model.shapes:
        t = model.params[name]
        if name.endswith(".gamma"):
            t.data[...] = 1.0
        elif len(shape) == 2:
            gain = config.output_init_gain if name == "out.w" else 1.0
            limit = gain * math.sqrt(6.0 / (shape[0] + shape[1]))
            t.data[...] = rng.uniform(-limit, limit, size=shape)
        else:
            t.data[...] = 0.0
    return model


def pad_batch(seqs: Sequence[Sequence[int]]) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


@dataclass
class Batch:
    src: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray

    @property
    def src_pad(self) -> np.ndarray:
        return self.src == PAD_ID

    @property
    def num_target_tokens(self) -> int:
        return int((self.tgt_out != PAD_ID).sum())


def make_batch(entries: Sequence[PronunciationEntry], src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> Batch:
    """Tag sources, then BOS-in / EOS-out shift the targets."""
    src = [src_vocab.encode(tag_source(e.lang, e.source, src_vocab)) for e in entries]
    tgt = [tgt_vocab.encode(e.target) for e in entries]
    return Batch(
        src=pad_batch(src),
        tgt_in=pad_batch([[BOS_ID] + t for t in tgt]),
        tgt_out=pad_batch([t + [EOS_ID] for t in tgt]),
    )


def batch_loss(model: TransformerModel, batch: Batch) -> Tensor:
    src_pad = batch.src_pad
    memory = model.encode(batch.src, src_pad)
    logits = model.decode(memory, src_pad, batch.tgt_in)
    return F.cross_entropy(logits, batch.tgt_out, PAD_ID, model.config.label_smoothing)


def forward_loss(
    model: TransformerModel,
    entries: Sequence[PronunciationEntry],
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
) -> Tensor:
    if not entries:
        raise ValueError("forward_loss needs a non-empty batch")
    return batch_loss(model, make_batch(entries, src_vocab, tgt_vocab))
