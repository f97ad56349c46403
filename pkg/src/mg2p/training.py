"""Optimization loop, checkpoints and multi-seed orchestration."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .data import PronunciationEntry, Vocabulary
from .model import Batch, ModelConfig, TransformerModel, batch_loss, init_model, make_batch
from .nn.serialize import tensor_from_bytes, tensor_to_bytes

log = logging.getLogger(__name__)

MAGIC = b"MG2PCKPT"
FORMAT_VERSION = 1
_DIGEST = 32


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class FingerprintError(CheckpointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 200_000
    checkpoint_fractions: Tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)
    batch_tokens: int = 2048
    seeds: Tuple[int, ...] = (1, 2, 3)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    warmup_steps: int = 4000
    lr_scale: float = 2.0
    log_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, "checkpoint_fractions", tuple(self.checkpoint_fractions))
        object.__setattr__(self, "seeds", tuple(self.seeds))
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if not self.checkpoint_fractions or any(not 0 < f <= 1 for f in self.checkpoint_fractions):
            raise ValueError("checkpoint fractions must lie in (0, 1]")
        for f in self.checkpoint_fractions:
            step = f * self.total_steps
            if abs(step - round(step)) > 1e-9:
                raise ValueError(f"fraction {f} of {self.total_steps} steps is not a whole step")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be positive")

    @property
    def checkpoint_steps(self) -> List[int]:
        return sorted({int(round(f * self.total_steps)) for f in self.checkpoint_fractions})

    def to_dict(self) -> dict:
        return asdict(self)


def lr_schedule(step: int, warmup_steps: int, hidden_size: int) -> float:
    """Inverse-square-root schedule with linear warmup."""
    if step < 1:
        raise ValueError("step must be >= 1")
    return hidden_size ** -0.5 * min(step ** -0.5, step * warmup_steps ** -1.5)


class Adam:
    """Adam with bias correction over a single flat parameter buffer."""

    def __init__(self, size: int, beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9, dtype=np.float32):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(size, dtype=dtype)
        self.v = np.zeros(size, dtype=dtype)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        self.m *= b1
        self.m += (1 - b1) * grad
        self.v *= b2
        self.v += (1 - b2) * grad * grad
        m_hat = self.m / (1 - b1 ** self.t)
        v_hat = self.v / (1 - b2 ** self.t)
        params -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class Checkpoint:
    params: np.ndarray
    config: ModelConfig
    step: int
    seed: int
    total_steps: int
    src_vocab_size: int
    tgt_vocab_size: int
    src_fingerprint: int
    tgt_fingerprint: int
    meta: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.step > self.total_steps:
            raise CheckpointError(f"step {self.step} beyond total_steps {self.total_steps}")

    @property
    def label(self) -> str:
        return f"seed{self.seed}_step{self.step}"

    def to_model(self) -> TransformerModel:
        model = TransformerModel(self.config, self.src_vocab_size, self.tgt_vocab_size)
        model.load_flat(self.params)
        return model.eval()

    def check_vocabularies(self, src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> None:
        if src_vocab.fingerprint() != self.src_fingerprint or tgt_vocab.fingerprint() != self.tgt_fingerprint:
            raise FingerprintError(f"checkpoint {self.label} was trained with different vocabularies")


def _manifest(ckpt: Checkpoint, shapes) -> dict:
    return {
        "config": ckpt.config.to_dict(),
        "step": ckpt.step,
        "seed": ckpt.seed,
        "total_steps": ckpt.total_steps,
        "src_vocab_size": ckpt.src_vocab_size,
        "tgt_vocab_size": ckpt.tgt_vocab_size,
        "src_fingerprint": f"{ckpt.src_fingerprint:016x}",
        "tgt_fingerprint": f"{ckpt.tgt_fingerprint:016x}",
        "tensors": [[name, list(shape)] for name, shape in shapes],
        "meta": ckpt.meta,
    }


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    model = ckpt.to_model()
    manifest = json.dumps(_manifest(ckpt, model.shapes), sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", FORMAT_VERSION, len(manifest)), manifest]
    parts.extend(tensor_to_bytes(model.params[name].data) for name, _ in model.shapes)
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    tmp.replace(path)
    return path


def load_checkpoint(path, src_vocab: Optional[Vocabulary] = None, tgt_vocab: Optional[Vocabulary] = None) -> Checkpoint:
    """Read a checkpoint; with vocabularies given, fingerprints must match."""
    buf = Path(path).read_bytes()
    header = len(MAGIC) + 12
    if len(buf) < header + _DIGEST:
        raise CheckpointError(f"{path}: truncated checkpoint")
    if buf[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = buf[:-_DIGEST], buf[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"{path}: checksum mismatch (corrupt or truncated)")
    version, manifest_len = struct.unpack_from("<IQ", body, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    manifest = json.loads(body[header: header + manifest_len].decode("utf-8"))
    ckpt = Checkpoint(
        params=np.zeros(0, dtype=np.float32),
        config=ModelConfig(**manifest["config"]),
        step=manifest["step"],
        seed=manifest["seed"],
        total_steps=manifest["total_steps"],
        src_vocab_size=manifest["src_vocab_size"],
        tgt_vocab_size=manifest["tgt_vocab_size"],
        src_fingerprint=int(manifest["src_fingerprint"], 16),
        tgt_fingerprint=int(manifest["tgt_fingerprint"], 16),
        meta=manifest.get("meta", {}),
    )
    if src_vocab is not None and tgt_vocab is not None:
        ckpt.check_vocabularies(src_vocab, tgt_vocab)
    offset = header + manifest_len
    arrays = []
    for name, shape in manifest["tensors"]:
        arr, offset = tensor_from_bytes(body, offset)
        if list(arr.shape) != shape:
            raise CheckpointError(f"{path}: tensor {name} has shape {arr.shape}, manifest says {shape}")
        arrays.append(arr.reshape(-1))
    if offset != len(body):
        raise CheckpointError(f"{path}: trailing bytes after tensor payload")
    ckpt.params = np.concatenate(arrays) if arrays else ckpt.params
    return ckpt


def token_batches(
    entries: Sequence[PronunciationEntry],
    batch_tokens: int,
    rng: np.random.Generator,
) -> List[List[int]]:
    """Length-bucketed batches of entry indices under a padded-token budget.

    Entries are shuffled, stably sorted by target length so each batch holds
    similar lengths, chunked, and the chunk order is shuffled again.
    """
    lengths = np.array([len(e.target) + 1 for e in entries])
    if lengths.max() >= batch_tokens:
        raise ValueError(f"batch_tokens {batch_tokens} must exceed the longest target ({lengths.max()})")
    order = rng.permutation(len(entries))
    order = order[np.argsort(lengths[order], kind="stable")]
    batches: List[List[int]] = []
    current: List[int] = []
    width = 0
    for idx in order:
        new_width = max(width, lengths[idx])
        if current and new_width * (len(current) + 1) > batch_tokens:
            batches.append(current)
            current, width = [], 0
            new_width = lengths[idx]
        current.append(int(idx))
        width = new_width
    if current:
        batches.append(current)
    return [batches[i] for i in rng.permutation(len(batches))]


def _batch_stream(entries, batch_tokens, rng) -> Iterator[Tuple[List[int], Batch]]:
    while True:
        for idx in token_batches(entries, batch_tokens, rng):
            yield idx, [entries[i] for i in idx]


def train(
    model: TransformerModel,
    entries: Sequence[PronunciationEntry],
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    config: TrainConfig,
    seed: int,
    on_checkpoint: Optional[Callable[[Checkpoint], None]] = None,
    loss_log: Optional[List[float]] = None,
) -> List[Checkpoint]:
    """Run ``config.total_steps`` Adam updates; snapshot at each checkpoint step."""
    if not entries:
        raise TrainingError("empty training set")
    entries = list(entries)
    data_seq, dropout_seq = np.random.SeedSequence(seed).spawn(2)
    data_rng = np.random.default_rng(data_seq)
    model.train(np.random.default_rng(dropout_seq))
    opt = Adam(model.flat.size, config.adam_beta1, config.adam_beta2, config.adam_eps, dtype=model.dtype)
    save_at = set(config.checkpoint_steps)
    src_fp, tgt_fp = src_vocab.fingerprint(), tgt_vocab.fingerprint()
    stream = _batch_stream(entries, config.batch_tokens, data_rng)
    checkpoints: List[Checkpoint] = []
    for step in range(1, config.total_steps + 1):
        idx, batch_entries = next(stream)
        model.zero_grad()
        try:
            loss = batch_loss(model, make_batch(batch_entries, src_vocab, tgt_vocab))
        except ValueError as exc:
            raise TrainingError(f"forward pass failed at step {step}; batch entry ids {idx}: {exc}") from exc
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at step {step}; batch entry ids {idx}")
        loss.backward()
        lr = config.lr_scale * lr_schedule(step, config.warmup_steps, model.config.hidden_size)
        opt.step(model.flat, model.flat_grad, lr)
        if loss_log is not None:
            loss_log.append(value)
        if config.log_every and step % config.log_every == 0:
            log.info("seed %d step %d loss %.4f lr %.2e", seed, step, value, lr)
        if step in save_at:
            ckpt = Checkpoint(
                params=model.flat.astype(np.float32, copy=True),
                config=model.config,
                step=step,
                seed=seed,
                total_steps=config.total_steps,
                src_vocab_size=model.src_vocab_size,
                tgt_vocab_size=model.tgt_vocab_size,
                src_fingerprint=src_fp,
                tgt_fingerprint=tgt_fp,
            )
            checkpoints.append(ckpt)
            if on_checkpoint is not None:
                on_checkpoint(ckpt)
    model.eval()
    return checkpoints


def train_seed(
    entries: Sequence[PronunciationEntry],
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    model_config: ModelConfig,
    config: TrainConfig,
    seed: int,
    out_dir: Optional[str] = None,
    prefix: str = "",
) -> List[Checkpoint]:
    """Initialize from ``seed`` and train; optionally write each checkpoint to ``out_dir``."""
    model = init_model(model_config, len(src_vocab), len(tgt_vocab), seed)

    def persist(ckpt: Checkpoint) -> None:
        if out_dir is not None:
            path = save_checkpoint(ckpt, Path(out_dir) / f"{prefix}{ckpt.label}.ckpt")
            log.info("wrote %s", path)

    return train(model, entries, src_vocab, tgt_vocab, config, seed, on_checkpoint=persist)


def train_seeds(
    entries: Sequence[PronunciationEntry],
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    model_config: ModelConfig,
    config: TrainConfig,
    out_dir: Optional[str] = None,
    parallel: bool = False,
    prefix: str = "",
) -> List[Checkpoint]:
    """Independent runs for every seed in ``config.seeds``; checkpoints in (seed, step) order."""
    args = [(entries, src_vocab, tgt_vocab, model_config, config, s, out_dir, prefix) for s in config.seeds]
    if parallel and len(args) > 1:
        with ProcessPoolExecutor(max_workers=len(args)) as pool:
            runs = list(pool.map(train_seed, *zip(*args)))
    else:
        runs = [train_seed(*a) for a in args]
    return [c for run in runs for c in run]
