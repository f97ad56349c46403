"""Beam search over one model or a probability-averaged ensemble."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .data import BOS_ID, EOS_ID, PAD_ID, Vocabulary, tag_source, tokenize_graphemes
from .model import TransformerModel
from .nn import no_grad
from .training import Checkpoint, FingerprintError

log = logging.getLogger(__name__)


class DecodingError(ValueError):
    pass


@dataclass(frozen=True)
class EnsembleSpec:
    """Frozen models that share vocabularies; decoded jointly by averaging."""

    models: Tuple[TransformerModel, ...]
    src_vocab: Vocabulary
    tgt_vocab: Vocabulary
    labels: Tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "models", tuple(self.models))
        if not self.models:
            raise DecodingError("an ensemble needs at least one member")
        for m in self.models:
            if m.src_vocab_size != len(self.src_vocab) or m.tgt_vocab_size != len(self.tgt_vocab):
                raise DecodingError("ensemble member vocabulary sizes differ from the given vocabularies")
            m.eval()
        if not self.labels:
            object.__setattr__(self, "labels", tuple(f"m{i}" for i in range(len(self.models))))

    @classmethod
    def from_checkpoints(cls, checkpoints: Sequence[Checkpoint], src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> "EnsembleSpec":
        if not checkpoints:
            raise DecodingError("an ensemble needs at least one member")
        first = checkpoints[0]
        for c in checkpoints:
            if (c.src_fingerprint, c.tgt_fingerprint) != (first.src_fingerprint, first.tgt_fingerprint):
                raise FingerprintError("ensemble members were trained with different vocabularies")
            c.check_vocabularies(src_vocab, tgt_vocab)
        return cls(tuple(c.to_model() for c in checkpoints), src_vocab, tgt_vocab, tuple(c.label for c in checkpoints))

    def __len__(self) -> int:
        return len(self.models)

    def subset(self, indices: Sequence[int]) -> "EnsembleSpec":
        return EnsembleSpec(tuple(self.models[i] for i in indices), self.src_vocab, self.tgt_vocab,
                            tuple(self.labels[i] for i in indices))


@dataclass(frozen=True)
class PredictionResult:
    lang: str
    source: Tuple[str, ...]
    target: Tuple[str, ...]
    token_ids: Tuple[int, ...]
    step_probs: Tuple[float, ...]
    score: float
    finished: bool

    @property
    def word(self) -> str:
        return "".join(self.source)

    @property
    def confidence(self) -> float:
        return confidence(self)


@dataclass(frozen=True)
class PredictionFailure:
    lang: str
    word: str
    error: str


def ensemble_distribution(distributions: Sequence[np.ndarray]) -> np.ndarray:
    """Arithmetic mean in probability space, accumulated in float64 in member order.

    Float64 accumulation makes the mean of k identical float32 members equal
    to that member exactly.
    """
    if not distributions:
        raise DecodingError("no member distributions")
    shape = distributions[0].shape
    total = np.zeros(shape, dtype=np.float64)
    for d in distributions:
        if d.shape != shape:
            raise DecodingError(f"member distribution shape {d.shape} != {shape}")
        total += d
    return total / len(distributions)


def confidence(result: PredictionResult) -> float:
    """Mean probability of the emitted tokens (EOS included)."""
    if not result.step_probs:
        raise DecodingError("no decoding steps to score")
    return float(np.mean(result.step_probs))


def default_max_len(source_len: int) -> int:
    return 2 * source_len + 8


def _blocked_tokens(vocab_size: int) -> np.ndarray:
    blocked = np.zeros(vocab_size, dtype=bool)
    blocked[[PAD_ID, BOS_ID]] = True
    return blocked


def beam_search_ids(
    spec: EnsembleSpec,
    src_ids: Sequence[int],
    beam_width: int = 5,
    max_len: int = 16,
    length_normalize: bool = False,
) -> Tuple[List[int], List[float], float, bool]:
    """Beam search on encoded source ids.

    Returns (emitted token ids incl. EOS if finished, per-step probabilities,
    cumulative log-probability, finished flag). Candidates are ranked by score,
    then lowest token id, then parent rank, so decoding is deterministic.
    """
    if beam_width < 1:
        raise DecodingError("beam_width must be >= 1")
    if max_len < 1:
        raise DecodingError("max_len must be >= 1")
    src = np.asarray(src_ids, dtype=np.int64)[None, :]
    pad = src == PAD_ID
    vocab_size = len(spec.tgt_vocab)
    blocked = _blocked_tokens(vocab_size)
    with no_grad():
        memories = [m.encode(src, pad) for m in spec.models]
        live_tokens: List[List[int]] = [[BOS_ID]]
        live_scores = np.zeros(1)
        live_probs: List[List[float]] = [[]]
        finished: List[Tuple[float, List[int], List[float]]] = []
        for _ in range(max_len):
            k = len(live_tokens)
            prefix = np.array(live_tokens, dtype=np.int64)
            dists = []
            for model, mem in zip(spec.models, memories):
                mem_k = mem if k == 1 else type(mem)(np.repeat(mem.data, k, axis=0))
                dists.append(model.decode_step(mem_k, np.repeat(pad, k, axis=0), prefix))
            probs = ensemble_distribution(dists)
            with np.errstate(divide="ignore"):
                logp = np.log(probs)
            logp[:, blocked] = -np.inf
            cand = live_scores[:, None] + logp
            parents, tokens = np.meshgrid(np.arange(k), np.arange(vocab_size), indexing="ij")
            flat_scores = cand.reshape(-1)
            order = np.lexsort((parents.reshape(-1), tokens.reshape(-1), -flat_scores))
            order = [i for i in order[:beam_width] if np.isfinite(flat_scores[i])]
            next_tokens, next_scores, next_probs = [], [], []
            for i in order:
                parent, tok = divmod(int(i), vocab_size)
                seq = live_tokens[parent] + [tok]
                step_probs = live_probs[parent] + [float(probs[parent, tok])]
                if tok == EOS_ID:
                    finished.append((float(flat_scores[i]), seq, step_probs))
                else:
                    next_tokens.append(seq)
                    next_scores.append(flat_scores[i])
                    next_probs.append(step_probs)
            live_tokens, live_scores, live_probs = next_tokens, np.array(next_scores), next_probs
            if len(finished) >= beam_width or not live_tokens:
                break
            # log-probabilities only fall, so no live hypothesis can overtake this
            if finished and not length_normalize and max(f[0] for f in finished) >= live_scores.max():
                break
    if finished:
        def rank(f):
            return f[0] / (len(f[1]) - 1) if length_normalize else f[0]

        best = max(finished, key=rank)
        score, seq, step_probs = best
        return seq[1:], step_probs, score, True
    best_i = int(np.argmax(live_scores))
    return live_tokens[best_i][1:], live_probs[best_i], float(live_scores[best_i]), False


def beam_search(
    spec: EnsembleSpec,
    lang: str,
    source: Sequence[str],
    beam_width: int = 5,
    max_len: Optional[int] = None,
    length_normalize: bool = False,
) -> PredictionResult:
    source = tuple(source)
    if not source:
        raise DecodingError("empty source")
    src_ids = spec.src_vocab.encode(tag_source(lang, source, spec.src_vocab))
    if max_len is None:
        max_len = default_max_len(len(source))
    ids, step_probs, score, done = beam_search_ids(spec, src_ids, beam_width, max_len, length_normalize)
    return PredictionResult(
        lang=lang,
        source=source,
        target=tuple(spec.tgt_vocab.decode(ids)),
        token_ids=tuple(ids),
        step_probs=tuple(step_probs),
        score=score,
        finished=done,
    )


def greedy_decode(spec: EnsembleSpec, lang: str, source: Sequence[str], max_len: Optional[int] = None) -> PredictionResult:
    """Repeated argmax (lowest id wins ties); the reference for width-1 beams."""
    source = tuple(source)
    src = np.asarray(spec.src_vocab.encode(tag_source(lang, source, spec.src_vocab)))[None, :]
    pad = src == PAD_ID
    max_len = default_max_len(len(source)) if max_len is None else max_len
    blocked = _blocked_tokens(len(spec.tgt_vocab))
    tokens = [BOS_ID]
    probs_out: List[float] = []
    score = 0.0
    with no_grad():
        memories = [m.encode(src, pad) for m in spec.models]
        for _ in range(max_len):
            prefix = np.array([tokens])
            dist = ensemble_distribution([m.decode_step(mem, pad, prefix) for m, mem in zip(spec.models, memories)])[0]
            dist = np.where(blocked, -1.0, dist)
            tok = int(np.argmax(dist))
            tokens.append(tok)
            probs_out.append(float(dist[tok]))
            score += float(np.log(dist[tok]))
            if tok == EOS_ID:
                break
    ids = tokens[1:]
    return PredictionResult(lang, source, tuple(spec.tgt_vocab.decode(ids)), tuple(ids), tuple(probs_out),
                            score, ids[-1] == EOS_ID)


def predict_file(
    spec: EnsembleSpec,
    words: Sequence[str],
    lang: str,
    beam_width: int = 5,
    max_len: Optional[int] = None,
    jobs: int = 1,
) -> List[Union[PredictionResult, PredictionFailure]]:
    """Decode each word; failures become per-row records. Output order = input order."""

    def one(word: str):
        try:
            return beam_search(spec, lang, tokenize_graphemes(word), beam_width, max_len)
        except Exception as exc:  # per-row isolation
            log.warning("prediction failed for %r: %s", word, exc)
            return PredictionFailure(lang, word, f"{type(exc).__name__}: {exc}")

    if jobs > 1 and len(words) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one, words))
    return [one(w) for w in words]


def prediction_rows(results: Sequence[Union[PredictionResult, PredictionFailure]]):
    """(word, segments, confidence) rows for the prediction TSV; failures get an empty row at 0."""
    for r in results:
        if isinstance(r, PredictionFailure):
            yield r.word, (), 0.0
        else:
            yield r.word, r.target, r.confidence
