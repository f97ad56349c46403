"""Self-training: clean raw text, pseudo-label with an ensemble, keep the
confident predictions as silver data, and retrain on gold + silver."""
from __future__ import annotations

import logging
import re
import unicodedata
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .data import UNK, Dataset, PronunciationEntry, build_vocabulary, tokenize_graphemes, validate_language_code
from .decoding import EnsembleSpec, PredictionFailure, predict_file
from .evaluation import EvalReport, evaluate
from .model import ModelConfig
from .training import Checkpoint, TrainConfig, train_seeds

log = logging.getLogger(__name__)

_MARKUP = re.compile(r"<[^>]*>")


@dataclass(frozen=True)
class SelfTrainConfig:
    threshold: float = 0.2
    word_cap: int = 1_000_000
    languages: Optional[Tuple[str, ...]] = None
    lowercase: bool = False

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie strictly between 0 and 1")
        if self.word_cap < 1:
            raise ValueError("word_cap must be >= 1")
        if self.languages is not None:
            object.__setattr__(self, "languages", tuple(validate_language_code(c) for c in self.languages))


def _is_punct_or_digit(ch: str) -> bool:
    return unicodedata.category(ch)[0] in "PN"


def clean_word(token: str) -> Optional[str]:
    """Strip edge punctuation/numerals; reject words with any left inside."""
    start, end = 0, len(token)
    while start < end and _is_punct_or_digit(token[start]):
        start += 1
    while end > start and _is_punct_or_digit(token[end - 1]):
        end -= 1
    word = token[start:end]
    if not word or any(_is_punct_or_digit(c) for c in word):
        return None
    return word


def extract_words(raw: str) -> List[str]:
    words = []
    for token in _MARKUP.sub(" ", raw).split():
        word = clean_word(token)
        if word is not None:
            words.append(unicodedata.normalize("NFC", word))
    return words


def dedupe_and_cap(words: Iterable[str], cap: int) -> List[str]:
    """First ``cap`` words in corpus order, then first-occurrence dedupe."""
    if cap < 1:
        raise ValueError("cap must be >= 1")
    out, seen = [], set()
    for i, w in enumerate(words):
        if i >= cap:
            break
        if w not in seen:
            seen.add(w)
            out.append(w)
    return out


@dataclass(frozen=True)
class Candidate:
    entry: PronunciationEntry
    confidence: float


def pseudo_label(
    spec: EnsembleSpec,
    words: Sequence[str],
    lang: str,
    beam_width: int = 5,
    jobs: int = 1,
    failures: Optional[List[PredictionFailure]] = None,
) -> List[Candidate]:
    """Label each word with the ensemble; unusable predictions go to ``failures``."""
    spec.src_vocab.tag_for(lang)
    out = []
    for word, res in zip(words, predict_file(spec, words, lang, beam_width, jobs=jobs)):
        if isinstance(res, PredictionFailure):
            if failures is not None:
                failures.append(res)
            continue
        if not res.target:
            if failures is not None:
                failures.append(PredictionFailure(lang, word, "empty prediction"))
            continue
        out.append(Candidate(PronunciationEntry(lang, res.source, res.target, silver=True), res.confidence))
    return out


@dataclass
class SilverSet:
    entries: List[PronunciationEntry]
    confidences: List[float]
    threshold: float
    provenance: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.entries) != len(self.confidences):
            raise ValueError("entries and confidences differ in length")
        for e, c in zip(self.entries, self.confidences):
            if not e.silver:
                raise ValueError(f"entry {e.word!r} is not flagged silver")
            if not c > self.threshold:
                raise ValueError(f"confidence {c} of {e.word!r} does not exceed threshold {self.threshold}")

    def __len__(self) -> int:
        return len(self.entries)

    def counts(self) -> Dict[str, int]:
        out: Dict[str, int] = {}
        for e in self.entries:
            out[e.lang] = out.get(e.lang, 0) + 1
        return out

    def to_tsv(self) -> str:
        return "".join(f"{e.word}\t{' '.join(e.target)}\t{c:.4f}\n" for e, c in zip(self.entries, self.confidences))

    def without_unknown_targets(self) -> "SilverSet":
        keep = [i for i, e in enumerate(self.entries) if UNK not in e.target]
        return SilverSet([self.entries[i] for i in keep], [self.confidences[i] for i in keep],
                         self.threshold, dict(self.provenance))

    @classmethod
    def merge(cls, parts: Sequence["SilverSet"], threshold: float) -> "SilverSet":
        entries, confs, prov = [], [], {}
        for p in parts:
            entries.extend(p.entries)
            confs.extend(p.confidences)
            prov.update(p.provenance)
        return cls(entries, confs, threshold, prov)


def select(candidates: Sequence[Candidate], threshold: float, provenance: Optional[Mapping[str, str]] = None) -> SilverSet:
    """Keep candidates whose confidence is strictly above ``threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie strictly between 0 and 1")
    kept = [c for c in candidates if c.confidence > threshold]
    return SilverSet([c.entry for c in kept], [c.confidence for c in kept], threshold, dict(provenance or {}))


def dev_mean_confidence(spec: EnsembleSpec, dev: Sequence[PronunciationEntry], beam_width: int = 5) -> float:
    """Mean confidence of the model's own predictions over the dev sources."""
    dev = list(dev)
    if not dev:
        raise ValueError("empty dev set")
    confs = []
    for e in dev:
        res = predict_file(spec, [e.word], e.lang, beam_width)[0]
        if isinstance(res, PredictionFailure):
            raise ValueError(f"could not decode dev word {e.word!r}: {res.error}")
        confs.append(res.confidence)
    return float(np.mean(confs))


@dataclass
class LanguageStats:
    lang: str
    translated: int
    selected: int
    mean_confidence: float


def stats_tsv(stats: Sequence[LanguageStats]) -> str:
    lines = ["lang\ttranslated\tselected"]
    for s in stats:
        lines.append(f"{s.lang}\t{s.translated}\t{s.selected}")
    lines.append(f"total\t{sum(s.translated for s in stats)}\t{sum(s.selected for s in stats)}")
    return "\n".join(lines) + "\n"


def build_silver(
    spec: EnsembleSpec,
    corpora: Mapping[str, str],
    config: SelfTrainConfig,
    beam_width: int = 5,
    jobs: int = 1,
) -> Tuple[SilverSet, List[LanguageStats], List[str]]:
    """Clean, cap, label and select per language.

    Returns the silver set, per-language selection stats and the languages
    skipped because no corpus was supplied.
    """
    wanted = list(config.languages) if config.languages is not None else sorted(corpora)
    skipped = [c for c in wanted if c not in corpora]
    parts, stats = [], []
    for lang in wanted:
        if lang in skipped:
            continue
        words = extract_words(corpora[lang])
        if config.lowercase:
            words = [w.lower() for w in words]
        unique = dedupe_and_cap(words, config.word_cap)
        failures: List[PredictionFailure] = []
        candidates = pseudo_label(spec, unique, lang, beam_width, jobs, failures)
        chosen = select(candidates, config.threshold, {lang: f"corpus:{lang}"})
        mean_conf = float(np.mean([c.confidence for c in candidates])) if candidates else 0.0
        stats.append(LanguageStats(lang, len(unique), len(chosen), mean_conf))
        log.info("%s: %d unique words, %d selected (mean confidence %.3f, %d failures)",
                 lang, len(unique), len(chosen), mean_conf, len(failures))
        parts.append(chosen)
    return SilverSet.merge(parts, config.threshold), stats, skipped


@dataclass
class RetrainResult:
    checkpoints: List[Checkpoint]
    report: Optional[EvalReport]
    src_vocab: object
    tgt_vocab: object
    gold_counts: Dict[str, int]
    silver_counts: Dict[str, int]
    dropped_unknown: int


def augment_and_retrain(
    gold_train: Sequence[PronunciationEntry],
    silver: SilverSet,
    model_config: ModelConfig,
    train_config: TrainConfig,
    dev: Optional[Sequence[PronunciationEntry]] = None,
    beam_width: int = 5,
    out_dir: Optional[str] = None,
    jobs: int = 1,
) -> RetrainResult:
    """Retrain from scratch on gold + silver with the unchanged training config."""
    clean = silver.without_unknown_targets()
    dropped = len(silver) - len(clean)
    gold = list(gold_train)
    src_vocab, tgt_vocab = build_vocabulary([Dataset(gold, "train"), Dataset(clean.entries, "silver")])
    combined = gold + list(clean.entries)
    checkpoints = train_seeds(combined, src_vocab, tgt_vocab, model_config, train_config, out_dir=out_dir)
    report = None
    if dev:
        spec = EnsembleSpec.from_checkpoints(checkpoints, src_vocab, tgt_vocab)
        report = evaluate(spec, dev, beam_width, label="self-trained", jobs=jobs)
    gold_counts: Dict[str, int] = {}
    for e in gold:
        gold_counts[e.lang] = gold_counts.get(e.lang, 0) + 1
    return RetrainResult(checkpoints, report, src_vocab, tgt_vocab, gold_counts, clean.counts(), dropped)
