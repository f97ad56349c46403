"""WER / PER scoring and per-language reports."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .data import Dataset, PronunciationEntry
from .decoding import EnsembleSpec, PredictionFailure, beam_search


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance over whole tokens with unit costs."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        for j, y in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


Pair = Tuple[Sequence[str], Sequence[str]]


def word_error_rate(pairs: Sequence[Pair]) -> float:
    """Percent of (gold, predicted) pairs that differ anywhere."""
    if not pairs:
        raise ValueError("word_error_rate needs at least one pair")
    wrong = sum(1 for gold, pred in pairs if tuple(gold) != tuple(pred))
    return 100.0 * wrong / len(pairs)


def phoneme_error_rate(pairs: Sequence[Pair]) -> float:
    """Micro-averaged: pooled edit distance over pooled gold length, in percent."""
    if not pairs:
        raise ValueError("phoneme_error_rate needs at least one pair")
    total_gold = sum(len(g) for g, _ in pairs)
    if total_gold == 0:
        raise ValueError("total gold length is zero")
    return 100.0 * sum(edit_distance(g, p) for g, p in pairs) / total_gold


@dataclass(frozen=True)
class LanguageScore:
    wer: float
    per: float
    n_words: int
    n_gold_phonemes: int
    total_edit_distance: int
    n_failed: int = 0


@dataclass
class EvalReport:
    rows: Dict[str, LanguageScore]
    label: str = ""
    meta: Dict[str, object] = field(default_factory=dict)

    @property
    def macro(self) -> Tuple[float, float]:
        """Unweighted means of per-language WER and PER."""
        if not self.rows:
            raise ValueError("empty report")
        n = len(self.rows)
        return (sum(r.wer for r in self.rows.values()) / n, sum(r.per for r in self.rows.values()) / n)

    @property
    def macro_wer(self) -> float:
        return self.macro[0]

    @property
    def macro_per(self) -> float:
        return self.macro[1]

    def to_tsv(self) -> str:
        lines = ["lang\tWER\tPER"]
        for lang in sorted(self.rows):
            r = self.rows[lang]
            lines.append(f"{lang}\t{r.wer:.2f}\t{r.per:.2f}")
        wer, per = self.macro
        lines.append(f"avg\t{wer:.2f}\t{per:.2f}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        wer, per = self.macro
        return {
            "label": self.label,
            "rows": {lang: vars(self.rows[lang]) for lang in sorted(self.rows)},
            "macro": {"wer": wer, "per": per},
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def score_language(pairs: Sequence[Pair], n_failed: int = 0) -> LanguageScore:
    return LanguageScore(
        wer=word_error_rate(pairs),
        per=phoneme_error_rate(pairs),
        n_words=len(pairs),
        n_gold_phonemes=sum(len(g) for g, _ in pairs),
        total_edit_distance=sum(edit_distance(g, p) for g, p in pairs),
        n_failed=n_failed,
    )


def report_from_pairs(pairs_by_lang: Dict[str, List[Pair]], label: str = "", failures: Optional[Dict[str, int]] = None) -> EvalReport:
    failures = failures or {}
    return EvalReport({lang: score_language(p, failures.get(lang, 0)) for lang, p in sorted(pairs_by_lang.items())}, label)


def evaluate(
    spec: EnsembleSpec,
    dataset: Iterable[PronunciationEntry],
    beam_width: int = 5,
    label: str = "",
    jobs: int = 1,
) -> EvalReport:
    """Decode every gold entry and score per language.

    A decoding failure counts as an empty prediction (a word error) and is
    tallied in the row's ``n_failed``.
    """
    entries = list(dataset.entries if isinstance(dataset, Dataset) else dataset)

    def one(e: PronunciationEntry):
        try:
            return beam_search(spec, e.lang, e.source, beam_width).target
        except Exception as exc:
            return PredictionFailure(e.lang, e.word, str(exc))

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            predictions = list(pool.map(one, entries))
    else:
        predictions = [one(e) for e in entries]
    pairs: Dict[str, List[Pair]] = {}
    failed: Dict[str, int] = {}
    for e, pred in zip(entries, predictions):
        if isinstance(pred, PredictionFailure):
            failed[e.lang] = failed.get(e.lang, 0) + 1
            pred = ()
        pairs.setdefault(e.lang, []).append((e.target, pred))
    return report_from_pairs(pairs, label, failed)


def ablation_table(reports: Sequence[EvalReport]) -> str:
    """Checkpoint-vs-ensemble comparison: one row per report, macro WER/PER."""
    lines = ["model\tWER\tPER"]
    for r in reports:
        wer, per = r.macro
        lines.append(f"{r.label}\t{wer:.2f}\t{per:.2f}")
    return "\n".join(lines) + "\n"
