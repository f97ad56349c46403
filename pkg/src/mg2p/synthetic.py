"""Deterministic rule-based toy languages for desk-scale experiments.

Every language shares one letter-to-sound core and adds a few
context-sensitive rewrite rules of its own (digraphs, palatalization before
front vowels, final devoicing, silent final letters). That mix gives a
multilingual model something to share and something to tell apart.
"""
from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

from .data import PronunciationEntry

CONSONANTS = "ptkbdgmnszfvlrhc"
VOWELS = "aeiou"

BASE_SOUNDS: Dict[str, Tuple[str, ...]] = {c: (c,) for c in CONSONANTS + VOWELS}
BASE_SOUNDS.update({"g": ("ɡ",), "c": ("k",), "h": ("h",)})

Cond = Callable[[str, int, int], bool]


def always(word: str, i: int, j: int) -> bool:
    return True


def before_front(word: str, i: int, j: int) -> bool:
    return j < len(word) and word[j] in "ei"


def final(word: str, i: int, j: int) -> bool:
    return j == len(word)


def initial(word: str, i: int, j: int) -> bool:
    return i == 0


def between_vowels(word: str, i: int, j: int) -> bool:
    return 0 < i and j < len(word) and word[i - 1] in VOWELS and word[j] in VOWELS


@dataclass(frozen=True)
class Rule:
    letters: str
    sounds: Tuple[str, ...]
    when: Cond = always


@dataclass(frozen=True)
class ToyLanguage:
    code: str
    rules: Tuple[Rule, ...]
    onsets: Tuple[str, ...]
    coda_letters: str

    def transcribe(self, word: str) -> Tuple[str, ...]:
        out: List[str] = []
        i = 0
        while i < len(word):
            for rule in self.rules:
                j = i + len(rule.letters)
                if word.startswith(rule.letters, i) and rule.when(word, i, j):
                    out.extend(rule.sounds)
                    i = j
                    break
            else:
                out.extend(BASE_SOUNDS[word[i]])
                i += 1
        return tuple(out)

    def random_word(self, rng: random.Random) -> str:
        letters = []
        for _ in range(rng.randint(1, 3)):
            letters.append(rng.choice(self.onsets))
            if rng.random() < 0.25 and len(letters[-1]) == 1:
                letters.append(rng.choice("lr"))
            letters.append(rng.choice(VOWELS))
            if rng.random() < 0.15:
                letters.append(letters[-1] if rng.random() < 0.5 else rng.choice("ui"))
            if rng.random() < 0.3:
                letters.append(rng.choice(self.coda_letters))
        return "".join(letters)


LANGUAGES: Dict[str, ToyLanguage] = {
    lang.code: lang
    for lang in (
        ToyLanguage(
            "alf",
            (
                Rule("ch", ("ʃ",)),
                Rule("ou", ("u",)),
                Rule("c", ("s",), before_front),
                Rule("r", ("ʁ",)),
                Rule("e", (), final),
                Rule("s", ("z",), between_vowels),
            ),
            onsets=tuple("p t k b d m n s l r c f v ch ch".split()),
            coda_letters="nrsl",
        ),
        ToyLanguage(
            "bet",
            (
                Rule("ch", ("x",)),
                Rule("b", ("p",), final),
                Rule("d", ("t",), final),
                Rule("g", ("k",), final),
                Rule("v", ("f",), initial),
                Rule("z", ("t", "s")),
                Rule("ee", ("eː",)),
            ),
            onsets=tuple("p t k b d g m n s z v l r ch ch".split()),
            coda_letters="bdgnrstl",
        ),
        ToyLanguage(
            "gam",
            (
                Rule("ch", ("k",)),
                Rule("c", ("t͡ʃ",), before_front),
                Rule("g", ("d͡ʒ",), before_front),
                Rule("r", ("ɾ",)),
                Rule("e", ("ə",), final),
                Rule("s", ("ʃ",), before_front),
            ),
            onsets=tuple("p t k b d g m n s f l r c c ch".split()),
            coda_letters="nrls",
        ),
        ToyLanguage(
            "dal",
            (
                Rule("aa", ("aː",)),
                Rule("oo", ("oː",)),
                Rule("h", (), final),
                Rule("k", ("kʰ",), initial),
                Rule("t", ("tʰ",), initial),
                Rule("p", ("pʰ",), initial),
            ),
            onsets=tuple("p t k b d g m n h s l r".split()),
            coda_letters="nmhs",
        ),
    )
}


def make_lexicon(code: str, n: int, seed: int, exclude: Sequence[str] = ()) -> List[PronunciationEntry]:
    """``n`` distinct words of toy language ``code`` with their transcriptions."""
    lang = LANGUAGES[code]
    rng = random.Random(f"{code}:{seed}")
    seen = set(exclude)
    out: List[PronunciationEntry] = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 200 * n + 1000:
            raise RuntimeError(f"could not draw {n} distinct words for {code}")
        word = lang.random_word(rng)
        if word in seen or len(word) < 2:
            continue
        seen.add(word)
        out.append(PronunciationEntry(code, tuple(word), lang.transcribe(word)))
    return out


def make_splits(code: str, n_train: int, n_dev: int, seed: int = 0) -> Tuple[List[PronunciationEntry], List[PronunciationEntry]]:
    words = make_lexicon(code, n_train + n_dev, seed)
    return words[:n_train], words[n_train:]


def make_corpus(code: str, n_tokens: int, seed: int, vocabulary_size: int = 2000) -> str:
    """Wikipedia-like raw text: Zipf-distributed words with punctuation,
    numerals, capitalization and stray markup mixed in."""
    rng = random.Random(f"corpus:{code}:{seed}")
    lang = LANGUAGES[code]
    lexicon = []
    seen = set()
    while len(lexicon) < vocabulary_size:
        w = lang.random_word(rng)
        if w not in seen:
            seen.add(w)
            lexicon.append(w)
    weights = [1.0 / (r + 1) for r in range(len(lexicon))]
    words = rng.choices(lexicon, weights=weights, k=n_tokens)
    pieces = []
    for k, w in enumerate(words):
        roll = rng.random()
        if roll < 0.05:
            w = w + rng.choice([",", ".", ";", ":", "»", ")"])
        elif roll < 0.08:
            w = rng.choice(["«", "(", "\""]) + w
        elif roll < 0.10:
            w = w + str(rng.randint(0, 99))
        elif roll < 0.11:
            w = w[: len(w) // 2] + "-" + w[len(w) // 2:]
        if rng.random() < 0.02:
            pieces.append(str(rng.randint(1800, 2030)))
        if rng.random() < 0.01:
            w = f"<ref>{w}</ref>"
        pieces.append(w)
        if k % 15 == 14:
            pieces.append("\n")
    return " ".join(pieces)
