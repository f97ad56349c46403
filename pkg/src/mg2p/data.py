"""Pronunciation data: entries, TSV I/O, language tags and vocabularies."""
from __future__ import annotations

import hashlib
import re
import unicodedata
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

PAD, BOS, EOS, UNK = "<pad>", "<s>", "</s>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3

SPLITS = ("train", "dev", "test", "silver")

# the fifteen shared-task languages
SHARED_TASK_LANGUAGES = (
    "ady", "arm", "bul", "dut", "fre", "geo", "gre", "hin",
    "hun", "ice", "jpn", "kor", "lit", "rum", "vie",
)

_CODE_RE = re.compile(r"^[a-z]{3}$")


class DataError(ValueError):
    """Malformed pronunciation data."""


class ParseError(DataError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def validate_language_code(code: str) -> str:
    if not isinstance(code, str) or not _CODE_RE.match(code):
        raise DataError(f"language code must be 3 lowercase ASCII letters, got {code!r}")
    return code


class LanguageRegistry:
    """The set of language codes a run accepts."""

    def __init__(self, codes: Iterable[str] = SHARED_TASK_LANGUAGES):
        self._codes: set = set()
        for code in codes:
            self.register(code)

    def register(self, code: str) -> str:
        validate_language_code(code)
        self._codes.add(code)
        return code

    def __contains__(self, code: object) -> bool:
        return code in self._codes

    def __iter__(self):
        return iter(sorted(self._codes))

    def __len__(self) -> int:
        return len(self._codes)


DEFAULT_REGISTRY = LanguageRegistry()


def tokenize_graphemes(word: str) -> Tuple[str, ...]:
    """One token per codepoint after NFC normalization."""
    return tuple(unicodedata.normalize("NFC", word))


@dataclass(frozen=True)
class PronunciationEntry:
    lang: str
    source: Tuple[str, ...]
    target: Tuple[str, ...]
    silver: bool = False

    def __post_init__(self):
        validate_language_code(self.lang)
        object.__setattr__(self, "source", tuple(self.source))
        object.__setattr__(self, "target", tuple(self.target))
        if not self.source:
            raise DataError("empty grapheme sequence")
        if any(not t or t.isspace() for t in self.source):
            raise DataError(f"whitespace grapheme in {self.source!r}")
        if not self.target:
            raise DataError("empty phoneme sequence")
        if any(not t or any(c.isspace() for c in t) for t in self.target):
            raise DataError(f"phoneme token with whitespace in {self.target!r}")

    @property
    def word(self) -> str:
        return "".join(self.source)

    @classmethod
    def from_strings(cls, lang: str, word: str, phonemes: str, silver: bool = False) -> "PronunciationEntry":
        return cls(lang, tokenize_graphemes(word), tuple(phonemes.split(" ")), silver)


@dataclass(frozen=True)
class Dataset:
    entries: Tuple[PronunciationEntry, ...]
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}; expected one of {SPLITS}")
        object.__setattr__(self, "entries", tuple(self.entries))

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def languages(self) -> List[str]:
        return sorted({e.lang for e in self.entries})

    def by_language(self) -> Dict[str, List[PronunciationEntry]]:
        groups: Dict[str, List[PronunciationEntry]] = {}
        for e in self.entries:
            groups.setdefault(e.lang, []).append(e)
        return groups

    def counts(self) -> Dict[str, int]:
        """Gold/silver entry counts."""
        silver = sum(1 for e in self.entries if e.silver)
        return {"gold": len(self.entries) - silver, "silver": silver}


def parse_wikipron_tsv(text: str, lang: str, silver: bool = False) -> List[PronunciationEntry]:
    """Parse ``word<TAB>seg seg seg`` lines. Blank lines are skipped."""
    validate_language_code(lang)
    entries = []
    for lineno, line in enumerate(text.split("\n"), start=1):
        line = line.rstrip("\r")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ParseError(lineno, f"expected exactly one tab, found {len(parts) - 1}")
        word, segs = parts
        if not word:
            raise ParseError(lineno, "empty word")
        if not segs.strip():
            raise ParseError(lineno, "empty phoneme segment list")
        target = tuple(segs.split(" "))
        if any(not s for s in target):
            raise ParseError(lineno, "empty phoneme segment (double or edge space)")
        try:
            entries.append(PronunciationEntry(lang, tokenize_graphemes(word), target, silver))
        except DataError as exc:
            raise ParseError(lineno, str(exc)) from exc
    return entries


def write_tsv(entries: Iterable[PronunciationEntry]) -> str:
    return "".join(f"{e.word}\t{' '.join(e.target)}\n" for e in entries)


def read_tsv(path, lang: str, silver: bool = False) -> List[PronunciationEntry]:
    with open(path, encoding="utf-8") as fh:
        return parse_wikipron_tsv(fh.read(), lang, silver)


def read_word_list(path) -> List[str]:
    """First column of each non-blank line; tolerates gold TSVs as input."""
    words = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\r\n")
            if line.strip():
                words.append(line.split("\t", 1)[0])
    return words


@dataclass(frozen=True)
class Vocabulary:
    """Dense token <-> id map. Ids 0-3 are PAD, BOS, EOS, UNK."""

    id_to_token: Tuple[str, ...]
    lang_tags: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "id_to_token", tuple(self.id_to_token))
        if self.id_to_token[:4] != SPECIALS:
            raise DataError("vocabulary must start with the four special tokens")
        index = {t: i for i, t in enumerate(self.id_to_token)}
        if len(index) != len(self.id_to_token):
            raise DataError("duplicate tokens in vocabulary")
        object.__setattr__(self, "token_to_id", index)
        object.__setattr__(self, "lang_tags", dict(self.lang_tags))
        for tag in self.lang_tags.values():
            if tag not in index:
                raise DataError(f"language tag {tag} missing from vocabulary")

    token_to_id: Dict[str, int] = field(init=False, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def fingerprint(self) -> int:
        """64-bit hash of the ordered token list (and tag map)."""
        h = hashlib.sha256()
        for tok in self.id_to_token:
            h.update(tok.encode("utf-8") + b"\x00")
        for code in sorted(self.lang_tags):
            h.update(f"{code}={self.lang_tags[code]}\x01".encode("utf-8"))
        return int.from_bytes(h.digest()[:8], "little")

    def encode(self, tokens: Sequence[str], add_bos_eos: bool = False) -> List[int]:
        get = self.token_to_id.get
        ids = [get(t, UNK_ID) for t in tokens]
        if add_bos_eos:
            ids = [BOS_ID] + ids + [EOS_ID]
        return ids

    def decode(self, ids: Iterable[int], strip_specials: bool = True) -> List[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip_specials and i in (PAD_ID, BOS_ID, EOS_ID):
                continue
            out.append(self.id_to_token[i])
        return out

    def tag_for(self, lang: str) -> str:
        try:
            return self.lang_tags[lang]
        except KeyError:
            raise DataError(f"language {lang!r} is not registered in this vocabulary") from None

    def to_text(self) -> str:
        lines = [f"#tags\t{' '.join(f'{c}={t}' for c, t in sorted(self.lang_tags.items()))}"]
        lines.extend(self.id_to_token)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Vocabulary":
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if not lines or not lines[0].startswith("#tags\t"):
            raise DataError("vocabulary file missing #tags header")
        tags = {}
        for pair in lines[0][len("#tags\t"):].split():
            code, tag = pair.split("=", 1)
            tags[code] = tag
        return cls(tuple(lines[1:]), tags)


def language_tag(lang: str) -> str:
    return f"<{lang}>"


def prepend_language_tag(entry: PronunciationEntry, vocab: Vocabulary) -> List[str]:
    return [vocab.tag_for(entry.lang)] + list(entry.source)


def tag_source(lang: str, source: Sequence[str], vocab: Vocabulary) -> List[str]:
    return [vocab.tag_for(lang)] + list(source)


def build_vocabulary(
    datasets: Sequence[Dataset],
    languages: Optional[Iterable[str]] = None,
) -> Tuple[Vocabulary, Vocabulary]:
    """Source and target vocabularies from the train (and silver) splits.

    Languages come from the training entries plus any extra ``languages``.
    """
    train = [d for d in datasets if d.split in ("train", "silver")]
    if not any(d.split == "train" for d in train):
        raise DataError("build_vocabulary needs at least one train split")
    langs = set(languages or ())
    graphemes: set = set()
    phonemes: set = set()
    for d in train:
        for e in d.entries:
            langs.add(e.lang)
            graphemes.update(e.source)
            phonemes.update(e.target)
    tags = {code: language_tag(code) for code in sorted(langs)}
    reserved = set(SPECIALS) | set(tags.values())
    src_tokens = list(SPECIALS) + [tags[c] for c in sorted(tags)] + sorted(graphemes - reserved)
    tgt_tokens = list(SPECIALS) + sorted(phonemes - set(SPECIALS))
    return Vocabulary(tuple(src_tokens), tags), Vocabulary(tuple(tgt_tokens))


def format_prediction_tsv(rows: Iterable[Tuple[str, Sequence[str], float]]) -> str:
    """``word<TAB>seg seg<TAB>confidence`` with 4 fractional digits."""
    return "".join(f"{word}\t{' '.join(target)}\t{conf:.4f}\n" for word, target, conf in rows)


def parse_prediction_tsv(text: str) -> List[Tuple[str, Tuple[str, ...], float]]:
    rows = []
    for lineno, line in enumerate(text.split("\n"), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError(lineno, "prediction rows need word, segments and confidence")
        word, segs, conf = parts
        value = float(conf)
        if not 0.0 <= value <= 1.0:
            raise ParseError(lineno, f"confidence {value} outside [0, 1]")
        rows.append((word, tuple(segs.split(" ")) if segs else (), value))
    return rows
