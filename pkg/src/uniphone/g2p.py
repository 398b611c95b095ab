"""Orthography to IPA conversion: pronunciation lexicon with rule fallback.

Text normalization (lowercase, punctuation to space) is shared with the BPE
trainer and the scorer so that every stage sees the same word stream.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .errors import BadConfig, OovWord, ParseError, RuleGap, UnknownSymbol
from .phoneset import parse_ipa

DEFAULT_PUNCTUATION = frozenset("!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~¡¿«»“”‘’—–…")


def normalize_text(text: str, punctuation: frozenset[str] | None = None) -> str:
    """Lowercase, map punctuation to spaces, collapse whitespace."""
    punct = DEFAULT_PUNCTUATION if punctuation is None else punctuation
    lowered = text.lower()
    cleaned = "".join(" " if c in punct else c for c in lowered)
    return " ".join(cleaned.split())


class OovPolicy(enum.Enum):
    RULES = "rules"
    ERROR = "error"
    SKIP = "skip"


@dataclass
class Lexicon:
    """word -> ordered pronunciation variants (each a space-joined IPA string)."""

    language: str
    entries: dict[str, list[str]] = field(default_factory=dict)

    def lookup(self, word: str) -> list[str] | None:
        return self.entries.get(word)

    def __len__(self) -> int:
        return len(self.entries)


def load_lexicon(path, language: str = "") -> Lexicon:
    """Read 'word<TAB>ipa tokens' lines; duplicate headwords merge in file order."""
    entries: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t", 1) if "\t" in line else line.split(None, 1)
            if len(parts) != 2 or not parts[1].strip():
                raise ParseError(lineno, f"expected 'word<TAB>pronunciation', got {line!r}")
            word = parts[0].lower()
            pron = " ".join(parts[1].split())
            try:
                parse_ipa(pron)
            except UnknownSymbol as e:
                raise UnknownSymbol(e.position, e.codepoint, line=lineno) from e
            entries.setdefault(word, []).append(pron)
    return Lexicon(language, entries)


@dataclass
class RuleSet:
    """Grapheme rewrite rules, applied greedily longest-pattern-first.

    Ties between equal-length patterns are broken by file order. Every rule
    consumes at least one grapheme, so application always terminates.
    """

    rules: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        if any(not pat for pat, _ in self.rules):
            raise BadConfig("empty rule pattern")
        # stable sort keeps file order within a pattern length
        self.rules = sorted(self.rules, key=lambda r: -len(r[0]))

    def apply(self, word: str) -> str:
        out: list[str] = []
        i = 0
        while i < len(word):
            for pat, ipa in self.rules:
                if word.startswith(pat, i):
                    if ipa:
                        out.append(ipa)
                    i += len(pat)
                    break
            else:
                raise RuleGap(word, i)
        return " ".join(out)


def load_rules(path) -> RuleSet:
    rules = []
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t", 1) if "\t" in line else line.split(None, 1)
            if len(parts) != 2:
                raise ParseError(lineno, f"expected 'grapheme<TAB>ipa', got {line!r}")
            try:
                parse_ipa(parts[1])
            except UnknownSymbol as e:
                raise UnknownSymbol(e.position, e.codepoint, line=lineno) from e
            rules.append((parts[0], " ".join(parts[1].split())))
    return RuleSet(rules)


def convert(
    text: str,
    lexicon: Lexicon,
    rules: RuleSet | None = None,
    oov_policy: OovPolicy = OovPolicy.RULES,
    punctuation: frozenset[str] | None = None,
) -> str:
    """Convert one transcript to a space-joined IPA token string.

    Per word: first lexicon pronunciation if present, otherwise the fallback
    chosen by ``oov_policy``. Pure function of its arguments.
    """
    pieces: list[str] = []
    for word in normalize_text(text, punctuation).split():
        prons = lexicon.lookup(word)
        if prons:
            pieces.append(prons[0])
        elif oov_policy is OovPolicy.RULES:
            if rules is None:
                raise BadConfig("oov_policy=rules requires a rule set")
            pieces.append(rules.apply(word))
        elif oov_policy is OovPolicy.ERROR:
            raise OovWord(word)
        # OovPolicy.SKIP drops the word
    return " ".join(p for p in pieces if p)
