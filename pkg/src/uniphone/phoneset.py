"""IPA tokenization, per-language phone inventories and merged vocabularies.

Strings are canonically decomposed (NFD) before tokenization so that
combining diacritics become isolable modifier tokens: a long vowel is two
units, the base vowel and the length mark. The tie bar (U+0361) may either
join its two flanking base symbols into one affricate-style token or be
dropped, controlled by ``tie_bar_joins``.
"""
from __future__ import annotations

import enum
import hashlib
import unicodedata
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Iterator

from .errors import EmptyInput, ParseError, UnknownSymbol

TIE_BAR = "͡"

SPECIALS = ("<blank>", "<unk>", "<sos/eos>", "<pad>")
BLANK_ID = 0
UNK_ID = 1
SOS_EOS_ID = 2
PAD_ID = 3


class TokenKind(enum.Enum):
    BASE = "base"
    MODIFIER = "modifier"


@dataclass(frozen=True, order=True)
class IpaToken:
    text: str
    kind: TokenKind

    def __post_init__(self):
        if not self.text or any(c.isspace() for c in self.text):
            raise ValueError(f"bad token text: {self.text!r}")


def _load_codepoint_file(name: str) -> frozenset[str]:
    text = resources.files("uniphone.data").joinpath(name).read_text("utf-8")
    cps = set()
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        cps.add(chr(int(line.split()[0], 16)))
    return frozenset(cps)


def load_codepoint_table(path) -> frozenset[str]:
    """Read a table file: one hex codepoint per line, # comments allowed."""
    cps = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                cps.add(chr(int(line.split()[0], 16)))
            except ValueError as e:
                raise ParseError(lineno, f"bad codepoint: {line!r}") from e
    return frozenset(cps)


_DEFAULT_BASES: frozenset[str] | None = None
_DEFAULT_MODIFIERS: frozenset[str] | None = None


def default_base_table() -> frozenset[str]:
    global _DEFAULT_BASES
    if _DEFAULT_BASES is None:
        _DEFAULT_BASES = _load_codepoint_file("ipa_bases.txt")
    return _DEFAULT_BASES


def default_modifier_table() -> frozenset[str]:
    global _DEFAULT_MODIFIERS
    if _DEFAULT_MODIFIERS is None:
        _DEFAULT_MODIFIERS = _load_codepoint_file("ipa_modifiers.txt")
    return _DEFAULT_MODIFIERS


def parse_ipa(
    s: str,
    modifier_table: frozenset[str] | None = None,
    tie_bar_joins: bool = True,
    base_table: frozenset[str] | None = None,
) -> list[IpaToken]:
    """Split an IPA string into base and modifier tokens.

    Whitespace separates symbols and is discarded. Joining the token texts
    back together reproduces the NFD form of ``s`` minus whitespace (the tie
    bar survives inside joined tokens; with ``tie_bar_joins`` off it is
    dropped). Raises UnknownSymbol for any codepoint outside the tables.
    """
    modifiers = default_modifier_table() if modifier_table is None else modifier_table
    bases = default_base_table() if base_table is None else base_table

    norm = unicodedata.normalize("NFD", s)
    tokens: list[IpaToken] = []
    i, n = 0, len(norm)
    while i < n:
        c = norm[i]
        if c.isspace():
            i += 1
        elif c == TIE_BAR:
            # Only reachable when the tie bar does not follow a base symbol.
            if tie_bar_joins:
                raise UnknownSymbol(i, c)
            i += 1
        elif c in modifiers:
            tokens.append(IpaToken(c, TokenKind.MODIFIER))
            i += 1
        elif c in bases:
            text = c
            i += 1
            # Fold chains like t + tie + s (+ tie + base ...) into one token.
            while tie_bar_joins and i + 1 < n and norm[i] == TIE_BAR and norm[i + 1] in bases:
                text += TIE_BAR + norm[i + 1]
                i += 2
            tokens.append(IpaToken(text, TokenKind.BASE))
        else:
            raise UnknownSymbol(i, c)
    return tokens


@dataclass
class PhoneInventory:
    """The set of IPA tokens attested in one language's transcripts."""

    language: str
    tokens: tuple[IpaToken, ...] = ()

    def __post_init__(self):
        uniq = sorted(set(self.tokens), key=lambda t: t.text)
        object.__setattr__(self, "tokens", tuple(uniq))

    def __len__(self) -> int:
        return len(self.tokens)

    def __iter__(self) -> Iterator[IpaToken]:
        return iter(self.tokens)

    def summary(self) -> dict:
        return {"language": self.language, "size": len(self.tokens)}


def build_inventory(
    language: str,
    ipa_transcripts: Iterable[str],
    modifier_table: frozenset[str] | None = None,
    tie_bar_joins: bool = True,
    base_table: frozenset[str] | None = None,
) -> PhoneInventory:
    """Collect every token observed in a stream of IPA transcripts."""
    seen: set[IpaToken] = set()
    for lineno, line in enumerate(ipa_transcripts, 1):
        try:
            seen.update(parse_ipa(line, modifier_table, tie_bar_joins, base_table))
        except UnknownSymbol as e:
            raise UnknownSymbol(e.position, e.codepoint, line=lineno) from e
    return PhoneInventory(language, tuple(seen))


@dataclass
class Vocabulary:
    """Model output vocabulary: 4 reserved specials then the payload tokens.

    entries[0..3] are always <blank>, <unk>, <sos/eos>, <pad>; blank at 0 is
    what the CTC loss assumes. For IPA vocabularies the payload is sorted by
    codepoint sequence so identical corpora give bit-identical files.
    """

    entries: tuple[str, ...]
    kind: str  # "ipa" | "bpe"
    _ids: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.entries[:4]) != SPECIALS:
            raise ValueError("vocabulary must start with the reserved specials")
        if len(set(self.entries)) != len(self.entries):
            raise ValueError("duplicate vocabulary entries")
        if self.kind not in ("ipa", "bpe"):
            raise ValueError(f"bad vocabulary kind: {self.kind}")
        object.__setattr__(self, "_ids", {t: i for i, t in enumerate(self.entries)})

    @classmethod
    def from_tokens(cls, tokens: Iterable[str], kind: str) -> "Vocabulary":
        payload = [t for t in tokens if t not in SPECIALS]
        return cls(SPECIALS + tuple(payload), kind)

    def __len__(self) -> int:
        return len(self.entries)

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def token(self, i: int) -> str:
        return self.entries[i]

    @property
    def payload(self) -> tuple[str, ...]:
        return self.entries[4:]

    def sha256(self) -> str:
        blob = (self.kind + "\n" + "\n".join(self.entries)).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def union_vocabulary(inventories: list[PhoneInventory]) -> Vocabulary:
    """Merge inventories into one IPA vocabulary (order-independent)."""
    if not inventories:
        raise EmptyInput("union_vocabulary needs at least one inventory")
    texts = sorted({tok.text for inv in inventories for tok in inv})
    return Vocabulary.from_tokens(texts, "ipa")


def save_vocabulary(vocab: Vocabulary, path, provenance: dict | None = None) -> None:
    """One token per line; ids count token lines only, comments excluded."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# kind={vocab.kind}\n")
        for k, v in sorted((provenance or {}).items()):
            f.write(f"# {k}={v}\n")
        for t in vocab.entries:
            f.write(t + "\n")


def load_vocabulary(path) -> Vocabulary:
    kind = None
    entries = []
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.rstrip("\n")
            if line.startswith("#"):
                body = line[1:].strip()
                if body.startswith("kind="):
                    kind = body[len("kind="):]
                continue
            if not line:
                raise ParseError(lineno, "blank token line")
            entries.append(line)
    if kind is None:
        raise ParseError(0, "missing '# kind=' header")
    return Vocabulary(tuple(entries), kind)
