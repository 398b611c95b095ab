"""Byte-pair encoding over orthographic transcripts.

Words carry a boundary marker attached to their first character (so "cat"
starts from ["▁c", "a", "t"]), which makes decoding unambiguous. Merge
selection is highest pair frequency with ties broken by the lexicographically
smallest merged string, so training is reproducible across platforms.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable

from .errors import BadConfig, EmptyCorpus, IdOutOfRange, ParseError
from .g2p import normalize_text
from .phoneset import SPECIALS, UNK_ID, Vocabulary

WORD_MARKER = "▁"


@dataclass
class BpeModel:
    merges: list[tuple[str, str]]
    vocab: Vocabulary
    marker: str = WORD_MARKER

    def __post_init__(self):
        if self.vocab.kind != "bpe":
            raise ValueError("BpeModel requires a bpe-kind vocabulary")


def _word_tokens(word: str, marker: str) -> list[str]:
    return [marker + word[0]] + list(word[1:])


def _corpus_words(corpus: Iterable[str]) -> Counter:
    words: Counter = Counter()
    for line in corpus:
        for w in normalize_text(line).split():
            words[w] += 1
    return words


def _merge_word(tokens: tuple[str, ...], pair: tuple[str, str]) -> tuple[str, ...]:
    joined = pair[0] + pair[1]
    out: list[str] = []
    i = 0
    while i < len(tokens):
        if i + 1 < len(tokens) and tokens[i] == pair[0] and tokens[i + 1] == pair[1]:
            out.append(joined)
            i += 2
        else:
            out.append(tokens[i])
            i += 1
    return tuple(out)


def train_bpe(corpus: Iterable[str], target_size: int, marker: str = WORD_MARKER) -> BpeModel:
    """Learn merges until the vocabulary reaches ``target_size`` entries
    (specials included) or no pair occurs at least twice."""
    word_freq = _corpus_words(corpus)
    if not word_freq:
        raise EmptyCorpus("no words in corpus")

    segs: dict[tuple[str, ...], int] = {
        tuple(_word_tokens(w, marker)): n for w, n in word_freq.items()
    }
    alphabet = sorted({t for seg in segs for t in seg})
    if target_size <= len(alphabet) + len(SPECIALS):
        raise BadConfig(
            f"target_size {target_size} must exceed alphabet ({len(alphabet)}) + specials ({len(SPECIALS)})"
        )

    entries: list[str] = list(alphabet)
    known = set(entries)
    merges: list[tuple[str, str]] = []
    while len(entries) + len(SPECIALS) < target_size:
        pairs: Counter = Counter()
        for seg, n in segs.items():
            for a, b in zip(seg, seg[1:]):
                pairs[(a, b)] += n
        if not pairs:
            break
        # max frequency; ties -> smallest merged string, then smallest pair
        best = min(pairs.items(), key=lambda kv: (-kv[1], kv[0][0] + kv[0][1], kv[0]))
        if best[1] < 2:
            break
        pair = best[0]
        merges.append(pair)
        merged = pair[0] + pair[1]
        if merged not in known:  # distinct pairs can yield one surface string
            entries.append(merged)
            known.add(merged)
        segs = {_merge_word(seg, pair): n for seg, n in segs.items()}

    return BpeModel(merges, Vocabulary.from_tokens(entries, "bpe"), marker)


def segment_word(word: str, model: BpeModel) -> list[str]:
    tokens = _word_tokens(word, model.marker)
    for pair in model.merges:
        tokens = list(_merge_word(tuple(tokens), pair))
    return tokens


def encode(text: str, model: BpeModel) -> list[int]:
    """Tokenize normalized text; characters outside the alphabet become <unk>."""
    ids: list[int] = []
    for word in normalize_text(text).split():
        ids.extend(model.vocab.id_of(t) for t in segment_word(word, model))
    return ids


def decode(ids: list[int], model: BpeModel) -> str:
    """Invert encode: specials render literally, markers become spaces."""
    out = []
    for i in ids:
        if not 0 <= i < len(model.vocab):
            raise IdOutOfRange(f"token id {i} outside vocabulary of {len(model.vocab)}")
        out.append(model.vocab.token(i))
    return "".join(out).replace(model.marker, " ").strip()


def save_bpe(model: BpeModel, merges_path) -> None:
    """Merges file: one 'left<SPACE>right' per line in application order."""
    with open(merges_path, "w", encoding="utf-8") as f:
        for a, b in model.merges:
            f.write(f"{a} {b}\n")


def load_bpe(merges_path, vocab: Vocabulary, marker: str = WORD_MARKER) -> BpeModel:
    merges = []
    with open(merges_path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split(" ")
            if len(parts) != 2:
                raise ParseError(lineno, f"expected 'left right', got {line!r}")
            merges.append((parts[0], parts[1]))
    return BpeModel(merges, vocab, marker)
