"""Synthetic multilingual speech corpus for end-to-end tests without audio.

Every phone in the universe owns a deterministic spectral signature (seeded
by its name alone), shared by every language that uses the phone: that is
the cross-lingual structure the transfer pipeline is supposed to exploit.
Languages differ in phone inventory, orthography, lexicon, phonotactics and
a fixed channel offset; utterances add speaker offsets, tempo and noise so
that small corpora genuinely underdetermine the mapping.

The generator emits per-language train/dev/test manifests, FEAT feature
files, a pronunciation lexicon and grapheme rules usable by the g2p stage.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .frontend import Utterance, save_manifest, write_feat
from .phoneset import parse_ipa
from .training import derive_seed

LONG_MARK = "ː"  # triangular colon


@dataclass
class LanguageSpec:
    name: str
    vowels: list[str]
    consonants: list[str]
    grapheme_of: dict[str, str]
    long_vowels: bool = False
    n_words: int = 60

    @property
    def phones(self) -> list[str]:
        return self.vowels + self.consonants


def default_language_specs() -> list[LanguageSpec]:
    """Two high-resource languages and one low-resource target whose phones
    are all covered by the union of the other two."""
    alpha = LanguageSpec(
        "alpha",
        vowels=["a", "e", "i", "o", "u"],
        consonants=["p", "t", "k", "m", "n", "s", "l", "r", "j", "ʃ"],
        grapheme_of={"ʃ": "sh"},
        long_vowels=True,
    )
    beta = LanguageSpec(
        "beta",
        vowels=["a", "e", "i", "ɔ", "ə"],
        consonants=["b", "d", "ɡ", "m", "n", "z", "f", "v", "w", "l", "r"],
        grapheme_of={"ɔ": "c", "ə": "q", "ɡ": "g"},
    )
    gamma = LanguageSpec(
        "gamma",
        vowels=["a", "e", "i", "o", "u"],
        consonants=["p", "t", "b", "d", "k", "m", "n", "s", "z", "l", "r"],
        grapheme_of={},
        long_vowels=True,
        n_words=30,
    )
    return [alpha, beta, gamma]


def grapheme(spec: LanguageSpec, phone: str) -> str:
    return spec.grapheme_of.get(phone, phone)


# --- lexicon -----------------------------------------------------------------

def make_lexicon(spec: LanguageSpec, seed: int) -> dict[str, str]:
    """word -> space-joined IPA tokens; deterministic per (language, seed)."""
    rng = np.random.default_rng(derive_seed(seed, "lexicon", spec.name))
    lex: dict[str, str] = {}
    guard = 0
    while len(lex) < spec.n_words and guard < spec.n_words * 50:
        guard += 1
        n_syll = rng.choice([2, 3, 4], p=[0.4, 0.45, 0.15])
        tokens: list[str] = []
        letters: list[str] = []
        for _ in range(n_syll):
            c = spec.consonants[rng.integers(len(spec.consonants))]
            v = spec.vowels[rng.integers(len(spec.vowels))]
            tokens.append(c)
            letters.append(grapheme(spec, c))
            tokens.append(v)
            letters.append(grapheme(spec, v))
            if spec.long_vowels and rng.random() < 0.25:
                tokens.append(LONG_MARK)
                letters[-1] = grapheme(spec, v) * 2
            if rng.random() < 0.2:
                coda = spec.consonants[rng.integers(len(spec.consonants))]
                tokens.append(coda)
                letters.append(grapheme(spec, coda))
        word = "".join(letters)
        if word not in lex:
            lex[word] = " ".join(tokens)
    return lex


def write_lexicon(lex: dict[str, str], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for word in sorted(lex):
            f.write(f"{word}\t{lex[word]}\n")


def write_rules(spec: LanguageSpec, path) -> None:
    """Grapheme rules matching the lexicon's orthography (for OOV fallback)."""
    rules: list[tuple[str, str]] = []
    for p in spec.phones:
        rules.append((grapheme(spec, p), p))
    if spec.long_vowels:
        for v in spec.vowels:
            rules.append((grapheme(spec, v) * 2, f"{v} {LONG_MARK}"))
    with open(path, "w", encoding="utf-8") as f:
        for pat, ipa in sorted(rules, key=lambda r: (-len(r[0]), r[0])):
            f.write(f"{pat}\t{ipa}\n")


# --- acoustics -----------------------------------------------------------------

def phone_signature(phone: str, num_mels: int) -> np.ndarray:
    """Deterministic per-phone spectral pattern, language-independent."""
    seed = int.from_bytes(hashlib.blake2b(
        f"sig:{phone}".encode(), digest_size=8).digest(), "little") >> 1
    rng = np.random.default_rng(seed)
    bins = np.arange(num_mels, dtype=np.float64)
    sig = np.full(num_mels, -1.5)
    for _ in range(2):  # two formant-like bumps
        center = rng.uniform(0.08, 0.92) * num_mels
        width = rng.uniform(0.5, 1.8)
        height = rng.uniform(2.2, 3.6)
        sig = sig + height * np.exp(-0.5 * ((bins - center) / width) ** 2)
    sig += rng.uniform(-0.25, 0.25, size=num_mels)
    return sig


def _channel(name: str, num_mels: int, sigma: float) -> np.ndarray:
    seed = int.from_bytes(hashlib.blake2b(
        f"chan:{name}".encode(), digest_size=8).digest(), "little") >> 1
    rng = np.random.default_rng(seed)
    rough = rng.normal(0.0, sigma, size=num_mels)
    k = np.ones(5) / 5.0
    return np.convolve(np.pad(rough, 2, mode="edge"), k, mode="valid")


@dataclass
class SynthConfig:
    num_mels: int = 20
    frame_shift_ms: float = 10.0
    noise: float = 0.3
    speaker_sigma: float = 0.5
    channel_sigma: float = 0.6
    seed: int = 0

    def frontend_hash(self) -> str:
        blob = json.dumps({"kind": "synth", "num_mels": self.num_mels,
                           "frame_shift_ms": self.frame_shift_ms}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


def _segments(pron: str) -> list[tuple[str, bool]]:
    """(base phone, lengthened?) runs; modifiers stretch their base."""
    segs: list[tuple[str, bool]] = []
    for tok in parse_ipa(pron):
        if tok.kind.value == "modifier":
            if segs:
                segs[-1] = (segs[-1][0], True)
        else:
            segs.append((tok.text, False))
    return segs


def render_utterance(pron: str, cfg: SynthConfig, rng: np.random.Generator,
                     channel: np.ndarray) -> np.ndarray:
    """Feature matrix for one utterance's pronunciation string."""
    tempo = rng.uniform(0.85, 1.2)
    speaker = rng.normal(0.0, cfg.speaker_sigma, size=cfg.num_mels)
    gain = rng.normal(0.0, 0.25)
    blocks = [rng.normal(-1.5, 0.2, size=(int(rng.integers(2, 4)), cfg.num_mels))]
    for phone, longed in _segments(pron):
        dur = 4 + int(rng.integers(0, 3))
        if longed:
            dur = int(round(dur * 1.9))
        dur = max(2, int(round(dur * tempo)))
        sig = phone_signature(phone, cfg.num_mels)
        blocks.append(np.tile(sig, (dur, 1)))
    blocks.append(rng.normal(-1.5, 0.2, size=(int(rng.integers(2, 4)), cfg.num_mels)))
    feat = np.concatenate(blocks, axis=0)
    # short moving average along time softens segment boundaries
    padded = np.pad(feat, ((1, 1), (0, 0)), mode="edge")
    feat = (padded[:-2] + padded[1:-1] + padded[2:]) / 3.0
    feat = feat + channel + speaker + gain
    feat += rng.normal(0.0, cfg.noise, size=feat.shape)
    return feat.astype(np.float32)


# --- corpus assembly --------------------------------------------------------------

def _sentences(lex_words: list[str], n: int, rng: np.random.Generator,
               max_words: int = 3) -> list[list[str]]:
    weights = 1.0 / (np.arange(len(lex_words)) + 3.0)
    weights /= weights.sum()
    out = []
    for _ in range(n):
        k = int(rng.integers(2, max_words + 1))
        idx = rng.choice(len(lex_words), size=k, replace=True, p=weights)
        out.append([lex_words[int(i)] for i in idx])
    return out


def build_language(out_dir: Path, spec: LanguageSpec, counts: tuple[int, int, int],
                   cfg: SynthConfig, with_ipa: bool = False) -> dict:
    """Write train/dev/test manifests plus features, lexicon and rules."""
    lang_dir = Path(out_dir) / spec.name
    feat_dir = lang_dir / "feats"
    feat_dir.mkdir(parents=True, exist_ok=True)
    lex = make_lexicon(spec, cfg.seed)
    write_lexicon(lex, lang_dir / "lexicon.tsv")
    write_rules(spec, lang_dir / "rules.tsv")
    channel = _channel(spec.name, cfg.num_mels, cfg.channel_sigma)
    words = sorted(lex)
    summary = {"language": spec.name, "lexicon_size": len(lex)}
    for split, n in zip(("train", "dev", "test"), counts):
        rng = np.random.default_rng(derive_seed(cfg.seed, "sents", spec.name, split))
        utts = []
        for k, sent in enumerate(_sentences(words, n, rng)):
            utt_id = f"{spec.name}-{split}-{k:05d}"
            pron = " ".join(lex[w] for w in sent)
            feat = render_utterance(pron, cfg, rng, channel)
            rel = f"feats/{utt_id}.feat"
            write_feat(feat_dir / f"{utt_id}.feat", feat)
            utts.append(Utterance(
                id=utt_id, language=spec.name, text=" ".join(sent),
                feats=str(lang_dir / rel),
                dur_s=feat.shape[0] * cfg.frame_shift_ms / 1000.0,
                ipa=pron if with_ipa else None,
            ))
        save_manifest(utts, lang_dir / f"{split}.jsonl")
        summary[split] = n
    return summary


def build_corpus(out_dir, specs: list[LanguageSpec] | None = None,
                 counts: dict[str, tuple[int, int, int]] | None = None,
                 cfg: SynthConfig | None = None, with_ipa: bool = False) -> dict:
    """Generate the full multi-language corpus; returns a summary record."""
    specs = specs if specs is not None else default_language_specs()
    cfg = cfg or SynthConfig()
    counts = counts or {}
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summaries = []
    for spec in specs:
        c = counts.get(spec.name, (100, 20, 20))
        summaries.append(build_language(out_dir, spec, c, cfg, with_ipa))
    meta = {
        "languages": [s.name for s in specs],
        "num_mels": cfg.num_mels,
        "frame_shift_ms": cfg.frame_shift_ms,
        "frontend_hash": cfg.frontend_hash(),
        "seed": cfg.seed,
        "noise": cfg.noise,
        "speaker_sigma": cfg.speaker_sigma,
        "channel_sigma": cfg.channel_sigma,
    }
    with open(out_dir / "frontend.json", "w", encoding="utf-8") as f:
        json.dump(meta, f, sort_keys=True, indent=1)
    return {"languages": summaries, **meta}
