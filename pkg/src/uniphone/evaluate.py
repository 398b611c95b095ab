"""Decoding and scoring: attention beam search, greedy CTC, WER/PER.

Corpus error rates are pooled: substitution/insertion/deletion counts are
summed over utterances before dividing by the total reference length. No
language model is involved anywhere.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .checkpoint import Checkpoint
from .errors import EmptyEncoding, EmptyReference, IdMismatch, ShapeMismatch
from .g2p import normalize_text
from .phoneset import BLANK_ID, SOS_EOS_ID, Vocabulary, parse_ipa

WORD_MARKER = "▁"


@dataclass
class Hypothesis:
    ids: list[int]              # ends with <sos/eos>
    text: str
    score: float                # sum of per-token log-probabilities
    token_scores: list[float]


def detokenize(ids: list[int], vocab: Vocabulary) -> str:
    toks = [vocab.token(i) for i in ids if i != SOS_EOS_ID]
    if vocab.kind == "bpe":
        return "".join(toks).replace(WORD_MARKER, " ").strip()
    return " ".join(toks)


def _clone_cache(cache: M.DecodeCache) -> M.DecodeCache:
    return M.DecodeCache(cache.cross_k, cache.cross_v,
                         [k.copy() for k in cache.self_k],
                         [v.copy() for v in cache.self_v], cache.steps)


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    s = x - x.max()
    return s - np.log(np.exp(s).sum())


def beam_search(ckpt: Checkpoint, enc_out: np.ndarray, beam_size: int = 10,
                max_len_ratio: float = 1.0) -> Hypothesis:
    """Length-bounded beam search over decoder steps; beam_size == 1 is greedy.

    Output length is capped at max_len_ratio * T' tokens; hypotheses still
    active at the cap are closed with <sos/eos> at its own log-probability.
    """
    if enc_out.ndim != 2 or enc_out.shape[0] == 0:
        raise EmptyEncoding(f"encoder output shape {enc_out.shape}")
    if beam_size < 1:
        raise ShapeMismatch("beam_size must be >= 1")
    max_len = max(1, int(round(max_len_ratio * enc_out.shape[0])))

    # (ids after sos, score, per-token scores, cache)
    start = ([SOS_EOS_ID], 0.0, [], None)
    active = [start]
    finished: list[tuple[list[int], float, list[float]]] = []
    for step in range(max_len):
        candidates = []
        for ids, score, tok_scores, cache in active:
            logits, cache = M.decode_step(ckpt.params, ckpt.arch, enc_out, ids, cache)
            logp = _log_softmax_np(logits)
            top = np.argsort(-logp)[:beam_size]
            last_step = step == max_len - 1
            for k in top if not last_step else [SOS_EOS_ID]:
                k = int(k)
                cand = (ids + [k], score + float(logp[k]),
                        tok_scores + [float(logp[k])], cache)
                candidates.append(cand)
        candidates.sort(key=lambda c: (-c[1], c[0]))
        kept = 0
        next_active = []
        for ids, score, tok_scores, cache in candidates:
            if kept >= beam_size:
                break
            kept += 1
            if ids[-1] == SOS_EOS_ID:
                finished.append((ids, score, tok_scores))
            else:
                next_active.append((ids, score, tok_scores, _clone_cache(cache)))
        if not next_active:
            break
        active = next_active

    best = max(finished, key=lambda f: f[1])
    ids, score, tok_scores = best
    return Hypothesis(ids[1:], detokenize(ids[1:], ckpt.vocab), score, tok_scores)


def ctc_greedy(log_probs: np.ndarray, blank: int = BLANK_ID) -> list[int]:
    """Framewise argmax, collapse repeats, drop blanks (diagnostic decoder)."""
    path = np.argmax(np.asarray(log_probs), axis=-1)
    out: list[int] = []
    prev = -1
    for k in path:
        k = int(k)
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return out


# --- edit distance and scoring ---------------------------------------------------

def edit_distance_align(ref: list, hyp: list) -> tuple[int, int, int, list[tuple]]:
    """Levenshtein alignment with unit costs.

    Ties resolve substitution > deletion > insertion so alignments are
    deterministic. Returns (S, I, D, alignment) where alignment entries are
    (op, ref_token_or_None, hyp_token_or_None), op in ok/sub/del/ins.
    """
    if not ref:
        raise EmptyReference("reference token sequence is empty")
    n, m = len(ref), len(hyp)
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            dele = dist[i - 1, j] + 1
            ins = dist[i, j - 1] + 1
            dist[i, j] = min(sub, dele, ins)
    align: list[tuple] = []
    i, j = n, m
    s = ins = dele = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            if ref[i - 1] == hyp[j - 1]:
                align.append(("ok", ref[i - 1], hyp[j - 1]))
            else:
                align.append(("sub", ref[i - 1], hyp[j - 1]))
                s += 1
            i, j = i - 1, j - 1
        elif i > 0 and dist[i, j] == dist[i - 1, j] + 1:
            align.append(("del", ref[i - 1], None))
            dele += 1
            i -= 1
        else:
            align.append(("ins", None, hyp[j - 1]))
            ins += 1
            j -= 1
    align.reverse()
    return s, ins, dele, align


@dataclass
class ScoreReport:
    unit: str                   # "word" | "phone"
    wer: float
    substitutions: int
    insertions: int
    deletions: int
    ref_tokens: int
    per_utt: list[dict] = field(default_factory=list)
    normalization: str = "lowercase+punct-strip"

    def to_json(self) -> str:
        return json.dumps(
            {
                "unit": self.unit, "wer": self.wer,
                "substitutions": self.substitutions, "insertions": self.insertions,
                "deletions": self.deletions, "ref_tokens": self.ref_tokens,
                "normalization": self.normalization, "per_utt": self.per_utt,
            },
            sort_keys=True, ensure_ascii=False, indent=1)


def _tokens(text: str, unit: str) -> list[str]:
    if unit == "phone":
        return [t.text for t in parse_ipa(text)]
    return normalize_text(text).split()


def score_corpus(refs: list[tuple[str, str]], hyps: list[tuple[str, str]],
                 unit: str = "word") -> ScoreReport:
    """Pooled WER (or PER for unit='phone') over id-aligned (ref, hyp) pairs."""
    if unit not in ("word", "phone"):
        raise ShapeMismatch(f"unknown unit {unit!r}")
    ref_map = dict(refs)
    hyp_map = dict(hyps)
    if set(ref_map) != set(hyp_map) or len(ref_map) != len(refs) or len(hyp_map) != len(hyps):
        raise IdMismatch("reference and hypothesis utterance ids do not align")
    s = i = d = total = 0
    per_utt = []
    for utt_id in sorted(ref_map):
        r = _tokens(ref_map[utt_id], unit)
        h = _tokens(hyp_map[utt_id], unit)
        if not r:
            raise EmptyReference(f"utterance {utt_id}: empty reference")
        s_u, i_u, d_u, align = edit_distance_align(r, h)
        s, i, d, total = s + s_u, i + i_u, d + d_u, total + len(r)
        per_utt.append({
            "id": utt_id, "sub": s_u, "ins": i_u, "del": d_u, "ref_len": len(r),
            "align": [[op, a, b] for op, a, b in align],
        })
    wer = (s + i + d) / total
    return ScoreReport(unit, wer, s, i, d, total, per_utt)


# --- convenience: decode a prepared dataset ---------------------------------------

def decode_utterance(ckpt: Checkpoint, feats: np.ndarray, beam_size: int = 10,
                     max_len_ratio: float = 1.0) -> Hypothesis:
    enc_out = M.encode_numpy(ckpt.params, ckpt.arch, feats)
    return beam_search(ckpt, enc_out, beam_size, max_len_ratio)


def decode_ctc(ckpt: Checkpoint, feats: np.ndarray) -> str:
    """Greedy CTC transcription (used for IPA-stage phone error rates)."""
    from .autodiff import Tensor

    enc_out = M.encode_numpy(ckpt.params, ckpt.arch, feats)
    tens = {k: Tensor(v) for k, v in ckpt.params.items()}
    logp = M.ctc_head(tens, Tensor(enc_out)).data
    return detokenize(ctc_greedy(logp), ckpt.vocab)
