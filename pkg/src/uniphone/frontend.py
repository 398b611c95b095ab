"""Acoustic frontend: log-mel filterbank features, manifests, feature cache.

Features follow the usual recipe: Hann-windowed magnitude STFT, HTK-scale
mel filterbank, natural log with a floor clamp. Manifests are JSON lines;
features cache to a small binary format (magic "FEAT").
"""
from __future__ import annotations

import hashlib
import json
import struct
import wave
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .errors import (
    BadConfig,
    DataError,
    DuplicateId,
    InsufficientData,
    IoError,
    MissingAudio,
    ParseError,
    TooShort,
)

FEAT_MAGIC = b"FEAT"


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate: int = 16000
    n_fft: int = 512
    window: int = 400   # samples (25 ms at 16 kHz)
    hop: int = 160      # samples (10 ms)
    num_mels: int = 80
    floor: float = 1e-10

    def __post_init__(self):
        if self.hop > self.window:
            raise BadConfig("hop must not exceed window")
        if self.num_mels < 2:
            raise BadConfig("num_mels must be at least 2")
        if self.n_fft < self.window:
            raise BadConfig("n_fft must cover the window")
        if self.floor <= 0:
            raise BadConfig("floor must be positive")

    @property
    def frame_shift_ms(self) -> float:
        return 1000.0 * self.hop / self.sample_rate

    @property
    def frame_length_ms(self) -> float:
        return 1000.0 * self.window / self.sample_rate

    def sha256(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class FeatureMatrix:
    frames: np.ndarray  # (T, F) float32
    frame_shift_ms: float
    frame_length_ms: float

    @property
    def num_mels(self) -> int:
        return self.frames.shape[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(num_mels: int, rate: int, fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Center frequency in Hz of every triangular filter (test oracle)."""
    fmax = rate / 2.0 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), num_mels + 2))
    return edges[1:-1]


def mel_filterbank(config: FrontendConfig) -> np.ndarray:
    """(num_mels, n_fft//2+1) triangular filters on the HTK mel scale."""
    n_bins = config.n_fft // 2 + 1
    freqs = np.linspace(0.0, config.sample_rate / 2.0, n_bins)
    edges = mel_to_hz(
        np.linspace(hz_to_mel(0.0), hz_to_mel(config.sample_rate / 2.0), config.num_mels + 2)
    )
    fb = np.zeros((config.num_mels, n_bins))
    for m in range(config.num_mels):
        lo, ctr, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (freqs - lo) / max(ctr - lo, 1e-12)
        down = (hi - freqs) / max(hi - ctr, 1e-12)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def compute_logmel(samples: np.ndarray, rate: int, config: FrontendConfig) -> FeatureMatrix:
    """Log-mel features; T == 1 + floor((num_samples - window) / hop)."""
    if rate != config.sample_rate:
        raise BadConfig(f"sample rate {rate} != configured {config.sample_rate}")
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1:
        raise BadConfig("samples must be mono (1-D)")
    if len(x) < config.window:
        raise TooShort(f"{len(x)} samples < window {config.window}")

    n_frames = 1 + (len(x) - config.window) // config.hop
    idx = np.arange(config.window)[None, :] + config.hop * np.arange(n_frames)[:, None]
    frames = x[idx] * np.hanning(config.window)[None, :]
    mag = np.abs(np.fft.rfft(frames, n=config.n_fft, axis=1))
    mel = mag @ mel_filterbank(config).T
    logmel = np.log(np.maximum(mel, config.floor)).astype(np.float32)
    return FeatureMatrix(logmel, config.frame_shift_ms, config.frame_length_ms)


# --- manifests ---------------------------------------------------------------

@dataclass
class Utterance:
    id: str
    language: str
    text: str
    audio: str | None = None   # wav path
    feats: str | None = None   # FEAT cache path
    dur_s: float | None = None
    ipa: str | None = None

    def to_record(self) -> dict:
        rec = {"id": self.id, "lang": self.language, "text": self.text}
        if self.audio is not None:
            rec["audio"] = self.audio
        if self.feats is not None:
            rec["feats"] = self.feats
        if self.dur_s is not None:
            rec["dur_s"] = self.dur_s
        if self.ipa is not None:
            rec["ipa"] = self.ipa
        return rec


def load_manifest(path) -> list[Utterance]:
    """Read a JSON-lines manifest; duplicate ids and missing audio are errors."""
    utts: list[Utterance] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(lineno, f"bad JSON: {e}") from e
            for key in ("id", "lang", "text"):
                if key not in rec:
                    raise ParseError(lineno, f"missing field {key!r}")
            if rec["id"] in seen:
                raise DuplicateId(rec["id"])
            seen.add(rec["id"])
            if rec.get("audio") is None and rec.get("feats") is None:
                raise MissingAudio(rec["id"])
            utts.append(
                Utterance(
                    id=rec["id"],
                    language=rec["lang"],
                    text=rec["text"],
                    audio=rec.get("audio"),
                    feats=rec.get("feats"),
                    dur_s=rec.get("dur_s"),
                    ipa=rec.get("ipa"),
                )
            )
    return utts


def save_manifest(utts: list[Utterance], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for u in utts:
            f.write(json.dumps(u.to_record(), ensure_ascii=False, sort_keys=True) + "\n")


def subset_hours(utts: list[Utterance], hours: float, seed: int) -> list[Utterance]:
    """Uniformly sample (without replacement) until the running total first
    reaches ``hours``; deterministic for a given seed, and the selection for a
    smaller budget is a prefix of the selection for a larger one."""
    for u in utts:
        if u.dur_s is None:
            raise DataError(f"utterance {u.id} has no dur_s")
    total = sum(u.dur_s for u in utts)
    want = hours * 3600.0
    if total < want:
        raise InsufficientData(f"{total / 3600.0:.3f} h available < {hours:.3f} h requested")
    order = np.random.default_rng(seed).permutation(len(utts))
    picked: list[Utterance] = []
    acc = 0.0
    for i in order:
        if acc >= want:
            break
        picked.append(utts[int(i)])
        acc += utts[int(i)].dur_s
    return picked


# --- feature cache -----------------------------------------------------------

def write_feat(path, frames: np.ndarray) -> None:
    arr = np.ascontiguousarray(frames, dtype="<f4")
    if arr.ndim != 2:
        raise IoError("feature matrix must be 2-D")
    with open(path, "wb") as f:
        f.write(FEAT_MAGIC)
        f.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        f.write(arr.tobytes())


def read_feat(path) -> np.ndarray:
    with open(path, "rb") as f:
        head = f.read(12)
        if len(head) < 12 or head[:4] != FEAT_MAGIC:
            raise IoError(f"{path}: not a FEAT file")
        t, d = struct.unpack("<II", head[4:])
        body = f.read(4 * t * d)
        if len(body) != 4 * t * d:
            raise IoError(f"{path}: truncated FEAT body")
    return np.frombuffer(body, dtype="<f4").reshape(t, d).copy()


def read_wav(path) -> tuple[np.ndarray, int]:
    """Mono 16-bit PCM WAV to float32 in [-1, 1]."""
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise IoError(f"{path}: need mono 16-bit PCM")
        rate = w.getframerate()
        raw = w.readframes(w.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0
    return samples, rate


def write_wav(path, samples: np.ndarray, rate: int) -> None:
    pcm = np.clip(np.asarray(samples) * 32767.0, -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(rate)
        w.writeframes(pcm.tobytes())


def utterance_features(utt: Utterance, config: FrontendConfig, root: Path | None = None) -> np.ndarray:
    """Features for one utterance: cache file if present, else wav + logmel."""
    def _resolve(p):
        p = Path(p)
        return p if p.is_absolute() or root is None else root / p

    if utt.feats is not None:
        return read_feat(_resolve(utt.feats))
    if utt.audio is not None:
        samples, rate = read_wav(_resolve(utt.audio))
        return compute_logmel(samples, rate, config).frames
    raise MissingAudio(utt.id)
