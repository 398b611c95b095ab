"""Checkpoint container and its binary file format.

Layout: magic "IPAT", u32 format version, length-prefixed JSON metadata
(architecture, vocabulary, provenance chain, frontend hash, seed record),
u32 tensor count, then per tensor: u32 name length, name bytes, u32 rank,
u32 dims, little-endian float32 data. Loading reproduces every tensor
bit-exactly; a fingerprint mismatch is an error, never a warning.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import BadMagic, FingerprintMismatch, IoError, VersionMismatch
from .model import ArchConfig
from .phoneset import Vocabulary

CKPT_MAGIC = b"IPAT"
CKPT_VERSION = 1

STAGE_PRETRAINED = "pretrained"
STAGE_ADAPTED = "adapted"
STAGE_FINETUNED = "finetuned"
STAGE_BASELINE = "baseline"


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    arch: ArchConfig
    vocab: Vocabulary
    provenance: list[dict] = field(default_factory=list)
    frontend_hash: str = ""
    seeds: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        v = len(self.vocab)
        out_w = self.params["decoder.out.bias"].shape[0]
        ctc_w = self.params["ctc.proj.bias"].shape[0]
        if not (v == out_w == ctc_w):
            raise FingerprintMismatch(
                f"vocab size {v} vs head widths out={out_w} ctc={ctc_w}")

    @property
    def fingerprint(self) -> str:
        return self.arch.fingerprint()

    @property
    def stage(self) -> str | None:
        return self.provenance[-1]["stage"] if self.provenance else None

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def with_provenance(self, record: dict) -> "Checkpoint":
        return Checkpoint(self.copy_params(), self.arch, self.vocab,
                          list(self.provenance) + [record], self.frontend_hash,
                          dict(self.seeds))


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise IoError(f"short read: wanted {n} bytes, got {len(buf)}")
    return buf


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    meta = {
        "arch": asdict(ckpt.arch),
        "fingerprint": ckpt.fingerprint,
        "vocab_kind": ckpt.vocab.kind,
        "vocab_entries": list(ckpt.vocab.entries),
        "vocab_sha256": ckpt.vocab.sha256(),
        "provenance": ckpt.provenance,
        "frontend_hash": ckpt.frontend_hash,
        "seeds": ckpt.seeds,
    }
    blob = json.dumps(meta, sort_keys=True, ensure_ascii=False).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(ckpt.params)))
        for name in sorted(ckpt.params):
            arr = np.ascontiguousarray(ckpt.params[name], dtype="<f4")
            enc = name.encode("utf-8")
            f.write(struct.pack("<I", len(enc)))
            f.write(enc)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path, expected_fingerprint: str | None = None) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CKPT_MAGIC:
            raise BadMagic(f"{path}: bad magic {magic!r}")
        version, meta_len = struct.unpack("<II", _read_exact(f, 8))
        if version != CKPT_VERSION:
            raise VersionMismatch(f"{path}: format version {version}, expected {CKPT_VERSION}")
        meta = json.loads(_read_exact(f, meta_len).decode("utf-8"))
        (n_tensors,) = struct.unpack("<I", _read_exact(f, 4))
        params: dict[str, np.ndarray] = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<I", _read_exact(f, 4))
            name = _read_exact(f, name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4))
            dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
            count = int(np.prod(dims)) if dims else 1
            data = _read_exact(f, 4 * count)
            params[name] = np.frombuffer(data, dtype="<f4").reshape(dims).copy()

    arch = ArchConfig(**meta["arch"])
    if arch.fingerprint() != meta["fingerprint"]:
        raise FingerprintMismatch(f"{path}: stored fingerprint does not match architecture")
    if expected_fingerprint is not None and arch.fingerprint() != expected_fingerprint:
        raise FingerprintMismatch(
            f"{path}: checkpoint fingerprint {arch.fingerprint()[:12]}... "
            f"!= expected {expected_fingerprint[:12]}...")
    vocab = Vocabulary(tuple(meta["vocab_entries"]), meta["vocab_kind"])
    if vocab.sha256() != meta["vocab_sha256"]:
        raise FingerprintMismatch(f"{path}: vocabulary hash mismatch")
    return Checkpoint(params, arch, vocab, meta["provenance"],
                      meta["frontend_hash"], meta["seeds"])
