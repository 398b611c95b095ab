"""Three-stage pipeline: multilingual IPA pretraining, small-learning-rate
adaptation to one target language, and target-language finetuning that keeps
the encoder but reinitializes the decoder over a BPE vocabulary. The
monolingual baseline shares everything except the encoder initialization.

Stage legality is enforced through the provenance chain:
pretrained [-> adapted] -> finetuned, with "baseline" as a root stage.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import model as M
from .bpe import BpeModel, encode as bpe_encode
from .checkpoint import (
    Checkpoint,
    STAGE_ADAPTED,
    STAGE_BASELINE,
    STAGE_FINETUNED,
    STAGE_PRETRAINED,
)
from .errors import (
    BadConfig,
    DataError,
    VocabMissingSymbols,
    WrongParentStage,
)
from .frontend import Utterance
from .phoneset import PhoneInventory, Vocabulary, parse_ipa, union_vocabulary
from .training import TrainConfig, TrainItem, TrainResult, derive_seed, train_loop

log = logging.getLogger("uniphone.transfer")

ADAPT_LR = 5e-5
ADAPT_EPOCHS = 2


@dataclass
class StageConfig:
    """Validated description of one pipeline stage (CLI-facing)."""

    stage: str  # pretrain_ipa | adapt | finetune | baseline
    languages: list[str] = field(default_factory=list)
    target_language: str | None = None
    parent_checkpoint: str | None = None

    def __post_init__(self):
        if self.stage == "pretrain_ipa":
            if not self.languages:
                raise BadConfig("pretraining requires at least one language")
        elif self.stage in ("adapt", "finetune"):
            if not self.parent_checkpoint:
                raise BadConfig(f"{self.stage} requires a parent checkpoint")
            if not self.target_language:
                raise BadConfig(f"{self.stage} requires exactly one target language")
        elif self.stage == "baseline":
            if not self.target_language:
                raise BadConfig("baseline requires a target language")
        else:
            raise BadConfig(f"unknown stage {self.stage!r}")


@dataclass
class StageData:
    """One language's training material with resolved feature matrices."""

    language: str
    train: list[Utterance]
    dev: list[Utterance]
    features: dict[str, np.ndarray]  # utt id -> (T, num_mels) float32

    def feature_dim(self) -> int:
        first = next(iter(self.features.values()), None)
        if first is None:
            raise DataError(f"language {self.language}: no features")
        return first.shape[1]


def build_inventories(data: list[StageData]) -> list[PhoneInventory]:
    invs = []
    for d in data:
        transcripts = [u.ipa for u in d.train + d.dev if u.ipa]
        missing = [u.id for u in d.train + d.dev if not u.ipa]
        if missing:
            raise DataError(
                f"language {d.language}: {len(missing)} utterances lack IPA "
                f"(first: {missing[0]}); run the g2p stage first")
        invs.append(PhoneInventory(d.language, tuple(
            tok for t in transcripts for tok in parse_ipa(t))))
    return invs


def make_ipa_items(utts: list[Utterance], features: dict[str, np.ndarray],
                   vocab: Vocabulary) -> list[TrainItem]:
    items, missing = [], set()
    for u in utts:
        if not u.ipa:
            raise DataError(f"utterance {u.id} lacks IPA transcript")
        toks = [t.text for t in parse_ipa(u.ipa)]
        missing.update(t for t in toks if t not in vocab)
        items.append(TrainItem(u.id, features[u.id], [vocab.id_of(t) for t in toks]))
    if missing:
        raise VocabMissingSymbols(missing)
    return items


def make_bpe_items(utts: list[Utterance], features: dict[str, np.ndarray],
                   model: BpeModel) -> list[TrainItem]:
    return [TrainItem(u.id, features[u.id], bpe_encode(u.text, model)) for u in utts]


def make_arch(profile: dict, vocab_size: int, num_mels: int) -> M.ArchConfig:
    return M.ArchConfig(vocab_size_out=vocab_size, vocab_size_ctc=vocab_size,
                        num_mels=num_mels, **profile)


def pretrain_ipa(data: list[StageData], arch_profile: dict, tcfg: TrainConfig,
                 seed: int, frontend_hash: str = "") -> tuple[Checkpoint, TrainResult]:
    """Pool every language's IPA-transcribed data and train from scratch over
    the union vocabulary."""
    if not data:
        raise BadConfig("pretraining requires at least one language")
    vocab = union_vocabulary(build_inventories(data))
    arch = make_arch(arch_profile, len(vocab), data[0].feature_dim())
    params0 = M.init_params(arch, derive_seed(seed, "init", "pretrain"))
    languages = sorted(d.language for d in data)
    init = Checkpoint({k: v.data for k, v in params0.items()}, arch, vocab,
                      [], frontend_hash, {"global": seed})
    train_items, dev_items = [], []
    for d in data:
        train_items += make_ipa_items(d.train, d.features, vocab)
        dev_items += make_ipa_items(d.dev, d.features, vocab)
    record = {"stage": STAGE_PRETRAINED, "languages": languages, "seed": seed,
              "epochs": tcfg.epochs}
    result = train_loop(init, train_items, dev_items, tcfg, record)
    return result.final, result


def adapt_ipa_model(parent: Checkpoint, data: StageData,
                    lr: float = ADAPT_LR, epochs: int = ADAPT_EPOCHS,
                    tcfg: TrainConfig | None = None, seed: int | None = None
                    ) -> tuple[Checkpoint, TrainResult]:
    """Retrain every parameter on one language's IPA data for a few epochs at
    a small constant learning rate; vocabulary and architecture unchanged."""
    if parent.vocab.kind != "ipa":
        raise WrongParentStage("adaptation requires an IPA-vocabulary parent")
    if parent.stage != STAGE_PRETRAINED:
        raise WrongParentStage(f"adaptation requires a pretrained parent, got {parent.stage!r}")
    base = tcfg or TrainConfig()
    seed = parent.seeds.get("global", 0) if seed is None else seed
    tcfg = replace(base, constant_lr=lr, epochs=epochs,
                   average_last=max(1, min(base.average_last, epochs)) if epochs else 1,
                   seed=derive_seed(seed, "adapt", data.language))
    train_items = make_ipa_items(data.train, data.features, parent.vocab)
    dev_items = make_ipa_items(data.dev, data.features, parent.vocab)
    record = {"stage": STAGE_ADAPTED, "tag": f"{STAGE_ADAPTED}:{data.language}",
              "language": data.language, "lr": lr, "epochs": epochs}
    result = train_loop(parent, train_items, dev_items, tcfg, record)
    return result.final, result


def _transplant_encoder(parent: Checkpoint, arch: M.ArchConfig, decoder_seed: int) -> dict:
    """Fresh full init, then copy every encoder tensor from the parent."""
    fresh = {k: v.data for k, v in M.init_params(arch, decoder_seed).items()}
    for name in fresh:
        if M.is_encoder_param(name):
            fresh[name] = parent.params[name].copy()
    return fresh


def finetune_target(parent: Checkpoint, data: StageData, bpe_model: BpeModel,
                    tcfg: TrainConfig, seed: int) -> tuple[Checkpoint, TrainResult]:
    """Keep the parent encoder, reinitialize the decoder and both output
    heads over the BPE vocabulary, then train the whole model on
    orthographic targets with the standard schedule."""
    if parent.vocab.kind != "ipa":
        raise WrongParentStage("finetuning requires an IPA-vocabulary parent")
    if parent.stage not in (STAGE_PRETRAINED, STAGE_ADAPTED):
        raise WrongParentStage(
            f"finetuning requires a pretrained or adapted parent, got {parent.stage!r}")
    vocab = bpe_model.vocab
    arch = replace(parent.arch, vocab_size_out=len(vocab), vocab_size_ctc=len(vocab))
    decoder_seed = derive_seed(seed, "decoder", data.language)
    params = _transplant_encoder(parent, arch, decoder_seed)
    init = Checkpoint(params, arch, vocab, list(parent.provenance),
                      parent.frontend_hash, {**parent.seeds, "finetune": seed})
    record = {"stage": STAGE_FINETUNED, "tag": f"{STAGE_FINETUNED}:{data.language}",
              "language": data.language, "seed": seed, "decoder_seed": decoder_seed,
              "epochs": tcfg.epochs}
    tcfg = replace(tcfg, seed=derive_seed(seed, "finetune", data.language))
    result = train_loop(init, make_bpe_items(data.train, data.features, bpe_model),
                        make_bpe_items(data.dev, data.features, bpe_model), tcfg, record)
    return result.final, result


def finetune_init_checkpoint(parent: Checkpoint, language: str, bpe_model: BpeModel,
                             seed: int) -> Checkpoint:
    """The step-0 state of finetuning (for contract checks and tests)."""
    vocab = bpe_model.vocab
    arch = replace(parent.arch, vocab_size_out=len(vocab), vocab_size_ctc=len(vocab))
    params = _transplant_encoder(parent, arch, derive_seed(seed, "decoder", language))
    return Checkpoint(params, arch, vocab, list(parent.provenance),
                      parent.frontend_hash, {**parent.seeds, "finetune": seed})


def train_monolingual_baseline(data: StageData, bpe_model: BpeModel, arch_profile: dict,
                               tcfg: TrainConfig, seed: int,
                               frontend_hash: str = "") -> tuple[Checkpoint, TrainResult]:
    """Same architecture and recipe as finetuning, random encoder init."""
    vocab = bpe_model.vocab
    arch = make_arch(arch_profile, len(vocab), data.feature_dim())
    params0 = M.init_params(arch, derive_seed(seed, "decoder", data.language))
    init = Checkpoint({k: v.data for k, v in params0.items()}, arch, vocab,
                      [], frontend_hash, {"global": seed})
    record = {"stage": STAGE_BASELINE, "tag": f"{STAGE_BASELINE}:{data.language}",
              "language": data.language, "seed": seed, "epochs": tcfg.epochs}
    tcfg = replace(tcfg, seed=derive_seed(seed, "baseline", data.language))
    result = train_loop(init, make_bpe_items(data.train, data.features, bpe_model),
                        make_bpe_items(data.dev, data.features, bpe_model), tcfg, record)
    return result.final, result
