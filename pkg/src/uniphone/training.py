"""Joint CTC/attention training: losses, schedule, optimizer, epoch loop.

The CTC loss runs a log-space forward-backward over the blank-interleaved
label sequence in float64 and enters the tape as a single hand-differentiated
node. The attention branch is label-smoothed cross-entropy over non-pad
positions. The learning rate ramps linearly to its peak at ``warmup_steps``
and then decays with 1/sqrt(step).
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import model as M
from .autodiff import Tensor
from .checkpoint import Checkpoint
from .errors import (
    BadConfig,
    BadLabel,
    BadStep,
    FingerprintMismatch,
    NoTrainableData,
    ShapeMismatch,
    TargetTooLong,
)
from .phoneset import BLANK_ID, PAD_ID, SOS_EOS_ID

log = logging.getLogger("uniphone.training")

NEG_INF = -np.inf


@dataclass
class TrainConfig:
    ctc_weight: float = 0.1
    label_smoothing: float = 0.1
    peak_lr: float = 1e-3
    warmup_steps: int = 2000
    epochs: int = 60
    average_last: int = 10
    batch_frames: int = 2500
    grad_clip: float = 5.0
    seed: int = 0
    constant_lr: float | None = None  # set for adaptation: no warmup, no decay

    def __post_init__(self):
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise BadConfig(f"ctc_weight {self.ctc_weight} outside [0, 1]")
        if self.warmup_steps < 1:
            raise BadConfig("warmup_steps must be >= 1")
        if self.epochs < 0:
            raise BadConfig("epochs must be >= 0")
        if self.epochs > 0 and not 1 <= self.average_last <= self.epochs:
            raise BadConfig("average_last must be in [1, epochs]")


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from a mixed tuple (global seed, tags, step...)."""
    h = hashlib.blake2b(":".join(str(p) for p in parts).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little") >> 1


# --- CTC ------------------------------------------------------------------------

def _ctc_check(T: int, V: int, targets, blank: int):
    targets = list(targets)
    for t in targets:
        if t == blank or not 0 <= t < V:
            raise BadLabel(f"target id {t} invalid for blank={blank}, V={V}")
    repeats = sum(1 for a, b in zip(targets, targets[1:]) if a == b)
    if len(targets) + repeats > T:
        raise TargetTooLong(
            f"target of {len(targets)} labels ({repeats} repeats) cannot align in {T} frames")
    return targets


def ctc_loss(log_probs: np.ndarray, targets, blank: int = BLANK_ID) -> tuple[float, np.ndarray]:
    """Negative log-likelihood and gradient w.r.t. the log-probability matrix.

    log_probs: (T, V), rows assumed normalized. The gradient treats the matrix
    entries as free variables (matching a finite-difference probe on them).
    Internals run in float64 regardless of input dtype.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    if lp.ndim != 2:
        raise ShapeMismatch("log_probs must be (T, V)")
    T, V = lp.shape
    targets = _ctc_check(T, V, targets, blank)
    ext = [blank]
    for t in targets:
        ext += [t, blank]
    S = len(ext)
    ext_arr = np.array(ext)

    # forward variables include the emission at their own frame
    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = lp[0, blank]
    if S > 1:
        alpha[0, 1] = lp[0, ext[1]]
    skip_ok = np.zeros(S, dtype=bool)
    skip_ok[2:] = (ext_arr[2:] != blank) & (ext_arr[2:] != ext_arr[:-2])
    for t in range(1, T):
        stay = alpha[t - 1]
        prev = np.full(S, NEG_INF)
        prev[1:] = alpha[t - 1, :-1]
        skip = np.full(S, NEG_INF)
        if S > 2:
            skip[2:] = np.where(skip_ok[2:], alpha[t - 1, :-2], NEG_INF)
        alpha[t] = _lse3(stay, prev, skip) + lp[t, ext_arr]

    loglik = _lse3(alpha[T - 1, S - 1],
                   alpha[T - 1, S - 2] if S > 1 else NEG_INF, NEG_INF)

    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = lp[T - 1, ext[S - 1]]
    if S > 1:
        beta[T - 1, S - 2] = lp[T - 1, ext[S - 2]]
    skip_fw = np.zeros(S, dtype=bool)
    skip_fw[:-2] = (ext_arr[:-2] != blank) & (ext_arr[:-2] != ext_arr[2:])
    for t in range(T - 2, -1, -1):
        stay = beta[t + 1]
        nxt = np.full(S, NEG_INF)
        nxt[:-1] = beta[t + 1, 1:]
        skip = np.full(S, NEG_INF)
        if S > 2:
            skip[:-2] = np.where(skip_fw[:-2], beta[t + 1, 2:], NEG_INF)
        beta[t] = _lse3(stay, nxt, skip) + lp[t, ext_arr]

    # occupancy gamma double-counts the emission once: alpha + beta - lp
    grad = np.zeros_like(lp)
    ab = alpha + beta
    for k in np.unique(ext_arr):
        cols = ab[:, ext_arr == k]
        m = cols.max(axis=1)
        good = m > NEG_INF
        tot = np.full(T, NEG_INF)
        tot[good] = m[good] + np.log(np.exp(cols[good] - m[good, None]).sum(axis=1))
        grad[:, k] = -np.exp(tot - lp[:, k] - loglik)
    return float(-loglik), grad


def _lse3(a, b, c):
    stack = np.stack(np.broadcast_arrays(a, b, c)).astype(np.float64)
    m = stack.max(axis=0)
    safe_m = np.where(np.isneginf(m), 0.0, m)
    with np.errstate(divide="ignore"):
        out = safe_m + np.log(np.exp(stack - safe_m).sum(axis=0))
    return np.where(np.isneginf(m), NEG_INF, out)


def ctc_loss_node(log_probs: Tensor, targets, blank: int = BLANK_ID) -> Tensor:
    """CTC loss as a tape node; gradient flows into the log-prob tensor."""
    nll, grad = ctc_loss(log_probs.data, targets, blank)
    g32 = grad.astype(log_probs.dtype)
    return ad.apply_custom("ctc_loss", (log_probs,),
                           np.asarray(nll, dtype=log_probs.dtype),
                           lambda g: (g * g32,))


# --- attention loss ----------------------------------------------------------------

def attention_loss(decoder_logits: Tensor, target_ids: np.ndarray,
                   smoothing: float = 0.1, pad_id: int = PAD_ID) -> Tensor:
    """Label-smoothed cross-entropy averaged over non-pad positions:
    (1-eps) * NLL(target) + eps * cross-entropy against the uniform
    distribution over the full vocabulary."""
    b, u, v = decoder_logits.shape
    target_ids = np.asarray(target_ids)
    if target_ids.shape != (b, u):
        raise ShapeMismatch(f"targets {target_ids.shape} vs logits {decoder_logits.shape}")
    mask = (target_ids != pad_id)
    n = int(mask.sum())
    if n == 0:
        raise ShapeMismatch("all target positions are padding")
    q = np.full((b, u, v), smoothing / v, dtype=np.float64)
    safe = np.where(mask, target_ids, 0)
    rows = np.repeat(np.arange(b), u).reshape(b, u)
    cols = np.tile(np.arange(u), b).reshape(b, u)
    q[rows, cols, safe] += 1.0 - smoothing
    q *= mask[:, :, None]
    logp = ad.log_softmax(decoder_logits, axis=-1)
    picked = ad.mul(logp, Tensor(q.astype(logp.dtype.type)))
    return ad.scale(ad.sum_(picked), -1.0 / n)


def joint_loss(ctc: Tensor, att: Tensor, lam: float) -> Tensor:
    return ad.add(ad.scale(ctc, lam), ad.scale(att, 1.0 - lam))


# --- schedule and optimizer ----------------------------------------------------------

def lr_at(step: int, peak: float, warmup: int) -> float:
    """Linear ramp to ``peak`` at step == warmup, then 1/sqrt(step) decay."""
    if step < 1:
        raise BadStep(f"step must be >= 1, got {step}")
    return peak * min(step / warmup, math.sqrt(warmup / step))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def init_optimizer(params: dict[str, Tensor]) -> OptimizerState:
    return OptimizerState(
        m={k: np.zeros_like(p.data) for k, p in params.items()},
        v={k: np.zeros_like(p.data) for k, p in params.items()},
    )


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: OptimizerState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"{name}: grad {g.shape} vs param {p.data.shape}")
        m = state.m[name]
        v = state.v[name]
        m += (1 - beta1) * (g - m)
        v += (1 - beta2) * (g * g - v)
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        s = max_norm / total
        for g in grads.values():
            g *= s
    return total


# --- checkpoint averaging --------------------------------------------------------------

def average_checkpoints(checkpoints: list[Checkpoint]) -> Checkpoint:
    """Elementwise mean of parameters; architectures must match exactly."""
    if not checkpoints:
        raise BadConfig("no checkpoints to average")
    first = checkpoints[0]
    for c in checkpoints[1:]:
        if c.fingerprint != first.fingerprint:
            raise FingerprintMismatch("cannot average checkpoints of different architectures")
        if c.vocab.sha256() != first.vocab.sha256():
            raise FingerprintMismatch("cannot average checkpoints over different vocabularies")
    avg = {}
    for name in first.params:
        acc = np.zeros(first.params[name].shape, dtype=np.float64)
        for c in checkpoints:
            acc += c.params[name]
        avg[name] = (acc / len(checkpoints)).astype(np.float32)
    epochs = [p.get("epoch") for c in checkpoints for p in c.provenance[-1:]]
    prov = [dict(r) for r in first.provenance]
    if prov:
        prov[-1].pop("epoch", None)
        prov[-1]["averaged_epochs"] = epochs
    return Checkpoint(avg, first.arch, first.vocab, prov, first.frontend_hash, dict(first.seeds))


# --- epoch loop ----------------------------------------------------------------------

@dataclass
class TrainItem:
    utt_id: str
    feats: np.ndarray     # (T, num_mels) float32
    targets: list[int]


@dataclass
class TrainResult:
    per_epoch: list[Checkpoint]
    final: Checkpoint
    metrics: list[dict]
    skipped: int


def _feasible(item: TrainItem, cfg: M.ArchConfig) -> bool:
    if not item.targets:
        return False
    t_sub = M.subsampled_length(item.feats.shape[0], cfg)
    repeats = sum(1 for a, b in zip(item.targets, item.targets[1:]) if a == b)
    if len(item.targets) + repeats > t_sub:
        return False
    return len(item.targets) + 2 <= cfg.max_decode_len


def _make_batches(items: list[TrainItem], batch_frames: int) -> list[list[int]]:
    order = sorted(range(len(items)), key=lambda i: (-items[i].feats.shape[0], items[i].utt_id))
    batches: list[list[int]] = []
    cur: list[int] = []
    cur_max = 0
    for i in order:
        t = items[i].feats.shape[0]
        new_max = max(cur_max, t)
        if cur and new_max * (len(cur) + 1) > batch_frames:
            batches.append(cur)
            cur, cur_max = [i], t
        else:
            cur.append(i)
            cur_max = new_max
    if cur:
        batches.append(cur)
    return batches


def _batch_arrays(items: list[TrainItem], idxs: list[int], dtype=np.float32):
    feats = [items[i].feats for i in idxs]
    lengths = np.array([f.shape[0] for f in feats], dtype=np.int64)
    tmax = int(lengths.max())
    fdim = feats[0].shape[1]
    padded = np.zeros((len(idxs), tmax, fdim), dtype=dtype)
    for j, f in enumerate(feats):
        padded[j, : f.shape[0]] = f
    targets = [items[i].targets for i in idxs]
    umax = max(len(t) for t in targets) + 1
    ys_in = np.full((len(idxs), umax), PAD_ID, dtype=np.int64)
    ys_out = np.full((len(idxs), umax), PAD_ID, dtype=np.int64)
    ys_in[:, 0] = SOS_EOS_ID
    for j, t in enumerate(targets):
        ys_in[j, 1 : len(t) + 1] = t
        ys_out[j, : len(t)] = t
        ys_out[j, len(t)] = SOS_EOS_ID
    return padded, lengths, targets, ys_in, ys_out


def _batch_losses(params, arch, batch, tcfg: TrainConfig, step_seed):
    padded, lengths, targets, ys_in, ys_out = batch
    enc_out, enc_lens = M.encode(params, arch, Tensor(padded), lengths, step_seed)
    logp = M.ctc_head(params, enc_out)
    ctc_terms = []
    for j, t in enumerate(targets):
        lp_j = logp[j, : int(enc_lens[j]), :]
        ctc_terms.append(ctc_loss_node(lp_j, t))
    ctc_sum = ctc_terms[0]
    for term in ctc_terms[1:]:
        ctc_sum = ad.add(ctc_sum, term)
    ctc_mean = ad.scale(ctc_sum, 1.0 / len(targets))
    logits = M.decoder_forward(params, arch, enc_out, enc_lens, ys_in, step_seed)
    att = attention_loss(logits, ys_out, tcfg.label_smoothing)
    joint = joint_loss(ctc_mean, att, tcfg.ctc_weight)
    return ctc_mean, att, joint


def train_loop(init: Checkpoint, items: list[TrainItem], dev_items: list[TrainItem] | None,
               tcfg: TrainConfig, stage_record: dict) -> TrainResult:
    """Run the full recipe and return per-epoch checkpoints, the averaged
    final checkpoint, and the metrics log."""
    arch = init.arch
    usable = [it for it in items if _feasible(it, arch)]
    skipped = len(items) - len(usable)
    if skipped:
        log.warning("skipped %d/%d utterances violating the CTC length precondition",
                    skipped, len(items))
    if tcfg.epochs > 0 and not usable:
        raise NoTrainableData("no utterances satisfy the loss preconditions")
    dev_usable = [it for it in (dev_items or []) if _feasible(it, arch)]

    if tcfg.epochs == 0:
        final = init.with_provenance({**stage_record, "epochs": 0})
        return TrainResult([], final, [], skipped)

    params = {k: Tensor(v.copy(), requires_grad=True) for k, v in init.params.items()}
    opt = init_optimizer(params)
    batches = _make_batches(usable, tcfg.batch_frames)
    metrics: list[dict] = []
    per_epoch: list[Checkpoint] = []
    stage = stage_record.get("stage", "train")
    step = 0

    for epoch in range(1, tcfg.epochs + 1):
        rng = np.random.default_rng(derive_seed(tcfg.seed, "order", epoch))
        for bi in rng.permutation(len(batches)):
            step += 1
            batch = _batch_arrays(usable, batches[int(bi)])
            seed = derive_seed(tcfg.seed, "dropout", step) if arch.dropout_p > 0 else None
            for p in params.values():
                p.zero_grad()
            with ad.Tape() as tape:
                ctc_mean, att, joint = _batch_losses(params, arch, batch, tcfg, seed)
                tape.backward(joint)
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            clip_global_norm(grads, tcfg.grad_clip)
            lr = tcfg.constant_lr if tcfg.constant_lr is not None else lr_at(
                step, tcfg.peak_lr, tcfg.warmup_steps)
            adam_step(params, grads, opt, lr)
            metrics.append({
                "stage": stage, "epoch": epoch, "step": step, "lr": lr,
                "loss_ctc": float(ctc_mean.data), "loss_att": float(att.data),
                "loss_joint": float(joint.data),
            })
        entry = {"stage": stage, "epoch": epoch, "step": step}
        if dev_usable:
            entry["dev_loss"] = evaluate_loss(params, arch, dev_usable, tcfg)
        metrics.append(entry)
        snap = {k: p.data.astype(np.float32).copy() for k, p in params.items()}
        per_epoch.append(Checkpoint(snap, arch, init.vocab,
                                    list(init.provenance) + [{**stage_record, "epoch": epoch}],
                                    init.frontend_hash, dict(init.seeds)))

    k = min(tcfg.average_last, len(per_epoch))
    final = average_checkpoints(per_epoch[-k:])
    return TrainResult(per_epoch, final, metrics, skipped)


def evaluate_loss(params: dict[str, Tensor], arch: M.ArchConfig,
                  items: list[TrainItem], tcfg: TrainConfig) -> float:
    """Average joint loss over a dataset without recording gradients."""
    batches = _make_batches(items, tcfg.batch_frames)
    total, n = 0.0, 0
    for idxs in batches:
        batch = _batch_arrays(items, idxs)
        _, _, joint = _batch_losses(params, arch, batch, tcfg, None)
        total += float(joint.data) * len(idxs)
        n += len(idxs)
    return total / max(n, 1)
