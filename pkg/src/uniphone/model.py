"""Conformer encoder, Transformer decoder and CTC projection head.

The encoder front is a 2-layer strided CNN (stride 2 each, so time is
subsampled by 4: T' = ceil(T/4)), followed by conformer blocks in macaron
layout: half-FFN, self-attention with a clipped relative-position bias,
depthwise-convolution module, half-FFN, layer norm. The decoder is a pre-LN
Transformer with sinusoidal absolute positions and an incremental
key/value cache for stepwise decoding.

Padding discipline: padded frames are zeroed before every strided or
depthwise convolution and excluded from attention via key masks, so each
utterance's outputs are independent of how much padding its batch carries.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, asdict, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import BadConfig, PrefixTooLong, ShapeMismatch
from .phoneset import SOS_EOS_ID

POSENC_SCHEME = "sinusoid-in+relbias-enc/sinusoid-dec"


@dataclass(frozen=True)
class ArchConfig:
    vocab_size_out: int
    vocab_size_ctc: int
    num_mels: int = 80
    enc_layers: int = 18
    dec_layers: int = 2
    heads: int = 4
    d_model: int = 768
    d_ff: int = 2048
    conv_kernel: int = 31
    subsample_cnn_layers: int = 2
    subsample_stride: int = 2
    subsample_kernel: int = 3
    dropout_p: float = 0.1
    rel_pos_max: int = 64
    max_decode_len: int = 512

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise BadConfig("d_model must be divisible by heads")
        if self.conv_kernel % 2 != 1:
            raise BadConfig("conv_kernel must be odd")
        if min(self.vocab_size_out, self.vocab_size_ctc) < 5:
            raise BadConfig("vocabulary must hold the 4 specials plus payload")
        if self.subsample_stride != 2 or self.subsample_cnn_layers != 2:
            raise BadConfig("only the 2-layer stride-2 subsampler is supported")

    @classmethod
    def desk(cls, vocab_size_out: int, vocab_size_ctc: int, num_mels: int = 20, **over) -> "ArchConfig":
        """Small profile used by the test suite and the synthetic pipeline."""
        base = dict(
            enc_layers=2, dec_layers=2, heads=2, d_model=64, d_ff=128,
            conv_kernel=7, dropout_p=0.0, rel_pos_max=32, max_decode_len=128,
        )
        base.update(over)
        return cls(vocab_size_out=vocab_size_out, vocab_size_ctc=vocab_size_ctc,
                   num_mels=num_mels, **base)

    def fingerprint(self) -> str:
        blob = json.dumps({**asdict(self), "posenc": POSENC_SCHEME}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


# --- parameters ---------------------------------------------------------------

def _attn_spec(prefix: str, d: int):
    spec = [(f"{prefix}.ln.gain", (d,), "ones"), (f"{prefix}.ln.bias", (d,), "zeros")]
    for w in ("wq", "wk", "wv", "wo"):
        spec.append((f"{prefix}.{w}.weight", (d, d), "glorot"))
        spec.append((f"{prefix}.{w}.bias", (d,), "zeros"))
    return spec


def _ffn_spec(prefix: str, d: int, d_ff: int):
    return [
        (f"{prefix}.ln.gain", (d,), "ones"), (f"{prefix}.ln.bias", (d,), "zeros"),
        (f"{prefix}.w1", (d, d_ff), "glorot"), (f"{prefix}.b1", (d_ff,), "zeros"),
        (f"{prefix}.w2", (d_ff, d), "glorot"), (f"{prefix}.b2", (d,), "zeros"),
    ]


def param_spec(cfg: ArchConfig) -> list[tuple[str, tuple, str]]:
    """(name, shape, init kind) for every tensor; the name set and order are a
    pure function of the config (checkpoint compatibility key)."""
    d, k = cfg.d_model, cfg.subsample_kernel
    spec: list[tuple[str, tuple, str]] = []
    in_dim = cfg.num_mels
    for i in range(cfg.subsample_cnn_layers):
        spec.append((f"subsample.l{i}.weight", (k * in_dim, d), "glorot"))
        spec.append((f"subsample.l{i}.bias", (d,), "zeros"))
        in_dim = d
    for b in range(cfg.enc_layers):
        p = f"encoder.b{b}"
        spec += _ffn_spec(f"{p}.ffn1", d, cfg.d_ff)
        spec += _attn_spec(f"{p}.attn", d)
        spec.append((f"{p}.attn.relbias", (2 * cfg.rel_pos_max + 1, cfg.heads), "zeros"))
        spec += [
            (f"{p}.conv.ln.gain", (d,), "ones"), (f"{p}.conv.ln.bias", (d,), "zeros"),
            (f"{p}.conv.pw1.weight", (d, 2 * d), "glorot"), (f"{p}.conv.pw1.bias", (2 * d,), "zeros"),
            (f"{p}.conv.dw.weight", (cfg.conv_kernel, d), "dwconv"),
            (f"{p}.conv.norm.gain", (d,), "ones"), (f"{p}.conv.norm.bias", (d,), "zeros"),
            (f"{p}.conv.pw2.weight", (d, d), "glorot"), (f"{p}.conv.pw2.bias", (d,), "zeros"),
        ]
        spec += _ffn_spec(f"{p}.ffn2", d, cfg.d_ff)
        spec += [(f"{p}.out_ln.gain", (d,), "ones"), (f"{p}.out_ln.bias", (d,), "zeros")]
    spec += [("ctc.proj.weight", (d, cfg.vocab_size_ctc), "glorot"),
             ("ctc.proj.bias", (cfg.vocab_size_ctc,), "zeros")]
    spec.append(("decoder.embed.weight", (cfg.vocab_size_out, d), "glorot"))
    for b in range(cfg.dec_layers):
        p = f"decoder.b{b}"
        spec += _attn_spec(f"{p}.self", d)
        spec += _attn_spec(f"{p}.cross", d)
        spec += _ffn_spec(f"{p}.ffn", d, cfg.d_ff)
    spec += [
        ("decoder.out_ln.gain", (d,), "ones"), ("decoder.out_ln.bias", (d,), "zeros"),
        ("decoder.out.weight", (d, cfg.vocab_size_out), "glorot"),
        ("decoder.out.bias", (cfg.vocab_size_out,), "zeros"),
    ]
    return spec


def init_params(cfg: ArchConfig, seed: int, dtype=np.float32) -> dict[str, Tensor]:
    """Glorot-uniform matrices, zero biases, unit norm gains; one rng stream
    drawn in spec order so a seed fixes every tensor."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape, kind in param_spec(cfg):
        if kind == "glorot":
            fan_in, fan_out = shape[0], shape[1]
            lim = math.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-lim, lim, size=shape)
        elif kind == "dwconv":
            lim = math.sqrt(3.0 / shape[0])  # per-channel filter of K taps
            data = rng.uniform(-lim, lim, size=shape)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True)
    return params


def param_count(cfg: ArchConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape, _ in param_spec(cfg))


def encoder_param_names(cfg: ArchConfig) -> list[str]:
    return [n for n, _, _ in param_spec(cfg) if n.startswith(("subsample.", "encoder."))]


def is_encoder_param(name: str) -> bool:
    return name.startswith(("subsample.", "encoder."))


# --- helpers -------------------------------------------------------------------

def subsampled_length(t: int, cfg: ArchConfig | None = None) -> int:
    out = t
    layers = cfg.subsample_cnn_layers if cfg else 2
    for _ in range(layers):
        out = (out + 1) // 2  # ceil(out / 2)
    return out


def _length_mask(lengths: np.ndarray, t: int, dtype) -> np.ndarray:
    return (np.arange(t)[None, :] < np.asarray(lengths)[:, None]).astype(dtype)[:, :, None]


def _sinusoid(max_len: int, d: int, dtype) -> np.ndarray:
    pos = np.arange(max_len)[:, None].astype(np.float64)
    div = np.exp(np.arange(0, d, 2) * (-math.log(10000.0) / d))
    pe = np.zeros((max_len, d))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div)
    return pe.astype(dtype)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return ad.transpose(ad.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def _join_heads(x: Tensor) -> Tensor:
    b, h, t, dk = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, t, h * dk))


def _linear(params, prefix: str, x: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, params[f"{prefix}.weight"]), params[f"{prefix}.bias"])


def _mhsa(params, prefix: str, x: Tensor, kv: Tensor, heads: int,
          mask: np.ndarray | None, rel_bias: Tensor | None = None) -> Tensor:
    q = _split_heads(_linear(params, f"{prefix}.wq", x), heads)
    k = _split_heads(_linear(params, f"{prefix}.wk", kv), heads)
    v = _split_heads(_linear(params, f"{prefix}.wv", kv), heads)
    dk = q.shape[-1]
    kt = ad.transpose(k, (0, 1, 3, 2))
    scores = ad.scale(ad.matmul(q, kt), 1.0 / math.sqrt(dk))
    if rel_bias is not None:
        scores = ad.add(scores, rel_bias)
    if mask is not None:
        scores = ad.add(scores, Tensor(np.where(mask, 0.0, ad.MASK_NEG), dtype=scores.dtype))
    out = ad.matmul(ad.softmax(scores, axis=-1), v)
    return _linear(params, f"{prefix}.wo", _join_heads(out))


def _rel_bias(params, name: str, t: int, rel_max: int) -> Tensor:
    rel = np.clip(np.arange(t)[None, :] - np.arange(t)[:, None], -rel_max, rel_max) + rel_max
    bias = ad.take(params[name], rel, axis=0)        # (T, T, H)
    return ad.transpose(bias, (2, 0, 1))             # (H, T, T), broadcast over batch


def _ffn(params, prefix: str, x: Tensor) -> Tensor:
    h = ad.swish(ad.add(ad.matmul(_ln(params, f"{prefix}.ln", x), params[f"{prefix}.w1"]),
                        params[f"{prefix}.b1"]))
    return ad.add(ad.matmul(h, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def _ln(params, prefix: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, params[f"{prefix}.gain"], params[f"{prefix}.bias"])


# --- encoder -------------------------------------------------------------------

def _subsample_layer(params, i: int, x: Tensor, lengths: np.ndarray, k: int) -> tuple[Tensor, np.ndarray]:
    b, t, f = x.shape
    p = k // 2
    t_out = (t - 1) // 2 + 1
    xpad = ad.pad(x, ((0, 0), (p, p), (0, 0)))
    idx = 2 * np.arange(t_out)[:, None] + np.arange(k)[None, :]
    patches = ad.reshape(ad.take(xpad, idx, axis=1), (b, t_out, k * f))
    y = ad.relu(ad.add(ad.matmul(patches, params[f"subsample.l{i}.weight"]),
                       params[f"subsample.l{i}.bias"]))
    new_lengths = (lengths - 1) // 2 + 1
    return ad.mul(y, Tensor(_length_mask(new_lengths, t_out, y.dtype.type))), new_lengths


def _conv_module(params, prefix: str, x: Tensor, zero_mask: np.ndarray) -> Tensor:
    d = x.shape[-1]
    y = _ln(params, f"{prefix}.ln", x)
    y = ad.add(ad.matmul(y, params[f"{prefix}.pw1.weight"]), params[f"{prefix}.pw1.bias"])
    a, b = y[:, :, :d], y[:, :, d:]
    y = ad.mul(a, ad.sigmoid(b))                      # GLU
    y = ad.mul(y, Tensor(zero_mask))                  # keep pad out of the conv taps
    y = ad.conv1d_depthwise(y, params[f"{prefix}.dw.weight"])
    y = ad.swish(_ln(params, f"{prefix}.norm", y))
    return ad.add(ad.matmul(y, params[f"{prefix}.pw2.weight"]), params[f"{prefix}.pw2.bias"])


def _conformer_block(params, prefix: str, x: Tensor, cfg: ArchConfig,
                     key_mask: np.ndarray, zero_mask: np.ndarray, drop) -> Tensor:
    x = ad.add(x, drop(f"{prefix}.ffn1", ad.scale(_ffn(params, f"{prefix}.ffn1", x), 0.5)))
    t = x.shape[1]
    rel = _rel_bias(params, f"{prefix}.attn.relbias", t, cfg.rel_pos_max)
    attn_in = _ln(params, f"{prefix}.attn.ln", x)
    x = ad.add(x, drop(f"{prefix}.attn", _mhsa(params, f"{prefix}.attn", attn_in, attn_in,
                                               cfg.heads, key_mask, rel)))
    x = ad.add(x, drop(f"{prefix}.conv", _conv_module(params, f"{prefix}.conv", x, zero_mask)))
    x = ad.add(x, drop(f"{prefix}.ffn2", ad.scale(_ffn(params, f"{prefix}.ffn2", x), 0.5)))
    return _ln(params, f"{prefix}.out_ln", x)


def _dropout_plan(cfg: ArchConfig, step_seed: int | None):
    if cfg.dropout_p == 0.0 or step_seed is None:
        return lambda name, x: x

    def drop(name: str, x: Tensor) -> Tensor:
        h = hashlib.blake2b(f"{step_seed}:{name}".encode(), digest_size=8).digest()
        return ad.dropout(x, cfg.dropout_p, int.from_bytes(h, "little"))

    return drop


def encode(params: dict, cfg: ArchConfig, feats: Tensor, lengths: np.ndarray,
           step_seed: int | None = None) -> tuple[Tensor, np.ndarray]:
    """Run the full encoder. feats: (B, T, num_mels); lengths per utterance.
    Returns (B, T', d_model) and the subsampled lengths."""
    if feats.ndim != 3 or feats.shape[2] != cfg.num_mels:
        raise ShapeMismatch(f"features {feats.shape} vs num_mels {cfg.num_mels}")
    lengths = np.asarray(lengths, dtype=np.int64)
    if np.any(lengths > feats.shape[1]) or np.any(lengths < 1):
        raise ShapeMismatch("lengths out of range")
    drop = _dropout_plan(cfg, step_seed)
    x = ad.mul(feats, Tensor(_length_mask(lengths, feats.shape[1], feats.dtype.type)))
    for i in range(cfg.subsample_cnn_layers):
        x, lengths = _subsample_layer(params, i, x, lengths, cfg.subsample_kernel)
    t = x.shape[1]
    # absolute positions anchor the decoder's cross-attention; self-attention
    # additionally sees the learned relative bias
    x = ad.add(x, Tensor(_sinusoid(t, cfg.d_model, x.dtype.type)))
    zero_mask = _length_mask(lengths, t, x.dtype.type)
    key_mask = (np.arange(t)[None, :] < lengths[:, None])[:, None, None, :]  # (B,1,1,T')
    for b in range(cfg.enc_layers):
        x = _conformer_block(params, f"encoder.b{b}", x, cfg, key_mask, zero_mask, drop)
    return x, lengths


def ctc_head(params: dict, enc_out: Tensor) -> Tensor:
    """Per-frame log-probabilities over the CTC vocabulary (rows normalized)."""
    return ad.log_softmax(_linear(params, "ctc.proj", enc_out), axis=-1)


# --- decoder (teacher-forced, on tape) -------------------------------------------

def decoder_forward(params: dict, cfg: ArchConfig, enc_out: Tensor, enc_lengths: np.ndarray,
                    ys_in: np.ndarray, step_seed: int | None = None) -> Tensor:
    """Causal decoder over token prefixes ys_in (B, U); returns logits (B, U, V)."""
    if ys_in.ndim != 2:
        raise ShapeMismatch("ys_in must be (B, U)")
    if np.any(ys_in[:, 0] != SOS_EOS_ID):
        raise ShapeMismatch("decoder prefixes must begin with <sos/eos>")
    b, u = ys_in.shape
    drop = _dropout_plan(cfg, step_seed)
    d = cfg.d_model
    emb = ad.embedding_lookup(params["decoder.embed.weight"], ys_in)
    x = ad.add(ad.scale(emb, math.sqrt(d)), Tensor(_sinusoid(u, d, emb.dtype.type)))
    causal = (np.arange(u)[None, :] <= np.arange(u)[:, None])[None, None, :, :]
    s = enc_out.shape[1]
    cross_mask = (np.arange(s)[None, :] < np.asarray(enc_lengths)[:, None])[:, None, None, :]
    for i in range(cfg.dec_layers):
        p = f"decoder.b{i}"
        h = _ln(params, f"{p}.self.ln", x)
        x = ad.add(x, drop(f"{p}.self", _mhsa(params, f"{p}.self", h, h, cfg.heads, causal)))
        h = _ln(params, f"{p}.cross.ln", x)
        x = ad.add(x, drop(f"{p}.cross", _mhsa(params, f"{p}.cross", h, enc_out, cfg.heads, cross_mask)))
        x = ad.add(x, drop(f"{p}.ffn", _ffn(params, f"{p}.ffn", x)))
    return _linear(params, "decoder.out", _ln(params, "decoder.out_ln", x))


# --- decoder (incremental, numpy inference path) ---------------------------------

@dataclass
class DecodeCache:
    """Per-layer key/value memory for stepwise decoding of one utterance."""
    cross_k: list    # (H, S, dk) per layer
    cross_v: list
    self_k: list     # (H, t, dk) per layer, grows with each step
    self_v: list
    steps: int = 0


def _np_linear(params, prefix: str, x: np.ndarray) -> np.ndarray:
    return x @ params[f"{prefix}.weight"] + params[f"{prefix}.bias"]


def _np_ln(params, prefix: str, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * params[f"{prefix}.gain"] + params[f"{prefix}.bias"]


def _np_softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def _np_swish(x: np.ndarray) -> np.ndarray:
    return x * (1.0 / (1.0 + np.exp(-np.clip(x, -60, 60))))


def _np_heads(x: np.ndarray, heads: int) -> np.ndarray:
    t, d = x.shape
    return x.reshape(t, heads, d // heads).transpose(1, 0, 2)


def init_decode_cache(params_np: dict, cfg: ArchConfig, enc_out: np.ndarray) -> DecodeCache:
    cross_k, cross_v = [], []
    for i in range(cfg.dec_layers):
        p = f"decoder.b{i}.cross"
        cross_k.append(_np_heads(_np_linear(params_np, f"{p}.wk", enc_out), cfg.heads))
        cross_v.append(_np_heads(_np_linear(params_np, f"{p}.wv", enc_out), cfg.heads))
    empty = [np.zeros((cfg.heads, 0, cfg.d_model // cfg.heads), enc_out.dtype)
             for _ in range(cfg.dec_layers)]
    return DecodeCache(cross_k, cross_v, [e.copy() for e in empty], [e.copy() for e in empty])


def decode_step(params_np: dict, cfg: ArchConfig, enc_out: np.ndarray,
                prefix_ids, cache: DecodeCache | None = None) -> tuple[np.ndarray, DecodeCache]:
    """Logits over the output vocabulary for the next position after
    ``prefix_ids``. With a cache from previous calls only the newest token is
    processed; cache==None replays the whole prefix. Matches the teacher-forced
    forward pass to float32 rounding."""
    prefix = list(prefix_ids)
    if not prefix or prefix[0] != SOS_EOS_ID:
        raise ShapeMismatch("prefix must begin with <sos/eos>")
    if len(prefix) > cfg.max_decode_len:
        raise PrefixTooLong(f"{len(prefix)} > max_decode_len {cfg.max_decode_len}")
    if cache is None:
        cache = init_decode_cache(params_np, cfg, enc_out)
    if cache.steps >= len(prefix):
        raise ShapeMismatch("cache already ahead of prefix")

    d, heads = cfg.d_model, cfg.heads
    pe = _sinusoid(len(prefix), d, enc_out.dtype.type)
    logits = None
    for pos in range(cache.steps, len(prefix)):
        x = params_np["decoder.embed.weight"][prefix[pos]] * math.sqrt(d) + pe[pos]
        x = x[None, :]  # (1, d)
        for i in range(cfg.dec_layers):
            p = f"decoder.b{i}"
            h = _np_ln(params_np, f"{p}.self.ln", x)
            q = _np_heads(_np_linear(params_np, f"{p}.self.wq", h), heads)
            cache.self_k[i] = np.concatenate(
                [cache.self_k[i], _np_heads(_np_linear(params_np, f"{p}.self.wk", h), heads)], axis=1)
            cache.self_v[i] = np.concatenate(
                [cache.self_v[i], _np_heads(_np_linear(params_np, f"{p}.self.wv", h), heads)], axis=1)
            att = _np_softmax(q @ cache.self_k[i].swapaxes(1, 2) / math.sqrt(d // heads))
            y = (att @ cache.self_v[i]).transpose(1, 0, 2).reshape(1, d)
            x = x + _np_linear(params_np, f"{p}.self.wo", y)
            h = _np_ln(params_np, f"{p}.cross.ln", x)
            q = _np_heads(_np_linear(params_np, f"{p}.cross.wq", h), heads)
            att = _np_softmax(q @ cache.cross_k[i].swapaxes(1, 2) / math.sqrt(d // heads))
            y = (att @ cache.cross_v[i]).transpose(1, 0, 2).reshape(1, d)
            x = x + _np_linear(params_np, f"{p}.cross.wo", y)
            h = _np_ln(params_np, f"{p}.ffn.ln", x)
            hh = _np_swish(_np_linear_raw(params_np[f"{p}.ffn.w1"], params_np[f"{p}.ffn.b1"], h))
            x = x + _np_linear_raw(params_np[f"{p}.ffn.w2"], params_np[f"{p}.ffn.b2"], hh)
        cache.steps += 1
        logits = _np_linear(params_np, "decoder.out", _np_ln(params_np, "decoder.out_ln", x))
    return logits[0], cache


def _np_linear_raw(w: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    return x @ w + b


def encode_numpy(params_np: dict, cfg: ArchConfig, feats: np.ndarray) -> np.ndarray:
    """Inference-only encoder for a single utterance; returns (T', d_model)."""
    tens = {k: Tensor(v) for k, v in params_np.items()}
    out, lengths = encode(tens, cfg, Tensor(feats[None, :, :]), np.array([feats.shape[0]]))
    return out.data[0, : int(lengths[0])]
