"""Encoder-representation visualization: frame sampling, exact t-SNE, export.

Frame selection depends only on the manifests, the subsampling factor and
the seed, never on model weights, so the same frames can be pushed through
several checkpoints and compared point-for-point. t-SNE is the exact O(n^2)
algorithm with PCA initialization; after the early-exaggeration phase the
step size is backtracked whenever the KL objective would rise, so the logged
late-stage trace is non-increasing by construction.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .checkpoint import Checkpoint
from .errors import BadPerplexity, InsufficientFrames, NonFinite, TooFewPoints
from .frontend import Utterance
from .training import derive_seed

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


@dataclass
class EmbeddingSet:
    matrix: np.ndarray                     # (n, d_model) float32
    labels: list[str]                      # language per row
    provenance: list[tuple[str, str, int]]  # (language, utterance id, frame)
    seed: int

    def __post_init__(self):
        if self.matrix.shape[0] != len(self.labels) or len(self.labels) != len(self.provenance):
            raise ValueError("rows, labels and provenance must align")


def extract_frame_embeddings(ckpt: Checkpoint, manifests: dict[str, list[Utterance]],
                             features: dict[str, np.ndarray], n_per_lang: int,
                             seed: int) -> EmbeddingSet:
    """Encoder outputs for n_per_lang randomly-chosen subsampled frames per
    language. Selection is a pure function of (manifests, subsampling, seed)."""
    rows: list[np.ndarray] = []
    labels: list[str] = []
    provenance: list[tuple[str, str, int]] = []
    for lang in sorted(manifests):
        utts = manifests[lang]
        pool: list[tuple[str, int]] = []
        for u in utts:
            t_sub = M.subsampled_length(features[u.id].shape[0], ckpt.arch)
            pool.extend((u.id, f) for f in range(t_sub))
        if len(pool) < n_per_lang:
            raise InsufficientFrames(lang, len(pool), n_per_lang)
        if n_per_lang == 0:
            continue
        rng = np.random.default_rng(derive_seed(seed, "frames", lang))
        chosen = sorted(rng.choice(len(pool), size=n_per_lang, replace=False).tolist())
        wanted: dict[str, list[int]] = {}
        for c in chosen:
            utt_id, frame = pool[c]
            wanted.setdefault(utt_id, []).append(frame)
        for utt_id in sorted(wanted):
            enc = M.encode_numpy(ckpt.params, ckpt.arch, features[utt_id])
            for frame in wanted[utt_id]:
                rows.append(enc[frame])
                labels.append(lang)
                provenance.append((lang, utt_id, frame))
    matrix = np.stack(rows).astype(np.float32) if rows else np.zeros((0, ckpt.arch.d_model), np.float32)
    return EmbeddingSet(matrix, labels, provenance, seed)


# --- exact t-SNE ----------------------------------------------------------------

@dataclass
class TsneResult:
    points: np.ndarray              # (n, 2)
    kl_trace: list[tuple[int, float]] = field(default_factory=list)


def _pairwise_sq_dists(x: np.ndarray) -> np.ndarray:
    s = (x * x).sum(1)
    d = s[:, None] + s[None, :] - 2.0 * (x @ x.T)
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def _conditional_p(dists_row: np.ndarray, i: int, perplexity: float) -> np.ndarray:
    """Binary search the Gaussian bandwidth so the row entropy hits
    log(perplexity)."""
    target = np.log(perplexity)
    d = np.delete(dists_row, i)
    d = d - d.min()  # nearest neighbour keeps weight 1, so Z >= 1 always
    betamin, betamax = 0.0, np.inf
    beta = 1.0
    p = np.full(d.shape, 1.0 / max(len(d), 1))
    for _ in range(100):
        w = np.exp(-d * beta)
        p = w / w.sum()
        h = -(p * np.log(np.maximum(p, 1e-300))).sum()
        if abs(h - target) < 1e-9:
            break
        if h > target:
            betamin = beta
            beta = beta * 2.0 if np.isinf(betamax) else (beta + betamax) / 2.0
        else:
            betamax = beta
            beta = (beta + betamin) / 2.0
    return np.insert(p, i, 0.0)


def _joint_p(x: np.ndarray, perplexity: float) -> np.ndarray:
    n = x.shape[0]
    dists = _pairwise_sq_dists(x)
    cond = np.stack([_conditional_p(dists[i], i, perplexity) for i in range(n)])
    p = (cond + cond.T) / (2.0 * n)
    return np.maximum(p, 1e-12)


def _q_and_num(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    num = 1.0 / (1.0 + _pairwise_sq_dists(y))
    np.fill_diagonal(num, 0.0)
    q = np.maximum(num / num.sum(), 1e-12)
    return q, num


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    return float((p * np.log(p / q)).sum())


def _grad(p: np.ndarray, q: np.ndarray, num: np.ndarray, y: np.ndarray) -> np.ndarray:
    pq = (p - q) * num
    return 4.0 * (y * pq.sum(1)[:, None] - pq @ y)


def _pca_init(x: np.ndarray, seed: int) -> np.ndarray:
    centered = x - x.mean(0)
    cov = centered.T @ centered
    vals, vecs = np.linalg.eigh(cov)
    comp = vecs[:, np.argsort(vals)[::-1][:2]]
    # deterministic sign: largest-magnitude loading positive
    for j in range(comp.shape[1]):
        k = np.argmax(np.abs(comp[:, j]))
        if comp[k, j] < 0:
            comp[:, j] = -comp[:, j]
    y = centered @ comp
    std = y.std(0)
    std[std == 0] = 1.0
    y = y / std * 1e-4
    return y + np.random.default_rng(seed).normal(0, 1e-6, size=y.shape)


def tsne(matrix: np.ndarray, perplexity: float = 30.0, iterations: int = 500,
         seed: int = 0) -> TsneResult:
    """Exact t-SNE to 2-D. Requires n > 3 * perplexity points."""
    x = np.asarray(matrix, dtype=np.float64)
    if perplexity <= 0:
        raise BadPerplexity(f"perplexity must be positive, got {perplexity}")
    n = x.shape[0]
    if n <= 3 * perplexity:
        raise TooFewPoints(f"{n} points need perplexity < {n / 3:.1f}")
    if not np.all(np.isfinite(x)):
        raise NonFinite("t-SNE input contains NaN/Inf")

    p = _joint_p(x, perplexity)
    y = _pca_init(x, seed)
    exag_until = min(250, max(1, iterations // 2))
    lr = 200.0
    momentum = 0.5
    velocity = np.zeros_like(y)
    trace: list[tuple[int, float]] = []

    p_ex = p * 12.0
    for it in range(1, min(exag_until, iterations) + 1):
        q, num = _q_and_num(y)
        velocity = momentum * velocity - lr * _grad(p_ex, q, num, y)
        y = y + velocity
        y -= y.mean(0)
        if it % 50 == 0:
            trace.append((it, _kl(p, q)))

    # monotone refinement: backtrack the step if KL would increase
    q, num = _q_and_num(y)
    kl_now = _kl(p, q)
    trace.append((min(exag_until, iterations), kl_now))
    step = lr
    for it in range(min(exag_until, iterations) + 1, iterations + 1):
        g = _grad(p, q, num, y)
        for _ in range(20):
            y_try = y - step * g
            y_try = y_try - y_try.mean(0)
            q_try, num_try = _q_and_num(y_try)
            kl_try = _kl(p, q_try)
            if kl_try <= kl_now:
                y, q, num, kl_now = y_try, q_try, num_try, kl_try
                step = min(step * 1.1, 2000.0)
                break
            step *= 0.5
        if it % 25 == 0 or it == iterations:
            trace.append((it, kl_now))
    return TsneResult(y, trace)


# --- exporters -------------------------------------------------------------------

def emit_scatter(points: np.ndarray, labels: list[str], csv_path, svg_path,
                 provenance: list[tuple[str, str, int]] | None = None,
                 meta: dict | None = None) -> None:
    """CSV columns x,y,lang,utt,frame plus a self-contained SVG scatter."""
    points = np.asarray(points)
    if len(points) != len(labels):
        raise ValueError("points and labels must align")
    prov = provenance or [(lab, "", -1) for lab in labels]
    with open(csv_path, "w", encoding="utf-8") as f:
        for k, v in sorted((meta or {}).items()):
            f.write(f"# {k}={v}\n")
        f.write("x,y,lang,utt,frame\n")
        for (x, y), lab, (_, utt, frame) in zip(points, labels, prov):
            f.write(f"{x!r},{y!r},{lab},{utt},{frame}\n")

    langs = sorted(set(labels))
    colors = {lang: PALETTE[i % len(PALETTE)] for i, lang in enumerate(langs)}
    if len(points):
        xmin, ymin = points.min(0)
        xmax, ymax = points.max(0)
        span = max(xmax - xmin, ymax - ymin, 1e-9)
    else:
        xmin = ymin = 0.0
        span = 1.0
    size = 640.0
    pad = 40.0

    def sx(x):
        return pad + (x - xmin) / span * (size - 2 * pad)

    def sy(y):
        return size - pad - (y - ymin) / span * (size - 2 * pad)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size:.0f}" height="{size:.0f}" '
        f'viewBox="0 0 {size:.0f} {size:.0f}">',
        f'<rect width="{size:.0f}" height="{size:.0f}" fill="white"/>',
    ]
    for (x, y), lab in zip(points, labels):
        parts.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="2.2" '
                     f'fill="{colors[lab]}" fill-opacity="0.75"/>')
    for i, lang in enumerate(langs):
        ly = 20 + 18 * i
        parts.append(f'<circle cx="{size - 120:.0f}" cy="{ly}" r="5" fill="{colors[lang]}"/>')
        parts.append(f'<text x="{size - 108:.0f}" y="{ly + 4}" font-family="sans-serif" '
                     f'font-size="13">{lang}</text>')
    parts.append("</svg>")
    with open(svg_path, "w", encoding="utf-8") as f:
        f.write("\n".join(parts) + "\n")
