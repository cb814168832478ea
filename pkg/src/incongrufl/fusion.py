"""Single-stream multimodal transformer classifier with maskable self-attention.

Input layout per sample is ``[S, v_1..v_K, SEP, w_1..w_N, E]``.  S and SEP
belong to the image group, E to the text group.  Text-free samples carry
zeroed text rows whose keys are masked; E is hidden from the image group,
so the image rows never see the missing modality.
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .datagen import N_CLASSES, MultimodalSample
from .numerics import Tensor

NEG_INF = -np.inf


class MaskKind(str, enum.Enum):
    ISOLATED = "isolated"
    CAUSAL = "causal"
    PARBI = "parbi"
    BI = "bi"


@dataclass(frozen=True)
class ModelConfig:
    K: int = 16
    d_v: int = 16
    vocab: int = 64
    N_max: int = 24
    width: int = 32
    layers: int = 2
    heads: int = 2
    ffn_mult: int = 2
    n_classes: int = N_CLASSES

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")


# masks ------------------------------------------------------------------------

def build_mask(kind: MaskKind | str, K: int, N: int) -> np.ndarray:
    """Additive {0, -inf} mask of shape (K+N+3, K+N+3) for one scheme."""
    kind = MaskKind(kind)
    if K < 1 or N < 0:
        raise ValueError("K must be >= 1 and N >= 0")
    gi = K + 2
    L = K + N + 3
    m = np.zeros((L, L))
    if kind is MaskKind.BI:
        return m
    if kind is MaskKind.ISOLATED:
        m[:gi, gi:] = NEG_INF
        m[gi:, :gi] = NEG_INF
        return m
    # causal and partial-bidirectional share the lower-triangular text block
    tri = np.triu(np.ones((L - gi, L - gi), dtype=bool), k=1)
    m[gi:, gi:][tri] = NEG_INF
    if kind is MaskKind.CAUSAL:
        m[:gi, gi:] = NEG_INF
    return m


@lru_cache(maxsize=64)
def _cached_mask(kind: MaskKind, K: int, N: int) -> np.ndarray:
    m = build_mask(kind, K, N)
    m.setflags(write=False)
    return m


def padding_mask(K: int, n_slots: int, text_len: np.ndarray, has_text: np.ndarray) -> np.ndarray:
    """Per-sample additive key mask (B, L, L) hiding padded text slots.

    Unused text slots are hidden from every query.  When a sample has no text
    at all, E is additionally hidden from the image-group queries.
    """
    B = len(text_len)
    L = K + n_slots + 3
    gi = K + 2
    out = np.zeros((B, L, L))
    slot = np.arange(n_slots)
    pad = slot[None, :] >= np.asarray(text_len)[:, None]
    for b in range(B):
        cols = gi + np.flatnonzero(pad[b])
        out[b][:, cols] = NEG_INF
        if not has_text[b]:
            out[b, :gi, L - 1] = NEG_INF
    return out


# parameters -------------------------------------------------------------------

def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d = cfg.width

    def w(*shape, scale=None):
        scale = (1.0 / np.sqrt(shape[0])) if scale is None else scale
        return rng.standard_normal(shape) * scale

    p: dict[str, np.ndarray] = {
        "visual_proj.w": w(cfg.d_v, d),
        "visual_proj.b": np.zeros(d),
        "loc_emb": w(cfg.K, d, scale=0.1),
        "sem_visual": w(d, scale=0.1),
        "tok_emb": w(cfg.vocab, d, scale=0.5),
        "pos_emb": w(cfg.N_max + 1, d, scale=0.1),
        "sem_text": w(d, scale=0.1),
        "tok_S": w(d, scale=0.5),
        "tok_SEP": w(d, scale=0.5),
        "tok_E": w(d, scale=0.5),
    }
    h = cfg.ffn_mult * d
    for i in range(cfg.layers):
        p[f"l{i}.ln1.g"] = np.ones(d)
        p[f"l{i}.ln1.b"] = np.zeros(d)
        for name in ("q", "k", "v", "o"):
            p[f"l{i}.attn.{name}"] = w(d, d)
        p[f"l{i}.ln2.g"] = np.ones(d)
        p[f"l{i}.ln2.b"] = np.zeros(d)
        p[f"l{i}.ffn.w1"] = w(d, h)
        p[f"l{i}.ffn.b1"] = np.zeros(h)
        p[f"l{i}.ffn.w2"] = w(h, d)
        p[f"l{i}.ffn.b2"] = np.zeros(d)
    p["ln_f.g"] = np.ones(d)
    p["ln_f.b"] = np.zeros(d)
    p["head.w"] = w(d, cfg.n_classes)
    p["head.b"] = np.zeros(cfg.n_classes)
    return p


class FusionModel:
    """Parameter dict plus geometry; forward passes are stateless functions of it."""

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray]):
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator) -> FusionModel:
        return cls(cfg, init_params(cfg, rng))

    def copy(self) -> FusionModel:
        return FusionModel(self.cfg, {k: v.copy() for k, v in self.params.items()})

    def save(self, path) -> None:
        np.savez(path, __config__=np.array(json.dumps(asdict(self.cfg))), **self.params)

    @classmethod
    def load(cls, path) -> FusionModel:
        with np.load(path) as z:
            cfg = ModelConfig(**json.loads(str(z["__config__"])))
            params = {k: z[k].copy() for k in z.files if k != "__config__"}
        return cls(cfg, params)


# batching ----------------------------------------------------------------------

@dataclass
class Batch:
    image: np.ndarray        # (B, K, d_v)
    tokens: np.ndarray       # (B, n_slots) int, zero where padded
    text_len: np.ndarray     # (B,)
    has_text: np.ndarray     # (B,) bool
    labels: np.ndarray | None  # (B, 14) or None

    def __len__(self) -> int:
        return len(self.text_len)

    def take(self, idx) -> Batch:
        return Batch(self.image[idx], self.tokens[idx], self.text_len[idx], self.has_text[idx],
                     None if self.labels is None else self.labels[idx])


def collate(samples: Sequence[MultimodalSample], n_slots: int, vocab: int | None = None) -> Batch:
    B = len(samples)
    image = np.stack([s.image_feats for s in samples]).astype(np.float64)
    tokens = np.zeros((B, n_slots), dtype=np.intp)
    text_len = np.zeros(B, dtype=np.intp)
    has_text = np.zeros(B, dtype=bool)
    for i, s in enumerate(samples):
        if s.text_tokens is None:
            continue
        t = s.text_tokens[:n_slots]
        if vocab is not None and any(tok >= vocab for tok in t):
            raise ValueError(f"token id out of range for vocab {vocab}")
        tokens[i, :len(t)] = t
        text_len[i] = len(t)
        has_text[i] = True
    labels = None
    if all(s.labels is not None for s in samples):
        labels = np.stack([s.labels for s in samples]).astype(np.float64)
    return Batch(image, tokens, text_len, has_text, labels)


def as_tensors(params: dict[str, np.ndarray], requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


# forward ------------------------------------------------------------------------

def embed_batch(P: dict[str, Tensor], batch: Batch, cfg: ModelConfig) -> Tensor:
    """Joint embedding rows (B, K+n_slots+3, d)."""
    B = len(batch)
    d = cfg.width
    n_slots = batch.tokens.shape[1]
    sem_v, sem_t = P["sem_visual"], P["sem_text"]
    v = nx.matmul(batch.image, P["visual_proj.w"]) + P["visual_proj.b"] + P["loc_emb"] + sem_v
    S = nx.reshape(P["tok_S"] + sem_v, (1, 1, d)) * np.ones((B, 1, 1))
    SEP = nx.reshape(P["tok_SEP"] + sem_v, (1, 1, d)) * np.ones((B, 1, 1))
    valid = (np.arange(n_slots)[None, :] < batch.text_len[:, None]).astype(np.float64)
    w = nx.embedding(P["tok_emb"], batch.tokens) + P["pos_emb"][:n_slots] + sem_t
    w = w * valid[:, :, None]
    E = nx.embedding(P["pos_emb"], batch.text_len) + P["tok_E"] + sem_t
    E = nx.reshape(E, (B, 1, d))
    return nx.concat([S, v, SEP, w, E], axis=1)


def embed_joint(sample: MultimodalSample, model: FusionModel) -> tuple[Tensor, int]:
    """Joint embedding of one sample, (N+K+3, d), and its text length N.

    A text-free sample gets N = N_max zero rows in the text slots.
    """
    cfg = model.cfg
    n = cfg.N_max if sample.text_tokens is None else len(sample.text_tokens)
    if sample.text_tokens is not None and n > cfg.N_max:
        raise ValueError(f"text longer than N_max={cfg.N_max}")
    batch = collate([sample], n, vocab=cfg.vocab)
    x = embed_batch(as_tensors(model.params), batch, cfg)
    return x[0], n


def attention(x: Tensor, mask: np.ndarray, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor,
              heads: int, return_weights: bool = False):
    """Multi-head softmax(QK^T/sqrt(d_k) + M) V over the last two axes of ``x``.

    ``x`` is (..., L, d); ``mask`` broadcasts against (..., heads, L, L).
    """
    *lead, L, d = x.shape
    dk = d // heads

    def split(t):
        t = nx.reshape(t, (*lead, L, heads, dk))
        axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        return nx.transpose(t, axes)

    q, k, v = split(x @ wq), split(x @ wk), split(x @ wv)
    kt = nx.transpose(k, tuple(range(len(lead))) + (len(lead), len(lead) + 2, len(lead) + 1))
    scores = (q @ kt) * (1.0 / np.sqrt(dk)) + mask
    weights = nx.softmax_lastdim(scores)
    ctx = weights @ v
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    ctx = nx.reshape(nx.transpose(ctx, axes), (*lead, L, d))
    out = ctx @ wo
    return (out, weights.data) if return_weights else out


def encode(P: dict[str, Tensor], x: Tensor, mask: np.ndarray, cfg: ModelConfig,
           layers: int | None = None, want_maps: bool = False):
    """Pre-LN transformer stack; returns final normalized rows and optional maps."""
    maps = []
    for i in range(cfg.layers if layers is None else layers):
        h = nx.layer_norm(x, P[f"l{i}.ln1.g"], P[f"l{i}.ln1.b"])
        a = attention(h, mask, P[f"l{i}.attn.q"], P[f"l{i}.attn.k"], P[f"l{i}.attn.v"],
                      P[f"l{i}.attn.o"], cfg.heads, return_weights=want_maps)
        if want_maps:
            a, wts = a
            maps.append(wts)
        x = x + a
        h = nx.layer_norm(x, P[f"l{i}.ln2.g"], P[f"l{i}.ln2.b"])
        h = nx.gelu(h @ P[f"l{i}.ffn.w1"] + P[f"l{i}.ffn.b1"])
        x = x + (h @ P[f"l{i}.ffn.w2"] + P[f"l{i}.ffn.b2"])
    x = nx.layer_norm(x, P["ln_f.g"], P["ln_f.b"])
    return x, maps


@dataclass
class ForwardOut:
    logits: Tensor            # (B, 14)
    pooled: Tensor            # (B, d)
    attn_maps: list           # per layer (B, H, L, L) arrays when requested


def full_mask(kind: MaskKind | str, batch: Batch, K: int) -> np.ndarray:
    n_slots = batch.tokens.shape[1]
    base = _cached_mask(MaskKind(kind), K, n_slots)
    pad = padding_mask(K, n_slots, batch.text_len, batch.has_text)
    return (base[None] + pad)[:, None]


def forward_batch(P: dict[str, Tensor], batch: Batch, cfg: ModelConfig, mask_kind: MaskKind | str,
                  want_maps: bool = False) -> ForwardOut:
    """Logits and pooled embedding for a collated batch.

    Pooling averages the S row with the E row when the sample has text and
    takes the S row alone otherwise.
    """
    x = embed_batch(P, batch, cfg)
    mask = full_mask(mask_kind, batch, cfg.K)
    h, maps = encode(P, x, mask, cfg, want_maps=want_maps)
    w_s = np.where(batch.has_text, 0.5, 1.0)[:, None]
    w_e = np.where(batch.has_text, 0.5, 0.0)[:, None]
    pooled = h[:, 0, :] * w_s + h[:, -1, :] * w_e
    logits = pooled @ P["head.w"] + P["head.b"]
    return ForwardOut(logits, pooled, maps)


def forward_classify(model: FusionModel, sample: MultimodalSample, mask_kind: MaskKind | str):
    """Single-sample forward: (logits[14], pooled[d], per-layer (H, L, L) maps)."""
    cfg = model.cfg
    n = cfg.N_max if sample.text_tokens is None else len(sample.text_tokens)
    batch = collate([sample], n, vocab=cfg.vocab)
    out = forward_batch(as_tensors(model.params), batch, cfg, mask_kind, want_maps=True)
    return out.logits[0], out.pooled[0], [m[0] for m in out.attn_maps]


def predict_logits(params: dict[str, np.ndarray], batch: Batch, cfg: ModelConfig,
                   mask_kind: MaskKind | str, chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """No-grad logits and pooled embeddings, chunked over the batch."""
    P = as_tensors(params)
    logits, pooled = [], []
    with nx.no_grad():
        for s in range(0, len(batch), chunk):
            out = forward_batch(P, batch.take(slice(s, s + chunk)), cfg, mask_kind)
            logits.append(out.logits.data)
            pooled.append(out.pooled.data)
    return np.concatenate(logits), np.concatenate(pooled)


def dump_attention_json(maps: list[np.ndarray], out_dir, stem: str) -> list[Path]:
    """Write one JSON file per (layer, head): {layer, head, matrix}."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for li, m in enumerate(maps):
        for hi in range(m.shape[0]):
            p = out_dir / f"{stem}_layer{li}_head{hi}.json"
            p.write_text(json.dumps({"layer": li, "head": hi, "matrix": m[hi].tolist()}))
            paths.append(p)
    return paths
