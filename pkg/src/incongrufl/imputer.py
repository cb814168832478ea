"""Modality imputation: codebook-tokenized images condition a causal text generator.

Images are turned into K discrete codes by nearest-neighbour lookup in a
k-means codebook.  A small causal transformer is trained on
``[<img> codes </img> <txt> tokens </txt>]`` sequences from one multimodal
client and then decodes text for image-only clients greedily.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .datagen import ClientShard, ConfigError, Modality, MultimodalSample
from .fedsim.core import DivergenceError
from .fusion import as_tensors, encode
from .metrics import bleu4
from .numerics import Tensor, rng_stream


# codebook -------------------------------------------------------------------------

@dataclass
class Codebook:
    entries: np.ndarray  # (C, d_v)

    @property
    def size(self) -> int:
        return len(self.entries)


def _sq_dists(x: np.ndarray, entries: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - entries[None, :, :]) ** 2).sum(axis=-1)


def nearest_code(x: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """Index of the closest entry per row; argmin picks the lowest index on ties."""
    return np.argmin(_sq_dists(x, entries), axis=1)


def quantization_error(x: np.ndarray, entries: np.ndarray) -> float:
    return float(_sq_dists(x, entries).min(axis=1).mean())


def fit_codebook(grids: Sequence[np.ndarray] | np.ndarray, C: int = 64, seed: int = 0,
                 iters: int = 25, return_trace: bool = False):
    """k-means (k-means++ seeding, Lloyd iterations) over all grid positions."""
    x = np.concatenate([np.asarray(g).reshape(-1, np.asarray(g).shape[-1]) for g in grids])
    if C < 1:
        raise ConfigError("codebook size must be positive")
    distinct = np.unique(x, axis=0)
    if len(distinct) < C:
        raise ConfigError(f"only {len(distinct)} distinct vectors for a codebook of size {C}")
    if C == 1:
        cb = Codebook(x.mean(axis=0, keepdims=True))
        return (cb, [quantization_error(x, cb.entries)]) if return_trace else cb
    rng = rng_stream(seed, "codebook")
    # k-means++ over distinct vectors keeps seeds from colliding
    centers = [distinct[rng.integers(len(distinct))]]
    d2 = ((distinct - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, C):
        p = d2 / d2.sum()
        c = distinct[rng.choice(len(distinct), p=p)]
        centers.append(c)
        d2 = np.minimum(d2, ((distinct - c) ** 2).sum(axis=1))
    entries = np.array(centers)
    trace = [quantization_error(x, entries)]
    for _ in range(iters):
        assign = nearest_code(x, entries)
        new = entries.copy()
        for k in range(C):
            members = x[assign == k]
            if len(members):
                new[k] = members.mean(axis=0)
        entries = new
        trace.append(quantization_error(x, entries))
        if trace[-2] - trace[-1] <= 1e-12 * max(trace[-2], 1.0):
            break
    cb = Codebook(entries)
    return (cb, trace) if return_trace else cb


def quantize(image_feats: np.ndarray, cb: Codebook) -> np.ndarray:
    if image_feats.shape[-1] != cb.entries.shape[1]:
        raise ValueError("feature width does not match codebook")
    return nearest_code(np.asarray(image_feats, dtype=np.float64), cb.entries)


# sequence model ------------------------------------------------------------------

@dataclass(frozen=True)
class MinConfig:
    codebook_size: int = 64
    text_vocab: int = 64
    K: int = 16
    N_max: int = 24
    width: int = 48
    layers: int = 2
    heads: int = 2
    ffn_mult: int = 2

    @property
    def vocab(self) -> int:
        return self.codebook_size + self.text_vocab + 4

    @property
    def img_start(self) -> int:
        return self.codebook_size + self.text_vocab

    @property
    def img_end(self) -> int:
        return self.img_start + 1

    @property
    def txt_start(self) -> int:
        return self.img_start + 2

    @property
    def txt_end(self) -> int:
        return self.img_start + 3

    @property
    def max_len(self) -> int:
        return self.K + self.N_max + 4


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    ang = pos / (10000 ** (2 * i / d))
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


class MinModel:
    def __init__(self, cfg: MinConfig, params: dict[str, np.ndarray], codebook: Codebook | None = None):
        self.cfg = cfg
        self.params = params
        self.codebook = codebook
        self._pos = sinusoidal_positions(cfg.max_len, cfg.width)

    @classmethod
    def init(cls, cfg: MinConfig, rng: np.random.Generator, codebook: Codebook | None = None) -> MinModel:
        d, h = cfg.width, cfg.ffn_mult * cfg.width
        p = {"tok_emb": rng.standard_normal((cfg.vocab, d)) * 0.5}
        for i in range(cfg.layers):
            p[f"l{i}.ln1.g"] = np.ones(d)
            p[f"l{i}.ln1.b"] = np.zeros(d)
            for name in ("q", "k", "v", "o"):
                p[f"l{i}.attn.{name}"] = rng.standard_normal((d, d)) / np.sqrt(d)
            p[f"l{i}.ln2.g"] = np.ones(d)
            p[f"l{i}.ln2.b"] = np.zeros(d)
            p[f"l{i}.ffn.w1"] = rng.standard_normal((d, h)) / np.sqrt(d)
            p[f"l{i}.ffn.b1"] = np.zeros(h)
            p[f"l{i}.ffn.w2"] = rng.standard_normal((h, d)) / np.sqrt(h)
            p[f"l{i}.ffn.b2"] = np.zeros(d)
        p["ln_f.g"] = np.ones(d)
        p["ln_f.b"] = np.zeros(d)
        p["out.w"] = rng.standard_normal((d, cfg.vocab)) * 1e-3
        p["out.b"] = np.zeros(cfg.vocab)
        return cls(cfg, p, codebook)

    def logits(self, P: dict[str, Tensor], tokens: np.ndarray) -> Tensor:
        """Next-token logits (B, T, V) under a strictly causal mask."""
        T = tokens.shape[1]
        x = nx.embedding(P["tok_emb"], tokens) + self._pos[:T]
        mask = np.triu(np.full((T, T), -np.inf), k=1)
        h, _ = encode(P, x, mask, self.cfg)
        return h @ P["out.w"] + P["out.b"]

    def save(self, path) -> None:
        extra = {} if self.codebook is None else {"__codebook__": self.codebook.entries}
        np.savez(path, __config__=np.array(json.dumps(asdict(self.cfg))), **extra, **self.params)

    @classmethod
    def load(cls, path) -> MinModel:
        with np.load(path) as z:
            cfg = MinConfig(**json.loads(str(z["__config__"])))
            cb = Codebook(z["__codebook__"].copy()) if "__codebook__" in z.files else None
            params = {k: z[k].copy() for k in z.files if not k.startswith("__")}
        return cls(cfg, params, cb)


def build_sequences(codes: Sequence[np.ndarray], texts: Sequence[Sequence[int]],
                    cfg: MinConfig) -> tuple[np.ndarray, np.ndarray]:
    """Token matrix (B, T) padded with the end-of-text id, plus a validity mask."""
    seqs = []
    for c, t in zip(codes, texts):
        t = list(t)[:cfg.N_max]
        seqs.append([cfg.img_start, *(int(v) for v in c), cfg.img_end, cfg.txt_start,
                     *(cfg.codebook_size + int(w) for w in t), cfg.txt_end])
    T = max(len(s) for s in seqs)
    toks = np.full((len(seqs), T), cfg.txt_end, dtype=np.intp)
    valid = np.zeros((len(seqs), T), dtype=bool)
    for i, s in enumerate(seqs):
        toks[i, :len(s)] = s
        valid[i, :len(s)] = True
    return toks, valid


def sequence_loss(model: MinModel, P: dict[str, Tensor], toks: np.ndarray, valid: np.ndarray) -> Tensor:
    """Mean next-token cross-entropy over every real target position (both spans)."""
    inp, tgt = toks[:, :-1], toks[:, 1:]
    w = valid[:, 1:].astype(np.float64)
    lsm = nx.log_softmax_lastdim(model.logits(P, inp))
    B, T = tgt.shape
    picked = lsm[np.arange(B)[:, None], np.arange(T)[None, :], tgt]
    return -(picked * w).sum() * (1.0 / w.sum())


def train_min(samples: Sequence[MultimodalSample], model: MinModel, epochs: int = 30,
              lr: float = 3e-3, batch_size: int = 32, seed: int = 0,
              weight_decay: float = 1e-6) -> tuple[MinModel, list[float]]:
    """Teacher-forced training on one multimodal client's pairs; returns per-epoch losses."""
    if model.codebook is None:
        raise ConfigError("MIN model needs a fitted codebook")
    samples = [s for s in samples if s.text_tokens is not None]
    if not samples:
        raise ConfigError("MIN training needs multimodal samples")
    codes = [quantize(s.image_feats, model.codebook) for s in samples]
    toks, valid = build_sequences(codes, [s.text_tokens for s in samples], model.cfg)
    opt = nx.AdamW(model.params, lr=lr, weight_decay=weight_decay)
    rng = rng_stream(seed, "min-train")
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(samples))
        losses = []
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            P = as_tensors(model.params, requires_grad=True)
            loss = sequence_loss(model, P, toks[idx], valid[idx])
            if not np.isfinite(loss.data):
                raise DivergenceError("MIN training diverged")
            loss.backward()
            opt.step({k: t.grad for k, t in P.items() if t.grad is not None})
            losses.append(float(loss.data))
        history.append(float(np.mean(losses)))
    return model, history


def generate_text(model: MinModel, image_feats: np.ndarray | Sequence[np.ndarray],
                  max_len: int | None = None) -> list[tuple[int, ...]] | tuple[int, ...]:
    """Greedy decoding of text conditioned on quantized images.

    Accepts one (K, d_v) grid or a stack of them.  Decoding is restricted to
    text tokens and the end-of-text marker and stops at that marker or after
    ``max_len`` tokens.
    """
    cfg = model.cfg
    feats = np.asarray(image_feats)
    single = feats.ndim == 2
    if single:
        feats = feats[None]
    max_len = cfg.N_max if max_len is None else max_len
    codes = np.stack([quantize(f, model.codebook) for f in feats])
    B = len(codes)
    prefix = np.concatenate([
        np.full((B, 1), cfg.img_start), codes, np.full((B, 1), cfg.img_end),
        np.full((B, 1), cfg.txt_start)], axis=1).astype(np.intp)
    allowed = np.full(cfg.vocab, -np.inf)
    allowed[cfg.codebook_size:cfg.codebook_size + cfg.text_vocab] = 0.0
    allowed[cfg.txt_end] = 0.0
    P = as_tensors(model.params)
    done = np.zeros(B, dtype=bool)
    out: list[list[int]] = [[] for _ in range(B)]
    seq = prefix
    with nx.no_grad():
        for _ in range(max_len):
            logits = model.logits(P, seq).data[:, -1, :] + allowed
            nxt = np.argmax(logits, axis=1)
            for b in range(B):
                if done[b]:
                    continue
                if nxt[b] == cfg.txt_end:
                    done[b] = True
                else:
                    out[b].append(int(nxt[b]) - cfg.codebook_size)
            if done.all():
                break
            seq = np.concatenate([seq, nxt[:, None]], axis=1)
    res = [tuple(o) for o in out]
    return res[0] if single else res


# federation pre-pass -----------------------------------------------------------------

def build_min(samples: Sequence[MultimodalSample], cfg: MinConfig, epochs: int, seed: int,
              lr: float = 3e-3) -> tuple[MinModel, list[float]]:
    """Fit the codebook and train the generator on one client's multimodal data."""
    cb = fit_codebook([s.image_feats for s in samples], cfg.codebook_size, seed)
    model = MinModel.init(cfg, rng_stream(seed, "min-init"), cb)
    return train_min(samples, model, epochs=epochs, lr=lr, seed=seed)


def impute_federation(shards: Sequence[ClientShard], model: MinModel | None,
                      references: dict[int, tuple[int, ...]] | None = None
                      ) -> tuple[list[ClientShard], list[dict]]:
    """Fill text for every image-only shard; returns new shards and audit records."""
    needs = [sh for sh in shards if sh.modality is Modality.IMAGE_ONLY]
    if needs and model is None:
        raise ConfigError("imputation requested without a trained MIN model")
    audit: list[dict] = []
    out = []
    for sh in shards:
        if sh.modality is not Modality.IMAGE_ONLY:
            out.append(sh)
            continue
        gen = generate_text(model, np.stack([s.image_feats for s in sh.samples]))
        new_samples = []
        for s, g in zip(sh.samples, gen):
            new_samples.append(replace(s, text_tokens=g))
            rec = {"client_id": sh.client_id, "sample_id": s.sample_id,
                   "generated_tokens": list(g), "bleu4_vs_ground_truth_if_available": None}
            if references is not None and s.sample_id in references:
                rec["bleu4_vs_ground_truth_if_available"] = bleu4(g, [references[s.sample_id]])
            audit.append(rec)
        out.append(ClientShard(sh.client_id, Modality.MULTIMODAL_IMPUTED, new_samples))
    return out, audit


def impute_samples(samples: Sequence[MultimodalSample], model: MinModel) -> list[MultimodalSample]:
    """Generate text for the text-free samples of a list, leaving the rest untouched."""
    idx = [i for i, s in enumerate(samples) if s.text_tokens is None]
    out = list(samples)
    if not idx:
        return out
    gen = generate_text(model, np.stack([samples[i].image_feats for i in idx]))
    for i, g in zip(idx, gen):
        out[i] = replace(samples[i], text_tokens=g)
    return out


def write_audit(path, records: Sequence[dict]) -> None:
    Path(path).write_text("".join(json.dumps(r) + "\n" for r in records))
