"""Synthetic two-modality multilabel data, JSONL ingestion and client partitioning."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numerics import rng_stream

N_CLASSES = 14
NO_FINDING = 13

CLASS_NAMES = (
    "atelectasis", "cardiomegaly", "consolidation", "edema",
    "enlarged_cardiomediastinum", "fracture", "lung_lesion", "lung_opacity",
    "pleural_effusion", "pleural_other", "pneumonia", "pneumothorax",
    "support_devices", "no_finding",
)

# Share of label occurrences per class.  Only the extremes are pinned by the
# reference datasets (MIMIC-CXR: 13.39% .. 1.2%, Open-I: 28.8% .. 1.07%); the
# rest are filled in to normalize.
_MILD = np.array([
    11.60, 10.21, 4.10, 9.70, 3.40, 2.00, 2.60, 13.00,
    12.40, 1.20, 1.20, 3.20, 13.39, 0.0,
])
_SEVERE = np.array([
    5.53, 28.80, 1.50, 1.80, 1.40, 1.60, 2.30, 15.00,
    8.00, 1.20, 1.80, 1.20, 1.07, 0.0,
])


class ClassProfile(str, enum.Enum):
    MILD = "mild"
    SEVERE = "severe"


class Modality(str, enum.Enum):
    MULTIMODAL = "multimodal"
    IMAGE_ONLY = "image_only"
    MULTIMODAL_IMPUTED = "multimodal_imputed"


class ServerModality(str, enum.Enum):
    I = "I"
    T = "T"
    IT = "IT"


class ConfigError(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


def profile_shares(profile: ClassProfile | str) -> np.ndarray:
    """Per-class share of label occurrences for a named imbalance profile."""
    profile = ClassProfile(profile)
    r = _MILD if profile is ClassProfile.MILD else _SEVERE
    # No-finding is whatever remains once the disease shares are fixed.
    r = r.copy()
    if r[:NO_FINDING].sum() >= 100:
        raise ConfigError("profile shares are not normalizable")
    r[NO_FINDING] = 100.0 - r[:NO_FINDING].sum()
    return r / 100.0


@dataclass(frozen=True, eq=False)
class MultimodalSample:
    image_feats: np.ndarray
    text_tokens: tuple[int, ...] | None
    labels: np.ndarray | None
    sample_id: int = -1

    @property
    def has_text(self) -> bool:
        return self.text_tokens is not None

    def strip_text(self) -> MultimodalSample:
        return replace(self, text_tokens=None)

    def primary_label(self) -> int:
        pos = np.flatnonzero(self.labels)
        if pos.size == 0:
            raise ConfigError(f"sample {self.sample_id} has no positive label")
        return int(pos[0])


@dataclass(frozen=True)
class PartitionConfig:
    n_clients: int
    gamma: float
    seed: int
    n_multimodal: int

    def __post_init__(self):
        if self.n_clients < 1:
            raise ConfigError("n_clients must be positive")
        if self.gamma <= 0:
            raise ConfigError("gamma must be positive")
        if not 0 <= self.n_multimodal <= self.n_clients:
            raise ConfigError("multimodal client count out of range")

    @property
    def n_unimodal(self) -> int:
        return self.n_clients - self.n_multimodal


@dataclass
class ClientShard:
    client_id: int
    modality: Modality
    samples: list[MultimodalSample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)


def keyword_tokens(c: int) -> tuple[int, int]:
    return 2 * c, 2 * c + 1


def class_prototypes(K: int, d_v: int, signal: float, domain: int, seed: int) -> np.ndarray:
    """One K x d_v grid per class, supported only at the class's home position.

    Localized support keeps the zero-noise image an exact, position-wise
    encoding of the label set, which the codebook tokenizer relies on.
    ``domain`` shifts both the home positions and the basis vectors.
    """
    rng = rng_stream(seed, "prototypes", domain)
    protos = np.zeros((N_CLASSES, K, d_v))
    for c in range(N_CLASSES):
        v = rng.standard_normal(d_v)
        protos[c, (c + 3 * domain) % K] = signal * v / np.linalg.norm(v)
    return protos


def generate_synthetic(n_samples: int, K: int = 16, d_v: int = 16, vocab: int = 64,
                       N_max: int = 24, class_profile: ClassProfile | str = "severe",
                       seed: int = 0, noise: float = 0.3, signal: float = 1.0,
                       filler_max: int = 6, cooccur: float = 0.1, domain: int = 0,
                       proto_seed: int | None = None) -> list[MultimodalSample]:
    """Draw ``n_samples`` labelled image/text pairs.

    Labels: a primary class from the profile shares, plus with probability
    ``cooccur`` one extra disease class (never alongside no-finding).  Image:
    sum of the active classes' prototype grids plus N(0, noise^2).  Text: two
    keyword tokens per active class in class order, with up to ``filler_max``
    filler tokens scattered between them, truncated to ``N_max``.
    """
    if vocab < 2 * N_CLASSES + 2:
        raise ConfigError(f"vocab must be at least {2 * N_CLASSES + 2}")
    if N_max < 8:
        raise ConfigError("N_max must be at least 8")
    shares = profile_shares(class_profile)
    disease = shares[:NO_FINDING] / shares[:NO_FINDING].sum()
    protos = class_prototypes(K, d_v, signal, domain, seed if proto_seed is None else proto_seed)
    rng = rng_stream(seed, "samples", domain, str(ClassProfile(class_profile).value))
    fillers = np.arange(2 * N_CLASSES, vocab)

    out = []
    for i in range(n_samples):
        labels = np.zeros(N_CLASSES, dtype=np.int8)
        primary = int(rng.choice(N_CLASSES, p=shares))
        labels[primary] = 1
        if primary != NO_FINDING and rng.random() < cooccur:
            p = disease.copy()
            p[primary] = 0.0
            labels[int(rng.choice(NO_FINDING, p=p / p.sum()))] = 1
        active = np.flatnonzero(labels)
        img = protos[active].sum(axis=0)
        if noise > 0:
            img = img + noise * rng.standard_normal((K, d_v))
        toks: list[int] = []
        for c in active:
            toks.extend(keyword_tokens(int(c)))
        if filler_max > 0:
            n_fill = int(rng.integers(0, filler_max + 1))
            for _ in range(n_fill):
                at = int(rng.integers(0, len(toks) + 1))
                toks.insert(at, int(rng.choice(fillers)))
        out.append(MultimodalSample(np.ascontiguousarray(img), tuple(toks[:N_max]), labels, i))
    return out


def dirichlet_partition(samples: Sequence[MultimodalSample], cfg: PartitionConfig,
                        max_retries: int = 50) -> list[ClientShard]:
    """Route samples to clients by primary label with per-class Dir(gamma) proportions.

    The first ``cfg.n_multimodal`` shards keep their text; the rest are image-only.
    """
    n = cfg.n_clients
    if n == 1:
        mod = Modality.MULTIMODAL if cfg.n_multimodal == 1 else Modality.IMAGE_ONLY
        return [_make_shard(0, mod, list(samples))]
    by_class: dict[int, list[int]] = {}
    for idx, s in enumerate(samples):
        by_class.setdefault(s.primary_label(), []).append(idx)

    for attempt in range(max_retries):
        rng = rng_stream(cfg.seed, "partition", attempt)
        buckets: list[list[int]] = [[] for _ in range(n)]
        for c in sorted(by_class):
            idx = np.array(by_class[c])
            rng.shuffle(idx)
            p = rng.dirichlet(np.full(n, cfg.gamma))
            cuts = (np.cumsum(p)[:-1] * len(idx)).astype(int)
            for k, part in enumerate(np.split(idx, cuts)):
                buckets[k].extend(part.tolist())
        if all(buckets):
            break
    else:
        raise ConfigError(f"empty client shard after {max_retries} Dirichlet draws")

    shards = []
    for k, b in enumerate(buckets):
        mod = Modality.MULTIMODAL if k < cfg.n_multimodal else Modality.IMAGE_ONLY
        shards.append(_make_shard(k, mod, [samples[i] for i in sorted(b)]))
    return shards


def _make_shard(cid: int, modality: Modality, samples: list[MultimodalSample]) -> ClientShard:
    if modality is Modality.IMAGE_ONLY:
        samples = [s.strip_text() for s in samples]
    return ClientShard(cid, modality, samples)


def holdout_split(samples: Sequence[MultimodalSample], fraction: float,
                  seed: int, tag: str) -> tuple[list[MultimodalSample], list[MultimodalSample]]:
    n_out = int(round(fraction * len(samples)))
    perm = rng_stream(seed, "holdout", tag).permutation(len(samples))
    out_idx = set(perm[:n_out].tolist())
    keep = [s for i, s in enumerate(samples) if i not in out_idx]
    held = [samples[i] for i in sorted(out_idx)]
    return keep, held


def restrict_modality(s: MultimodalSample, modality: ServerModality | str) -> MultimodalSample:
    modality = ServerModality(modality)
    if modality is ServerModality.I:
        return replace(s, text_tokens=None)
    if modality is ServerModality.T:
        return replace(s, image_feats=np.zeros_like(s.image_feats))
    return s


def holdout_server_split(samples: Sequence[MultimodalSample], fraction: float,
                         modality: ServerModality | str, seed: int):
    """Split off an unlabeled server pool with modalities restricted per setting."""
    if not 0 < fraction < 0.5:
        raise ConfigError("server fraction must lie in (0, 0.5)")
    pool, held = holdout_split(samples, fraction, seed, "server")
    server = [replace(restrict_modality(s, modality), labels=None) for s in held]
    return pool, server


# JSONL ------------------------------------------------------------------------

_FIELDS = {"image_feats", "text_tokens", "labels"}
_SHARD_FIELDS = _FIELDS | {"client_id", "modality"}


def sample_record(s: MultimodalSample) -> dict:
    return {
        "image_feats": s.image_feats.tolist(),
        "text_tokens": None if s.text_tokens is None else list(s.text_tokens),
        "labels": None if s.labels is None else [int(v) for v in s.labels],
    }


def write_jsonl(path, samples: Iterable[MultimodalSample]) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(sample_record(s)) + "\n")


def write_shards_jsonl(path, shards: Iterable[ClientShard]) -> None:
    with open(path, "w") as fh:
        for sh in shards:
            for s in sh.samples:
                rec = sample_record(s)
                rec["client_id"] = sh.client_id
                rec["modality"] = sh.modality.value
                fh.write(json.dumps(rec) + "\n")


def ingest_jsonl(path, allow_shard_fields: bool = False) -> list[MultimodalSample]:
    allowed = _SHARD_FIELDS if allow_shard_fields else _FIELDS
    out: list[MultimodalSample] = []
    shape = None
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(lineno, f"invalid JSON ({e.msg})") from None
        if not isinstance(rec, dict):
            raise ParseError(lineno, "record must be an object")
        unknown = set(rec) - allowed
        if unknown:
            raise ParseError(lineno, f"unknown fields {sorted(unknown)}")
        missing = _FIELDS - set(rec)
        if missing:
            raise ParseError(lineno, f"missing fields {sorted(missing)}")
        grid = rec["image_feats"]
        if not isinstance(grid, list) or not grid or not all(isinstance(r, list) for r in grid):
            raise ParseError(lineno, "image_feats must be a non-empty list of rows")
        if len({len(r) for r in grid}) != 1:
            raise ParseError(lineno, "ragged image_feats grid")
        img = np.asarray(grid, dtype=np.float64)
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise ParseError(lineno, f"image_feats shape {img.shape} differs from {shape}")
        labels = rec["labels"]
        if labels is not None:
            if not isinstance(labels, list) or len(labels) != N_CLASSES:
                raise ParseError(lineno, f"labels must have length {N_CLASSES}")
            if any(v not in (0, 1) for v in labels):
                raise ParseError(lineno, "labels must be 0/1")
            labels = np.asarray(labels, dtype=np.int8)
        toks = rec["text_tokens"]
        if toks is not None:
            if not isinstance(toks, list) or any(not isinstance(t, int) or t < 0 for t in toks):
                raise ParseError(lineno, "text_tokens must be a list of non-negative ints")
            toks = tuple(toks)
        out.append(MultimodalSample(img, toks, labels, len(out)))
    return out
