"""Parameter vectors, FedAvg, inter-client distance and local client training."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .. import numerics as nx
from ..fusion import Batch, ForwardOut, ModelConfig, as_tensors, forward_batch


class ProtocolError(ValueError):
    """Parameter layouts or argument lists that cannot be combined."""


class DivergenceError(FloatingPointError):
    def __init__(self, msg: str, round_idx: int | None = None, client_id: int | None = None):
        super().__init__(msg)
        self.round_idx = round_idx
        self.client_id = client_id
        self.partial_reports: list = []


@dataclass(frozen=True)
class ParamVector:
    """All model parameters flattened in a fixed, named segment order."""

    data: np.ndarray
    layout: tuple[tuple[str, tuple[int, ...]], ...]

    @classmethod
    def from_params(cls, params: dict[str, np.ndarray]) -> ParamVector:
        layout = tuple((k, tuple(v.shape)) for k, v in params.items())
        data = np.concatenate([np.ravel(v) for v in params.values()]) if params else np.zeros(0)
        return cls(data.astype(np.float64), layout)

    def to_params(self) -> dict[str, np.ndarray]:
        out, i = {}, 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            out[name] = self.data[i:i + n].reshape(shape).copy()
            i += n
        return out

    def __len__(self) -> int:
        return self.data.size

    def check_layout(self, other: ParamVector) -> None:
        if self.layout != other.layout:
            raise ProtocolError("parameter layouts differ")


def fedavg(params: Sequence[ParamVector], weights: Sequence[float] | None = None) -> ParamVector:
    """Weighted mean of parameter vectors with weights normalized to sum 1."""
    if not params:
        raise ProtocolError("fedavg needs at least one parameter vector")
    for p in params[1:]:
        params[0].check_layout(p)
    if weights is None:
        weights = np.ones(len(params))
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(params),):
        raise ProtocolError("one weight per parameter vector")
    if np.any(w < 0) or w.sum() <= 0:
        raise ProtocolError("weights must be non-negative with positive sum")
    w = w / w.sum()
    acc = np.zeros_like(params[0].data)
    for wi, p in zip(w, params):
        acc += wi * p.data
    return ParamVector(acc, params[0].layout)


def mean_pairwise_l2(params: Sequence[ParamVector]) -> float:
    if len(params) < 2:
        raise ProtocolError("mean pairwise distance needs at least two vectors")
    dists = [float(np.linalg.norm(a.data - b.data)) for a, b in itertools.combinations(params, 2)]
    return float(np.mean(dists))


@dataclass(frozen=True)
class TrainSpec:
    mask: str = "isolated"
    local_epochs: int = 1
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.01
    optimizer: str = "adamw"


# An extra loss term: (param tensors, batch, forward output) -> scalar Tensor or None.
ExtraLoss = Callable[[dict, Batch, ForwardOut], "nx.Tensor | None"]


def make_optimizer(params: dict[str, np.ndarray], spec: TrainSpec):
    if spec.optimizer == "adamw":
        return nx.AdamW(params, lr=spec.lr, weight_decay=spec.weight_decay)
    if spec.optimizer == "sgd":
        return nx.SGD(params, lr=spec.lr)
    raise ValueError(f"unknown optimizer {spec.optimizer!r}")


def local_train(start: ParamVector, data: Batch, cfg: ModelConfig, spec: TrainSpec,
                rng: np.random.Generator, extra_loss: ExtraLoss | None = None,
                full_batch: bool = False) -> tuple[ParamVector, float]:
    """Minibatch training on one client's data from a snapshot.

    Returns the updated parameters and the mean batch loss (task loss plus any
    extra term).  ``start`` is never modified.
    """
    if len(data) == 0:
        raise ValueError("empty client shard")
    params = start.to_params()
    opt = make_optimizer(params, spec)
    losses = []
    for _ in range(spec.local_epochs):
        order = np.arange(len(data)) if full_batch else rng.permutation(len(data))
        bs = len(data) if full_batch else spec.batch_size
        for s in range(0, len(data), bs):
            mb = data.take(order[s:s + bs])
            P = as_tensors(params, requires_grad=True)
            out = forward_batch(P, mb, cfg, spec.mask)
            loss = nx.bce_with_logits(out.logits, mb.labels)
            if extra_loss is not None:
                term = extra_loss(P, mb, out)
                if term is not None:
                    loss = loss + term
            if not np.isfinite(loss.data):
                raise DivergenceError("non-finite training loss")
            loss.backward()
            opt.step({k: t.grad for k, t in P.items() if t.grad is not None})
            losses.append(float(loss.data))
    mean_loss = float(np.mean(losses)) if losses else float("nan")
    return ParamVector.from_params(params), mean_loss
