"""Server-side mitigation on unlabeled server data: FedDF and leave-one-out teachers (LOOT)."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .datagen import ConfigError, ServerModality
from .fedsim.core import ParamVector, fedavg
from .fusion import Batch, ModelConfig, as_tensors, forward_batch


class ServerKind(str, enum.Enum):
    NONE = "none"
    FEDDF = "feddf"
    LOOT = "loot"


@dataclass(frozen=True)
class DistillSpec:
    steps: int = 40
    batch: int = 32
    lr: float = 1e-2
    temperature: float = 1.0
    # "forward": KL(teacher-average || student); "reverse": KL(student || teacher-average)
    kl_direction: str = "forward"
    # Plain gradient steps keep parameters with negligible gradient in place; Adam's
    # per-coordinate normalization would push every coordinate and spread the clients apart.
    optimizer: str = "sgd"

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("distillation needs at least one step")
        if self.optimizer not in ("sgd", "adamw"):
            raise ConfigError("optimizer must be 'sgd' or 'adamw'")
        if self.kl_direction not in ("forward", "reverse"):
            raise ConfigError("kl_direction must be 'forward' or 'reverse'")


@dataclass
class ServerDataset:
    batch: Batch
    modality: ServerModality
    same_domain: bool = True

    def __len__(self) -> int:
        return len(self.batch)


def _server_batches(data: ServerDataset, spec: DistillSpec, rng: np.random.Generator):
    n = len(data)
    for _ in range(spec.steps):
        idx = rng.choice(n, size=min(spec.batch, n), replace=False)
        yield np.sort(idx)


def _optimizer(params, spec: DistillSpec):
    if spec.optimizer == "sgd":
        return nx.SGD(params, lr=spec.lr)
    return nx.AdamW(params, lr=spec.lr, weight_decay=0.0)


def feddf_distill(student: ParamVector, teachers: Sequence[ParamVector], server: ServerDataset,
                  spec: DistillSpec, cfg: ModelConfig, mask, rng: np.random.Generator) -> ParamVector:
    """Distill the elementwise-averaged teacher logits into the student."""
    if len(server) == 0:
        raise ConfigError("server data is empty")
    if len(teachers) < 1:
        raise ConfigError("FedDF needs at least one teacher")
    teacher_P = [as_tensors(t.to_params()) for t in teachers]
    params = student.to_params()
    opt = _optimizer(params, spec)
    T = spec.temperature
    for idx in _server_batches(server, spec, rng):
        mb = server.batch.take(idx)
        with nx.no_grad():
            # sorting across teachers makes the float sum independent of teacher order
            stack = np.sort([forward_batch(tp, mb, cfg, mask).logits.data for tp in teacher_P], axis=0)
            avg = stack.mean(axis=0)
        P = as_tensors(params, requires_grad=True)
        s = forward_batch(P, mb, cfg, mask).logits * (1.0 / T)
        loss = distill_loss(avg / T, s, spec.kl_direction)
        loss.backward()
        opt.step({k: t.grad for k, t in P.items() if t.grad is not None})
    return ParamVector.from_params(params)


def distill_loss(teacher_logits: np.ndarray, student_logits, direction: str = "forward"):
    if direction == "forward":
        return nx.kl_softmax(teacher_logits, student_logits)
    return nx.kl_softmax(student_logits, teacher_logits)


def loot_loss(student_mean: nx.Tensor, teacher_means: Sequence[np.ndarray]) -> nx.Tensor:
    """Negative mean cosine similarity between the student's and each teacher's mean embedding."""
    total = None
    for t in teacher_means:
        c = nx.cosine_sim(student_mean, t)
        total = c if total is None else total + c
    return -total * (1.0 / len(teacher_means))


def loot_finetune(models: Sequence[ParamVector], server: ServerDataset, spec: DistillSpec,
                  cfg: ModelConfig, mask, rng: np.random.Generator) -> list[ParamVector]:
    """Fine-tune every model towards the batch-mean embeddings of the others.

    Teachers are the pre-LOOT snapshots, so the students can be processed in
    any order; all students see the same batch stream.
    """
    K = len(models)
    if K < 2:
        raise ConfigError("LOOT needs at least two client models")
    if len(server) == 0:
        raise ConfigError("server data is empty")
    frozen = [as_tensors(m.to_params()) for m in models]
    batches = list(_server_batches(server, spec, rng))
    teacher_means = []
    with nx.no_grad():
        for idx in batches:
            mb = server.batch.take(idx)
            teacher_means.append([forward_batch(f, mb, cfg, mask).pooled.data.mean(axis=0)
                                  for f in frozen])
    out = []
    for s in range(K):
        params = models[s].to_params()
        opt = _optimizer(params, spec)
        for step, idx in enumerate(batches):
            mb = server.batch.take(idx)
            P = as_tensors(params, requires_grad=True)
            mean_s = forward_batch(P, mb, cfg, mask).pooled.mean(axis=0)
            others = [m for j, m in enumerate(teacher_means[step]) if j != s]
            loss = loot_loss(mean_s, others)
            loss.backward()
            opt.step({k: t.grad for k, t in P.items() if t.grad is not None})
        out.append(ParamVector.from_params(params))
    return out


@dataclass(frozen=True)
class ServerSpec:
    kind: ServerKind = ServerKind.NONE
    modality: ServerModality = ServerModality.IT
    fraction: float = 0.05
    same_domain: bool = True
    distill: DistillSpec = DistillSpec()

    def __post_init__(self):
        object.__setattr__(self, "kind", ServerKind(self.kind))
        object.__setattr__(self, "modality", ServerModality(self.modality))


def apply_server_hook(spec: ServerSpec, client_params: list[ParamVector], weights: Sequence[float],
                      server: ServerDataset | None, cfg: ModelConfig, mask,
                      rng: np.random.Generator) -> tuple[ParamVector, list[ParamVector]]:
    """Aggregate the round's client models, applying the configured server method.

    Returns the new global parameters and the (possibly fine-tuned) client models.
    """
    if spec.kind is ServerKind.NONE:
        return fedavg(client_params, weights), client_params
    if server is None:
        raise ConfigError("server method configured without server data")
    if server.modality is not spec.modality:
        raise ConfigError(f"server data carries {server.modality.value}, plan wants {spec.modality.value}")
    if spec.kind is ServerKind.FEDDF:
        student = fedavg(client_params, weights)
        return feddf_distill(student, client_params, server, spec.distill, cfg, mask, rng), client_params
    tuned = loot_finetune(client_params, server, spec.distill, cfg, mask, rng)
    return fedavg(tuned, weights), tuned
