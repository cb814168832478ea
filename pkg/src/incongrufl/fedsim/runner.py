"""Round loop: data preparation, client jobs, aggregation, server hooks and evaluation."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .. import datagen as dg
from .. import imputer as imp
from .. import metrics as mt
from .. import regularize as rg
from .. import serverboost as sb
from ..fusion import FusionModel, MaskKind, ModelConfig, collate, predict_logits
from ..numerics import rng_stream
from .core import (DivergenceError, ParamVector, TrainSpec, local_train,
                   mean_pairwise_l2)

log = logging.getLogger(__name__)

CSV_COLUMNS = (
    "run_id", "round", "gamma", "m_u_ratio", "method", "mask", "auc_macro", "f1_macro",
    "precision_macro", "recall_macro", "mean_pairwise_l2", "train_loss_mean", "wall_ms",
)


@dataclass(frozen=True)
class DataSpec:
    profile: str = "severe"
    n_samples: int = 2000
    K: int = 16
    d_v: int = 16
    vocab: int = 64
    N_max: int = 24
    noise: float = 0.3
    filler_max: int = 6
    eval_fraction: float = 0.1


@dataclass(frozen=True)
class MinSpec:
    enabled: bool = False
    codebook_size: int = 64
    epochs: int = 20
    lr: float = 3e-3
    width: int = 48


@dataclass(frozen=True)
class FederationPlan:
    data: DataSpec = DataSpec()
    n_clients: int = 4
    gamma: float = 0.5
    n_multimodal: int = 1
    width: int = 32
    layers: int = 2
    heads: int = 2
    mask: MaskKind = MaskKind.ISOLATED
    client: rg.RegularizerSpec = rg.RegularizerSpec()
    server: sb.ServerSpec = sb.ServerSpec()
    rounds: int = 100
    local_epochs: int = 1
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.01
    optimizer: str = "adamw"
    min: MinSpec = MinSpec()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mask", MaskKind(self.mask))
        if self.rounds < 1:
            raise dg.ConfigError("rounds must be >= 1")
        n_uni = self.n_clients - self.n_multimodal
        if self.client.kind.needs_crossgroup and (self.n_multimodal == 0 or n_uni == 0):
            raise dg.ConfigError(f"{self.client.kind.value} needs both multimodal and unimodal clients")
        if self.min.enabled and self.n_multimodal == 0:
            raise dg.ConfigError("modality imputation needs a multimodal client to train on")

    @property
    def model_config(self) -> ModelConfig:
        d = self.data
        return ModelConfig(K=d.K, d_v=d.d_v, vocab=d.vocab, N_max=d.N_max, width=self.width,
                           layers=self.layers, heads=self.heads)

    @property
    def train_spec(self) -> TrainSpec:
        return TrainSpec(mask=self.mask.value, local_epochs=self.local_epochs,
                         batch_size=self.batch_size, lr=self.lr,
                         weight_decay=self.weight_decay, optimizer=self.optimizer)

    @property
    def m_u_ratio(self) -> str:
        return f"{self.n_multimodal}:{self.n_clients - self.n_multimodal}"

    @property
    def method_label(self) -> str:
        parts = []
        if self.client.kind is not rg.RegKind.NONE:
            parts.append(self.client.kind.value)
        if self.server.kind is not sb.ServerKind.NONE:
            parts.append(f"{self.server.kind.value}({self.server.modality.value})")
        if self.min.enabled:
            parts.append("min")
        return "+".join(parts) or "fedavg"


@dataclass
class FederationData:
    train: list[dg.MultimodalSample]
    test: list[dg.MultimodalSample]
    server: list[dg.MultimodalSample]


@dataclass
class RoundReport:
    round: int
    metrics: mt.MetricsReport
    mean_pairwise_l2: float
    client_losses: list[float]
    wall_ms: float = 0.0

    @property
    def train_loss_mean(self) -> float:
        return float(np.mean(self.client_losses))

    def csv_row(self, run_id: str, plan: FederationPlan) -> list:
        m = self.metrics
        return [run_id, self.round, plan.gamma, plan.m_u_ratio, plan.method_label, plan.mask.value,
                f"{m.auc_macro:.10g}", f"{m.f1_macro:.10g}", f"{m.precision_macro:.10g}",
                f"{m.recall_macro:.10g}", f"{self.mean_pairwise_l2:.10g}",
                f"{self.train_loss_mean:.10g}", f"{self.wall_ms:.0f}"]

    def to_json(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_json(cls, d: dict) -> RoundReport:
        d = dict(d)
        d["metrics"] = mt.MetricsReport(**d["metrics"])
        return cls(**d)


@dataclass
class FederationResult:
    plan: FederationPlan
    reports: list[RoundReport]
    global_params: ParamVector
    client_params: list[ParamVector]
    shards: list[dg.ClientShard]
    audit: list[dict] = field(default_factory=list)

    def model(self) -> FusionModel:
        return FusionModel(self.plan.model_config, self.global_params.to_params())


def prepare_data(plan: FederationPlan) -> FederationData:
    """Generate the pool, then split off the IID test set and the unlabeled server set."""
    d = plan.data
    gen = dict(K=d.K, d_v=d.d_v, vocab=d.vocab, N_max=d.N_max, noise=d.noise,
               filler_max=d.filler_max)
    pool = dg.generate_synthetic(d.n_samples, class_profile=d.profile, seed=plan.seed, **gen)
    pool, test = dg.holdout_split(pool, d.eval_fraction, plan.seed, "test")
    server: list[dg.MultimodalSample] = []
    s = plan.server
    if s.kind is not sb.ServerKind.NONE:
        frac = s.fraction * d.n_samples / len(pool)
        if s.same_domain:
            pool, server = dg.holdout_server_split(pool, frac, s.modality, plan.seed)
        else:
            other = "mild" if d.profile == "severe" else "severe"
            n = int(round(s.fraction * d.n_samples))
            extra = dg.generate_synthetic(n, class_profile=other, seed=plan.seed + 7919, domain=1,
                                          proto_seed=plan.seed, **gen)
            server = [replace(dg.restrict_modality(x, s.modality), labels=None) for x in extra]
    return FederationData(pool, test, server)


def holdout_view(test: Sequence[dg.MultimodalSample], plan: FederationPlan) -> list[dg.MultimodalSample]:
    """Strip reports from the test split so availability mirrors the federation.

    A fraction ``n_multimodal / n_clients`` of test samples keep their text; the
    kept subset is a deterministic function of the seed.
    """
    n_keep = int(round(len(test) * plan.n_multimodal / plan.n_clients))
    order = rng_stream(plan.seed, "test-modality").permutation(len(test))
    keep = np.zeros(len(test), dtype=bool)
    keep[order[:n_keep]] = True
    return [s if k else s.strip_text() for s, k in zip(test, keep)]


def _pretrain_local(init: ParamVector, data, plan: FederationPlan, client_id: int) -> ParamVector:
    spec = replace(plan.train_spec, local_epochs=plan.client.pretrain_epochs)
    params, _ = local_train(init, data, plan.model_config, spec,
                            rng_stream(plan.seed, "pretrain", client_id))
    return params


def evaluate_params(params: ParamVector, test_batch, plan: FederationPlan) -> mt.MetricsReport:
    logits, _ = predict_logits(params.to_params(), test_batch, plan.model_config, plan.mask)
    return mt.evaluate(logits, test_batch.labels)


def run_federation(plan: FederationPlan, data: FederationData | None = None,
                   timing: bool = False) -> FederationResult:
    """Run ``plan.rounds`` rounds of full-participation federated training."""
    data = prepare_data(plan) if data is None else data
    cfg = plan.model_config
    n_slots = cfg.N_max
    part = dg.PartitionConfig(plan.n_clients, plan.gamma, plan.seed, plan.n_multimodal)
    shards = dg.dirichlet_partition(data.train, part)

    audit: list[dict] = []
    if plan.min.enabled:
        mcfg = imp.MinConfig(codebook_size=plan.min.codebook_size, text_vocab=cfg.vocab,
                             K=cfg.K, N_max=cfg.N_max, width=plan.min.width)
        min_model, _ = imp.build_min(shards[0].samples, mcfg, plan.min.epochs, plan.seed,
                                     lr=plan.min.lr)
        refs = {s.sample_id: s.text_tokens for s in data.train}
        shards, audit = imp.impute_federation(shards, min_model, refs)

    batches = [collate(sh.samples, n_slots, vocab=cfg.vocab) for sh in shards]
    sizes = [len(sh) for sh in shards]
    test = holdout_view(data.test, plan)
    if plan.min.enabled:
        test = imp.impute_samples(test, min_model)
    test_batch = collate(test, n_slots, vocab=cfg.vocab)
    server = None
    if data.server:
        server = sb.ServerDataset(collate(data.server, n_slots, vocab=cfg.vocab),
                                  plan.server.modality, plan.server.same_domain)

    init = ParamVector.from_params(FusionModel.init(cfg, rng_stream(plan.seed, "init")).params)
    state = rg.RoundState(0, init, [init] * plan.n_clients,
                          [sh.modality is not dg.Modality.IMAGE_ONLY for sh in shards])
    # Cross-group anchors refer to the original modality groups, even after imputation.
    state.multimodal = [k < plan.n_multimodal for k in range(plan.n_clients)]
    if plan.client.kind.needs_pretrained:
        state.local_pretrained = [_pretrain_local(init, b, plan, k) for k, b in enumerate(batches)]

    reports: list[RoundReport] = []
    global_params = init
    client_params = list(state.client_prev)
    for t in range(1, plan.rounds + 1):
        t0 = time.perf_counter()
        state.round_idx = t
        state.global_prev = global_params
        new_params, losses = [], []
        for k, b in enumerate(batches):
            anchors = rg.build_anchors(state, k, plan.client.kind)
            extra = rg.client_objective(plan.client, anchors, cfg, plan.mask)
            try:
                p, loss = local_train(global_params, b, cfg, plan.train_spec,
                                      rng_stream(plan.seed, "local", k, t), extra)
            except DivergenceError as e:
                err = DivergenceError(f"client {k} diverged in round {t}", t, k)
                err.partial_reports = reports
                raise err from e
            new_params.append(p)
            losses.append(loss)
        global_params, client_params = sb.apply_server_hook(
            plan.server, new_params, sizes, server, cfg, plan.mask,
            rng_stream(plan.seed, "server", t))
        state.client_prev = client_params
        report = RoundReport(t, evaluate_params(global_params, test_batch, plan),
                             mean_pairwise_l2(client_params) if len(client_params) > 1 else 0.0,
                             losses)
        if timing:
            report.wall_ms = 1000 * (time.perf_counter() - t0)
        reports.append(report)
        log.info("round %d auc=%.4f l2=%.4f loss=%.4f", t, report.metrics.auc_macro,
                 report.mean_pairwise_l2, report.train_loss_mean)
    return FederationResult(plan, reports, global_params, client_params, shards, audit)


def plan_to_dict(plan: FederationPlan) -> dict:
    return json.loads(json.dumps(asdict(plan), default=lambda o: getattr(o, "value", str(o))))
