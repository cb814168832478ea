"""Client-side mitigation terms: FedProx, FedMultiProx, MOON, MultiMOON, MAD, MAD+.

The "multi" variants swap the global anchor for the average of the *other*
modality group's previous-round local models: unimodal clients anchor to the
multimodal group and vice versa.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .datagen import ConfigError
from .fedsim.core import ParamVector, ProtocolError, fedavg
from .fusion import ModelConfig, as_tensors, forward_batch
from .numerics import Tensor


class RegKind(str, enum.Enum):
    NONE = "none"
    FEDPROX = "fedprox"
    FEDMULTIPROX = "fedmultiprox"
    MOON = "moon"
    MULTIMOON = "multimoon"
    MAD = "mad"
    MADPLUS = "madplus"

    @property
    def needs_crossgroup(self) -> bool:
        return self in (RegKind.FEDMULTIPROX, RegKind.MULTIMOON, RegKind.MADPLUS)

    @property
    def needs_pretrained(self) -> bool:
        return self in (RegKind.MAD, RegKind.MADPLUS)


@dataclass(frozen=True)
class RegularizerSpec:
    kind: RegKind = RegKind.NONE
    lam: float = 0.01      # prox coefficient
    tau: float = 0.5       # contrastive temperature
    mu: float = 1.0        # weight of the contrastive / distillation term
    pretrain_epochs: int = 5

    def __post_init__(self):
        object.__setattr__(self, "kind", RegKind(self.kind))
        if self.lam < 0 or self.mu < 0:
            raise ConfigError("regularizer coefficients must be non-negative")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")

    @property
    def coefficient(self) -> float:
        return self.lam if self.kind in (RegKind.FEDPROX, RegKind.FEDMULTIPROX) else self.mu


@dataclass
class RoundState:
    """What the server knows at the start of a round (all from round t-1 or earlier)."""

    round_idx: int
    global_prev: ParamVector
    client_prev: list[ParamVector]
    multimodal: list[bool]
    local_pretrained: list[ParamVector] = field(default_factory=list)


@dataclass(frozen=True)
class AnchorSet:
    global_prev: ParamVector | None = None
    crossgroup_prev: ParamVector | None = None
    self_prev: ParamVector | None = None
    local_pretrained: ParamVector | None = None


def crossgroup_average(state: RoundState, client_id: int) -> ParamVector:
    own = state.multimodal[client_id]
    other = [p for p, m in zip(state.client_prev, state.multimodal) if m != own]
    if not other:
        raise ConfigError("cross-group anchor undefined without both multimodal and unimodal clients")
    return fedavg(other)


def build_anchors(state: RoundState, client_id: int, kind: RegKind | str) -> AnchorSet:
    kind = RegKind(kind)
    if kind is RegKind.NONE:
        return AnchorSet()
    if kind.needs_pretrained and not state.local_pretrained:
        raise ConfigError("MAD teachers must be pretrained before federation starts")
    cross = crossgroup_average(state, client_id) if kind.needs_crossgroup else None
    if kind is RegKind.FEDPROX:
        return AnchorSet(global_prev=state.global_prev)
    if kind is RegKind.FEDMULTIPROX:
        return AnchorSet(crossgroup_prev=cross)
    if kind is RegKind.MOON:
        return AnchorSet(global_prev=state.global_prev, self_prev=state.client_prev[client_id])
    if kind is RegKind.MULTIMOON:
        return AnchorSet(crossgroup_prev=cross, self_prev=state.client_prev[client_id])
    if kind is RegKind.MAD:
        return AnchorSet(global_prev=state.global_prev,
                         local_pretrained=state.local_pretrained[client_id])
    return AnchorSet(crossgroup_prev=cross, local_pretrained=state.local_pretrained[client_id])


# loss terms ---------------------------------------------------------------------

def prox_term(theta: dict[str, Tensor] | ParamVector, anchor: ParamVector, lam: float) -> Tensor:
    """lam * ||theta - anchor||^2, differentiable in theta."""
    if isinstance(theta, ParamVector):
        theta.check_layout(anchor)
        diff = Tensor(theta.data) - anchor.data
        return (diff * diff).sum() * lam
    a = anchor.to_params()
    if list(a) != list(theta) or any(a[k].shape != theta[k].shape for k in a):
        raise ProtocolError("parameter layouts differ")
    total = None
    for k, t in theta.items():
        d = t - a[k]
        sq = (d * d).sum()
        total = sq if total is None else total + sq
    return total * lam


def moon_loss(z_cur, z_pos, z_neg, tau: float) -> Tensor:
    """-log softmax over {sim(z, z_pos), sim(z, z_neg)} / tau, batch-averaged.

    Anchors are treated as constants.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    z_pos = z_pos.data if isinstance(z_pos, Tensor) else np.asarray(z_pos)
    z_neg = z_neg.data if isinstance(z_neg, Tensor) else np.asarray(z_neg)
    s_pos = nx.cosine_sim(z_cur, z_pos) * (1.0 / tau)
    s_neg = nx.cosine_sim(z_cur, z_neg) * (1.0 / tau)
    logits = nx.concat([nx.reshape(s_pos, (-1, 1)), nx.reshape(s_neg, (-1, 1))], axis=1)
    return -nx.log_softmax_lastdim(logits)[:, 0].mean()


def mad_loss(student_logits, teacher1_logits, teacher2_logits) -> Tensor:
    """KL(softmax(t1) || softmax(s)) + KL(softmax(t2) || softmax(s)); teachers are constants."""
    t1 = np.asarray(teacher1_logits.data if isinstance(teacher1_logits, Tensor) else teacher1_logits)
    t2 = np.asarray(teacher2_logits.data if isinstance(teacher2_logits, Tensor) else teacher2_logits)
    return nx.kl_softmax(t1, student_logits) + nx.kl_softmax(t2, student_logits)


# objective assembly ---------------------------------------------------------------

def client_objective(spec: RegularizerSpec, anchors: AnchorSet, cfg: ModelConfig, mask):
    """Extra-loss callable for ``local_train``; ``None`` when the method is off."""
    kind = spec.kind
    if kind is RegKind.NONE or spec.coefficient == 0:
        return None
    if kind in (RegKind.FEDPROX, RegKind.FEDMULTIPROX):
        anchor = anchors.global_prev if kind is RegKind.FEDPROX else anchors.crossgroup_prev
        return lambda P, batch, out: prox_term(P, anchor, spec.lam)

    # Anchor params are unpacked once per client job, not per batch.
    def cached(pv):
        return None if pv is None else as_tensors(pv.to_params())

    if kind in (RegKind.MOON, RegKind.MULTIMOON):
        pos = cached(anchors.global_prev if kind is RegKind.MOON else anchors.crossgroup_prev)
        neg = cached(anchors.self_prev)

        def moon(P, batch, out):
            with nx.no_grad():
                z_pos = forward_batch(pos, batch, cfg, mask).pooled.data
                z_neg = forward_batch(neg, batch, cfg, mask).pooled.data
            return moon_loss(out.pooled, z_pos, z_neg, spec.tau) * spec.mu
        return moon

    t1 = cached(anchors.local_pretrained)
    t2 = cached(anchors.global_prev if kind is RegKind.MAD else anchors.crossgroup_prev)

    def mad(P, batch, out):
        with nx.no_grad():
            z1 = forward_batch(t1, batch, cfg, mask).logits.data
            z2 = forward_batch(t2, batch, cfg, mask).logits.data
        return mad_loss(out.logits, z1, z2) * spec.mu
    return mad
