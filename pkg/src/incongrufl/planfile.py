"""Plain-text plan files: INI-style sections of ``key = value`` pairs.

Every key is optional; missing keys take the library defaults.  Unknown
sections or keys are rejected with a :class:`PlanError` naming the key, and
enumerated values are checked when the plan is built.

Example::

    [data]
    profile = severe
    n_samples = 2000

    [partition]
    gamma = 0.1
    m_u_ratio = 1:3

    [model]
    mask = bi

    [schedule]
    rounds = 30

    [run]
    seed = 3
"""

from __future__ import annotations

import configparser
import io
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable

from .datagen import ConfigError
from .fedsim.runner import DataSpec, FederationPlan, MinSpec
from .regularize import RegularizerSpec
from .serverboost import DistillSpec, ServerSpec


class PlanError(ConfigError):
    def __init__(self, key: str, msg: str):
        super().__init__(f"{key}: {msg}")
        self.key = key


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ratio(text: str) -> tuple[int, int]:
    m, sep, u = text.partition(":")
    if not sep:
        raise ValueError(f"expected M:U, got {text!r}")
    return int(m), int(u)


# section -> key -> parser
SCHEMA: dict[str, dict[str, Callable[[str], Any]]] = {
    "data": {"profile": str, "n_samples": int, "K": int, "d_v": int, "vocab": int, "N_max": int,
             "noise": float, "filler_max": int, "eval_fraction": float},
    "partition": {"n_clients": int, "gamma": float, "m_u_ratio": _ratio},
    "model": {"layers": int, "heads": int, "width": int, "mask": str},
    "method": {"client_kind": str, "lambda": float, "tau": float, "mu": float,
               "pretrain_epochs": int, "server_kind": str, "server_modality": str,
               "server_fraction": float, "server_same_domain": _bool, "distill_steps": int,
               "distill_batch": int, "distill_lr": float, "distill_optimizer": str,
               "temperature": float},
    "schedule": {"rounds": int, "local_epochs": int, "batch": int, "lr": float,
                 "weight_decay": float, "optimizer": str},
    "min": {"enabled": _bool, "codebook_size": int, "epochs": int, "lr": float, "width": int},
    "run": {"seed": int},
}


def parse_plan_text(text: str) -> dict[str, dict[str, Any]]:
    cp = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    cp.optionxform = str  # keys are case-sensitive (K, N_max)
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise PlanError("<plan>", str(e).splitlines()[0]) from e
    out: dict[str, dict[str, Any]] = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise PlanError(section, "unknown section")
        out[section] = {}
        for key, raw in cp.items(section):
            if key not in SCHEMA[section]:
                raise PlanError(key, f"unknown key in [{section}]")
            try:
                out[section][key] = SCHEMA[section][key](raw)
            except ValueError as e:
                raise PlanError(key, str(e)) from e
    return out


def plan_from_dict(cfg: dict[str, dict[str, Any]]) -> FederationPlan:
    """Build a validated plan; enumeration and range errors name their key."""
    def get(section, key, default):
        return cfg.get(section, {}).get(key, default)

    def guarded(key, fn):
        try:
            return fn()
        except (ValueError, TypeError) as e:
            raise PlanError(key, str(e)) from e

    base = FederationPlan.__dataclass_fields__
    d0, m0, r0, s0, x0 = DataSpec(), MinSpec(), RegularizerSpec(), ServerSpec(), DistillSpec()

    data = guarded("profile", lambda: DataSpec(**{k: get("data", k, getattr(d0, k))
                                                  for k in SCHEMA["data"]}))
    if data.profile not in ("mild", "severe"):
        raise PlanError("profile", f"expected mild or severe, got {data.profile!r}")
    n_clients = get("partition", "n_clients", base["n_clients"].default)
    default_ratio = (base["n_multimodal"].default, n_clients - base["n_multimodal"].default)
    m, u = get("partition", "m_u_ratio", default_ratio)
    if m < 0 or u < 0 or m + u != n_clients:
        raise PlanError("m_u_ratio", f"{m}:{u} does not add up to n_clients={n_clients}")

    client = guarded("client_kind", lambda: RegularizerSpec(
        kind=get("method", "client_kind", r0.kind.value),
        lam=get("method", "lambda", r0.lam), tau=get("method", "tau", r0.tau),
        mu=get("method", "mu", r0.mu),
        pretrain_epochs=get("method", "pretrain_epochs", r0.pretrain_epochs)))
    if get("method", "distill_optimizer", x0.optimizer) not in ("sgd", "adamw"):
        raise PlanError("distill_optimizer", "expected sgd or adamw")
    distill = guarded("distill_steps", lambda: DistillSpec(
        steps=get("method", "distill_steps", x0.steps), batch=get("method", "distill_batch", x0.batch),
        lr=get("method", "distill_lr", x0.lr),
        optimizer=get("method", "distill_optimizer", x0.optimizer),
        temperature=get("method", "temperature", x0.temperature)))
    server = guarded("server_kind", lambda: ServerSpec(
        kind=get("method", "server_kind", s0.kind.value),
        modality=get("method", "server_modality", s0.modality.value),
        fraction=get("method", "server_fraction", s0.fraction),
        same_domain=get("method", "server_same_domain", s0.same_domain), distill=distill))
    if not 0 < server.fraction < 0.5:
        raise PlanError("server_fraction", "must lie in (0, 0.5)")
    mins = MinSpec(**{k: get("min", k, getattr(m0, k)) for k in SCHEMA["min"]})

    optimizer = get("schedule", "optimizer", base["optimizer"].default)
    if optimizer not in ("adamw", "sgd"):
        raise PlanError("optimizer", f"expected adamw or sgd, got {optimizer!r}")
    gamma = get("partition", "gamma", base["gamma"].default)
    if gamma <= 0:
        raise PlanError("gamma", "must be positive")

    def build():
        return FederationPlan(
            data=data, n_clients=n_clients, gamma=gamma, n_multimodal=m,
            width=get("model", "width", base["width"].default),
            layers=get("model", "layers", base["layers"].default),
            heads=get("model", "heads", base["heads"].default),
            mask=get("model", "mask", base["mask"].default.value),
            client=client, server=server,
            rounds=get("schedule", "rounds", base["rounds"].default),
            local_epochs=get("schedule", "local_epochs", base["local_epochs"].default),
            batch_size=get("schedule", "batch", base["batch_size"].default),
            lr=get("schedule", "lr", base["lr"].default),
            weight_decay=get("schedule", "weight_decay", base["weight_decay"].default),
            optimizer=optimizer, min=mins,
            seed=get("run", "seed", base["seed"].default))

    try:
        return build()
    except ConfigError:
        raise
    except ValueError as e:
        # the only enumeration left unchecked at this point is the mask
        raise PlanError("mask", str(e)) from e


def load_plan(path: str | Path, seed: int | None = None) -> FederationPlan:
    plan = plan_from_dict(parse_plan_text(Path(path).read_text()))
    return plan if seed is None else replace(plan, seed=seed)


def plan_to_text(plan: FederationPlan) -> str:
    """Complete plan with every default resolved; re-loads to an equal plan."""
    d, c, s = plan.data, plan.client, plan.server
    sections = {
        "data": {k: getattr(d, k) for k in SCHEMA["data"]},
        "partition": {"n_clients": plan.n_clients, "gamma": plan.gamma,
                      "m_u_ratio": plan.m_u_ratio},
        "model": {"layers": plan.layers, "heads": plan.heads, "width": plan.width,
                  "mask": plan.mask.value},
        "method": {"client_kind": c.kind.value, "lambda": c.lam, "tau": c.tau, "mu": c.mu,
                   "pretrain_epochs": c.pretrain_epochs, "server_kind": s.kind.value,
                   "server_modality": s.modality.value, "server_fraction": s.fraction,
                   "server_same_domain": s.same_domain, "distill_steps": s.distill.steps,
                   "distill_batch": s.distill.batch, "distill_lr": s.distill.lr,
                   "distill_optimizer": s.distill.optimizer,
                   "temperature": s.distill.temperature},
        "schedule": {"rounds": plan.rounds, "local_epochs": plan.local_epochs,
                     "batch": plan.batch_size, "lr": plan.lr,
                     "weight_decay": plan.weight_decay, "optimizer": plan.optimizer},
        "min": {k: getattr(plan.min, k) for k in SCHEMA["min"]},
        "run": {"seed": plan.seed},
    }
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for name, items in sections.items():
        cp[name] = {k: repr(v) if isinstance(v, float) else str(v) for k, v in items.items()}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
