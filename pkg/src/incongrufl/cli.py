"""Command-line experiment runner.

Verbs: ``run``, ``matrix``, ``impute-train``, ``dump-attention``, ``rank``.
Exit codes: 0 success, 1 run failure, 2 invalid plan or arguments.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from itertools import product
from pathlib import Path
from typing import Sequence

import numpy as np

from . import datagen as dg
from . import imputer as imp
from . import metrics as mt
from .fedsim import CSV_COLUMNS, DivergenceError, FederationPlan, prepare_data, run_federation
from .fusion import FusionModel, dump_attention_json, forward_classify
from .planfile import PlanError, load_plan, plan_to_text
from .regularize import RegKind
from .serverboost import ServerKind

log = logging.getLogger("incongrufl")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

SUMMARY_COLUMNS = (
    "run_id", "gamma", "m_u_ratio", "method", "mask", "seed", "status", "auc_macro", "f1_macro",
    "precision_macro", "recall_macro", "auc_area", "mean_pairwise_l2", "rounds_csv", "error",
)


class UsageError(Exception):
    pass


def configure_logging() -> None:
    level = os.environ.get("INCONGRUFL_LOG", "error").strip().lower()
    if level not in LOG_LEVELS:
        raise UsageError(f"INCONGRUFL_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def run_id_for(plan: FederationPlan) -> str:
    return f"{plan.method_label}-{plan.mask.value}-g{plan.gamma:g}-{plan.m_u_ratio.replace(':', 'x')}-s{plan.seed}"


# run ----------------------------------------------------------------------------------

def write_run(plan: FederationPlan, out_dir: Path, timing: bool = False) -> dict:
    """Execute one plan into ``out_dir``; returns its summary row."""
    out_dir.mkdir(parents=True, exist_ok=True)
    run_id = run_id_for(plan)
    (out_dir / "plan.ini").write_text(plan_to_text(plan))
    (out_dir / "metadata.json").write_text(json.dumps(
        {"seed": plan.seed, "bit_generator": "Philox", "derivation": "SeedSequence spawn_key per stream",
         "metric_averaging": mt.AVERAGING, "prf_threshold": 0.5, "bleu_smoothing": mt.BLEU_SMOOTHING},
        indent=2) + "\n")
    row = {"run_id": run_id, "gamma": plan.gamma, "m_u_ratio": plan.m_u_ratio,
           "method": plan.method_label, "mask": plan.mask.value, "seed": plan.seed,
           "rounds_csv": str(out_dir / "rounds.csv"), "error": ""}
    try:
        result = run_federation(plan, timing=timing)
        reports, status = result.reports, "ok"
        result.model().save(out_dir / "checkpoint.npz")
        if result.audit:
            imp.write_audit(out_dir / "imputation_audit.jsonl", result.audit)
    except DivergenceError as e:
        reports, status = e.partial_reports, "diverged"
        row["error"] = str(e)
    with open(out_dir / "rounds.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in reports:
            w.writerow(r.csv_row(run_id, plan))
    with open(out_dir / "rounds.jsonl", "w") as f:
        for r in reports:
            f.write(json.dumps({"run_id": run_id, **r.to_json()}) + "\n")
    row["status"] = status
    if reports:
        last = reports[-1].metrics
        aucs = np.array([r.metrics.auc_macro for r in reports])
        row.update(auc_macro=last.auc_macro, f1_macro=last.f1_macro,
                   precision_macro=last.precision_macro, recall_macro=last.recall_macro,
                   auc_area=float(np.mean(aucs)), mean_pairwise_l2=reports[-1].mean_pairwise_l2)
    return row


def cmd_run(args) -> int:
    plan = load_plan(args.plan, seed=args.seed)
    row = write_run(plan, Path(args.out), timing=args.timing)
    if row["status"] != "ok":
        print(f"run failed: {row['error']}", file=sys.stderr)
        return 1
    print(f"{row['run_id']}: final auc_macro={row['auc_macro']:.4f}")
    return 0


# matrix ---------------------------------------------------------------------------------

def apply_method(plan: FederationPlan, label: str) -> FederationPlan:
    """Set client/server/imputation components from a label like ``fedprox+loot(IT)``."""
    client = replace(plan.client, kind=RegKind.NONE)
    server = replace(plan.server, kind=ServerKind.NONE)
    use_min = False
    for part in label.lower().split("+"):
        part = part.strip()
        if part == "fedavg":
            continue
        if part == "min":
            use_min = True
            continue
        name, _, modality = part.partition("(")
        if name in {k.value for k in ServerKind} - {"none"}:
            server = replace(server, kind=ServerKind(name),
                             modality=modality.rstrip(")").upper() or plan.server.modality)
        elif name in {k.value for k in RegKind} - {"none"}:
            client = replace(client, kind=RegKind(name))
        else:
            raise UsageError(f"unknown method component {part!r}")
    return replace(plan, client=client, server=server, min=replace(plan.min, enabled=use_min))


@dataclass(frozen=True)
class MatrixCell:
    gamma: float
    n_multimodal: int
    n_unimodal: int
    method: str
    mask: str
    seed: int

    @property
    def m_u_ratio(self) -> str:
        return f"{self.n_multimodal}:{self.n_unimodal}"

    def plan(self, base: FederationPlan) -> FederationPlan:
        p = replace(base, gamma=self.gamma, n_clients=self.n_multimodal + self.n_unimodal,
                    n_multimodal=self.n_multimodal, mask=self.mask, seed=self.seed,
                    client=replace(base.client, kind=RegKind.NONE), min=replace(base.min, enabled=False))
        return apply_method(p, self.method)

    def run_id(self) -> str:
        ratio = self.m_u_ratio.replace(":", "x")
        return f"{self.method}-{self.mask}-g{self.gamma:g}-{ratio}-s{self.seed}"


def matrix_cells(base: FederationPlan, gammas, ratios, methods, masks, replicates: int) -> list[MatrixCell]:
    cells = []
    for g, ratio, method, mask, rep in product(gammas, ratios, methods, masks, range(replicates)):
        m, _, u = ratio.partition(":")
        try:
            n_mm, n_uni = int(m), int(u)
        except ValueError:
            raise UsageError(f"bad ratio {ratio!r}, expected M:U") from None
        cells.append(MatrixCell(g, n_mm, n_uni, method, mask, base.seed + rep))
    return cells


def _matrix_job(job: tuple[FederationPlan, MatrixCell, str]) -> dict:
    base, cell, out = job
    try:
        return write_run(cell.plan(base), Path(out))
    except Exception as e:  # one failing cell must not stop the matrix
        return {"run_id": cell.run_id(), "gamma": cell.gamma, "m_u_ratio": cell.m_u_ratio,
                "method": cell.method, "mask": cell.mask, "seed": cell.seed,
                "status": "failed", "error": f"{type(e).__name__}: {e}"}


def write_table(path: Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, SUMMARY_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in SUMMARY_COLUMNS})


def rank_rows(rows: Sequence[dict]) -> list[dict]:
    """Ascending by final macro AUC; runs without a result go last."""
    def key(r):
        v = r.get("auc_macro", "")
        try:
            return (0, float(v))
        except (TypeError, ValueError):
            return (1, 0.0)
    return sorted(rows, key=key)


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _words(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def cmd_matrix(args) -> int:
    base = load_plan(args.plan, seed=args.seed)
    cells = matrix_cells(base, _floats(args.gamma) if args.gamma else [base.gamma],
                         _words(args.ratio) if args.ratio else [base.m_u_ratio],
                         _words(args.method) if args.method else [base.method_label],
                         _words(args.mask) if args.mask else [base.mask.value],
                         args.replicates)
    if not cells:
        raise UsageError("empty sweep")
    out = Path(args.out)
    jobs = [(base, c, str(out / "runs" / f"{i:04d}_{c.run_id()}")) for i, c in enumerate(cells)]
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            rows = list(pool.map(_matrix_job, jobs))
    else:
        rows = [_matrix_job(j) for j in jobs]
    out.mkdir(parents=True, exist_ok=True)
    write_table(out / "summary.csv", rows)
    write_table(out / "ranked.csv", rank_rows(rows))
    n_bad = sum(r["status"] != "ok" for r in rows)
    print(f"{len(rows)} runs, {n_bad} failed; summary at {out / 'summary.csv'}")
    return 0


def cmd_rank(args) -> int:
    with open(args.summary, newline="") as f:
        rows = list(csv.DictReader(f))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_table(out / "ranked.csv", rank_rows(rows))
    return 0


# imputation -------------------------------------------------------------------------------

def cmd_impute_train(args) -> int:
    plan = load_plan(args.plan, seed=args.seed)
    if plan.n_multimodal == 0:
        raise UsageError("impute-train needs a multimodal client (m_u_ratio M >= 1)")
    data = prepare_data(plan)
    shards = dg.dirichlet_partition(
        data.train, dg.PartitionConfig(plan.n_clients, plan.gamma, plan.seed, plan.n_multimodal))
    cfg = plan.model_config
    mcfg = imp.MinConfig(codebook_size=plan.min.codebook_size, text_vocab=cfg.vocab, K=cfg.K,
                         N_max=cfg.N_max, width=plan.min.width)
    model, history = imp.build_min(shards[0].samples, mcfg, plan.min.epochs, plan.seed, lr=plan.min.lr)
    refs = {s.sample_id: s.text_tokens for s in data.train}
    _, audit = imp.impute_federation(shards, model, refs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "min.npz")
    imp.write_audit(out / "imputation_audit.jsonl", audit)
    cands = [a["generated_tokens"] for a in audit]
    bleu = mt.corpus_bleu4(cands, [[refs[a["sample_id"]]] for a in audit]) if audit else float("nan")
    report = {"train_loss": history, "n_imputed": len(audit), "corpus_bleu4": bleu,
              "bleu_smoothing": mt.BLEU_SMOOTHING}
    (out / "min_report.json").write_text(json.dumps(report, indent=2) + "\n")
    print(f"imputed {len(audit)} samples, corpus BLEU-4 {bleu:.4f}")
    return 0


# attention ---------------------------------------------------------------------------------

def cmd_dump_attention(args) -> int:
    plan = load_plan(args.plan, seed=args.seed)
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        print(f"checkpoint not found: {ckpt}", file=sys.stderr)
        return 1
    model = FusionModel.load(ckpt)
    data = prepare_data(plan)
    by_id = {s.sample_id: s for s in data.train + data.test}
    ids = [int(x) for x in _words(args.samples)]
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise UsageError(f"unknown sample ids {missing}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    for i in ids:
        _, _, maps = forward_classify(model, by_id[i], plan.mask)
        n += len(dump_attention_json(maps, out, f"sample{i}"))
    print(f"wrote {n} attention files to {out}")
    return 0


# entry point ---------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="incongrufl", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="verb", required=True)

    def common(p, out=True):
        p.add_argument("--plan", required=True, help="plan file (INI-style key = value)")
        if out:
            p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the plan seed")

    p = sub.add_parser("run", help="execute one plan")
    common(p)
    p.add_argument("--timing", action="store_true", help="record wall-clock ms per round")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("matrix", help="sweep gamma x ratio x method x mask with replicates")
    common(p)
    p.add_argument("--gamma", help="comma list, e.g. 100,0.5,0.1")
    p.add_argument("--ratio", help="comma list of M:U, e.g. 3:1,1:3")
    p.add_argument("--method", help="comma list, e.g. fedavg,fedprox,loot(IT),min")
    p.add_argument("--mask", help="comma list of isolated,causal,parbi,bi")
    p.add_argument("--replicates", type=int, default=5)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_matrix)

    p = sub.add_parser("impute-train", help="train the imputation network on client 0")
    common(p)
    p.set_defaults(fn=cmd_impute_train)

    p = sub.add_parser("dump-attention", help="write per-layer, per-head attention maps")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", required=True, help="comma list of sample ids")
    p.set_defaults(fn=cmd_dump_attention)

    p = sub.add_parser("rank", help="order a summary.csv ascending by final AUC")
    p.add_argument("--summary", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_rank)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        configure_logging()
        if getattr(args, "replicates", 1) < 1 or getattr(args, "workers", 1) < 1:
            raise UsageError("--replicates and --workers must be >= 1")
        return args.fn(args)
    except PlanError as e:
        print(f"invalid plan: {e}", file=sys.stderr)
        return 2
    except (UsageError, dg.ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
