"""End-to-end orchestration of sensitivity-ranked sync-point dropping.

Within the target budget, blocks are converted ascending by sensitivity:
in-sensitive blocks drop their sync zero-shot, sensitive blocks get
block-to-block distillation first, and extremely sensitive blocks get head
grouping before distillation.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

from . import sensitivity as sens
from .checkpoint import atomic_write, model_hash, save_overlay
from .cost import plan_cost
from .distill import distill_block, make_job
from .errors import ConfigError
from .grouping import group_block, reorder_block_weights
from .model import perplexity
from .parallel import BlockSpec, SyncPlan, plan_executor

MODES = ("zs", "zs+b2b", "zs+b2b+hg")


@dataclass
class PipelineConfig:
    checkpoint: str = ""
    devices: int = 4
    budget: float = 1.0              # fraction of L (or an integer count)
    tau1: float = sens.DEFAULT_TAU1
    tau2: float = sens.DEFAULT_TAU2
    distill_lr: float = 5e-5
    distill_epochs: int = 10
    hg_mode: str = "exact"           # exact | greedy
    calib_samples: int = 16
    calib_seq_len: int = 256
    hg_calib_samples: int = 4
    hg_calib_seq_len: int = 128
    corpus: str = ""                 # text file; empty -> synthetic
    profiles: tuple = ("hbw", "lbw")
    out_dir: str = "out"
    seed: int = 0
    mode: str = "zs+b2b+hg"

    def budget_count(self, n_layers):
        """Floats in [0, 1] are fractions of L (floor); integers are counts."""
        b = self.budget
        if isinstance(b, float):
            if not 0.0 <= b <= 1.0:
                raise ConfigError(f"fractional budget {b} outside [0, 1]")
            n = math.floor(b * n_layers)
        else:
            n = int(b)
        if not 0 <= n <= n_layers:
            raise ConfigError(f"budget {b} outside 0..{n_layers}")
        return n


@dataclass
class OptimizedArtifact:
    plan: SyncPlan
    overlays: dict                  # block index -> DecoderBlockWeights
    report: sens.SensitivityReport
    decisions: list                 # [{block, score, category, treatment}]
    base_hash: str
    eval_table: list = field(default_factory=list)


def replay_decisions(report, n_spd, mode="zs+b2b+hg"):
    """Pure replay of the budgeted conversion loop from a report."""
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    decisions = []
    for i in report.ranking[:n_spd]:
        cat = report.categories[i]
        if mode == "zs" or cat == sens.ISB:
            treatment = "zero_shot"
        elif cat == sens.SB or mode == "zs+b2b":
            treatment = "b2b"
        else:
            treatment = "hg+b2b"
        decisions.append({"block": i, "score": report.scores[i],
                          "category": cat, "treatment": treatment})
    return decisions


def apply_decisions(model, decisions, calib, D, hg_calib=None,
                    distill_lr=5e-5, distill_epochs=10, hg_mode="exact",
                    seed=0, verbose=False):
    """Execute the treatments, returning (plan, overlays, job log)."""
    L = model.config.n_layers
    plan = SyncPlan.all_tp(L)
    overlays = {}
    log = []
    for dec in decisions:
        i = dec["block"]
        plan.blocks[i] = BlockSpec("spd")
        entry = dict(dec)
        if dec["treatment"] == "zero_shot":
            log.append(entry)
            continue
        teacher = model.blocks[i]
        if dec["treatment"] == "hg+b2b":
            grouping = group_block(model, i, D, (hg_calib or calib).samples,
                                   mode=hg_mode, seed=seed)
            teacher = reorder_block_weights(teacher, grouping)
            entry["grouping"] = grouping.to_dict()
        job = make_job(model, calib, i, D, lr=distill_lr,
                       epochs=distill_epochs, teacher=teacher)
        student, epoch_means, _ = distill_block(job)
        overlays[i] = student
        entry["distill_epoch_losses"] = epoch_means
        if verbose:
            print(f"block {i} [{dec['category']}] {dec['treatment']}: "
                  f"loss {epoch_means[0]:.3e} -> {epoch_means[-1]:.3e}")
        log.append(entry)
    return plan, overlays, log


def run_algorithm1(model, calib, config: PipelineConfig, report=None,
                   hg_calib=None, verbose=False):
    """Sensitivity scan + budgeted multi-tier conversion + evaluation."""
    L = model.config.n_layers
    D = config.devices
    n_spd = config.budget_count(L)
    if report is None:
        report = sens.scan(model, D, calib, config.tau1, config.tau2)
    decisions = replay_decisions(report, n_spd, config.mode)
    plan, overlays, log = apply_decisions(
        model, decisions, calib, D, hg_calib=hg_calib,
        distill_lr=config.distill_lr, distill_epochs=config.distill_epochs,
        hg_mode=config.hg_mode, seed=config.seed, verbose=verbose)
    ppl = perplexity(plan_executor(model, plan, D, overlays=overlays), calib)
    return OptimizedArtifact(plan=plan, overlays=overlays, report=report,
                             decisions=log, base_hash=model_hash(model),
                             eval_table=[{"budget": n_spd, "mode": config.mode,
                                          "perplexity": ppl}])


def save_artifact(artifact, model_config, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    artifact.plan.save(os.path.join(out_dir, "plan.json"))
    artifact.report.save_json(os.path.join(out_dir, "sensitivity.json"))
    artifact.report.save_csv(os.path.join(out_dir, "sensitivity.csv"))
    save_overlay(os.path.join(out_dir, "overlay.ckpt"), artifact.overlays,
                 artifact.base_hash, model_config)
    def writer(f):
        for entry in artifact.decisions:
            f.write((json.dumps(entry) + "\n").encode())
    atomic_write(os.path.join(out_dir, "decisions.jsonl"), writer)
    atomic_write(os.path.join(out_dir, "eval.json"), lambda f: f.write(
        json.dumps(artifact.eval_table, indent=2).encode()))


def sweep(model, calib, config: PipelineConfig, modes=None, budgets=None,
          profiles=None, report=None, hg_calib=None, verbose=False):
    """Budget x mode x profile sweep; returns plot-ready row dicts.

    Treatments are recomputed fresh per budget so each point reproduces
    independently.
    """
    L = model.config.n_layers
    D = config.devices
    modes = list(modes or [config.mode])
    budgets = list(budgets if budgets is not None else range(L + 1))
    profiles = list(profiles or [])
    if report is None:
        report = sens.scan(model, D, calib, config.tau1, config.tau2)
    rows = []
    for budget in budgets:
        for mode in modes:
            decisions = replay_decisions(report, budget, mode)
            plan, overlays, _ = apply_decisions(
                model, decisions, calib, D, hg_calib=hg_calib,
                distill_lr=config.distill_lr,
                distill_epochs=config.distill_epochs,
                hg_mode=config.hg_mode, seed=config.seed)
            ppl = perplexity(
                plan_executor(model, plan, D, overlays=overlays), calib)
            if verbose:
                print(f"budget {budget} mode {mode}: ppl {ppl:.4f}")
            if not profiles:
                rows.append({"budget": budget, "mode": mode, "profile": "",
                             "perplexity": ppl, "allreduce_count": 2 * L - budget,
                             "total_transfer_bytes": 0, "transfer_latency_s": 0.0,
                             "total_latency_s": 0.0, "speedup_vs_full_tp": 1.0})
            for prof in profiles:
                cr = plan_cost(plan, model.config, prof,
                               batch=1, seq_len=calib.seq_len)
                rows.append({"budget": budget, "mode": mode,
                             "profile": prof.name, "perplexity": ppl,
                             "allreduce_count": cr.allreduce_count,
                             "total_transfer_bytes": cr.total_transfer_bytes,
                             "transfer_latency_s": cr.transfer_latency_s,
                             "total_latency_s": cr.total_latency_s,
                             "speedup_vs_full_tp": cr.speedup_vs_full_tp})
    return rows, report
