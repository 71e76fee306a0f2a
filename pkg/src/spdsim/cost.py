"""Analytical ring all-reduce communication-latency model.

Predicts data-transfer latency and speedup from sync counts, tensor shapes,
and a bandwidth/latency profile; no kernel-level fidelity is attempted.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

from .checkpoint import atomic_write
from .errors import ConfigError


@dataclass
class SystemProfile:
    name: str = "hbw"
    D: int = 8
    intra_bw: float = 300e9            # bytes/s
    inter_bw: float | None = None      # two-node case
    per_collective_latency: float = 5e-6
    nodes: int = 1
    element_size: int = 8
    compute_time_per_block: float = 0.0

    def validate(self):
        if self.intra_bw <= 0 or (self.inter_bw is not None and self.inter_bw <= 0):
            raise ConfigError("bandwidths must be > 0")
        if self.nodes not in (1, 2):
            raise ConfigError("nodes must be 1 or 2")
        if self.D % self.nodes != 0:
            raise ConfigError("device count must be divisible by node count")
        if self.nodes == 2 and self.inter_bw is None:
            raise ConfigError("two-node profile needs inter_bw")
        return self

    def effective_bw(self):
        if self.nodes == 1:
            return self.intra_bw
        return min(self.intra_bw, self.inter_bw)

    @classmethod
    def from_dict(cls, d):
        return cls(**d).validate()


def builtin_profile(name, D=8, compute_time_per_block=0.0):
    profiles = {
        "hbw": dict(intra_bw=300e9),
        "lbw": dict(intra_bw=10e9),
        "hbw2": dict(intra_bw=300e9, inter_bw=25e9, nodes=2),
        "lbw2": dict(intra_bw=10e9, inter_bw=25e9, nodes=2),
    }
    if name not in profiles:
        raise ConfigError(f"unknown builtin profile {name!r}")
    return SystemProfile(name=name, D=D,
                         compute_time_per_block=compute_time_per_block,
                         **profiles[name]).validate()


@dataclass
class CostReport:
    allreduce_count: int
    total_transfer_bytes: int
    transfer_latency_s: float
    total_latency_s: float
    speedup_vs_full_tp: float
    per_block: list = field(default_factory=list)

    def to_dict(self):
        return {"allreduce_count": self.allreduce_count,
                "total_transfer_bytes": self.total_transfer_bytes,
                "transfer_latency_s": self.transfer_latency_s,
                "total_latency_s": self.total_latency_s,
                "speedup_vs_full_tp": self.speedup_vs_full_tp,
                "per_block": self.per_block}

    def save_json(self, path):
        atomic_write(path, lambda f: f.write(
            json.dumps(self.to_dict(), indent=2).encode()))


def allreduce_cost(tensor_bytes, profile):
    """Ring all-reduce time: 2(D-1)/D volume term plus 2(D-1) hop latencies."""
    profile.validate()
    if tensor_bytes <= 0:
        raise ConfigError("tensor_bytes must be > 0")
    D = profile.D
    bw_term = 2.0 * (D - 1) / D * tensor_bytes / profile.effective_bw()
    lat_term = 2.0 * (D - 1) * profile.per_collective_latency
    return bw_term + lat_term


def plan_cost(plan, model_config, profile, batch=1, seq_len=None):
    """Predicted transfer/total latency and speedup for a sync plan."""
    profile.validate()
    if seq_len is None:
        seq_len = model_config.max_seq
    sync_bytes = batch * seq_len * model_config.d_model * profile.element_size
    one = allreduce_cost(sync_bytes, profile)
    per_block = []
    count = 0
    for i, spec in enumerate(plan.blocks):
        n_sync = 2 if spec.mode == "tp" else 1
        count += n_sync
        per_block.append({"block": i, "mode": spec.mode,
                          "allreduces": n_sync, "bytes": n_sync * sync_bytes,
                          "transfer_latency_s": n_sync * one})
    transfer = count * one
    L = len(plan.blocks)
    compute = profile.compute_time_per_block * L
    total = transfer + compute
    full_tp_total = 2 * L * one + compute
    speedup = full_tp_total / total if total > 0 else 1.0
    return CostReport(
        allreduce_count=count, total_transfer_bytes=count * sync_bytes,
        transfer_latency_s=transfer, total_latency_s=total,
        speedup_vs_full_tp=speedup, per_block=per_block)


def sweep_cost_csv(rows, path):
    """Write (budget, mode, profile, metrics) rows as plot-ready CSV."""
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["budget", "mode", "profile", "perplexity", "allreduce_count",
                "total_transfer_bytes", "transfer_latency_s",
                "total_latency_s", "speedup_vs_full_tp"])
    for r in rows:
        w.writerow([r["budget"], r["mode"], r["profile"], r["perplexity"],
                    r["allreduce_count"], r["total_transfer_bytes"],
                    r["transfer_latency_s"], r["total_latency_s"],
                    r["speedup_vs_full_tp"]])
    atomic_write(path, lambda f: f.write(buf.getvalue().encode()))
