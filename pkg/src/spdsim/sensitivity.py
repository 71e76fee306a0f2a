"""Block-wise sync-sensitivity identification and ISB/SB/ESB classification.

Sensitivity of block i is the perplexity delta between the plan that keeps
block i synchronous (SPD from i+1 onward) and the plan that also drops it
(SPD from i onward); the suffix scan yields all L scores from L+1 evaluations.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

from .checkpoint import atomic_write
from .errors import ConfigError, ContractError, DataError
from .model import perplexity
from .parallel import SyncPlan, plan_executor

ISB = "ISB"
SB = "SB"
ESB = "ESB"

DEFAULT_TAU1 = 0.05
DEFAULT_TAU2 = 10.0


@dataclass
class SensitivityReport:
    suffix_ppl: list          # L+1 entries; index j = SPD on blocks j..L-1
    scores: list              # S[i] = suffix_ppl[i] - suffix_ppl[i+1]
    ranking: list             # block ids ascending by score (ties: block id)
    categories: list          # per-block ISB | SB | ESB
    tau1: float
    tau2: float

    def to_dict(self):
        return {"suffix_ppl": self.suffix_ppl, "scores": self.scores,
                "ranking": self.ranking, "categories": self.categories,
                "tau1": self.tau1, "tau2": self.tau2}

    @classmethod
    def from_dict(cls, d):
        return cls(list(d["suffix_ppl"]), list(d["scores"]), list(d["ranking"]),
                   list(d["categories"]), float(d["tau1"]), float(d["tau2"]))

    def save_json(self, path):
        atomic_write(path, lambda f: f.write(
            json.dumps(self.to_dict(), indent=2).encode()))

    @classmethod
    def load_json(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def save_csv(self, path):
        """Suffix-curve companion for plotting."""
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["spd_start_block", "perplexity"])
        for j, p in enumerate(self.suffix_ppl):
            w.writerow([j, p])
        w.writerow([])
        w.writerow(["block", "score", "category"])
        for i, (s, c) in enumerate(zip(self.scores, self.categories)):
            w.writerow([i, s, c])
        atomic_write(path, lambda f: f.write(buf.getvalue().encode()))


def suffix_ppl_curve(model, D, calib, progress=None):
    """L+1 perplexities of the suffix-SPD plans (index L = all-TP)."""
    if not getattr(calib, "samples", None):
        raise DataError("empty calibration set")
    L = model.config.n_layers
    curve = []
    for j in range(L + 1):
        plan = SyncPlan.suffix_spd(L, j)
        curve.append(perplexity(plan_executor(model, plan, D), calib))
        if progress is not None:
            progress(j, curve[-1])
    return curve


def sensitivity_scores(curve):
    """Consecutive suffix-curve differences; may be negative."""
    if len(curve) < 1:
        raise ContractError("suffix curve must have L+1 >= 1 entries")
    return [curve[i] - curve[i + 1] for i in range(len(curve) - 1)]


def rank_blocks(scores):
    return sorted(range(len(scores)), key=lambda i: (scores[i], i))


def classify_blocks(scores, tau1=DEFAULT_TAU1, tau2=DEFAULT_TAU2,
                    suffix_ppl=None):
    """Threshold the scores into ISB/SB/ESB and build the report."""
    if tau1 > tau2:
        raise ConfigError(f"tau1 {tau1} > tau2 {tau2}")
    categories = []
    for s in scores:
        if s <= tau1:
            categories.append(ISB)
        elif s <= tau2:
            categories.append(SB)
        else:
            categories.append(ESB)
    return SensitivityReport(
        suffix_ppl=list(suffix_ppl) if suffix_ppl is not None else [],
        scores=list(scores), ranking=rank_blocks(scores),
        categories=categories, tau1=tau1, tau2=tau2)


def scan(model, D, calib, tau1=DEFAULT_TAU1, tau2=DEFAULT_TAU2, progress=None):
    """Full sensitivity scan: suffix curve + scores + classification."""
    curve = suffix_ppl_curve(model, D, calib, progress=progress)
    return classify_blocks(sensitivity_scores(curve), tau1, tau2,
                           suffix_ppl=curve)
