"""Command-line workflow: pretrain, scan, optimize, eval-ppl, eval-cost,
sweep, export-report.

Options can come from a flat ``key = value`` config file (--config); explicit
flags win over file values.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import sensitivity as sens
from .checkpoint import atomic_write, load_model, load_overlay, save_model
from .cost import SystemProfile, builtin_profile, plan_cost, sweep_cost_csv
from .data import (load_and_tokenize, sample_calibration, synthetic_corpus,
                   tokenize_bytes)
from .errors import SpdError
from .model import (ModelConfig, TrainConfig, init_model, perplexity,
                    reference_executor, train_toy)
from .parallel import SyncPlan, plan_executor
from .pipeline import (MODES, PipelineConfig, run_algorithm1, save_artifact,
                       sweep)

DEFAULT_SYNTHETIC_BYTES = 200_000


def parse_config_file(path):
    """Flat ``key = value`` lines; '#' starts a comment."""
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise SpdError(f"{path}:{lineno}: expected 'key = value'")
            k, v = line.split("=", 1)
            values[k.strip()] = v.strip()
    return values


def parse_budget(text):
    if "." in text:
        return float(text)
    return int(text)


def build_corpus(args):
    if args.corpus:
        return load_and_tokenize(args.corpus)
    return tokenize_bytes(synthetic_corpus(DEFAULT_SYNTHETIC_BYTES,
                                           seed=args.seed))


def build_calibration(args, seq_len=None, n_samples=None):
    stream = build_corpus(args)
    return sample_calibration(
        stream, n_samples or args.calib_samples,
        seq_len or args.calib_seq_len, seed=args.seed,
        source=args.corpus or "synthetic")


def resolve_profiles(names, D):
    profiles = []
    for name in names:
        if os.path.exists(name):
            with open(name) as f:
                profiles.append(SystemProfile.from_dict(json.load(f)))
        else:
            profiles.append(builtin_profile(name, D=D))
    return profiles


def add_common(p):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--checkpoint", help="SPDCKPT1 model checkpoint")
    p.add_argument("--devices", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out")
    p.add_argument("--corpus", default="", help="text file; empty = synthetic")
    p.add_argument("--calib-samples", type=int, default=16)
    p.add_argument("--calib-seq-len", type=int, default=256)


def make_parser():
    ap = argparse.ArgumentParser(
        prog="spdsim",
        description="Sync-point-drop simulator and optimizer for "
                    "tensor-parallel decoder inference")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train and save the toy checkpoint")
    add_common(p)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--train-seq-len", type=int, default=128)
    p.add_argument("--layers", type=int, default=8)
    p.add_argument("--attn-out-bias", action="store_true")
    p.add_argument("--norm-kind", default="rmsnorm",
                   choices=["rmsnorm", "layernorm"])
    p.add_argument("--mlp-kind", default="gelu2", choices=["gelu2", "swiglu"])

    p = sub.add_parser("scan", help="emit the sensitivity report")
    add_common(p)
    p.add_argument("--tau1", type=float, default=sens.DEFAULT_TAU1)
    p.add_argument("--tau2", type=float, default=sens.DEFAULT_TAU2)

    p = sub.add_parser("optimize", help="run the budgeted conversion pipeline")
    add_common(p)
    p.add_argument("--budget", default="1.0",
                   help="fraction with a dot (0.5) or block count (4)")
    p.add_argument("--tau1", type=float, default=sens.DEFAULT_TAU1)
    p.add_argument("--tau2", type=float, default=sens.DEFAULT_TAU2)
    p.add_argument("--mode", default="zs+b2b+hg", choices=list(MODES))
    p.add_argument("--distill-lr", type=float, default=5e-5)
    p.add_argument("--distill-epochs", type=int, default=10)
    p.add_argument("--hg-mode", default="exact", choices=["exact", "greedy"])

    p = sub.add_parser("eval-ppl", help="evaluate a (checkpoint, plan, overlay)")
    add_common(p)
    p.add_argument("--plan", help="SyncPlan JSON file (default: all-TP)")
    p.add_argument("--overlay", help="overlay checkpoint")

    p = sub.add_parser("eval-cost", help="cost-model a plan under profiles")
    add_common(p)
    p.add_argument("--plan", help="SyncPlan JSON file")
    p.add_argument("--budget", help="alternatively: SPD the first-N plan")
    p.add_argument("--profile", action="append", default=None,
                   help="builtin name (hbw/lbw/hbw2/lbw2) or JSON file; repeatable")
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--compute-time-per-block", type=float, default=0.0)

    p = sub.add_parser("sweep", help="budget sweep CSV (ppl + predicted cost)")
    add_common(p)
    p.add_argument("--modes", default="zs,zs+b2b,zs+b2b+hg")
    p.add_argument("--tau1", type=float, default=sens.DEFAULT_TAU1)
    p.add_argument("--tau2", type=float, default=sens.DEFAULT_TAU2)
    p.add_argument("--profile", action="append", default=None)
    p.add_argument("--distill-lr", type=float, default=5e-5)
    p.add_argument("--distill-epochs", type=int, default=10)
    p.add_argument("--hg-mode", default="exact", choices=["exact", "greedy"])
    p.add_argument("--compute-time-per-block", type=float, default=0.0)

    p = sub.add_parser("export-report", help="bundle an output directory's "
                                             "JSON/CSV artifacts into one JSON")
    p.add_argument("--out", default="out")
    p.add_argument("--bundle", default=None,
                   help="destination (default: <out>/report_bundle.json)")
    return ap


def apply_config_file(args):
    if getattr(args, "config", None):
        file_values = parse_config_file(args.config)
        for k, v in file_values.items():
            attr = k.replace("-", "_")
            if not hasattr(args, attr):
                raise SpdError(f"unknown config key {k!r}")
            cur = getattr(args, attr)
            # flags win: only fill attributes still at their parser default
            default = args._defaults.get(attr)
            if cur == default:
                if isinstance(default, bool):
                    v = v.lower() in ("1", "true", "yes")
                elif isinstance(default, int):
                    v = int(v)
                elif isinstance(default, float):
                    v = float(v)
                setattr(args, attr, v)
    return args


def _require_checkpoint(args):
    if not args.checkpoint:
        raise SpdError("--checkpoint is required for this command")
    return load_model(args.checkpoint)


def cmd_pretrain(args):
    cfg = ModelConfig(n_layers=args.layers, seed=args.seed,
                      attn_out_bias=args.attn_out_bias,
                      norm_kind=args.norm_kind, mlp_kind=args.mlp_kind)
    model = init_model(cfg, seed=args.seed)
    corpus = build_corpus(args)
    curve = train_toy(model, corpus, TrainConfig(
        lr=args.lr, steps=args.steps, batch_size=args.batch_size,
        seq_len=args.train_seq_len, seed=args.seed, verbose=True))
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "model.ckpt")
    save_model(path, model)
    atomic_write(os.path.join(args.out, "loss_curve.json"),
                 lambda f: f.write(json.dumps(curve).encode()))
    if curve:
        print(f"trained {args.steps} steps, loss {curve[0]:.4f} -> "
              f"{curve[-1]:.4f}")
    print(f"saved {path}")
    return 0


def cmd_scan(args):
    model = _require_checkpoint(args)
    calib = build_calibration(args)
    report = sens.scan(model, args.devices, calib, args.tau1, args.tau2)
    os.makedirs(args.out, exist_ok=True)
    report.save_json(os.path.join(args.out, "sensitivity.json"))
    report.save_csv(os.path.join(args.out, "sensitivity.csv"))
    for i, (s, c) in enumerate(zip(report.scores, report.categories)):
        print(f"block {i}: S={s:+.6f}  {c}")
    return 0


def _pipeline_config(args):
    return PipelineConfig(
        checkpoint=args.checkpoint or "", devices=args.devices,
        budget=parse_budget(str(args.budget)) if hasattr(args, "budget") and
        args.budget is not None else 1.0,
        tau1=args.tau1, tau2=args.tau2,
        distill_lr=args.distill_lr, distill_epochs=args.distill_epochs,
        hg_mode=args.hg_mode, calib_samples=args.calib_samples,
        calib_seq_len=args.calib_seq_len, corpus=args.corpus,
        out_dir=args.out, seed=args.seed,
        mode=getattr(args, "mode", "zs+b2b+hg"))


def cmd_optimize(args):
    model = _require_checkpoint(args)
    calib = build_calibration(args)
    config = _pipeline_config(args)
    hg_calib = build_calibration(args, seq_len=config.hg_calib_seq_len,
                                 n_samples=config.hg_calib_samples)
    artifact = run_algorithm1(model, calib, config, hg_calib=hg_calib,
                              verbose=True)
    save_artifact(artifact, model.config, args.out)
    for row in artifact.eval_table:
        print(f"budget {row['budget']} mode {row['mode']}: "
              f"perplexity {row['perplexity']:.4f}")
    print(f"artifacts in {args.out}")
    return 0


def cmd_eval_ppl(args):
    model = _require_checkpoint(args)
    calib = build_calibration(args)
    L = model.config.n_layers
    plan = SyncPlan.load(args.plan) if args.plan else SyncPlan.all_tp(L)
    overlays = None
    if args.overlay:
        overlays, _ = load_overlay(args.overlay)
    ppl = perplexity(plan_executor(model, plan, args.devices,
                                   overlays=overlays), calib)
    ref = perplexity(reference_executor(model), calib)
    os.makedirs(args.out, exist_ok=True)
    atomic_write(os.path.join(args.out, "eval_ppl.json"), lambda f: f.write(
        json.dumps({"plan_ppl": ppl, "reference_ppl": ref,
                    "spd_blocks": plan.spd_count()}, indent=2).encode()))
    print(f"plan perplexity {ppl:.6f} (reference {ref:.6f}, "
          f"{plan.spd_count()}/{L} SPD blocks)")
    return 0


def cmd_eval_cost(args):
    model = _require_checkpoint(args)
    L = model.config.n_layers
    if args.plan:
        plan = SyncPlan.load(args.plan)
    elif args.budget is not None:
        cfg = PipelineConfig(budget=parse_budget(str(args.budget)))
        k = cfg.budget_count(L)
        plan = SyncPlan.suffix_spd(L, L - k)
    else:
        plan = SyncPlan.all_tp(L)
    names = args.profile or ["hbw", "lbw"]
    profiles = resolve_profiles(names, args.devices)
    for prof in profiles:
        prof.compute_time_per_block = args.compute_time_per_block
    os.makedirs(args.out, exist_ok=True)
    full = SyncPlan.all_tp(L)
    results = {}
    for prof in profiles:
        cr = plan_cost(plan, model.config, prof, batch=args.batch,
                       seq_len=args.calib_seq_len)
        base = plan_cost(full, model.config, prof, batch=args.batch,
                         seq_len=args.calib_seq_len)
        reduction = 1.0 - cr.total_transfer_bytes / base.total_transfer_bytes
        results[prof.name] = {**cr.to_dict(),
                              "transfer_byte_reduction": reduction}
        print(f"{prof.name}: {cr.allreduce_count} all-reduces, "
              f"{reduction * 100:.1f}% transfer-byte reduction, "
              f"speedup x{cr.speedup_vs_full_tp:.3f}")
    atomic_write(os.path.join(args.out, "eval_cost.json"), lambda f: f.write(
        json.dumps(results, indent=2).encode()))
    return 0


def cmd_sweep(args):
    model = _require_checkpoint(args)
    calib = build_calibration(args)
    args.budget = 1.0
    args.mode = "zs+b2b+hg"
    config = _pipeline_config(args)
    hg_calib = build_calibration(args, seq_len=config.hg_calib_seq_len,
                                 n_samples=config.hg_calib_samples)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    for m in modes:
        if m not in MODES:
            raise SpdError(f"unknown sweep mode {m!r}")
    names = args.profile or ["hbw", "lbw"]
    profiles = resolve_profiles(names, args.devices)
    for prof in profiles:
        prof.compute_time_per_block = args.compute_time_per_block
    rows, report = sweep(model, calib, config, modes=modes,
                         profiles=profiles, hg_calib=hg_calib, verbose=True)
    os.makedirs(args.out, exist_ok=True)
    sweep_cost_csv(rows, os.path.join(args.out, "sweep.csv"))
    report.save_json(os.path.join(args.out, "sensitivity.json"))
    print(f"wrote {len(rows)} rows to {os.path.join(args.out, 'sweep.csv')}")
    return 0


def cmd_export_report(args):
    bundle = {}
    for name in sorted(os.listdir(args.out)):
        path = os.path.join(args.out, name)
        if name.endswith(".json"):
            with open(path) as f:
                bundle[name] = json.load(f)
        elif name.endswith((".csv", ".jsonl")):
            with open(path) as f:
                bundle[name] = f.read()
    dest = args.bundle or os.path.join(args.out, "report_bundle.json")
    atomic_write(dest, lambda f: f.write(json.dumps(bundle, indent=2).encode()))
    print(f"bundled {len(bundle)} artifacts into {dest}")
    return 0


COMMANDS = {
    "pretrain": cmd_pretrain,
    "scan": cmd_scan,
    "optimize": cmd_optimize,
    "eval-ppl": cmd_eval_ppl,
    "eval-cost": cmd_eval_cost,
    "sweep": cmd_sweep,
    "export-report": cmd_export_report,
}


def main(argv=None):
    ap = make_parser()
    args = ap.parse_args(argv)
    sp = ap._subparsers._group_actions[0].choices[args.command]
    args._defaults = {a.dest: a.default for a in sp._actions}
    try:
        args = apply_config_file(args)
        return COMMANDS[args.command](args)
    except SpdError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
