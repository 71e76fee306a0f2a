#!/usr/bin/env python3
"""End-to-end desk experiment: pretrain a toy decoder, scan block
sensitivity, run the budgeted sync-drop pipeline, and cost-model the result.

Writes all artifacts under --out (default runs/e2e) and prints a short
summary table.  Everything is seeded; rerunning reproduces the numbers.
"""

import argparse
import json
import os
import sys
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from spdsim import sensitivity as sens
from spdsim.checkpoint import load_model, save_model
from spdsim.cost import builtin_profile, plan_cost, sweep_cost_csv
from spdsim.data import sample_calibration, synthetic_corpus, tokenize_bytes
from spdsim.model import (ModelConfig, TrainConfig, init_model, perplexity,
                          reference_executor, train_toy)
from spdsim.parallel import SyncPlan, plan_executor
from spdsim.pipeline import PipelineConfig, run_algorithm1, save_artifact, sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/e2e")
    ap.add_argument("--devices", type=int, default=4)
    ap.add_argument("--layers", type=int, default=8)
    ap.add_argument("--steps", type=int, default=150)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--budget", type=float, default=1.0)
    ap.add_argument("--distill-epochs", type=int, default=10)
    ap.add_argument("--distill-lr", type=float, default=2e-4)
    ap.add_argument("--calib-samples", type=int, default=8)
    ap.add_argument("--calib-seq-len", type=int, default=128)
    ap.add_argument("--skip-sweep", action="store_true")
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)

    stream = tokenize_bytes(synthetic_corpus(200_000, seed=args.seed))
    ckpt = os.path.join(args.out, "model.ckpt")
    if os.path.exists(ckpt):
        model = load_model(ckpt)
        print(f"[1/5] reusing checkpoint {ckpt}")
    else:
        t0 = time.time()
        model = init_model(ModelConfig(n_layers=args.layers), seed=args.seed)
        curve = train_toy(model, stream, TrainConfig(
            lr=1e-3, steps=args.steps, batch_size=4, seq_len=128,
            seed=args.seed))
        save_model(ckpt, model)
        print(f"[1/5] pretrained {args.steps} steps in {time.time()-t0:.0f}s "
              f"(loss {curve[0]:.3f} -> {curve[-1]:.3f})")

    calib = sample_calibration(stream, args.calib_samples,
                               args.calib_seq_len, seed=args.seed)
    base_ppl = perplexity(reference_executor(model), calib)
    print(f"      reference perplexity {base_ppl:.4f}")

    t0 = time.time()
    report = sens.scan(model, args.devices, calib)
    report.save_json(os.path.join(args.out, "sensitivity.json"))
    report.save_csv(os.path.join(args.out, "sensitivity.csv"))
    print(f"[2/5] sensitivity scan in {time.time()-t0:.0f}s")
    for i, (s, c) in enumerate(zip(report.scores, report.categories)):
        print(f"      block {i}: S={s:+.6f}  {c}")

    config = PipelineConfig(
        devices=args.devices, budget=args.budget, seed=args.seed,
        distill_lr=args.distill_lr, distill_epochs=args.distill_epochs)
    t0 = time.time()
    artifact = run_algorithm1(model, calib, config, report=report,
                              hg_calib=calib, verbose=True)
    save_artifact(artifact, model.config, args.out)
    opt_ppl = artifact.eval_table[0]["perplexity"]
    k = artifact.plan.spd_count()
    print(f"[3/5] pipeline ({k}/{args.layers} blocks converted) in "
          f"{time.time()-t0:.0f}s: perplexity {opt_ppl:.4f}")

    L = model.config.n_layers
    rows = []
    for name in ("hbw", "lbw"):
        prof = builtin_profile(name, D=args.devices)
        cr = plan_cost(artifact.plan, model.config, prof,
                       seq_len=args.calib_seq_len)
        full = plan_cost(SyncPlan.all_tp(L), model.config, prof,
                         seq_len=args.calib_seq_len)
        saved = 1 - cr.total_transfer_bytes / full.total_transfer_bytes
        print(f"[4/5] {name}: {cr.allreduce_count} all-reduces, "
              f"{saved*100:.1f}% transfer bytes saved, "
              f"speedup x{cr.speedup_vs_full_tp:.3f}")
        rows.append({"profile": name, **cr.to_dict()})
    with open(os.path.join(args.out, "cost.json"), "w") as f:
        json.dump(rows, f, indent=2)

    if not args.skip_sweep:
        t0 = time.time()
        sweep_rows, _ = sweep(model, calib, config, modes=["zs"],
                              profiles=[builtin_profile("lbw",
                                                        D=args.devices)],
                              report=report)
        sweep_cost_csv(sweep_rows, os.path.join(args.out, "sweep.csv"))
        print(f"[5/5] zero-shot budget sweep ({len(sweep_rows)} rows) in "
              f"{time.time()-t0:.0f}s -> {args.out}/sweep.csv")
    print(f"done; artifacts in {args.out}")


if __name__ == "__main__":
    main()
