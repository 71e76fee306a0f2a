#!/usr/bin/env python3
"""Ablate the residual/bias merge sites of the dropped sync-point.

For a bias-style (layernorm + attention-output-bias) toy model, evaluates
perplexity with the attention partial and the bias folded in before vs after
the remaining MLP all-reduce.  The before-site bias gets summed once per
device, which is catastrophic; the after-site attention partial diverges
across devices.
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from spdsim.data import sample_calibration, synthetic_corpus, tokenize_bytes
from spdsim.model import (ModelConfig, TrainConfig, init_model, perplexity,
                          reference_executor, train_toy)
from spdsim.parallel import (AFTER, BEFORE, BlockSpec, SyncPlan,
                             plan_executor)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--devices", type=int, default=4)
    ap.add_argument("--layers", type=int, default=4)
    ap.add_argument("--steps", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    stream = tokenize_bytes(synthetic_corpus(200_000, seed=args.seed))
    cfg = ModelConfig(n_layers=args.layers, attn_out_bias=True,
                      norm_kind="layernorm")
    model = init_model(cfg, seed=args.seed)
    train_toy(model, stream, TrainConfig(steps=args.steps, batch_size=4,
                                         seq_len=128, seed=args.seed))
    calib = sample_calibration(stream, 8, 128, seed=args.seed)
    print(f"full-sync perplexity: "
          f"{perplexity(reference_executor(model), calib):.4f}")
    for attn_site in (BEFORE, AFTER):
        for bias_site in (BEFORE, AFTER):
            plan = SyncPlan([BlockSpec("spd", attn_residual_site=attn_site,
                                       bias_residual_site=bias_site)
                             for _ in range(args.layers)])
            ppl = perplexity(plan_executor(model, plan, args.devices), calib)
            print(f"attn {attn_site:<22} bias {bias_site:<22} "
                  f"perplexity {ppl:12.4f}")


if __name__ == "__main__":
    main()
