"""Block-to-block distillation: train an SPD-mode parameter copy of one
block to mimic the frozen TP-mode block output under MSE.

Each calibration sample is one optimization step; the student starts as a
bit-identical copy of the teacher and only the chosen block's parameters
train.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DivergenceError
from .model import Adam, embed_tokens
from .parallel import (BEFORE, AFTER, DeviceMesh, SyncPlan, shard_block,
                       spd_block_forward, tp_block_forward)


@dataclass
class DistillJob:
    block_index: int
    teacher: object                  # DecoderBlockWeights, frozen
    student: object                  # DecoderBlockWeights, trainable copy
    inputs: list                     # cached block-input hidden states (numpy)
    cfg: object                      # ModelConfig
    D: int
    lr: float = 5e-5
    epochs: int = 10
    attn_residual_site: str = BEFORE
    bias_residual_site: str = AFTER


def cache_block_inputs(model, calib, block_index, D=1):
    """Hidden states entering a block after an all-TP prefix on the original
    parameters; one array per calibration sample."""
    cfg = model.config
    if not 0 <= block_index < cfg.n_layers:
        raise ConfigError(f"block index {block_index} out of range")
    mesh = DeviceMesh(D)
    prefix = [shard_block(model.blocks[i], cfg, D, mode="tp", block_index=i)
              for i in range(block_index)]
    cached = []
    with T.no_grad():
        for tokens in calib.samples:
            h = embed_tokens(model, tokens)
            for shard in prefix:
                h = tp_block_forward(shard, h, mesh)
            cached.append(h.data.copy())
    return cached


def make_job(model, calib, block_index, D, lr=5e-5, epochs=10,
             teacher=None, cached_inputs=None):
    """Build a distillation job; the student starts bit-equal to the teacher."""
    teacher = teacher if teacher is not None else model.blocks[block_index]
    if cached_inputs is None:
        cached_inputs = cache_block_inputs(model, calib, block_index, D=D)
    return DistillJob(
        block_index=block_index,
        teacher=teacher.copy(requires_grad=False),
        student=teacher.copy(requires_grad=True),
        inputs=cached_inputs, cfg=model.config, D=D, lr=lr, epochs=epochs)


def distill_block(job):
    """Run the job; returns (student weights, per-epoch mean losses, per-step
    losses)."""
    cfg = job.cfg
    silent = DeviceMesh(job.D)
    teacher_shard = shard_block(job.teacher, cfg, job.D, mode="tp",
                                block_index=job.block_index)
    targets = []
    with T.no_grad():
        for x in job.inputs:
            targets.append(tp_block_forward(teacher_shard, T.Tensor(x),
                                            silent).data.copy())
    opt = Adam(job.student.parameters(), lr=job.lr)
    epoch_means = []
    step_losses = []
    step = 0
    for _ in range(job.epochs):
        epoch = []
        for x, tgt in zip(job.inputs, targets):
            opt.zero_grad()
            shard = shard_block(
                job.student, cfg, job.D, mode="spd",
                block_index=job.block_index,
                attn_residual_site=job.attn_residual_site,
                bias_residual_site=job.bias_residual_site)
            outs = spd_block_forward(shard, T.Tensor(x), silent)
            loss = T.mse(outs[0], T.Tensor(tgt))
            val = float(loss.data)
            if not math.isfinite(val):
                raise DivergenceError(
                    f"distillation diverged at step {step}", step=step)
            T.backward(loss)
            opt.step()
            epoch.append(val)
            step_losses.append(val)
            step += 1
        if epoch:
            epoch_means.append(float(np.mean(epoch)))
    return job.student, epoch_means, step_losses


def distillation_loss(student, teacher, x, cfg, D,
                      attn_residual_site=BEFORE, bias_residual_site=AFTER,
                      block_index=0):
    """Single-sample distillation loss as a differentiable scalar (used by
    gradient checks)."""
    silent = DeviceMesh(D)
    tshard = shard_block(teacher, cfg, D, mode="tp", block_index=block_index)
    with T.no_grad():
        tgt = tp_block_forward(tshard, T.Tensor(x), silent).data.copy()
    sshard = shard_block(student, cfg, D, mode="spd", block_index=block_index,
                         attn_residual_site=attn_residual_site,
                         bias_residual_site=bias_residual_site)
    outs = spd_block_forward(sshard, T.Tensor(x), silent)
    return T.mse(outs[0], T.Tensor(tgt))
