"""D-device mesh simulation: sharded blocks, sync-points, and block dataflows.

The all-reduce is a deterministic ascending-device-order sum (the ring
topology only matters for the cost model), and every collective appends an
event to the mesh trace so sync counts and traffic can be audited.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .model import (attention_partial, block_forward, embed_tokens,
                    final_logits, mlp_partial)
from .tensor import Tensor

BEFORE = "before_mlp_allreduce"
AFTER = "after_mlp_allreduce"


@dataclass
class CollectiveEvent:
    kind: str
    shape: tuple
    bytes: int
    block: int
    site: str  # attn_out | mlp_out

    def to_dict(self):
        return {"kind": self.kind, "shape": list(self.shape),
                "bytes": self.bytes, "block": self.block, "site": self.site}


@dataclass
class DeviceMesh:
    D: int
    trace: list = field(default_factory=list)

    def __post_init__(self):
        if self.D < 1:
            raise ConfigError(f"device count must be >= 1, got {self.D}")

    def record(self, event):
        self.trace.append(event)

    def allreduce_count(self):
        return len(self.trace)

    def total_bytes(self):
        return sum(e.bytes for e in self.trace)

    def export_jsonl(self, path):
        from .checkpoint import atomic_write

        def writer(f):
            for e in self.trace:
                f.write((json.dumps(e.to_dict()) + "\n").encode())
        atomic_write(path, writer)


@dataclass
class BlockSpec:
    """Per-block entry of a SyncPlan."""
    mode: str = "tp"  # tp | spd
    attn_residual_site: str = BEFORE
    bias_residual_site: str = AFTER

    def validate(self):
        if self.mode not in ("tp", "spd"):
            raise ConfigError(f"unknown block mode {self.mode!r}")
        for s in (self.attn_residual_site, self.bias_residual_site):
            if s not in (BEFORE, AFTER):
                raise ConfigError(f"unknown residual site {s!r}")
        return self

    def to_dict(self):
        return {"mode": self.mode,
                "attn_residual_site": self.attn_residual_site,
                "bias_residual_site": self.bias_residual_site}

    @classmethod
    def from_dict(cls, d):
        return cls(mode=d.get("mode", "tp"),
                   attn_residual_site=d.get("attn_residual_site", BEFORE),
                   bias_residual_site=d.get("bias_residual_site", AFTER)).validate()


@dataclass
class SyncPlan:
    blocks: list  # list[BlockSpec], length n_layers

    @classmethod
    def all_tp(cls, n_layers):
        return cls([BlockSpec("tp") for _ in range(n_layers)])

    @classmethod
    def all_spd(cls, n_layers):
        return cls([BlockSpec("spd") for _ in range(n_layers)])

    @classmethod
    def suffix_spd(cls, n_layers, start):
        return cls([BlockSpec("spd" if i >= start else "tp")
                    for i in range(n_layers)])

    @classmethod
    def from_modes(cls, modes):
        return cls([BlockSpec(m) for m in modes])

    def spd_count(self):
        return sum(1 for b in self.blocks if b.mode == "spd")

    def to_json(self):
        return json.dumps([b.to_dict() for b in self.blocks], indent=2)

    @classmethod
    def from_json(cls, text):
        return cls([BlockSpec.from_dict(d) for d in json.loads(text)])

    def save(self, path):
        from .checkpoint import atomic_write
        atomic_write(path, lambda f: f.write(self.to_json().encode()))

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_json(f.read())


@dataclass
class ShardedBlock:
    D: int
    mode: str
    block_index: int
    heads_per_device: list       # list of head-id lists, device order
    w_q: list                    # per-device column gathers
    w_k: list
    w_v: list
    w_o_rows: list               # per-device row gathers of W_O
    b_o: Tensor | None           # replicated
    mlp_up: list
    mlp_gate: list | None
    mlp_down_rows: list
    b_down: Tensor               # replicated
    norm1_w: Tensor
    norm1_b: Tensor | None
    norm2_w: Tensor
    norm2_b: Tensor | None
    cfg: object
    attn_residual_site: str = BEFORE
    bias_residual_site: str = AFTER


def shard_block(weights, cfg, D, mode="tp", head_order=None, block_index=0,
                attn_residual_site=BEFORE, bias_residual_site=AFTER):
    """Split one block's weights over D devices (heads by column groups)."""
    n, hd, ff = cfg.n_heads, cfg.head_dim, cfg.d_ff
    if D < 1 or n % D != 0:
        raise ConfigError(f"device count {D} must divide n_heads {n}")
    if ff % D != 0:
        raise ConfigError(f"device count {D} must divide d_ff {ff}")
    if head_order is None:
        head_order = list(range(n))
    if sorted(head_order) != list(range(n)):
        raise ConfigError("head_order must be a permutation of 0..N-1")
    per = n // D
    ffp = ff // D
    wq, wk, wv, wo, ups, gates, downs = [], [], [], [], [], [], []
    heads_per_device = []
    for i in range(D):
        heads = list(head_order[i * per:(i + 1) * per])
        heads_per_device.append(heads)
        col_idx = np.concatenate([np.arange(h * hd, (h + 1) * hd) for h in heads])
        if heads == list(range(heads[0], heads[0] + per)) and all(
                heads[j] == heads[0] + j for j in range(per)):
            a, b = heads[0] * hd, (heads[0] + per) * hd
            wq.append(T.slice_cols(weights.w_q, a, b))
            wk.append(T.slice_cols(weights.w_k, a, b))
            wv.append(T.slice_cols(weights.w_v, a, b))
            wo.append(T.slice_rows(weights.w_o, a, b))
        else:
            wq.append(T.gather_cols(weights.w_q, col_idx))
            wk.append(T.gather_cols(weights.w_k, col_idx))
            wv.append(T.gather_cols(weights.w_v, col_idx))
            wo.append(T.gather_rows(weights.w_o, col_idx))
        ups.append(T.slice_cols(weights.mlp_up, i * ffp, (i + 1) * ffp))
        if weights.mlp_gate is not None:
            gates.append(T.slice_cols(weights.mlp_gate, i * ffp, (i + 1) * ffp))
        downs.append(T.slice_rows(weights.mlp_down, i * ffp, (i + 1) * ffp))
    return ShardedBlock(
        D=D, mode=mode, block_index=block_index,
        heads_per_device=heads_per_device,
        w_q=wq, w_k=wk, w_v=wv, w_o_rows=wo, b_o=weights.b_o,
        mlp_up=ups, mlp_gate=gates if weights.mlp_gate is not None else None,
        mlp_down_rows=downs, b_down=weights.b_down,
        norm1_w=weights.norm1_w, norm1_b=weights.norm1_b,
        norm2_w=weights.norm2_w, norm2_b=weights.norm2_b, cfg=cfg,
        attn_residual_site=attn_residual_site,
        bias_residual_site=bias_residual_site)


def unshard(shard):
    """Concatenate per-device slices back; test oracle for the round trip."""
    wq = np.concatenate([t.data for t in shard.w_q], axis=1)
    wk = np.concatenate([t.data for t in shard.w_k], axis=1)
    wv = np.concatenate([t.data for t in shard.w_v], axis=1)
    wo = np.concatenate([t.data for t in shard.w_o_rows], axis=0)
    up = np.concatenate([t.data for t in shard.mlp_up], axis=1)
    down = np.concatenate([t.data for t in shard.mlp_down_rows], axis=0)
    out = {"w_q": wq, "w_k": wk, "w_v": wv, "w_o": wo,
           "mlp_up": up, "mlp_down": down}
    if shard.mlp_gate is not None:
        out["mlp_gate"] = np.concatenate([t.data for t in shard.mlp_gate], axis=1)
    return out


def all_reduce_sum(parts, mesh, block=0, site="attn_out"):
    """Element-wise sum in ascending device order; traces one event."""
    shapes = {p.shape for p in parts}
    if len(shapes) != 1:
        raise ContractError(f"all_reduce shapes differ across devices: {shapes}")
    acc = parts[0]
    for p in parts[1:]:
        acc = acc + p
    mesh.record(CollectiveEvent(
        kind="all_reduce_sum", shape=acc.shape,
        bytes=acc.size * T.element_size(), block=block, site=site))
    return acc


def _device_attention(shard, i, x_norm):
    per = len(shard.heads_per_device[i])
    return attention_partial(x_norm, shard.w_q[i], shard.w_k[i], shard.w_v[i],
                             shard.w_o_rows[i], per, shard.cfg.head_dim)


def _device_mlp(shard, i, h_norm):
    gate = shard.mlp_gate[i] if shard.mlp_gate is not None else None
    return mlp_partial(h_norm, shard.mlp_up[i], gate, shard.mlp_down_rows[i],
                       shard.cfg.mlp_kind)


def _norm1(shard, x):
    cfg = shard.cfg
    return T.normalize(x, shard.norm1_w, shard.norm1_b, cfg.norm_kind, cfg.norm_eps)


def _norm2(shard, x):
    cfg = shard.cfg
    return T.normalize(x, shard.norm2_w, shard.norm2_b, cfg.norm_kind, cfg.norm_eps)


def tp_block_forward(shard, x, mesh):
    """Fully synchronous TP block on a replicated input; 2 all-reduces."""
    if shard.mode != "tp":
        raise ContractError(f"tp_block_forward on mode {shard.mode!r} shard")
    return _tp_compute(shard, x, mesh)


def _tp_compute(shard, x, mesh):
    bi = shard.block_index
    xn = _norm1(shard, x)
    partials = [_device_attention(shard, i, xn) for i in range(shard.D)]
    y = all_reduce_sum(partials, mesh, block=bi, site="attn_out")
    if shard.b_o is not None:
        y = y + shard.b_o
    h = x + y
    hn = _norm2(shard, h)
    zs = [_device_mlp(shard, i, hn) for i in range(shard.D)]
    z = all_reduce_sum(zs, mesh, block=bi, site="mlp_out")
    return h + (z + shard.b_down)


def tp_block_forward_streams(shard, xs, mesh):
    """TP block over possibly diverged per-device streams."""
    if all(x is xs[0] for x in xs):
        out = tp_block_forward(shard, xs[0], mesh)
        return [out] * shard.D
    bi = shard.block_index
    xns = [_norm1(shard, x) for x in xs]
    partials = [_device_attention(shard, i, xns[i]) for i in range(shard.D)]
    y = all_reduce_sum(partials, mesh, block=bi, site="attn_out")
    if shard.b_o is not None:
        y = y + shard.b_o
    hs = [xs[i] + y for i in range(shard.D)]
    zs = [_device_mlp(shard, i, _norm2(shard, hs[i])) for i in range(shard.D)]
    z = all_reduce_sum(zs, mesh, block=bi, site="mlp_out")
    return [hs[i] + (z + shard.b_down) for i in range(shard.D)]


def spd_block_forward(shard, xs, mesh):
    """Sync-point-drop block: the attention-output all-reduce is elided.

    Per device: the MLP consumes the local partial attention output; the
    single remaining all-reduce merges attention and MLP partials together.
    Residual placement follows the configured ablation sites.
    """
    if shard.mode != "spd":
        raise ContractError(f"spd_block_forward on mode {shard.mode!r} shard")
    if isinstance(xs, Tensor):
        xs = [xs] * shard.D
    if len(xs) != shard.D:
        raise ContractError(f"expected {shard.D} per-device inputs, got {len(xs)}")
    bi = shard.block_index
    bias = shard.b_o
    if shard.D == 1:
        # degenerate mesh: SPD == TP in exact arithmetic and every residual
        # site collapses; reuse the TP op order so outputs match bit-exactly,
        # but trace the single merged sync-point
        silent = DeviceMesh(1)
        out = _tp_compute(shard, xs[0], silent)
        mesh.record(CollectiveEvent(
            kind="all_reduce_sum", shape=out.shape,
            bytes=out.size * T.element_size(), block=bi, site="mlp_out"))
        return [out]
    shared_input = all(x is xs[0] for x in xs)

    # P_i (bias model) or Y_i (bias-free): local partial attention outputs
    if shared_input:
        xn = _norm1(shard, xs[0])
        attn_parts = [_device_attention(shard, i, xn) for i in range(shard.D)]
    else:
        attn_parts = [_device_attention(shard, i, _norm1(shard, xs[i]))
                      for i in range(shard.D)]
    reduce_parts = []
    for i in range(shard.D):
        p = attn_parts[i]
        mlp_in = xs[0 if shared_input else i] + p
        if bias is not None:
            mlp_in = mlp_in + bias
        z = _device_mlp(shard, i, _norm2(shard, mlp_in))
        r = z
        if shard.attn_residual_site == BEFORE:
            r = r + p
        if bias is not None and shard.bias_residual_site == BEFORE:
            r = r + bias
        reduce_parts.append(r)
    s = all_reduce_sum(reduce_parts, mesh, block=bi, site="mlp_out")

    def out_for(i):
        out = xs[i] + s + shard.b_down
        if shard.attn_residual_site == AFTER:
            out = out + attn_parts[i]
        if bias is not None and shard.bias_residual_site == AFTER:
            out = out + bias
        return out

    if shared_input and shard.attn_residual_site == BEFORE:
        out = out_for(0)
        return [out] * shard.D
    return [out_for(i) for i in range(shard.D)]


def build_sharded_blocks(model, plan, D, overlays=None):
    """Shard every block of a model according to a plan (+optional overlay)."""
    cfg = model.config
    if len(plan.blocks) != cfg.n_layers:
        raise ConfigError(
            f"plan length {len(plan.blocks)} != n_layers {cfg.n_layers}")
    overlays = overlays or {}
    shards = []
    for i, spec in enumerate(plan.blocks):
        spec.validate()
        weights = overlays.get(i, model.blocks[i])
        shards.append(shard_block(
            weights, cfg, D, mode=spec.mode, block_index=i,
            attn_residual_site=spec.attn_residual_site,
            bias_residual_site=spec.bias_residual_site))
    return shards


def model_forward_plan(model, plan, D, tokens, overlays=None, mesh=None):
    """Run the sharded model under a sync plan.

    Returns (per-device logits as numpy arrays, mesh).  Evaluation reads
    device 0.  Per-device residual streams are threaded through blocks; they
    only diverge under the after-site ablation.
    """
    if mesh is None:
        mesh = DeviceMesh(D)
    shards = build_sharded_blocks(model, plan, D, overlays)
    x0 = embed_tokens(model, tokens)
    streams = [x0] * D
    for shard in shards:
        if shard.mode == "tp":
            streams = tp_block_forward_streams(shard, streams, mesh)
        else:
            streams = spd_block_forward(shard, streams, mesh)
    outs = []
    for i in range(D):
        if i > 0 and streams[i] is streams[0]:
            outs.append(outs[0])
        else:
            outs.append(final_logits(model, streams[i]))
    return outs, mesh


def plan_executor(model, plan, D, overlays=None, mesh=None):
    """Executor for perplexity(): device-0 logits under the plan."""
    def run(tokens):
        with T.no_grad():
            outs, _ = model_forward_plan(model, plan, D, tokens,
                                         overlays=overlays, mesh=mesh)
        return outs[0].data
    return run
