"""Head grouping for extremely sensitive blocks: balanced anti-clustered head
scattering, MLP-partition matching, and the physical Q/K/V/O reordering that
realizes the grouping under contiguous sharding.

Reordering is an exact-equivalence transformation under full sync; the chosen
partition only changes behavior once the attention sync-point is dropped.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .checkpoint import atomic_write
from .errors import CapacityError, ConfigError, ContractError, DataError
from .model import DecoderBlockWeights, block_forward, embed_tokens
from .tensor import Tensor

EXACT_PARTITION_BUDGET = 200_000
MATCH_BUDGET_DEVICES = 8


@dataclass
class HeadGrouping:
    A: list                 # D head-index groups, each of size N/D
    mc: list                # mc[g] = MLP partition / device assigned to group g
    head_order: list        # flat permutation: device m holds heads, in order
    scatter_objective: float = 0.0
    match_objective: float = 0.0

    def to_dict(self):
        return {"A": [list(g) for g in self.A], "MC": list(self.mc),
                "head_order": list(self.head_order),
                "scatter_objective": self.scatter_objective,
                "match_objective": self.match_objective}

    def save_json(self, path, block=None):
        d = self.to_dict()
        if block is not None:
            d["block"] = block
        atomic_write(path, lambda f: f.write(json.dumps(d, indent=2).encode()))


def make_grouping(A, mc, scatter_objective=0.0, match_objective=0.0):
    D = len(A)
    if sorted(mc) != list(range(D)):
        raise ContractError("MC must be a bijection onto MLP partitions")
    order = []
    for m in range(D):
        g = mc.index(m)
        order.extend(sorted(A[g]))
    return HeadGrouping([sorted(g) for g in A], list(mc), order,
                        scatter_objective, match_objective)


def identity_grouping(n_heads, D):
    per = n_heads // D
    A = [list(range(i * per, (i + 1) * per)) for i in range(D)]
    return make_grouping(A, list(range(D)))


# -- head signatures ----------------------------------------------------


def _causal_softmax_np(scores):
    t = scores.shape[-1]
    mask = np.triu(np.ones((t, t), dtype=bool), k=1)
    masked = np.where(mask, -np.inf, scores)
    m = masked.max(axis=-1, keepdims=True)
    e = np.exp(masked - m)
    e[..., mask] = 0.0
    return e / e.sum(axis=-1, keepdims=True)


def block_input_states(model, block_index, calib_subset):
    """Reference hidden states entering a block, per calibration sequence."""
    if not calib_subset:
        raise DataError("empty calibration subset")
    cfg = model.config
    states = []
    with T.no_grad():
        for tokens in calib_subset:
            h = embed_tokens(model, tokens)
            for w in model.blocks[:block_index]:
                h = block_forward(w, h, cfg)
            states.append(h.data.copy())
    return states


def _head_probs(weights, cfg, x):
    """Post-softmax causal attention probabilities per head [N x T x T]."""
    xn_t = T.normalize(Tensor(x), weights.norm1_w, weights.norm1_b,
                       cfg.norm_kind, cfg.norm_eps)
    xn = xn_t.data
    t_len, n, hd = x.shape[0], cfg.n_heads, cfg.head_dim
    q = (xn @ weights.w_q.data).reshape(t_len, n, hd).transpose(1, 0, 2)
    k = (xn @ weights.w_k.data).reshape(t_len, n, hd).transpose(1, 0, 2)
    scores = q @ k.transpose(0, 2, 1) / math.sqrt(hd)
    return _causal_softmax_np(scores)


def head_score_vectors(model, block_index, calib_subset):
    """Per-head signature: concatenated flattened causal attention-probability
    matrices over the calibration subset, fixed sequence order."""
    cfg = model.config
    states = block_input_states(model, block_index, calib_subset)
    weights = model.blocks[block_index]
    with T.no_grad():
        per_seq = [_head_probs(weights, cfg, x) for x in states]
    return np.concatenate(
        [p.reshape(cfg.n_heads, -1) for p in per_seq], axis=1)


# -- head scattering (balanced anti-clustering) -------------------------


def _distance_matrix(signatures):
    diff = signatures[:, None, :] - signatures[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def _objective(partition, dist):
    total = 0.0
    for group in partition:
        for j in range(len(group)):
            for k in range(j + 1, len(group)):
                total += dist[group[j], group[k]]
    return total


def _canonical(partition):
    groups = [tuple(sorted(g)) for g in partition]
    return tuple(sorted(groups))


def enumerate_balanced_partitions(n, d):
    """All unordered partitions of 0..n-1 into d groups of size n/d, in
    lexicographic canonical order."""
    per = n // d

    def rec(remaining):
        if not remaining:
            yield []
            return
        first = remaining[0]
        rest = remaining[1:]
        for combo in itertools.combinations(rest, per - 1):
            group = (first,) + combo
            left = [x for x in rest if x not in combo]
            for tail in rec(left):
                yield [group] + tail

    yield from rec(list(range(n)))


def _partition_count(n, d):
    per = n // d
    total = math.factorial(n) // (math.factorial(per) ** d) // math.factorial(d)
    return total


def head_scatter(signatures, D, mode="exact", seed=0, restarts=16):
    """Balanced head partition maximizing summed intra-group signature
    distances (anti-clustering)."""
    signatures = np.asarray(signatures)
    n = signatures.shape[0]
    if D < 1 or n % D != 0:
        raise ConfigError(f"device count {D} must divide head count {n}")
    dist = _distance_matrix(signatures)
    if mode == "exact":
        if _partition_count(n, D) > EXACT_PARTITION_BUDGET:
            raise CapacityError(
                f"exact enumeration infeasible for N={n}, D={D}")
        best, best_obj = None, -np.inf
        for part in enumerate_balanced_partitions(n, D):
            obj = _objective(part, dist)
            if obj > best_obj + 1e-15 or best is None:
                best, best_obj = part, obj
        return [sorted(int(h) for h in g) for g in best], float(best_obj)
    if mode != "greedy":
        raise ConfigError(f"unknown head_scatter mode {mode!r}")
    rng = np.random.default_rng(seed)
    per = n // D
    best, best_obj = None, -np.inf
    for _ in range(restarts):
        perm = rng.permutation(n)
        part = [list(perm[i * per:(i + 1) * per]) for i in range(D)]
        obj = _objective(part, dist)
        improved = True
        while improved:
            improved = False
            for gi in range(D):
                for gj in range(gi + 1, D):
                    for a in range(per):
                        for b in range(per):
                            ha, hb = part[gi][a], part[gj][b]
                            delta = 0.0
                            for h in part[gi]:
                                if h != ha:
                                    delta += dist[hb, h] - dist[ha, h]
                            for h in part[gj]:
                                if h != hb:
                                    delta += dist[ha, h] - dist[hb, h]
                            if delta > 1e-12:
                                part[gi][a], part[gj][b] = hb, ha
                                obj += delta
                                improved = True
        cand = _canonical(part)
        if obj > best_obj + 1e-12 or (
                abs(obj - best_obj) <= 1e-12 and best is not None
                and cand < _canonical(best)):
            best, best_obj = [list(g) for g in cand], obj
    return [sorted(int(h) for h in g) for g in best], float(_objective(best, dist))


# -- MLP matching -------------------------------------------------------


def _partial_attention_np(weights, cfg, x, heads):
    """Y restricted to a head subset (through matching W_O rows), numpy."""
    probs = _head_probs(weights, cfg, x)
    xn = T.normalize(Tensor(x), weights.norm1_w, weights.norm1_b,
                     cfg.norm_kind, cfg.norm_eps).data
    t_len, hd = x.shape[0], cfg.head_dim
    n = cfg.n_heads
    v = (xn @ weights.w_v.data).reshape(t_len, n, hd).transpose(1, 0, 2)
    ctx = probs @ v  # [N x T x hd]
    out = np.zeros((t_len, cfg.d_model))
    for h in heads:
        rows = weights.w_o.data[h * hd:(h + 1) * hd]
        out += ctx[h].reshape(t_len, hd) @ rows
    return out


def _norm2_np(weights, cfg, x):
    return T.normalize(Tensor(x), weights.norm2_w, weights.norm2_b,
                       cfg.norm_kind, cfg.norm_eps).data


def mlp_match(model, block_index, A, calib_subset):
    """Assign head groups to MLP partitions maximizing the summed mean
    per-token L2 norm of the partial MLP outputs; exhaustive over D!."""
    D = len(A)
    if D > MATCH_BUDGET_DEVICES:
        raise CapacityError(f"D={D} exceeds the D! matching budget")
    cfg = model.config
    weights = model.blocks[block_index]
    if cfg.d_ff % D != 0:
        raise ConfigError("device count must divide d_ff")
    ffp = cfg.d_ff // D
    states = block_input_states(model, block_index, calib_subset)
    score = np.zeros((D, D))
    with T.no_grad():
        for x in states:
            for g, heads in enumerate(A):
                y = _partial_attention_np(weights, cfg, x, heads)
                mlp_in = x + y
                if weights.b_o is not None:
                    mlp_in = mlp_in + weights.b_o.data
                hn = _norm2_np(weights, cfg, mlp_in)
                for m in range(D):
                    up = weights.mlp_up.data[:, m * ffp:(m + 1) * ffp]
                    down = weights.mlp_down.data[m * ffp:(m + 1) * ffp]
                    if cfg.mlp_kind == "swiglu":
                        gate = weights.mlp_gate.data[:, m * ffp:(m + 1) * ffp]
                        s = 1.0 / (1.0 + np.exp(-(hn @ gate)))
                        z = ((hn @ gate) * s * (hn @ up)) @ down
                    else:
                        from scipy.special import erf
                        u = hn @ up
                        z = (u * 0.5 * (1.0 + erf(u / math.sqrt(2.0)))) @ down
                    score[g, m] += np.linalg.norm(z, axis=1).mean()
    score /= len(states)
    best, best_total = None, -np.inf
    for perm in itertools.permutations(range(D)):
        total = sum(score[g, perm[g]] for g in range(D))
        if total > best_total + 1e-15:
            best, best_total = list(perm), total
    return best, float(best_total), score


def pair_score_match(score):
    """Argmax assignment from a precomputed (group x partition) score matrix;
    lexicographically smallest permutation wins ties."""
    D = score.shape[0]
    if D > MATCH_BUDGET_DEVICES:
        raise CapacityError(f"D={D} exceeds the D! matching budget")
    best, best_total = None, -np.inf
    for perm in itertools.permutations(range(D)):
        total = sum(score[g, perm[g]] for g in range(D))
        if total > best_total + 1e-15:
            best, best_total = list(perm), total
    return best, float(best_total)


# -- physical reordering ------------------------------------------------


def reorder_block_weights(weights, grouping):
    """Permute head column groups of Q/K/V and row groups of O so each device
    receives its assigned head group under contiguous sharding."""
    n = len(grouping.head_order)
    if sorted(grouping.head_order) != list(range(n)):
        raise ContractError("head_order must be a permutation of 0..N-1")
    d_model = weights.w_q.data.shape[0]
    if d_model % n != 0:
        raise ContractError("head count incompatible with block weights")
    hd = d_model // n
    col_idx = np.concatenate(
        [np.arange(h * hd, (h + 1) * hd) for h in grouping.head_order])
    out = weights.copy()
    out.w_q.data = weights.w_q.data[:, col_idx].copy()
    out.w_k.data = weights.w_k.data[:, col_idx].copy()
    out.w_v.data = weights.w_v.data[:, col_idx].copy()
    out.w_o.data = weights.w_o.data[col_idx, :].copy()
    return out


def inverse_grouping(grouping):
    order = grouping.head_order
    inv = [0] * len(order)
    for pos, h in enumerate(order):
        inv[h] = pos
    n = len(order)
    D = len(grouping.A)
    per = n // D
    A = [sorted(inv[i * per:(i + 1) * per]) for i in range(D)]
    g = HeadGrouping(A, list(range(D)), inv)
    return g


def group_block(model, block_index, D, calib_subset, mode="exact", seed=0):
    """Full head-grouping pass for one block: scatter, match, grouping."""
    sigs = head_score_vectors(model, block_index, calib_subset)
    A, scatter_obj = head_scatter(sigs, D, mode=mode, seed=seed)
    mc, match_obj, _ = mlp_match(model, block_index, A, calib_subset)
    return make_grouping(A, mc, scatter_obj, match_obj)
