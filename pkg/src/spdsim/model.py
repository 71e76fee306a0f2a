"""Desk-scale pre-norm decoder: config, weights, reference forward, training.

The single-device ``forward_reference`` is the golden oracle every parallel
execution mode is checked against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, DivergenceError
from .tensor import Tensor


@dataclass
class ModelConfig:
    n_layers: int = 8
    d_model: int = 128
    n_heads: int = 8
    head_dim: int = 16
    d_ff: int = 512
    vocab_size: int = 256
    norm_kind: str = "rmsnorm"          # rmsnorm | layernorm
    attn_out_bias: bool = False         # output-projection bias on the attention
    mlp_kind: str = "gelu2"             # gelu2 | swiglu
    max_seq: int = 256
    seed: int = 0
    norm_eps: float = 1e-6

    def validate(self):
        if self.d_model != self.n_heads * self.head_dim:
            raise ConfigError(
                f"d_model={self.d_model} != n_heads*head_dim="
                f"{self.n_heads * self.head_dim}"
            )
        if self.norm_kind not in ("rmsnorm", "layernorm"):
            raise ConfigError(f"unknown norm_kind {self.norm_kind!r}")
        if self.mlp_kind not in ("gelu2", "swiglu"):
            raise ConfigError(f"unknown mlp_kind {self.mlp_kind!r}")
        if min(self.n_layers, self.d_model, self.n_heads, self.head_dim,
               self.d_ff, self.vocab_size, self.max_seq) < 0:
            raise ConfigError("negative dimension in config")
        return self

    def to_dict(self):
        return {
            "n_layers": self.n_layers, "d_model": self.d_model,
            "n_heads": self.n_heads, "head_dim": self.head_dim,
            "d_ff": self.d_ff, "vocab_size": self.vocab_size,
            "norm_kind": self.norm_kind, "attn_out_bias": self.attn_out_bias,
            "mlp_kind": self.mlp_kind, "max_seq": self.max_seq,
            "seed": self.seed, "norm_eps": self.norm_eps,
        }

    @classmethod
    def from_dict(cls, d):
        kw = {}
        for f_ in ("n_layers", "d_model", "n_heads", "head_dim", "d_ff",
                   "vocab_size", "max_seq", "seed"):
            if f_ in d:
                kw[f_] = int(d[f_])
        for f_ in ("norm_kind", "mlp_kind"):
            if f_ in d:
                kw[f_] = str(d[f_])
        if "attn_out_bias" in d:
            v = d["attn_out_bias"]
            kw["attn_out_bias"] = v if isinstance(v, bool) else v in ("True", "true", "1")
        if "norm_eps" in d:
            kw["norm_eps"] = float(d["norm_eps"])
        return cls(**kw).validate()


@dataclass
class DecoderBlockWeights:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    b_o: Tensor | None          # attention output-projection bias, optional
    mlp_up: Tensor
    mlp_gate: Tensor | None     # swiglu only
    mlp_down: Tensor
    b_down: Tensor
    norm1_w: Tensor
    norm1_b: Tensor | None
    norm2_w: Tensor
    norm2_b: Tensor | None

    def named_tensors(self):
        pairs = [("w_q", self.w_q), ("w_k", self.w_k), ("w_v", self.w_v),
                 ("w_o", self.w_o), ("b_o", self.b_o),
                 ("mlp_up", self.mlp_up), ("mlp_gate", self.mlp_gate),
                 ("mlp_down", self.mlp_down), ("b_down", self.b_down),
                 ("norm1_w", self.norm1_w), ("norm1_b", self.norm1_b),
                 ("norm2_w", self.norm2_w), ("norm2_b", self.norm2_b)]
        return [(n, t) for n, t in pairs if t is not None]

    def parameters(self):
        return [t for _, t in self.named_tensors()]

    def copy(self, requires_grad=None):
        def cp(t):
            if t is None:
                return None
            rg = t.requires_grad if requires_grad is None else requires_grad
            return Tensor(t.data.copy(), requires_grad=rg)
        return DecoderBlockWeights(
            cp(self.w_q), cp(self.w_k), cp(self.w_v), cp(self.w_o), cp(self.b_o),
            cp(self.mlp_up), cp(self.mlp_gate), cp(self.mlp_down), cp(self.b_down),
            cp(self.norm1_w), cp(self.norm1_b), cp(self.norm2_w), cp(self.norm2_b))


@dataclass
class Model:
    config: ModelConfig
    embed: Tensor
    pos_embed: Tensor
    blocks: list
    final_norm_w: Tensor
    final_norm_b: Tensor | None
    head_w: Tensor

    def named_tensors(self):
        out = [("embed", self.embed), ("pos_embed", self.pos_embed)]
        for i, b in enumerate(self.blocks):
            out += [(f"block.{i}.{n}", t) for n, t in b.named_tensors()]
        out.append(("final_norm_w", self.final_norm_w))
        if self.final_norm_b is not None:
            out.append(("final_norm_b", self.final_norm_b))
        out.append(("head_w", self.head_w))
        return out

    def parameters(self):
        return [t for _, t in self.named_tensors()]


def _init_block(cfg, rng, requires_grad):
    d, ff = cfg.d_model, cfg.d_ff
    std = 0.02
    down_std = std / math.sqrt(2.0 * max(cfg.n_layers, 1))
    ln = cfg.norm_kind == "layernorm"

    def mat(r, c, s):
        return Tensor(rng.normal(0.0, s, size=(r, c)), requires_grad=requires_grad)

    def vec_zeros(n):
        return Tensor(np.zeros(n), requires_grad=requires_grad)

    def vec_ones(n):
        return Tensor(np.ones(n), requires_grad=requires_grad)

    return DecoderBlockWeights(
        w_q=mat(d, d, std), w_k=mat(d, d, std), w_v=mat(d, d, std),
        w_o=mat(d, d, down_std),
        b_o=vec_zeros(d) if cfg.attn_out_bias else None,
        mlp_up=mat(d, ff, std),
        mlp_gate=mat(d, ff, std) if cfg.mlp_kind == "swiglu" else None,
        mlp_down=mat(ff, d, down_std),
        b_down=vec_zeros(d),
        norm1_w=vec_ones(d), norm1_b=vec_zeros(d) if ln else None,
        norm2_w=vec_ones(d), norm2_b=vec_zeros(d) if ln else None)


def init_model(config, seed=None, requires_grad=True):
    """Deterministic model initialization from the seed."""
    config.validate()
    if seed is None:
        seed = config.seed
    else:
        config = replace(config, seed=seed)
    rng = np.random.default_rng(seed)
    d = config.d_model
    ln = config.norm_kind == "layernorm"
    embed = Tensor(rng.normal(0.0, 0.02, size=(config.vocab_size, d)),
                   requires_grad=requires_grad)
    pos = Tensor(rng.normal(0.0, 0.02, size=(config.max_seq, d)),
                 requires_grad=requires_grad)
    blocks = [_init_block(config, rng, requires_grad)
              for _ in range(config.n_layers)]
    fw = Tensor(np.ones(d), requires_grad=requires_grad)
    fb = Tensor(np.zeros(d), requires_grad=requires_grad) if ln else None
    head = Tensor(rng.normal(0.0, 0.02, size=(d, config.vocab_size)),
                  requires_grad=requires_grad)
    return Model(config, embed, pos, blocks, fw, fb, head)


def attention_partial(x_norm, w_q, w_k, w_v, w_o_rows, n_heads, head_dim):
    """Multi-head causal attention through a (possibly partial) head set.

    ``w_q/w_k/w_v`` carry the column slices of the owned heads and
    ``w_o_rows`` the matching rows of the output projection; with all heads
    present this is the full attention block (minus the output bias).
    """
    t_len = x_norm.shape[0]
    q = T.transpose(T.reshape(x_norm @ w_q, (t_len, n_heads, head_dim)), (1, 0, 2))
    k = T.transpose(T.reshape(x_norm @ w_k, (t_len, n_heads, head_dim)), (1, 0, 2))
    v = T.transpose(T.reshape(x_norm @ w_v, (t_len, n_heads, head_dim)), (1, 0, 2))
    scores = T.mul(q @ T.transpose(k, (0, 2, 1)), 1.0 / math.sqrt(head_dim))
    probs = T.softmax_causal(scores)
    ctx = T.reshape(T.transpose(probs @ v, (1, 0, 2)), (t_len, n_heads * head_dim))
    return ctx @ w_o_rows


def mlp_partial(h_norm, up, gate, down, mlp_kind):
    """MLP through a (possibly partial) hidden slice, without the down bias."""
    if mlp_kind == "swiglu":
        return (T.silu(h_norm @ gate) * (h_norm @ up)) @ down
    return T.gelu(h_norm @ up) @ down


def block_forward(w, x, cfg):
    """Single-device reference decoder block (pre-norm)."""
    xn = T.normalize(x, w.norm1_w, w.norm1_b, cfg.norm_kind, cfg.norm_eps)
    attn = attention_partial(xn, w.w_q, w.w_k, w.w_v, w.w_o,
                             cfg.n_heads, cfg.head_dim)
    if w.b_o is not None:
        attn = attn + w.b_o
    h = x + attn
    hn = T.normalize(h, w.norm2_w, w.norm2_b, cfg.norm_kind, cfg.norm_eps)
    z = mlp_partial(hn, w.mlp_up, w.mlp_gate, w.mlp_down, cfg.mlp_kind)
    return h + (z + w.b_down)


def embed_tokens(model, tokens):
    tokens = np.asarray(tokens, dtype=np.int64)
    cfg = model.config
    if tokens.ndim != 1:
        raise DataError("tokens must be a 1-D id sequence")
    if tokens.shape[0] > cfg.max_seq:
        raise DataError(f"sequence length {tokens.shape[0]} > max_seq {cfg.max_seq}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise DataError("token id out of vocabulary range")
    return T.gather_rows(model.embed, tokens) + T.slice_rows(
        model.pos_embed, 0, tokens.shape[0])


def final_logits(model, h):
    cfg = model.config
    hn = T.normalize(h, model.final_norm_w, model.final_norm_b,
                     cfg.norm_kind, cfg.norm_eps)
    return hn @ model.head_w


def forward_reference(model, tokens):
    """Golden single-device forward: token ids -> logits Tensor [T x vocab]."""
    h = embed_tokens(model, tokens)
    for w in model.blocks:
        h = block_forward(w, h, model.config)
    return final_logits(model, h)


def reference_executor(model):
    def run(tokens):
        with T.no_grad():
            return forward_reference(model, tokens).data
    return run


def sequence_nll(logits, tokens):
    """Per-position next-token negative log-likelihoods (numpy)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    x = logits[:-1]
    tgt = tokens[1:]
    m = x.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=-1))
    return lse - x[np.arange(tgt.shape[0]), tgt]


def perplexity(executor, calib):
    """exp(mean NLL) over all next-token positions of all samples.

    ``executor`` maps a token-id sequence to a numpy logits array [T x V].
    """
    samples = calib.samples if hasattr(calib, "samples") else list(calib)
    if not samples:
        raise DataError("empty calibration set")
    nlls = []
    for tokens in samples:
        logits = executor(tokens)
        nlls.append(sequence_nll(logits, tokens))
    return float(np.exp(np.concatenate(nlls).mean()))


class Adam:
    """Plain Adam over a list of parameter tensors."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * (g * g)
            mhat = self.m[i] / (1 - b1 ** self.t)
            vhat = self.v[i] / (1 - b2 ** self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    steps: int = 300
    batch_size: int = 4
    seq_len: int = 128
    seed: int = 0
    log_every: int = 50
    verbose: bool = False


def train_toy(model, corpus, hyper: TrainConfig):
    """Next-token cross-entropy pretraining with Adam; returns the loss curve."""
    corpus = np.asarray(corpus, dtype=np.int64)
    if corpus.size < hyper.seq_len + 1:
        raise DataError("corpus shorter than one training window")
    rng = np.random.default_rng(hyper.seed)
    opt = Adam(model.parameters(), lr=hyper.lr)
    curve = []
    for step in range(hyper.steps):
        opt.zero_grad()
        losses = []
        for _ in range(hyper.batch_size):
            off = int(rng.integers(0, corpus.size - hyper.seq_len - 1))
            window = corpus[off:off + hyper.seq_len + 1]
            logits = forward_reference(model, window[:-1])
            losses.append(T.cross_entropy(logits, window[1:]))
        loss = losses[0]
        for l in losses[1:]:
            loss = loss + l
        loss = T.mul(loss, 1.0 / len(losses))
        val = float(loss.data)
        if not math.isfinite(val):
            raise DivergenceError(f"training loss diverged at step {step}", step=step)
        T.backward(loss)
        opt.step()
        curve.append(val)
        if hyper.verbose and (step + 1) % hyper.log_every == 0:
            print(f"step {step + 1}/{hyper.steps}  loss {val:.4f}")
    return curve
