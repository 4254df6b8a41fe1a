"""Frozen decoder-only transformer with explicit position ids, arbitrary
per-query attention masks, layer-segmented forward, and a KV cache.

Pre-norm residual blocks with RMS normalization, rotary positions driven by
explicit ids (pseudo rows carry non-contiguous ids), gated feed-forward,
untied output head. The forward can start and stop at any layer boundary so
pseudo hidden states can be injected mid-stack.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import checkpoint
from .corpus import VOCAB_SIZE
from .optim import Adam
from .tensor import (Tensor, concat, embedding, log_softmax, narrow, no_grad,
                     rms_norm, silu, softmax, transpose)


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 8
    d_model: int = 256
    n_heads: int = 8
    vocab_size: int = VOCAB_SIZE
    max_positions: int = 512
    seed: int = 0
    mlp_hidden: int = 0          # 0 -> 2 * d_model
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.head_dim % 2 != 0:
            raise ValueError("head_dim must be even for rotary positions")
        if self.mlp_hidden == 0:
            object.__setattr__(self, "mlp_hidden", 2 * self.d_model)

    @property
    def head_dim(self):
        return self.d_model // self.n_heads

    def to_meta(self):
        return {f"config.{k}": str(getattr(self, k)) for k in
                ("n_layers", "d_model", "n_heads", "vocab_size",
                 "max_positions", "seed", "mlp_hidden", "rope_base")}

    @classmethod
    def from_meta(cls, meta):
        kw = {}
        for k in ("n_layers", "d_model", "n_heads", "vocab_size",
                  "max_positions", "seed", "mlp_hidden"):
            kw[k] = int(meta[f"config.{k}"])
        kw["rope_base"] = float(meta["config.rope_base"])
        return cls(**kw)


@dataclass
class ForwardResult:
    hidden: Tensor               # last computed layer, pre final-norm
    logits: Tensor | None
    taps: dict = field(default_factory=dict)


class ModelWeights:
    """Named parameter tensors plus their config. Frozen by default."""

    def __init__(self, config: ModelConfig, params: dict):
        self.config = config
        self.params = params

    def __getitem__(self, name):
        return self.params[name]

    @property
    def dtype(self):
        return self.params["embed"].dtype

    @classmethod
    def init_random(cls, config: ModelConfig, dtype=np.float32):
        rng = np.random.default_rng(config.seed)
        d, h, v = config.d_model, config.mlp_hidden, config.vocab_size
        std = 0.02
        out_std = std / np.sqrt(2.0 * config.n_layers)

        def normal(shape, s):
            return Tensor(rng.normal(0.0, s, shape).astype(dtype))

        p = {"embed": normal((v, d), std)}
        for i in range(config.n_layers):
            p[f"layers.{i}.attn_norm"] = Tensor(np.ones(d, dtype=dtype))
            p[f"layers.{i}.wq"] = normal((d, d), std)
            p[f"layers.{i}.wk"] = normal((d, d), std)
            p[f"layers.{i}.wv"] = normal((d, d), std)
            p[f"layers.{i}.wo"] = normal((d, d), out_std)
            p[f"layers.{i}.mlp_norm"] = Tensor(np.ones(d, dtype=dtype))
            p[f"layers.{i}.wg"] = normal((d, h), std)
            p[f"layers.{i}.wu"] = normal((d, h), std)
            p[f"layers.{i}.wd"] = normal((h, d), out_std)
        p["final_norm"] = Tensor(np.ones(d, dtype=dtype))
        p["head"] = normal((d, v), std)
        return cls(config, p)

    def param_count(self):
        return sum(p.data.size for p in self.params.values())

    @staticmethod
    def expected_param_count(config: ModelConfig):
        d, h, v, L = (config.d_model, config.mlp_hidden,
                      config.vocab_size, config.n_layers)
        return v * d + L * (4 * d * d + 3 * d * h + 2 * d) + d + d * v

    def set_trainable(self, trainable: bool):
        for p in self.params.values():
            p.requires_grad = trainable

    def astype(self, dtype):
        params = {k: Tensor(p.data.astype(dtype)) for k, p in self.params.items()}
        return ModelWeights(self.config, params)

    def save(self, path, extra_meta=None):
        meta = self.config.to_meta()
        meta.update(extra_meta or {})
        return checkpoint.save(path, {k: p.data for k, p in self.params.items()}, meta)

    @classmethod
    def load(cls, path):
        tensors, meta = checkpoint.load(path)
        config = ModelConfig.from_meta(meta)
        params = {k: Tensor(v) for k, v in tensors.items()}
        return cls(config, params), meta


# -- masks --------------------------------------------------------------------


def causal_mask(n, cache_len=0):
    """Boolean [n, cache_len+n]: full view of the cache, lower-triangular
    over the new rows."""
    m = np.zeros((n, cache_len + n), dtype=bool)
    m[:, :cache_len] = True
    m[:, cache_len:] = np.tril(np.ones((n, n), dtype=bool))
    return m


def mask_bias(mask, dtype):
    bias = np.zeros(mask.shape, dtype=dtype)
    bias[~mask] = -np.inf
    return bias


# -- KV cache -------------------------------------------------------------------


class KVCache:
    """Per-layer key/value buffers with per-entry position ids.

    Layers may transiently hold different lengths during a tree forward
    (pseudo rows only exist above their transfer layer); compaction brings
    every layer back to the shared verified prefix plus accepted rows.
    """

    def __init__(self, config: ModelConfig, dtype=np.float64):
        self.config = config
        hd = config.head_dim
        self.k = [np.empty((config.n_heads, 0, hd), dtype=dtype)
                  for _ in range(config.n_layers)]
        self.v = [np.empty((config.n_heads, 0, hd), dtype=dtype)
                  for _ in range(config.n_layers)]
        self.pos = [np.empty(0, dtype=np.int64) for _ in range(config.n_layers)]

    def length(self, layer=0):
        return self.k[layer].shape[1]

    def append(self, layer, k, v, positions):
        if self.length(layer) + k.shape[1] > self.config.max_positions:
            raise OverflowError("KV cache exceeds max_positions")
        self.k[layer] = np.concatenate([self.k[layer], k], axis=1)
        self.v[layer] = np.concatenate([self.v[layer], v], axis=1)
        self.pos[layer] = np.concatenate([self.pos[layer],
                                          np.asarray(positions, dtype=np.int64)])

    def compact(self, keep_per_layer):
        """Retain only the given entry indices (one index array per layer).
        Retained entries must be position-sorted."""
        for i, keep in enumerate(keep_per_layer):
            keep = np.asarray(keep, dtype=np.int64)
            self.k[i] = self.k[i][:, keep]
            self.v[i] = self.v[i][:, keep]
            self.pos[i] = self.pos[i][keep]
            if self.pos[i].size > 1 and not (np.diff(self.pos[i]) > 0).all():
                raise ValueError("cache positions not strictly sorted after compaction")

    def truncate(self, length):
        self.compact([np.arange(length)] * self.config.n_layers)


# -- forward ------------------------------------------------------------------


def _split_heads(x, n_heads):
    if x.data.ndim == 2:
        n, d = x.data.shape
        return transpose(x.reshape(n, n_heads, d // n_heads), (1, 0, 2))
    b, s, d = x.data.shape
    return transpose(x.reshape(b, s, n_heads, d // n_heads), (0, 2, 1, 3))


def _merge_heads(x):
    if x.data.ndim == 3:
        h, n, hd = x.data.shape
        return transpose(x, (1, 0, 2)).reshape(n, h * hd)
    b, h, s, hd = x.data.shape
    return transpose(x, (0, 2, 1, 3)).reshape(b, s, h * hd)


def _swap_last(x):
    axes = list(range(x.data.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def rope_tables(positions, head_dim, base, dtype):
    half = head_dim // 2
    freqs = base ** (-np.arange(half, dtype=np.float64) / half)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * freqs[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def apply_rope(x, cos, sin):
    """Rotate half-pairs of the last axis; x is [..., n, head_dim] and
    cos/sin broadcast as [n, head_dim/2]."""
    half = x.data.shape[-1] // 2
    x1 = narrow(x, -1, 0, half)
    x2 = narrow(x, -1, half, half)
    return concat([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1)


def _attention(weights, layer, h, positions, mask, cache):
    cfg = weights.config
    p = f"layers.{layer}"
    q = h @ weights[f"{p}.wq"]
    k = h @ weights[f"{p}.wk"]
    v = h @ weights[f"{p}.wv"]
    qh = _split_heads(q, cfg.n_heads)
    kh = _split_heads(k, cfg.n_heads)
    vh = _split_heads(v, cfg.n_heads)
    cos, sin = rope_tables(positions, cfg.head_dim, cfg.rope_base, h.data.dtype)
    qh = apply_rope(qh, cos, sin)
    kh = apply_rope(kh, cos, sin)

    if cache is not None:
        prev_k, prev_v = cache.k[layer], cache.v[layer]
        cache.append(layer, kh.data, vh.data, positions)
        if prev_k.shape[1]:
            kh = concat([Tensor(prev_k), kh], axis=1)
            vh = concat([Tensor(prev_v), vh], axis=1)

    n = h.data.shape[-2]
    total = kh.data.shape[-2]
    if mask.shape != (n, total):
        raise ValueError(f"mask shape {mask.shape} != ({n}, {total})")
    if not mask.any(axis=1).all():
        raise ValueError("attention mask has an empty query row")

    scale = 1.0 / np.sqrt(cfg.head_dim)
    scores = (qh @ _swap_last(kh)) * scale
    scores = scores + mask_bias(mask, h.data.dtype)
    probs = softmax(scores, axis=-1)
    out = _merge_heads(probs @ vh)
    return out @ weights[f"{p}.wo"]


def _block(weights, layer, h, positions, mask, cache):
    p = f"layers.{layer}"
    a = rms_norm(h, weights[f"{p}.attn_norm"])
    h = h + _attention(weights, layer, a, positions, mask, cache)
    m = rms_norm(h, weights[f"{p}.mlp_norm"])
    ff = (silu(m @ weights[f"{p}.wg"]) * (m @ weights[f"{p}.wu"])) @ weights[f"{p}.wd"]
    return h + ff


def run_layers(weights, h, from_layer, to_layer, positions, mask,
               cache=None, taps=()):
    """Apply layers [from_layer, to_layer); returns (h, {layer: tapped state}).

    Tap index t means the state after t layers (t=0 is the input). New K/V
    are appended to `cache` for every layer executed.
    """
    L = weights.config.n_layers
    if not (0 <= from_layer <= to_layer <= L):
        raise ValueError(f"bad layer segment [{from_layer}, {to_layer}) of {L}")
    tapped = {}
    if from_layer in taps:
        tapped[from_layer] = h
    for i in range(from_layer, to_layer):
        h = _block(weights, i, h, positions, mask, cache)
        if i + 1 in taps:
            tapped[i + 1] = h
    return h, tapped


def embed(weights, tokens, positions):
    tokens = np.asarray(tokens, dtype=np.int64)
    positions = np.asarray(positions, dtype=np.int64)
    cfg = weights.config
    if tokens.shape != positions.shape:
        raise ValueError("tokens/positions length mismatch")
    if tokens.size:
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise ValueError("token id out of range")
        if positions.min() < 0 or positions.max() >= cfg.max_positions:
            raise ValueError("position id out of range")
    return embedding(weights["embed"], tokens)


def final_norm(weights, h):
    return rms_norm(h, weights["final_norm"])


def lm_head(weights, h):
    return h @ weights["head"]


def forward_full(weights, tokens, positions=None, mask=None, cache=None, taps=()):
    """Embed, run every layer, final-norm, project to logits."""
    tokens = np.asarray(tokens, dtype=np.int64)
    n = tokens.shape[-1]
    cache_len = cache.length(0) if cache is not None else 0
    if positions is None:
        positions = np.arange(cache_len, cache_len + n)
    if mask is None:
        mask = causal_mask(n, cache_len)
    h = embed(weights, tokens, np.broadcast_to(positions, tokens.shape))
    h, tapped = run_layers(weights, h, 0, weights.config.n_layers,
                           positions, mask, cache=cache, taps=taps)
    logits = lm_head(weights, final_norm(weights, h))
    return ForwardResult(hidden=h, logits=logits, taps=tapped)


# -- base pretraining -----------------------------------------------------------


@dataclass
class TrainHyper:
    epochs: int = 2
    batch_size: int = 32
    seq_len: int = 256
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    max_steps: int | None = None
    seed: int = 0
    log_every: int = 50


def cross_entropy(logits, targets):
    """Mean next-token cross entropy; targets are integer ids."""
    lp = log_softmax(logits, axis=-1)
    onehot = np.zeros(logits.data.shape, dtype=logits.data.dtype)
    np.put_along_axis(onehot, np.asarray(targets)[..., None], 1.0, axis=-1)
    n_rows = int(np.prod(np.asarray(targets).shape))
    return (lp * onehot).sum() * (-1.0 / n_rows)


MIN_CORPUS_BYTES = 1_000_000


def pretrain_base(corpus_ids, config: ModelConfig, hyper: TrainHyper,
                  progress=None):
    """Train the base model from scratch with next-token cross entropy.

    Returns (frozen ModelWeights, stats dict). Deterministic given
    config.seed and hyper.seed.
    """
    from .corpus import iter_batches

    if len(corpus_ids) < MIN_CORPUS_BYTES:
        raise ValueError(f"corpus too small: {len(corpus_ids)} bytes "
                         f"(need >= {MIN_CORPUS_BYTES})")
    weights = ModelWeights.init_random(config)
    weights.set_trainable(True)
    opt = Adam(weights.params, lr=hyper.lr, betas=hyper.betas, eps=hyper.eps)
    rng = np.random.default_rng(hyper.seed)
    mask = causal_mask(hyper.seq_len)

    initial_loss = None
    loss_val = None
    step = 0
    for x, y in iter_batches(corpus_ids, hyper.batch_size, hyper.seq_len, rng,
                             epochs=hyper.epochs, max_steps=hyper.max_steps):
        res = forward_full(weights, x, positions=np.arange(hyper.seq_len), mask=mask)
        loss = cross_entropy(res.logits, y)
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise FloatingPointError(f"pretraining diverged at step {step}: loss={loss_val}")
        if initial_loss is None:
            initial_loss = loss_val
        opt.zero_grad()
        loss.backward()
        opt.step()
        step += 1
        if progress and step % hyper.log_every == 0:
            progress(step, loss_val)

    weights.set_trainable(False)
    return weights, {"initial_loss": initial_loss, "final_loss": loss_val,
                     "steps": step}
