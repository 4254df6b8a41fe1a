"""Baseline draft predictors: Medusa-style extra heads on the last hidden
state, and early-exit heads reading intermediate layers directly.

Both are pure add-ons distilled against the frozen base with the same KL
recipe as the transfer projections, so accuracy comparisons are apples to
apples. Head i for source row q targets the base distribution at row q+i.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .corpus import iter_batches, train_val_split
from .model import ModelWeights, causal_mask, final_norm, forward_full
from .optim import Adam
from .tensor import Tensor, kl_divergence, no_grad, silu, softmax


@dataclass
class HeadHyper:
    epochs: int = 1
    batch_size: int = 16
    seq_len: int = 128
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    max_steps: int | None = None
    seed: int = 0
    val_frac: float = 0.05
    log_every: int = 50


class MedusaHeads:
    """k heads, each a gated residual feed-forward (d->d) plus an untied
    vocabulary projection, applied to the last-layer (final-normed) state."""

    def __init__(self, k, d_model, vocab_size, params, base_hash=""):
        self.k = k
        self.d_model = d_model
        self.vocab_size = vocab_size
        self.params = params
        self.base_hash = base_hash

    @classmethod
    def init_random(cls, k, d_model, vocab_size, seed=0, dtype=np.float32,
                    base_hash=""):
        rng = np.random.default_rng(seed)
        params = {}
        for i in range(1, k + 1):
            for name, shape in (("wg", (d_model, d_model)),
                                ("wu", (d_model, d_model)),
                                ("wd", (d_model, d_model)),
                                ("wv", (d_model, vocab_size))):
                params[f"medusa.step{i}.{name}"] = Tensor(
                    rng.normal(0.0, 0.02, shape).astype(dtype), requires_grad=True)
        return cls(k, d_model, vocab_size, params, base_hash=base_hash)

    def astype(self, dtype):
        params = {n: Tensor(p.data.astype(dtype)) for n, p in self.params.items()}
        return MedusaHeads(self.k, self.d_model, self.vocab_size, params,
                           base_hash=self.base_hash)

    def apply(self, h, step_i):
        """Logits of head `step_i` on final-normed hidden rows."""
        if not 1 <= step_i <= self.k:
            raise ValueError(f"step {step_i} out of range 1..{self.k}")
        if isinstance(h, np.ndarray):
            h = Tensor(h)
        p = self.params
        g = silu(h @ p[f"medusa.step{step_i}.wg"]) * (h @ p[f"medusa.step{step_i}.wu"])
        z = h + g @ p[f"medusa.step{step_i}.wd"]
        return z @ p[f"medusa.step{step_i}.wv"]

    def draft_distributions(self, h_row):
        """[k, vocab] probabilities from one final-normed hidden row."""
        with no_grad():
            out = [softmax(self.apply(h_row[None, :], i), axis=-1).data[0]
                   for i in range(1, self.k + 1)]
        return np.stack(out)

    def save(self, path, extra_meta=None):
        meta = {"medusa.k": str(self.k), "base.hash": self.base_hash}
        meta.update(extra_meta or {})
        return checkpoint.save(path, {n: p.data for n, p in self.params.items()}, meta)

    @classmethod
    def load(cls, path):
        tensors, meta = checkpoint.load(path)
        k = int(meta["medusa.k"])
        params = {n: Tensor(v) for n, v in tensors.items()}
        d = params["medusa.step1.wg"].data.shape[0]
        v = params["medusa.step1.wv"].data.shape[1]
        return cls(k, d, v, params, base_hash=meta.get("base.hash", ""))

    def check_base(self, base_hash):
        if self.base_hash and base_hash and self.base_hash != base_hash:
            raise ValueError("medusa heads do not match this base checkpoint")


class ExitHeads:
    """One linear head d->vocab per (intermediate layer, step)."""

    def __init__(self, layers, k, d_model, vocab_size, params, base_hash=""):
        self.layers = tuple(layers)
        self.k = k
        self.d_model = d_model
        self.vocab_size = vocab_size
        self.params = params
        self.base_hash = base_hash

    @classmethod
    def init_random(cls, layers, k, d_model, vocab_size, seed=0,
                    dtype=np.float32, base_hash=""):
        layers = tuple(layers)
        if len(layers) != k:
            raise ValueError("need one exit layer per step")
        rng = np.random.default_rng(seed)
        params = {}
        for i, t in zip(range(1, k + 1), layers):
            params[f"exit.l{t}.step{i}.w"] = Tensor(
                rng.normal(0.0, 0.02, (d_model, vocab_size)).astype(dtype),
                requires_grad=True)
        return cls(layers, k, d_model, vocab_size, params, base_hash=base_hash)

    def astype(self, dtype):
        params = {n: Tensor(p.data.astype(dtype)) for n, p in self.params.items()}
        return ExitHeads(self.layers, self.k, self.d_model, self.vocab_size,
                         params, base_hash=self.base_hash)

    def apply(self, h_layer, step_i):
        """Logits of the step head on rows tapped at its designated layer."""
        t = self.layers[step_i - 1]
        if isinstance(h_layer, np.ndarray):
            h_layer = Tensor(h_layer)
        return h_layer @ self.params[f"exit.l{t}.step{step_i}.w"]

    def draft_distributions(self, taps):
        """[k, vocab] probabilities; `taps` maps layer -> hidden row [d]."""
        with no_grad():
            out = [softmax(self.apply(taps[self.layers[i - 1]][None, :], i),
                           axis=-1).data[0]
                   for i in range(1, self.k + 1)]
        return np.stack(out)

    def save(self, path, extra_meta=None):
        meta = {"exit.k": str(self.k),
                "exit.layers": ",".join(map(str, self.layers)),
                "base.hash": self.base_hash}
        meta.update(extra_meta or {})
        return checkpoint.save(path, {n: p.data for n, p in self.params.items()}, meta)

    @classmethod
    def load(cls, path):
        tensors, meta = checkpoint.load(path)
        k = int(meta["exit.k"])
        layers = tuple(int(x) for x in meta["exit.layers"].split(","))
        params = {n: Tensor(v) for n, v in tensors.items()}
        first = next(iter(params.values()))
        return cls(layers, k, first.data.shape[0], first.data.shape[1],
                   params, base_hash=meta.get("base.hash", ""))

    def check_base(self, base_hash):
        if self.base_hash and base_hash and self.base_hash != base_hash:
            raise ValueError("exit heads do not match this base checkpoint")


def _distill_heads(base: ModelWeights, corpus_ids, hyper: HeadHyper, k, opt,
                   student_logits_fn, taps=(), progress=None, tag="heads"):
    """Shared KL-distillation loop. `student_logits_fn(taps, hidden_norm,
    step)` returns logits [B, S-step, v] for source rows 0..S-step-1."""
    base.set_trainable(False)
    train_ids, _ = train_val_split(corpus_ids, hyper.val_frac)
    S = hyper.seq_len
    rng = np.random.default_rng(hyper.seed)
    mask = causal_mask(S)
    losses = []
    step_count = 0
    for x, _ in iter_batches(train_ids, hyper.batch_size, S, rng,
                             epochs=hyper.epochs, max_steps=hyper.max_steps):
        with no_grad():
            res = forward_full(base, x, positions=np.arange(S), mask=mask,
                               taps=taps)
            hidden_norm = final_norm(base, res.hidden).data
            teacher = softmax(res.logits, axis=-1).data
        total = None
        for i in range(1, k + 1):
            logits = student_logits_fn(res.taps, hidden_norm, i)
            probs = softmax(logits, axis=-1)
            term = kl_divergence(Tensor(teacher[:, i:S]), probs) \
                * (1.0 / (x.shape[0] * (S - i)))
            total = term if total is None else total + term
        lv = total.item()
        if not np.isfinite(lv):
            raise FloatingPointError(f"{tag} training diverged: loss={lv}")
        losses.append(lv)
        opt.zero_grad()
        total.backward()
        opt.step()
        step_count += 1
        if progress and step_count % hyper.log_every == 0:
            progress(step_count, lv)
    return losses


def train_medusa(base: ModelWeights, corpus_ids, k, hyper: HeadHyper,
                 base_hash="", progress=None):
    heads = MedusaHeads.init_random(k, base.config.d_model,
                                    base.config.vocab_size, seed=hyper.seed,
                                    base_hash=base_hash)
    opt = Adam(heads.params, lr=hyper.lr, betas=hyper.betas, eps=hyper.eps)

    def student(taps, hidden_norm, i):
        return heads.apply(hidden_norm[:, :hyper.seq_len - i], i)

    losses = _distill_heads(base, corpus_ids, hyper, k, opt, student,
                            progress=progress, tag="medusa")
    return heads, {"losses": losses}


def train_early_exit(base: ModelWeights, corpus_ids, layers, k,
                     hyper: HeadHyper, base_hash="", progress=None):
    heads = ExitHeads.init_random(layers, k, base.config.d_model,
                                  base.config.vocab_size, seed=hyper.seed,
                                  base_hash=base_hash)
    opt = Adam(heads.params, lr=hyper.lr, betas=hyper.betas, eps=hyper.eps)

    def student(taps, hidden_norm, i):
        h = taps[heads.layers[i - 1]].data[:, :hyper.seq_len - i]
        return heads.apply(h, i)

    losses = _distill_heads(base, corpus_ids, hyper, k, opt, student,
                            taps=tuple(layers), progress=progress, tag="early_exit")
    return heads, {"losses": losses}


def heldout_head_kl(base, heads, step_i, val_ids, hyper, n_batches=2):
    """Mean held-out KL for one head (Medusa or early-exit)."""
    S = hyper.seq_len
    rng = np.random.default_rng(12345)
    mask = causal_mask(S)
    taps = heads.layers if isinstance(heads, ExitHeads) else ()
    vals = []
    with no_grad():
        for x, _ in iter_batches(val_ids, min(hyper.batch_size, 4), S, rng,
                                 max_steps=n_batches):
            res = forward_full(base, x, positions=np.arange(S), mask=mask,
                               taps=taps)
            teacher = softmax(res.logits, axis=-1).data
            if isinstance(heads, ExitHeads):
                h = res.taps[heads.layers[step_i - 1]].data[:, :S - step_i]
            else:
                h = final_norm(base, res.hidden).data[:, :S - step_i]
            probs = softmax(heads.apply(h, step_i), axis=-1)
            kl = kl_divergence(Tensor(teacher[:, step_i:S]), probs) \
                * (1.0 / (x.shape[0] * (S - step_i)))
            vals.append(kl.item())
    return float(np.mean(vals))
