"""Train and apply per-step linear projections that turn a context row's
intermediate hidden state into pseudo hidden states for future positions.

Step i reads the hidden state after `transfer_layers[i-1]` blocks, maps it
through one d x d projection, and the pseudo row rejoins the forward pass
with position id source+i. Training distills each step against the frozen
model's own next-token distributions under a mask that keeps real rows
blind to pseudo rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .corpus import iter_batches, train_val_split
from .model import (ModelWeights, causal_mask, embed, final_norm, lm_head,
                    run_layers)
from .optim import Adam
from .tensor import Tensor, concat, kl_divergence, no_grad, softmax

MASK_MODES = ("no_masked", "masked")
KL_DIRECTIONS = ("teacher_first", "pseudo_first")


@dataclass(frozen=True)
class TransferConfig:
    k: int
    transfer_layers: tuple
    mask_mode: str = "no_masked"
    bias: bool = False
    kl_direction: str = "teacher_first"

    def __post_init__(self):
        object.__setattr__(self, "transfer_layers", tuple(self.transfer_layers))
        if not 1 <= self.k <= 4:
            raise ValueError("k must be in [1, 4]")
        if len(self.transfer_layers) != self.k:
            raise ValueError("need one transfer layer per step")
        if any(b <= a for a, b in zip(self.transfer_layers, self.transfer_layers[1:])):
            raise ValueError("transfer layers must be strictly increasing")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}")
        if self.kl_direction not in KL_DIRECTIONS:
            raise ValueError(f"kl_direction must be one of {KL_DIRECTIONS}")


def default_transfer_layers(n_layers, k):
    """Mid-stack, consecutive: {4},{4,5},{4,5,6} for the 8-layer toy base."""
    start = n_layers // 2
    if start + k > n_layers:
        start = n_layers - k
    return tuple(range(start, start + k))


class TransferBundle:
    """k trained projections plus the config and base-checkpoint hash."""

    def __init__(self, config: TransferConfig, steps, base_hash=""):
        self.config = config
        self.steps = steps            # list of (weight Tensor[d,d], bias Tensor[d]|None)
        self.base_hash = base_hash
        d = steps[0][0].data.shape[0]
        for w, b in steps:
            if w.data.shape != (d, d):
                raise ValueError("projection must be square d x d")
            if b is not None and b.data.shape != (d,):
                raise ValueError("bias must have shape (d,)")

    @classmethod
    def init_identity(cls, config, d_model, noise=0.01, seed=0, dtype=np.float32,
                      base_hash=""):
        rng = np.random.default_rng(seed)
        steps = []
        for _ in range(config.k):
            w = np.eye(d_model) + rng.normal(0.0, noise, (d_model, d_model))
            wt = Tensor(w.astype(dtype), requires_grad=True)
            bt = Tensor(np.zeros(d_model, dtype=dtype), requires_grad=True) \
                if config.bias else None
            steps.append((wt, bt))
        return cls(config, steps, base_hash=base_hash)

    def astype(self, dtype):
        steps = [(Tensor(w.data.astype(dtype)),
                  Tensor(b.data.astype(dtype)) if b is not None else None)
                 for w, b in self.steps]
        return TransferBundle(self.config, steps, base_hash=self.base_hash)

    def synthesize(self, h_rows, step_i):
        return synthesize_pseudo(h_rows, step_i, self)

    def save(self, path, extra_meta=None):
        tensors = {}
        for i, (w, b) in enumerate(self.steps, start=1):
            tensors[f"transfer.step{i}.weight"] = w.data
            if b is not None:
                tensors[f"transfer.step{i}.bias"] = b.data
        meta = {
            "transfer.k": str(self.config.k),
            "transfer.layers": ",".join(map(str, self.config.transfer_layers)),
            "transfer.mask_mode": self.config.mask_mode,
            "transfer.kl_direction": self.config.kl_direction,
            "base.hash": self.base_hash,
        }
        meta.update(extra_meta or {})
        return checkpoint.save(path, tensors, meta)

    @classmethod
    def load(cls, path):
        tensors, meta = checkpoint.load(path)
        k = int(meta["transfer.k"])
        layers = tuple(int(x) for x in meta["transfer.layers"].split(","))
        config = TransferConfig(
            k=k, transfer_layers=layers,
            mask_mode=meta.get("transfer.mask_mode", "no_masked"),
            bias=f"transfer.step1.bias" in tensors,
            kl_direction=meta.get("transfer.kl_direction", "teacher_first"))
        steps = []
        for i in range(1, k + 1):
            w = Tensor(tensors[f"transfer.step{i}.weight"])
            b = tensors.get(f"transfer.step{i}.bias")
            steps.append((w, Tensor(b) if b is not None else None))
        return cls(config, steps, base_hash=meta.get("base.hash", ""))

    def check_base(self, base_hash):
        if self.base_hash and base_hash and self.base_hash != base_hash:
            raise ValueError("transfer bundle does not match this base checkpoint")


def synthesize_pseudo(h_rows, step_i, bundle: TransferBundle):
    """Pseudo rows = h @ W_i (+ bias); row j becomes the stand-in for
    position source_position(j) + step_i."""
    if not 1 <= step_i <= bundle.config.k:
        raise ValueError(f"step {step_i} out of range 1..{bundle.config.k}")
    w, b = bundle.steps[step_i - 1]
    if isinstance(h_rows, np.ndarray):
        h_rows = Tensor(h_rows)
    out = h_rows @ w
    if b is not None:
        out = out + b
    return out


def build_training_mask(n, step_i):
    """Mask over [n real rows | n pseudo rows] for training step `step_i`.

    Real rows are purely causal over real rows. The pseudo row sourced at
    position j (1-based) stands in for position j+step_i, so it may view
    real rows 1..min(j+step_i-1, n) plus itself, and never another pseudo
    row. Real rows therefore see exactly what the plain causal mask allows,
    keeping the teacher distributions untouched.
    """
    if n < step_i + 1:
        raise ValueError(f"need n >= step_i+1, got n={n}, step={step_i}")
    m = np.zeros((2 * n, 2 * n), dtype=bool)
    m[:n, :n] = np.tril(np.ones((n, n), dtype=bool))
    for j in range(1, n + 1):
        row = n + j - 1
        m[row, :min(j + step_i - 1, n)] = True
        m[row, row] = True
    return m


@dataclass
class TransferHyper:
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


def _step_kl_loss(base, step_params, step_i, layer, x, mask2n, positions_cat,
                  kl_direction):
    """Mean per-position KL between teacher and pseudo distributions for one
    batch x [B,S]. Gradient reaches only `step_params`."""
    B, S = x.shape
    n_pairs = S - step_i
    with no_grad():
        h_real, _ = run_layers(base, embed(base, x, np.broadcast_to(np.arange(S), x.shape)),
                               0, layer, np.arange(S), causal_mask(S))
    h_real = Tensor(h_real.data)
    pseudo = h_real @ step_params[0]
    if step_params[1] is not None:
        pseudo = pseudo + step_params[1]
    h_cat = concat([h_real, pseudo], axis=1)
    h_top, _ = run_layers(base, h_cat, layer, base.config.n_layers,
                          positions_cat, mask2n)
    logits = lm_head(base, final_norm(base, h_top))
    # teacher rows q+i (1-based) predict token q+i+1; pseudo source row q
    # carries position q+i and predicts the same token.
    with no_grad():
        teacher = softmax(Tensor(logits.data[:, step_i:S]), axis=-1)
    pseudo_probs = softmax(narrow_rows(logits, S, n_pairs), axis=-1)
    if kl_direction == "teacher_first":
        total = kl_divergence(teacher, pseudo_probs)
    else:
        total = kl_divergence_swapped(teacher.data, pseudo_probs)
    return total * (1.0 / (B * n_pairs))


def narrow_rows(t, start, length):
    from .tensor import narrow
    return narrow(t, 1, start, length)


def kl_divergence_swapped(teacher_data, pseudo_probs):
    """KL(pseudo || teacher): the literal argument order of the loss as
    written; gradient still flows into the pseudo side."""
    from .tensor import clip_min, log, mul, tsum
    from .tensor import KL_FLOOR
    log_t = np.log(np.maximum(teacher_data, KL_FLOOR))
    p = clip_min(pseudo_probs, KL_FLOOR)
    return tsum(mul(pseudo_probs, log(p))) - tsum(mul(pseudo_probs, Tensor(log_t)))


def transfer_train(base: ModelWeights, corpus_ids, config: TransferConfig,
                   hyper: TransferHyper, base_hash="", progress=None):
    """Train the k projections, one independent run per step, against the
    frozen base. Returns (TransferBundle, per-step stats)."""
    L = base.config.n_layers
    for t in config.transfer_layers:
        if not 0 < t <= L:
            raise ValueError(f"transfer layer {t} out of range for {L}-layer model")
    base.set_trainable(False)
    train_ids, val_ids = train_val_split(corpus_ids, hyper.val_frac)
    bundle = TransferBundle.init_identity(
        config, base.config.d_model, seed=hyper.seed, base_hash=base_hash)

    stats = {}
    S = hyper.seq_len
    for i, layer in zip(range(1, config.k + 1), config.transfer_layers):
        step_params = bundle.steps[i - 1]
        named = {"w": step_params[0]}
        if step_params[1] is not None:
            named["b"] = step_params[1]
        opt = Adam(named, lr=hyper.lr, betas=hyper.betas, eps=hyper.eps)
        rng = np.random.default_rng(hyper.seed + i)
        mask2n = build_training_mask(S, i)
        positions_cat = np.concatenate([np.arange(S), np.arange(S) + i])

        init_kl = heldout_kl(base, bundle, i, val_ids, hyper)
        step_count = 0
        for x, _ in iter_batches(train_ids, hyper.batch_size, S, rng,
                                 epochs=hyper.epochs, max_steps=hyper.max_steps):
            loss = _step_kl_loss(base, step_params, i, layer, x, mask2n,
                                 positions_cat, config.kl_direction)
            lv = loss.item()
            if not np.isfinite(lv):
                raise FloatingPointError(
                    f"transfer step {i} diverged at step {step_count}: loss={lv}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            step_count += 1
            if progress and step_count % hyper.log_every == 0:
                progress(i, step_count, lv)
        final_kl = heldout_kl(base, bundle, i, val_ids, hyper)
        stats[i] = {"layer": layer, "steps": step_count,
                    "init_kl": init_kl, "final_kl": final_kl}
    return bundle, stats


def heldout_kl(base, bundle, step_i, val_ids, hyper, n_batches=2):
    """Mean per-position teacher||pseudo KL on held-out text."""
    S = hyper.seq_len
    layer = bundle.config.transfer_layers[step_i - 1]
    mask2n = build_training_mask(S, step_i)
    positions_cat = np.concatenate([np.arange(S), np.arange(S) + step_i])
    rng = np.random.default_rng(12345)
    vals = []
    with no_grad():
        for x, _ in iter_batches(val_ids, min(hyper.batch_size, 4), S, rng,
                                 max_steps=n_batches):
            loss = _step_kl_loss(base, bundle.steps[step_i - 1], step_i, layer,
                                 x, mask2n, positions_cat, "teacher_first")
            vals.append(loss.item())
    return float(np.mean(vals))


# -- inference -----------------------------------------------------------------


def forward_with_drafts(base: ModelWeights, bundle: TransferBundle, cache,
                        tokens, positions, real_mask, draft_sources,
                        mask_mode=None, taps=()):
    """One forward over `tokens`, injecting pseudo rows at every transfer
    layer for each real row index in `draft_sources`.

    `real_mask` is [n, cache_len+n] over the cache plus the real rows; the
    mask rows for real tokens never include pseudo columns, so real-row
    logits are exactly the frozen model's. Under no_masked, the step-i
    pseudo row of a source also views that source's lower-step pseudo rows.

    K/V of real rows land at cache indices cache_len..cache_len+n-1 in every
    layer; pseudo entries always sit after them. Returns (real_logits [n,v],
    draft_probs [len(draft_sources), k, v], taps dict), all numpy. A tapped
    layer holds every row alive at that depth: the n real rows first, then
    one block of len(draft_sources) pseudo rows per injected step.
    """
    mask_mode = mask_mode or bundle.config.mask_mode
    if mask_mode not in MASK_MODES:
        raise ValueError(f"unknown mask_mode {mask_mode}")
    cfg = base.config
    k = bundle.config.k
    ts = bundle.config.transfer_layers
    n = len(tokens)
    m = len(draft_sources)
    C = cache.length(0) if cache is not None else 0
    positions = np.asarray(positions, dtype=np.int64)
    sources = np.asarray(draft_sources, dtype=np.int64)
    if real_mask.shape != (n, C + n):
        raise ValueError("real_mask must cover cache + real rows")

    pseudo_pos = [positions[sources] + i for i in range(1, k + 1)]
    if k and m and max(p.max() for p in pseudo_pos) >= cfg.max_positions:
        raise OverflowError("pseudo positions exceed max_positions")

    # Full-width mask over [C cache | n real | k blocks of m pseudo rows].
    width = C + n + k * m
    full = np.zeros((n + k * m, width), dtype=bool)
    full[:n, :C + n] = real_mask
    for i in range(1, k + 1):
        for jj, src in enumerate(sources):
            row = n + (i - 1) * m + jj
            full[row, :C + n] = real_mask[src]
            if mask_mode == "no_masked":
                for lower in range(1, i):
                    full[row, C + n + (lower - 1) * m + jj] = True
            full[row, C + row] = True

    with no_grad():
        h = embed(base, tokens, positions)
        pos_so_far = positions
        prev = 0
        tapped = {}
        for i, t in enumerate(ts, start=1):
            seg_taps = tuple(x for x in taps if prev <= x <= t)
            h, tp = run_layers(base, h, prev, t, pos_so_far,
                               full[:h.data.shape[0], :C + h.data.shape[0]],
                               cache=cache, taps=seg_taps)
            for lt, hv in tp.items():
                tapped[lt] = hv.data
            if m:
                pseudo = bundle.synthesize(Tensor(h.data[sources]), i)
                h = concat([h, pseudo], axis=0)
                pos_so_far = np.concatenate([pos_so_far, pseudo_pos[i - 1]])
            prev = t
        seg_taps = tuple(x for x in taps if prev <= x <= cfg.n_layers)
        h, tp = run_layers(base, h, prev, cfg.n_layers, pos_so_far,
                           full[:h.data.shape[0], :C + h.data.shape[0]],
                           cache=cache, taps=seg_taps)
        for lt, hv in tp.items():
            tapped[lt] = hv.data
        logits = lm_head(base, final_norm(base, h)).data

    real_logits = logits[:n]
    draft_probs = np.empty((m, k, cfg.vocab_size), dtype=logits.dtype)
    for i in range(1, k + 1):
        block = logits[n + (i - 1) * m: n + i * m]
        with no_grad():
            draft_probs[:, i - 1] = softmax(Tensor(block), axis=-1).data
    return real_logits, draft_probs, tapped


def draft_distributions(base, bundle, cache, tokens, positions, real_mask,
                        mask_mode=None):
    """Drafts for the last real row only: k probability vectors [k, v]."""
    real_logits, probs, _ = forward_with_drafts(
        base, bundle, cache, tokens, positions, real_mask,
        draft_sources=[len(tokens) - 1], mask_mode=mask_mode)
    return real_logits, probs[0]
