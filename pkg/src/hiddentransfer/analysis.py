"""Analytic experiments at toy scale: draft-accuracy comparison across
methods, pseudo-state refinement trace, transfer-layer sweep, masked
ablation, and the KV-cache forward-time microbenchmark.

All analyses are pure readers of trained artifacts and write plot-ready CSV
tables; fixed seeds give bit-identical reports.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import KVCache, ModelWeights, causal_mask, final_norm, forward_full
from .tensor import Tensor, argmax_token, no_grad
from .transfer import (TransferConfig, TransferHyper, forward_with_drafts,
                       transfer_train)

DRAFT_METHODS = ("transfer", "medusa", "early_exit", "random")


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)
    return path


def _split_points(eval_ids, n_seq, n_splits, rng, min_prompt=32, window=192):
    """(prompt, continuation-start) pairs: random windows, random split
    points at positions >= min_prompt inside each window's output part."""
    out = []
    for _ in range(n_seq):
        start = int(rng.integers(0, len(eval_ids) - window))
        seq = eval_ids[start:start + window]
        cuts = rng.integers(min_prompt, window - 8, size=n_splits)
        for c in cuts:
            out.append(seq[:int(c)])
    return out


def _greedy_truth(weights, cache, last_token, last_pos, k_steps):
    """Continue greedily for k_steps from an already-cached prefix."""
    truth = []
    tok, pos = last_token, last_pos
    with no_grad():
        for _ in range(k_steps):
            res = forward_full(weights, np.array([tok]),
                               positions=np.array([pos + 1]),
                               mask=causal_mask(1, cache.length(0)),
                               cache=cache)
            tok = argmax_token(res.logits.data[-1])
            truth.append(tok)
            pos += 1
    return truth


@dataclass
class AccuracyReport:
    """hit counts per (method, step, topK); rates via .rate()."""
    k_steps: int
    top_ks: tuple
    hits: dict = field(default_factory=dict)
    totals: dict = field(default_factory=dict)
    seeds: tuple = ()

    def add(self, method, step, top_k, hit):
        key = (method, step, top_k)
        self.hits[key] = self.hits.get(key, 0) + int(hit)
        self.totals[key] = self.totals.get(key, 0) + 1

    def rate(self, method, step, top_k):
        key = (method, step, top_k)
        return self.hits.get(key, 0) / max(self.totals.get(key, 0), 1)

    def stderr(self, method, step, top_k):
        n = self.totals.get((method, step, top_k), 0)
        if n == 0:
            return 0.0
        p = self.rate(method, step, top_k)
        return float(np.sqrt(max(p * (1 - p), 1e-12) / n))

    def rows(self):
        out = []
        for (method, step, top_k) in sorted(self.totals):
            out.append([method, step, top_k,
                        f"{self.rate(method, step, top_k):.6f}",
                        self.totals[(method, step, top_k)],
                        f"{self.stderr(method, step, top_k):.6f}"])
        return out

    def save(self, path):
        return write_csv(path, ["method", "step", "top_k", "hit_rate",
                                "samples", "stderr"], self.rows())


def eval_draft_accuracy(base: ModelWeights, eval_ids, k_steps, top_ks,
                        bundle=None, medusa=None, exit_heads=None,
                        n_seq=100, n_splits=50, seeds=(0, 1, 2, 3, 4),
                        mask_mode=None, include_random=True):
    """Compare each method's step-i top-K candidates against the tokens the
    frozen model emits greedily after the split point."""
    methods = []
    if bundle is not None:
        methods.append("transfer")
    if medusa is not None:
        methods.append("medusa")
    if exit_heads is not None:
        methods.append("early_exit")
    if include_random:
        methods.append("random")
    if not methods:
        raise ValueError("no draft artifact supplied")

    report = AccuracyReport(k_steps=k_steps, top_ks=tuple(top_ks), seeds=tuple(seeds))
    vocab = base.config.vocab_size
    exit_taps = exit_heads.layers if exit_heads is not None else ()

    for seed in seeds:
        rng = np.random.default_rng(seed)
        for prompt in _split_points(eval_ids, n_seq, n_splits, rng):
            n = len(prompt)
            cache = KVCache(base.config, base.dtype)
            cand = {}
            if bundle is not None:
                logits, dp, _ = forward_with_drafts(
                    base, bundle, cache, prompt, np.arange(n), causal_mask(n),
                    draft_sources=[n - 1], mask_mode=mask_mode)
                cand["transfer"] = dp[0]
                cache.compact([np.arange(n)] * base.config.n_layers)
                last_logits = logits[-1]
                taps = None
                if medusa is not None or exit_heads is not None:
                    with no_grad():
                        res = forward_full(base, prompt, positions=np.arange(n),
                                           mask=causal_mask(n), taps=exit_taps)
                        hidden = res.hidden.data
                        taps = res.taps
            else:
                with no_grad():
                    res = forward_full(base, prompt, positions=np.arange(n),
                                       mask=causal_mask(n), cache=cache,
                                       taps=exit_taps)
                last_logits = res.logits.data[-1]
                hidden = res.hidden.data
                taps = res.taps
            if medusa is not None:
                with no_grad():
                    hn = final_norm(base, Tensor(hidden[n - 1:n])).data[0]
                cand["medusa"] = medusa.draft_distributions(hn)
            if exit_heads is not None:
                cand["early_exit"] = exit_heads.draft_distributions(
                    {t: taps[t].data[n - 1] for t in exit_heads.layers})

            next_tok = argmax_token(last_logits)
            truth = _greedy_truth(base, cache, next_tok, n - 1, k_steps)

            for step in range(1, k_steps + 1):
                for method in methods:
                    if method == "random":
                        picks = rng.choice(vocab, size=max(top_ks), replace=False)
                    else:
                        dist = cand[method][step - 1]
                        picks = np.argsort(-dist, kind="stable")[:max(top_ks)]
                    for K in top_ks:
                        report.add(method, step, K, truth[step - 1] in picks[:K])
    return report


@dataclass
class SimilarityTrace:
    layers: tuple
    mean_cosine: tuple
    samples: int

    def save(self, path):
        rows = [[t, f"{c:.6f}", self.samples]
                for t, c in zip(self.layers, self.mean_cosine)]
        return write_csv(path, ["layer", "mean_cosine", "samples"], rows)


def _cosine(a, b):
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def cosine_trace(base: ModelWeights, bundle, eval_ids, n_seq=20, n_splits=10,
                 seed=0, pseudo_override=None):
    """Cosine similarity between the step-1 pseudo state and the real state
    of the greedily chosen next token, at every layer from the transfer
    layer up to the top.

    `pseudo_override(real, pseudo)` (tests) substitutes the traced pseudo
    states before the cosine is taken."""
    t1 = bundle.config.transfer_layers[0]
    L = base.config.n_layers
    layers = tuple(range(t1, L + 1))
    sums = np.zeros(len(layers))
    count = 0
    rng = np.random.default_rng(seed)
    for prompt in _split_points(eval_ids, n_seq, n_splits, rng):
        n = len(prompt)
        cache = KVCache(base.config, base.dtype)
        logits, _, taps = forward_with_drafts(
            base, bundle, cache, prompt, np.arange(n), causal_mask(n),
            draft_sources=[n - 1], taps=layers)
        # pseudo step-1 row sits right after the n real rows at every
        # tapped depth >= t1
        pseudo = {t: taps[t][n] for t in layers}
        cache.compact([np.arange(n)] * base.config.n_layers)
        next_tok = argmax_token(logits[-1])
        with no_grad():
            res = forward_full(base, np.array([next_tok]),
                               positions=np.array([n]),
                               mask=causal_mask(1, n), cache=cache, taps=layers)
        real = {t: res.taps[t].data[0] for t in layers}
        if pseudo_override is not None:
            pseudo = pseudo_override(real, pseudo)
        for i, t in enumerate(layers):
            sums[i] += _cosine(pseudo[t], real[t])
        count += 1
    return SimilarityTrace(layers, tuple(sums / count), count)


def layer_sweep(base: ModelWeights, corpus_ids, eval_ids, step,
                candidate_layers, fixed_lower_layers=(), top_ks=(1, 3, 5),
                hyper: TransferHyper = None, n_seq=10, n_splits=10, seed=0,
                base_hash=""):
    """Train one bundle per candidate layer with identical hyperparameters
    and report that step's draft accuracy per layer."""
    if step not in (1, 2):
        raise ValueError("sweep supports steps 1 and 2")
    if step == 2 and len(fixed_lower_layers) != 1:
        raise ValueError("step-2 sweep needs exactly one fixed lower layer")
    hyper = hyper or TransferHyper()
    rows = []
    for t in candidate_layers:
        if not 0 < t <= base.config.n_layers:
            raise ValueError(f"layer {t} out of range")
        layers = tuple(fixed_lower_layers) + (t,)
        config = TransferConfig(k=step, transfer_layers=layers)
        bundle, _ = transfer_train(base, corpus_ids, config, hyper,
                                   base_hash=base_hash)
        report = eval_draft_accuracy(
            base, eval_ids, k_steps=step, top_ks=top_ks,
            bundle=bundle.astype(base.dtype), n_seq=n_seq, n_splits=n_splits,
            seeds=(seed,), include_random=False)
        rows.append([t] + [f"{report.rate('transfer', step, K):.6f}"
                           for K in top_ks])
    header = ["layer"] + [f"top{K}_accuracy" for K in top_ks]
    return header, rows


def forward_microbench(weights: ModelWeights, cache_lengths=(0, 128, 256),
                       input_widths=(1, 2, 4, 8, 16), n_trials=100, seed=0):
    """Median wall time of one forward per (cache length, width) pair."""
    rng = np.random.default_rng(seed)
    rows = []
    vocab = weights.config.vocab_size
    for C in cache_lengths:
        cache = KVCache(weights.config, weights.dtype)
        if C:
            prefix = rng.integers(0, vocab, size=C)
            with no_grad():
                forward_full(weights, prefix, positions=np.arange(C),
                             mask=causal_mask(C), cache=cache)
        for width in input_widths:
            tokens = rng.integers(0, vocab, size=width)
            positions = np.arange(C, C + width)
            mask = causal_mask(width, C)
            # warm-up
            with no_grad():
                forward_full(weights, tokens, positions=positions, mask=mask,
                             cache=cache)
            cache.compact([np.arange(C)] * weights.config.n_layers)
            times = []
            for _ in range(n_trials):
                t0 = time.perf_counter()
                with no_grad():
                    forward_full(weights, tokens, positions=positions,
                                 mask=mask, cache=cache)
                times.append(time.perf_counter() - t0)
                cache.compact([np.arange(C)] * weights.config.n_layers)
            rows.append([C, width, f"{float(np.median(times)):.9f}", n_trials])
    header = ["cache_len", "width", "median_seconds", "trials"]
    return header, rows


def microbench_width_ratio(rows, cache_len, wide=16, narrow=1):
    med = {(int(r[0]), int(r[1])): float(r[2]) for r in rows}
    return med[(cache_len, wide)] / med[(cache_len, narrow)]


def ablation_masked(base: ModelWeights, bundle, eval_ids, k_steps=2,
                    top_ks=(1, 3, 5), n_seq=10, n_splits=10, seeds=(0,)):
    """Masked vs no_masked draft accuracy for the same trained bundle; also
    verifies that step-1 drafts are bit-identical between the modes."""
    reports = {}
    for mode in ("no_masked", "masked"):
        reports[mode] = eval_draft_accuracy(
            base, eval_ids, k_steps=k_steps, top_ks=top_ks, bundle=bundle,
            n_seq=n_seq, n_splits=n_splits, seeds=seeds, mask_mode=mode,
            include_random=False)

    rng = np.random.default_rng(99)
    prompt = _split_points(eval_ids, 1, 1, rng)[0]
    n = len(prompt)
    step1 = {}
    for mode in ("no_masked", "masked"):
        cache = KVCache(base.config, base.dtype)
        _, dp, _ = forward_with_drafts(
            base, bundle, cache, prompt, np.arange(n), causal_mask(n),
            draft_sources=[n - 1], mask_mode=mode)
        step1[mode] = dp[0][0]
    identical = bool(np.array_equal(step1["no_masked"], step1["masked"]))

    header = ["mode", "step", "top_k", "hit_rate", "samples"]
    rows = []
    for mode, rep in reports.items():
        for step in range(1, k_steps + 1):
            for K in top_ks:
                rows.append([mode, step, K,
                             f"{rep.rate('transfer', step, K):.6f}",
                             rep.totals[("transfer", step, K)]])
    return header, rows, identical
