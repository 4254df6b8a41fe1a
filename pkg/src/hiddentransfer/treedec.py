"""Lossless tree-attention decoding: candidate trees from draft
distributions, flattening with ancestor masks, greedy verification against
the frozen base, and KV-cache rollback.

Every emitted token is the argmax of logits the frozen model itself
produced during verification, so each mode reproduces plain greedy
autoregressive output exactly; the tree only changes how many of those
argmaxes one forward yields.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .model import KVCache, ModelWeights, causal_mask, final_norm, forward_full
from .tensor import Tensor, argmax_token, no_grad, softmax
from .transfer import TransferBundle, forward_with_drafts

MODES = ("autoregressive", "transfer_tree", "transfer_two_pass", "medusa_tree")


# -- tree topology -------------------------------------------------------------


class TreeSpec:
    """Static candidate-tree topology. Node 0 is the root (the last accepted
    token); draft nodes carry the branch rank they take at their depth."""

    def __init__(self, parents, depths, ranks):
        self.parents = tuple(parents)
        self.depths = tuple(depths)
        self.ranks = tuple(ranks)
        for i, p in enumerate(self.parents):
            if i == 0:
                if p != -1:
                    raise ValueError("node 0 must be the root")
            elif not 0 <= p < i:
                raise ValueError("parents must precede children")
            elif self.depths[i] != self.depths[p] + 1:
                raise ValueError("child depth must be parent depth + 1")

    @property
    def n_nodes(self):
        return len(self.parents)

    @property
    def max_depth(self):
        return max(self.depths)

    def children(self, node):
        return [i for i, p in enumerate(self.parents) if p == node]

    def ancestors(self, node):
        chain = []
        while node != -1:
            chain.append(node)
            node = self.parents[node]
        return chain[::-1]

    @classmethod
    def from_paths(cls, paths):
        paths = sorted(set(map(tuple, paths)), key=lambda p: (len(p), p))
        if len(paths) != len(set(paths)):
            raise ValueError("duplicate tree paths")
        index = {(): 0}
        parents, depths, ranks = [-1], [0], [0]
        for p in paths:
            if p[:-1] not in index:
                raise ValueError(f"orphan path {','.join(map(str, p))}: missing parent")
            index[p] = len(parents)
            parents.append(index[p[:-1]])
            depths.append(len(p))
            ranks.append(p[-1])
        return cls(parents, depths, ranks)

    @classmethod
    def from_branching(cls, branching):
        """Full tree taking the top b_d candidates at each depth d."""
        paths = [()]
        out = []
        for b in branching:
            paths = [p + (r,) for p in paths for r in range(b)]
            out.extend(paths)
        return cls.from_paths(out)

    def to_text(self):
        lines = []
        rebuilt = {0: ()}
        for i in range(1, self.n_nodes):
            rebuilt[i] = rebuilt[self.parents[i]] + (self.ranks[i],)
            lines.append(",".join(map(str, rebuilt[i])))
        return "\n".join(lines) + ("\n" if lines else "")


DEFAULT_BRANCHING = (3, 2, 2)


def default_tree_spec():
    return TreeSpec.from_branching(DEFAULT_BRANCHING)


def parse_tree_spec(text):
    """One draft node per line: comma-separated branch-rank path from the
    root, e.g. "0" or "0,1". '#' starts a comment. Empty input degenerates
    to plain autoregressive decoding."""
    paths = []
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            path = tuple(int(x) for x in line.split(","))
        except ValueError:
            raise ValueError(f"line {lineno}: malformed path {line!r}") from None
        if any(r < 0 for r in path):
            raise ValueError(f"line {lineno}: negative branch rank")
        if path in seen:
            raise ValueError(f"line {lineno}: duplicate path {line!r}")
        seen.add(path)
        paths.append(path)
    return TreeSpec.from_paths(paths) if paths else TreeSpec((-1,), (0,), (0,))


@dataclass
class DraftTree:
    spec: TreeSpec
    tokens: np.ndarray     # per node, node 0 = last accepted token
    positions: np.ndarray  # root position + depth


def build_candidates(step_dists, spec: TreeSpec, root_token, root_pos):
    """Attach tokens: the node at depth d with branch rank r takes the
    (r+1)-th most probable token of the step-d distribution, ties broken
    toward the lowest token id."""
    step_dists = np.asarray(step_dists)
    if spec.max_depth > step_dists.shape[0]:
        raise ValueError(f"tree depth {spec.max_depth} exceeds k={step_dists.shape[0]}")
    vocab = step_dists.shape[1] if step_dists.ndim == 2 else 0
    orders = [np.argsort(-step_dists[d], kind="stable")
              for d in range(spec.max_depth)]
    tokens = np.empty(spec.n_nodes, dtype=np.int64)
    positions = np.empty(spec.n_nodes, dtype=np.int64)
    tokens[0] = root_token
    positions[0] = root_pos
    for i in range(1, spec.n_nodes):
        d, r = spec.depths[i], spec.ranks[i]
        if r >= vocab:
            raise ValueError(f"branch rank {r} >= vocab size {vocab}")
        tokens[i] = orders[d - 1][r]
        positions[i] = root_pos + d
    return DraftTree(spec, tokens, positions)


def flatten_tree(tree: DraftTree, cache_len, max_positions=None):
    """Linearize in topological order; each row may attend to the whole
    cached prefix, its ancestors, and itself."""
    m = tree.spec.n_nodes
    if max_positions is not None and tree.positions.max() >= max_positions:
        raise OverflowError("tree positions exceed max_positions")
    mask = np.zeros((m, cache_len + m), dtype=bool)
    mask[:, :cache_len] = True
    for i in range(m):
        for a in tree.spec.ancestors(i):
            mask[i, cache_len + a] = True
    return tree.tokens.copy(), tree.positions.copy(), mask


# -- verification ---------------------------------------------------------------


@dataclass
class VerifyOutcome:
    path: list              # accepted node indices, root first
    accepted: int           # draft tokens accepted (len(path) - 1)
    bonus: int              # ground-truth token at the stopping node
    drafts: np.ndarray | None  # [k, vocab] distributions for the next round
    forwards: int


def verify_walk(tree: DraftTree, truth):
    """Greedy acceptance: descend while a child carries the ground-truth
    argmax of its parent's verified logits."""
    path = [0]
    cur = 0
    while True:
        t = int(truth[cur])
        nxt = None
        for c in tree.spec.children(cur):
            if tree.tokens[c] == t:
                nxt = c
                break
        if nxt is None:
            return path, t
        path.append(nxt)
        cur = nxt


# -- decoding sessions -----------------------------------------------------------


@dataclass
class DecodeStats:
    forwards: int = 0
    emitted: int = 0
    wall_time: float = 0.0
    accept_hist: dict = field(default_factory=dict)
    per_round: list = field(default_factory=list)

    def record_round(self, accepted, emitted_now, forwards=1):
        self.forwards += forwards
        self.emitted += emitted_now
        self.per_round.append(emitted_now)
        self.accept_hist[accepted] = self.accept_hist.get(accepted, 0) + 1

    @property
    def tokens_per_forward(self):
        return self.emitted / self.forwards if self.forwards else 0.0

    def to_records(self, prefix=""):
        lines = [f"{prefix}forwards={self.forwards}",
                 f"{prefix}emitted={self.emitted}",
                 f"{prefix}tokens_per_forward={self.tokens_per_forward:.4f}",
                 f"{prefix}wall_time={self.wall_time:.6f}"]
        for k in sorted(self.accept_hist):
            lines.append(f"{prefix}accept_len_{k}={self.accept_hist[k]}")
        return lines


class Session:
    """One decoding run: frozen weights, optional draft artifacts, KV cache."""

    def __init__(self, weights: ModelWeights, mode, tree_spec=None,
                 bundle: TransferBundle = None, medusa=None, mask_mode=None):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode}")
        if mode in ("transfer_tree", "transfer_two_pass") and bundle is None:
            raise ValueError(f"mode {mode} needs a transfer bundle")
        if mode == "medusa_tree" and medusa is None:
            raise ValueError("mode medusa_tree needs medusa heads")
        self.weights = weights
        self.mode = mode
        self.spec = tree_spec if tree_spec is not None else default_tree_spec()
        self.bundle = bundle
        self.medusa = medusa
        self.mask_mode = mask_mode
        self.cache = KVCache(weights.config, weights.dtype)
        self.prefix_len = 0
        self.next_pos = 0
        self.stats = DecodeStats()

    # prefill returns the first emitted token and initial drafts
    def prefill(self, prompt):
        n = len(prompt)
        if n == 0:
            raise ValueError("prompt must be nonempty")
        if n >= self.weights.config.max_positions:
            raise ValueError("prompt does not fit the context")
        positions = np.arange(n)
        mask = causal_mask(n)
        drafts = None
        if self.mode in ("transfer_tree",):
            logits, dp, _ = forward_with_drafts(
                self.weights, self.bundle, self.cache, prompt, positions, mask,
                draft_sources=[n - 1], mask_mode=self.mask_mode)
            drafts = dp[0]
            last_logits = logits[-1]
        else:
            with no_grad():
                res = forward_full(self.weights, prompt, positions=positions,
                                   mask=mask, cache=self.cache,
                                   taps=self._verify_taps())
            last_logits = res.logits.data[-1]
            if self.mode == "transfer_two_pass":
                taps = {t: res.taps[t].data[n - 1] for t in self.bundle.config.transfer_layers}
                self._compact(n, [])
                next_tok = argmax_token(last_logits)
                drafts = self._draft_pass(taps, n - 1)
                self.next_pos = n
                self.stats.record_round(0, 1, forwards=2)
                return next_tok, drafts
            if self.mode == "medusa_tree":
                with no_grad():
                    hn = final_norm(self.weights, Tensor(res.hidden.data[n - 1:n])).data[0]
                drafts = self.medusa.draft_distributions(hn)
        self._compact(n, [])
        self.next_pos = n
        self.stats.record_round(0, 1)
        return argmax_token(last_logits), drafts

    def _verify_taps(self):
        if self.mode == "transfer_two_pass":
            return tuple(self.bundle.config.transfer_layers)
        return ()

    def _compact(self, n_real_kept_from_start=None, path=None):
        """Keep the verified prefix plus the accepted rows of this round."""
        C = self.prefix_len
        if path is None:
            keep = np.arange(C + (n_real_kept_from_start or 0))
        else:
            keep = np.concatenate([np.arange(C + (n_real_kept_from_start or 0)),
                                   C + np.asarray(path, dtype=np.int64)])
        self.cache.compact([keep] * self.weights.config.n_layers)
        self.prefix_len = len(keep)

    def _draft_pass(self, source_taps, source_pos):
        """Second forward of the two-pass reference mode: inject the pseudo
        rows of one source and run them through the upper layers alone."""
        bundle = self.bundle
        cfg = self.weights.config
        k = bundle.config.k
        ts = bundle.config.transfer_layers
        C = self.cache.length(0)
        mode = self.mask_mode or bundle.config.mask_mode
        width = C + k
        mask = np.zeros((k, width), dtype=bool)
        mask[:, :C] = True
        for i in range(1, k + 1):
            if mode == "no_masked":
                mask[i - 1, C:C + i - 1] = True
            mask[i - 1, C + i - 1] = True
        probs = np.empty((k, cfg.vocab_size))
        with no_grad():
            from .model import lm_head, run_layers
            h = bundle.synthesize(np.asarray(source_taps[ts[0]])[None, :], 1)
            pos = np.array([source_pos + 1])
            prev = ts[0]
            for i in range(2, k + 2):
                to_layer = ts[i - 1] if i <= k else cfg.n_layers
                h, _ = run_layers(self.weights, h, prev, to_layer, pos,
                                  mask[:h.data.shape[0], :C + h.data.shape[0]],
                                  cache=self.cache)
                if i <= k:
                    row = bundle.synthesize(
                        np.asarray(source_taps[ts[i - 1]])[None, :], i)
                    h = np.concatenate([h.data, row.data], axis=0)
                    h = Tensor(h)
                    pos = np.append(pos, source_pos + i)
                    prev = ts[i - 1]
            logits = lm_head(self.weights, final_norm(self.weights, h)).data
            probs[:] = softmax(Tensor(logits), axis=-1).data
        # pseudo rows never join the verified prefix
        self.cache.compact([np.arange(C)] * cfg.n_layers)
        return probs

    def room_for_round(self, root_pos):
        cfg = self.weights.config
        m = self.spec.n_nodes
        k = self.bundle.config.k if self.bundle is not None else 0
        if self.mode == "transfer_tree":
            deepest = root_pos + self.spec.max_depth + k
            worst_cache = self.prefix_len + m * (1 + k)
        elif self.mode == "transfer_two_pass":
            deepest = root_pos + self.spec.max_depth + k
            worst_cache = self.prefix_len + m + k
        else:
            deepest = root_pos + self.spec.max_depth
            worst_cache = self.prefix_len + m
        return deepest + 1 < cfg.max_positions and worst_cache <= cfg.max_positions

    def round(self, tree: DraftTree):
        """One draft-verify round over a flattened tree."""
        C = self.prefix_len
        tokens, positions, mask = flatten_tree(
            tree, C, self.weights.config.max_positions)
        if self.mode == "transfer_tree":
            logits, draft_probs, _ = forward_with_drafts(
                self.weights, self.bundle, self.cache, tokens, positions, mask,
                draft_sources=np.arange(len(tokens)), mask_mode=self.mask_mode)
            truth = logits.argmax(axis=-1)
            path, bonus = verify_walk(tree, truth)
            drafts = draft_probs[path[-1]]
            self._compact(0, path)
            return VerifyOutcome(path, len(path) - 1, bonus, drafts, 1)

        taps = self._verify_taps()
        with no_grad():
            res = forward_full(self.weights, tokens, positions=positions,
                               mask=mask, cache=self.cache, taps=taps)
        truth = res.logits.data.argmax(axis=-1)
        path, bonus = verify_walk(tree, truth)
        forwards = 1
        drafts = None
        if self.mode == "medusa_tree":
            with no_grad():
                stop = path[-1]
                hn = final_norm(self.weights, Tensor(res.hidden.data[stop:stop + 1])).data[0]
            drafts = self.medusa.draft_distributions(hn)
            self._compact(0, path)
        elif self.mode == "transfer_two_pass":
            stop = path[-1]
            source_taps = {t: res.taps[t].data[stop]
                           for t in self.bundle.config.transfer_layers}
            self._compact(0, path)
            drafts = self._draft_pass(source_taps, int(tree.positions[stop]))
            forwards = 2
        else:
            self._compact(0, path)
        return VerifyOutcome(path, len(path) - 1, bonus, drafts, forwards)


def verify_and_extend(session: Session, tree: DraftTree):
    return session.round(tree)


def decode(weights: ModelWeights, prompt, max_tokens, mode="autoregressive",
           tree_spec=None, bundle=None, medusa=None, mask_mode=None):
    """Greedy decoding in any mode; all tree modes emit exactly the
    autoregressive greedy token sequence. Returns (tokens, DecodeStats)."""
    prompt = np.asarray(prompt, dtype=np.int64)
    session = Session(weights, mode, tree_spec=tree_spec, bundle=bundle,
                      medusa=medusa, mask_mode=mask_mode)
    t0 = time.perf_counter()
    emitted = []
    if max_tokens > 0:
        next_tok, drafts = session.prefill(prompt)
        emitted.append(next_tok)
        root_pos = len(prompt)  # position of the token emitted at prefill

        if mode == "autoregressive":
            while len(emitted) < max_tokens and root_pos < weights.config.max_positions - 1:
                with no_grad():
                    res = forward_full(weights, np.array([next_tok]),
                                       positions=np.array([root_pos]),
                                       mask=causal_mask(1, session.cache.length(0)),
                                       cache=session.cache)
                next_tok = argmax_token(res.logits.data[-1])
                emitted.append(next_tok)
                root_pos += 1
                session.stats.record_round(0, 1)
                session.prefix_len = session.cache.length(0)
        else:
            while len(emitted) < max_tokens and session.room_for_round(root_pos):
                tree = build_candidates(drafts, session.spec, next_tok, root_pos)
                out = session.round(tree)
                round_tokens = [int(tree.tokens[c]) for c in out.path[1:]] + [out.bonus]
                emitted.extend(round_tokens)
                session.stats.record_round(out.accepted, len(round_tokens),
                                           forwards=out.forwards)
                drafts = out.drafts
                next_tok = out.bonus
                root_pos += len(round_tokens)

    if len(emitted) > max_tokens:
        overshoot = len(emitted) - max_tokens
        emitted = emitted[:max_tokens]
        session.stats.emitted -= overshoot
        session.stats.per_round[-1] -= overshoot
    session.stats.wall_time = time.perf_counter() - t0
    return emitted, session.stats
