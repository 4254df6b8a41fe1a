"""Tree decoding: topology parsing, candidate ranking, ancestor masks,
verification, cache rollback, and lossless equality with greedy decoding."""

import numpy as np
import pytest

from hiddentransfer.model import (KVCache, ModelConfig, ModelWeights,
                                  causal_mask, forward_full)
from hiddentransfer.tensor import no_grad
from hiddentransfer.transfer import TransferBundle, TransferConfig
from hiddentransfer.treedec import (DEFAULT_BRANCHING, DraftTree, Session,
                                    TreeSpec, build_candidates, decode,
                                    default_tree_spec, flatten_tree,
                                    parse_tree_spec, verify_walk)

CFG = ModelConfig(n_layers=3, d_model=32, n_heads=2, vocab_size=64,
                  max_positions=256, seed=11)


@pytest.fixture(scope="module")
def weights():
    return ModelWeights.init_random(CFG).astype(np.float64)


@pytest.fixture(scope="module")
def bundle():
    config = TransferConfig(k=3, transfer_layers=(1, 2, 3))
    return TransferBundle.init_identity(config, CFG.d_model, seed=1).astype(np.float64)


@pytest.fixture(scope="module")
def medusa():
    from hiddentransfer.heads import MedusaHeads
    return MedusaHeads.init_random(3, CFG.d_model, CFG.vocab_size,
                                   seed=2).astype(np.float64)


# -- tree spec -----------------------------------------------------------------


def test_parse_basic():
    spec = parse_tree_spec("0\n1\n0,0\n")
    assert spec.n_nodes == 4
    assert spec.depths == (0, 1, 1, 2)
    assert spec.parents == (-1, 0, 0, 1)


def test_parse_empty_degenerates():
    spec = parse_tree_spec("# only a comment\n\n")
    assert spec.n_nodes == 1 and spec.max_depth == 0


def test_parse_orphan_rejected():
    with pytest.raises(ValueError, match="orphan"):
        parse_tree_spec("0,0\n")


def test_parse_duplicate_rejected():
    with pytest.raises(ValueError, match="duplicate"):
        parse_tree_spec("0\n0\n")


def test_parse_malformed_rejected():
    with pytest.raises(ValueError, match="malformed"):
        parse_tree_spec("0,x\n")


def test_default_tree_shape():
    spec = default_tree_spec()
    b1, b2, b3 = DEFAULT_BRANCHING
    assert spec.n_nodes == 1 + b1 + b1 * b2 + b1 * b2 * b3 == 22
    assert spec.max_depth == 3


def test_spec_round_trip_text():
    spec = default_tree_spec()
    again = parse_tree_spec(spec.to_text())
    assert (again.parents, again.depths, again.ranks) == \
        (spec.parents, spec.depths, spec.ranks)


def test_spec_invalid_topology():
    with pytest.raises(ValueError):
        TreeSpec((0,), (0,), (0,))          # root must have parent -1
    with pytest.raises(ValueError):
        TreeSpec((-1, 1), (0, 1), (0, 0))   # parent must precede child
    with pytest.raises(ValueError):
        TreeSpec((-1, 0), (0, 2), (0, 0))   # depth must increment by 1


# -- candidates ------------------------------------------------------------------


def test_candidates_single_path_argmax():
    spec = parse_tree_spec("0\n")
    dists = np.array([[0.1, 0.7, 0.2]])
    tree = build_candidates(dists, spec, root_token=2, root_pos=10)
    assert tree.tokens[1] == 1 and tree.positions[1] == 11


def test_candidates_top2_sort_oracle():
    rng = np.random.default_rng(0)
    dist = rng.dirichlet(np.ones(32))
    spec = parse_tree_spec("0\n1\n")
    tree = build_candidates(dist[None, :], spec, 0, 0)
    order = sorted(range(32), key=lambda t: (-dist[t], t))
    assert list(tree.tokens[1:]) == order[:2]


def test_candidates_uniform_tie_break():
    spec = parse_tree_spec("0\n1\n2\n")
    dists = np.full((1, 8), 1.0 / 8)
    tree = build_candidates(dists, spec, 0, 0)
    assert list(tree.tokens[1:]) == [0, 1, 2]


def test_candidates_rank_exceeds_vocab():
    spec = parse_tree_spec("5\n")
    with pytest.raises(ValueError, match="rank"):
        build_candidates(np.full((1, 4), 0.25), spec, 0, 0)


def test_candidates_depth_exceeds_k():
    spec = parse_tree_spec("0\n0,0\n")
    with pytest.raises(ValueError, match="depth"):
        build_candidates(np.full((1, 4), 0.25), spec, 0, 0)


# -- flattening --------------------------------------------------------------------


def test_flatten_chain_is_causal():
    spec = parse_tree_spec("0\n0,0\n")
    tree = build_candidates(np.full((2, 4), 0.25), spec, 3, 5)
    _, positions, mask = flatten_tree(tree, cache_len=2)
    assert np.array_equal(positions, [5, 6, 7])
    assert np.array_equal(mask[:, 2:], np.tril(np.ones((3, 3), bool)))
    assert mask[:, :2].all()


def test_flatten_siblings_isolated():
    spec = parse_tree_spec("0\n1\n")
    tree = build_candidates(np.array([[0.5, 0.3, 0.2]]), spec, 0, 0)
    _, _, mask = flatten_tree(tree, 0)
    assert not mask[1, 2] and not mask[2, 1]
    assert mask[1, 0] and mask[2, 0]   # both see the root
    assert mask[1, 1] and mask[2, 2]   # and themselves


def test_flatten_position_overflow():
    spec = parse_tree_spec("0\n")
    tree = build_candidates(np.full((1, 4), 0.25), spec, 0, root_pos=9)
    with pytest.raises(OverflowError):
        flatten_tree(tree, 0, max_positions=10)


# -- verification walk ---------------------------------------------------------------


def _chain_tree(tokens, root_token=0, root_pos=0):
    spec = TreeSpec.from_paths([(0,) * (d + 1) for d in range(len(tokens))])
    toks = np.concatenate([[root_token], tokens])
    pos = root_pos + np.arange(len(toks))
    return DraftTree(spec, toks, pos)


def test_verify_all_wrong_is_autoregressive_step():
    tree = _chain_tree(np.array([5, 6]))
    path, bonus = verify_walk(tree, truth=np.array([9, 9, 9]))
    assert path == [0] and bonus == 9


def test_verify_full_acceptance():
    tree = _chain_tree(np.array([5, 6]))
    path, bonus = verify_walk(tree, truth=np.array([5, 6, 7]))
    assert path == [0, 1, 2] and bonus == 7


def test_verify_partial_acceptance():
    tree = _chain_tree(np.array([5, 6]))
    path, bonus = verify_walk(tree, truth=np.array([5, 8, 7]))
    assert path == [0, 1] and bonus == 8


def test_verify_picks_matching_sibling():
    spec = TreeSpec.from_paths([(0,), (1,)])
    tree = DraftTree(spec, np.array([0, 4, 7]), np.arange(3))
    path, bonus = verify_walk(tree, truth=np.array([7, 1, 2]))
    assert path == [0, 2] and bonus == 2


# -- flattened forward equals per-path recompute ---------------------------------------


def test_flattened_matches_per_path_recompute(weights):
    rng = np.random.default_rng(3)
    prompt = rng.integers(0, CFG.vocab_size, size=10)
    spec = default_tree_spec()
    k = spec.max_depth
    dists = rng.dirichlet(np.ones(CFG.vocab_size), size=k)
    tree = build_candidates(dists, spec, root_token=int(prompt[-1]) ^ 1,
                            root_pos=10)
    with no_grad():
        cache = KVCache(CFG, np.float64)
        forward_full(weights, prompt, cache=cache)
        tokens, positions, mask = flatten_tree(tree, 10)
        flat = forward_full(weights, tokens, positions=positions, mask=mask,
                            cache=cache).logits.data
        worst = 0.0
        for node in range(spec.n_nodes):
            chain = spec.ancestors(node)
            seq = np.concatenate([prompt, tree.tokens[chain]])
            ref = forward_full(weights, seq).logits.data[-1]
            worst = max(worst, float(np.max(np.abs(flat[node] - ref))))
    assert worst <= 1e-4


def test_nonancestor_kv_never_read(weights):
    """Zeroing a sibling's cached K/V changes no other node's logits."""
    rng = np.random.default_rng(4)
    prompt = rng.integers(0, CFG.vocab_size, size=6)
    spec = TreeSpec.from_paths([(0,), (1,), (0, 0)])
    dists = rng.dirichlet(np.ones(CFG.vocab_size), size=2)
    tree = build_candidates(dists, spec, 1, 6)
    tokens, positions, mask = flatten_tree(tree, 6)

    with no_grad():
        cache = KVCache(CFG, np.float64)
        forward_full(weights, prompt, cache=cache)
        base = forward_full(weights, tokens, positions=positions,
                            mask=mask, cache=cache).logits.data

    # rerun with node 2 (rank-1 sibling, no descendants) K/V zeroed between
    # the tree forward and a recompute of rows that exclude it
    with no_grad():
        cache = KVCache(CFG, np.float64)
        forward_full(weights, prompt, cache=cache)
        forward_full(weights, tokens, positions=positions, mask=mask, cache=cache)
        for layer in range(CFG.n_layers):
            cache.k[layer][:, 6 + 2] = 0.0
            cache.v[layer][:, 6 + 2] = 0.0
        cache.compact([np.arange(6)] * CFG.n_layers)
        redo = forward_full(weights, tokens, positions=positions, mask=mask,
                            cache=cache).logits.data
    keep = [0, 1, 3]  # nodes whose ancestry excludes node 2
    assert np.allclose(base[keep], redo[keep], atol=1e-12)


# -- decoding ---------------------------------------------------------------------------


def test_decode_zero_tokens(weights):
    tokens, stats = decode(weights, np.array([1, 2, 3]), 0)
    assert tokens == [] and stats.forwards == 0 and stats.emitted == 0


def test_decode_empty_prompt_rejected(weights):
    with pytest.raises(ValueError):
        decode(weights, np.array([], dtype=np.int64), 4)


def test_decode_unknown_mode(weights):
    with pytest.raises(ValueError):
        decode(weights, np.array([1]), 4, mode="telepathy")


def test_tree_modes_need_artifacts(weights):
    with pytest.raises(ValueError):
        decode(weights, np.array([1]), 4, mode="transfer_tree")
    with pytest.raises(ValueError):
        decode(weights, np.array([1]), 4, mode="medusa_tree")


def test_losslessness_all_modes_small(weights, bundle, medusa):
    rng = np.random.default_rng(5)
    for _ in range(6):
        n = int(rng.integers(4, 24))
        prompt = rng.integers(0, CFG.vocab_size, size=n)
        want, ar_stats = decode(weights, prompt, 40)
        for mode, kw in (("transfer_tree", {"bundle": bundle}),
                         ("transfer_two_pass", {"bundle": bundle}),
                         ("medusa_tree", {"medusa": medusa})):
            got, stats = decode(weights, prompt, 40, mode=mode, **kw)
            assert got == want, f"{mode} diverged from greedy decoding"
            assert stats.emitted == len(got)


def test_accounting_identity_and_bounds(weights, bundle):
    rng = np.random.default_rng(6)
    prompt = rng.integers(0, CFG.vocab_size, size=12)
    _, ar = decode(weights, prompt, 48)
    _, tt = decode(weights, prompt, 48, mode="transfer_tree", bundle=bundle)
    assert sum(tt.per_round) == tt.emitted
    assert tt.forwards <= ar.forwards
    assert tt.tokens_per_forward >= 1.0
    assert sum(c * (a + 1) for a, c in tt.accept_hist.items()) >= tt.emitted - tt.forwards


def test_two_pass_drafts_match_combined(weights, bundle):
    """The combined forward's drafts equal the two-pass reference drafts."""
    rng = np.random.default_rng(7)
    prompt = rng.integers(0, CFG.vocab_size, size=10)
    s1 = Session(weights, "transfer_tree", bundle=bundle)
    s2 = Session(weights, "transfer_two_pass", bundle=bundle)
    t1, d1 = s1.prefill(prompt)
    t2, d2 = s2.prefill(prompt)
    assert t1 == t2
    assert np.max(np.abs(d1 - d2)) <= 1e-4


def test_cache_rollback_recompute(weights, bundle):
    """After rounds of verification, cached K/V equals a fresh forward over
    the accepted prefix."""
    rng = np.random.default_rng(8)
    prompt = rng.integers(0, CFG.vocab_size, size=10)
    tokens, _ = decode(weights, prompt, 30, mode="transfer_tree", bundle=bundle)

    session = Session(weights, "transfer_tree", bundle=bundle)
    next_tok, drafts = session.prefill(prompt)
    emitted = [next_tok]
    root_pos = len(prompt)
    for _ in range(3):
        tree = build_candidates(drafts, session.spec, next_tok, root_pos)
        out = session.round(tree)
        emitted += [int(tree.tokens[c]) for c in out.path[1:]] + [out.bonus]
        drafts, next_tok = out.drafts, out.bonus
        root_pos += len(out.path)

    committed = np.concatenate([prompt, emitted[:-1]])
    with no_grad():
        fresh = KVCache(CFG, np.float64)
        forward_full(weights, committed, cache=fresh)
    for layer in range(CFG.n_layers):
        n = session.cache.length(layer)
        assert np.array_equal(session.cache.pos[layer], np.arange(n))
        diff = max(np.max(np.abs(fresh.k[layer][:, :n] - session.cache.k[layer])),
                   np.max(np.abs(fresh.v[layer][:, :n] - session.cache.v[layer])))
        assert diff <= 1e-5


def test_decode_respects_context_limit(weights, bundle):
    """Decoding stops cleanly before overflowing max_positions."""
    small = ModelConfig(n_layers=3, d_model=32, n_heads=2, vocab_size=64,
                        max_positions=48, seed=11)
    w = ModelWeights.init_random(small).astype(np.float64)
    prompt = np.arange(10, dtype=np.int64)
    got, stats = decode(w, prompt, 1000, mode="transfer_tree", bundle=bundle)
    want, _ = decode(w, prompt, len(got))
    assert got == want
    assert len(got) < 1000
