"""Shared fixtures.

The expensive piece is a small trained stack (base model + transfer
projections + baseline heads) used by the acceptance suite and the analysis
tests. It is trained once and cached under tests/_artifacts keyed by the
training configuration, so reruns are fast; delete the directory to force a
rebuild.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

from hiddentransfer import checkpoint
from hiddentransfer.corpus import load_token_stream, train_val_split
from hiddentransfer.heads import (ExitHeads, HeadHyper, MedusaHeads,
                                  train_early_exit, train_medusa)
from hiddentransfer.model import ModelConfig, ModelWeights, TrainHyper, pretrain_base
from hiddentransfer.transfer import (TransferBundle, TransferConfig,
                                     TransferHyper, transfer_train)

REPO = Path(__file__).resolve().parents[1]
CORPUS = REPO / "data" / "corpus.txt"
ARTIFACTS = Path(__file__).resolve().parent / "_artifacts"

TOY_CONFIG = ModelConfig(n_layers=6, d_model=96, n_heads=4, max_positions=512)
PRETRAIN_HYPER = TrainHyper(epochs=1, batch_size=16, seq_len=128, lr=1e-3, seed=0)
TRANSFER_CONFIG = TransferConfig(k=3, transfer_layers=(3, 4, 5))
TRANSFER_HYPER = TransferHyper(epochs=1, batch_size=16, seq_len=128, lr=1e-3, seed=0)
HEAD_HYPER = HeadHyper(epochs=1, batch_size=16, seq_len=128, lr=1e-3, seed=0,
                       max_steps=250)


def _artifact_key():
    desc = repr((TOY_CONFIG, PRETRAIN_HYPER, TRANSFER_CONFIG, TRANSFER_HYPER,
                 HEAD_HYPER))
    return hashlib.sha256(desc.encode()).hexdigest()[:16]


def _build(art_dir: Path, ids):
    art_dir.mkdir(parents=True, exist_ok=True)
    print(f"\n[fixtures] training toy stack into {art_dir} (one-time)")
    base, pre_stats = pretrain_base(ids, TOY_CONFIG, PRETRAIN_HYPER)
    base.save(art_dir / "base.htc")
    base_hash = checkpoint.file_hash(art_dir / "base.htc")

    bundle, t_stats = transfer_train(base, ids, TRANSFER_CONFIG, TRANSFER_HYPER,
                                     base_hash=base_hash)
    bundle.save(art_dir / "transfer.htc")
    medusa, m_stats = train_medusa(base, ids, TRANSFER_CONFIG.k, HEAD_HYPER,
                                   base_hash=base_hash)
    medusa.save(art_dir / "medusa.htc")
    exits, e_stats = train_early_exit(base, ids, TRANSFER_CONFIG.transfer_layers,
                                      TRANSFER_CONFIG.k, HEAD_HYPER,
                                      base_hash=base_hash)
    exits.save(art_dir / "exit.htc")

    stats = {"pretrain": pre_stats,
             "transfer": {str(i): s for i, s in t_stats.items()},
             "medusa_first_last": [m_stats["losses"][0], m_stats["losses"][-1]],
             "exit_first_last": [e_stats["losses"][0], e_stats["losses"][-1]]}
    (art_dir / "stats.json").write_text(json.dumps(stats, indent=1))


@pytest.fixture(scope="session")
def corpus_ids():
    return load_token_stream(CORPUS)


@pytest.fixture(scope="session")
def trained(corpus_ids):
    """Trained toy stack, float64 for inference plus the float32 originals."""
    art_dir = ARTIFACTS / _artifact_key()
    needed = ["base.htc", "transfer.htc", "medusa.htc", "exit.htc", "stats.json"]
    if not all((art_dir / f).exists() for f in needed):
        _build(art_dir, corpus_ids)

    base32, _ = ModelWeights.load(art_dir / "base.htc")
    base_hash = checkpoint.file_hash(art_dir / "base.htc")
    bundle32 = TransferBundle.load(art_dir / "transfer.htc")
    medusa32 = MedusaHeads.load(art_dir / "medusa.htc")
    exits32 = ExitHeads.load(art_dir / "exit.htc")
    for art in (bundle32, medusa32, exits32):
        art.check_base(base_hash)
    stats = json.loads((art_dir / "stats.json").read_text())
    train_ids, val_ids = train_val_split(corpus_ids)
    return SimpleNamespace(
        base=base32.astype(np.float64), base32=base32,
        bundle=bundle32.astype(np.float64), bundle32=bundle32,
        medusa=medusa32.astype(np.float64),
        exits=exits32.astype(np.float64),
        base_hash=base_hash, stats=stats,
        train_ids=train_ids, val_ids=val_ids,
        config=TOY_CONFIG, transfer_config=TRANSFER_CONFIG,
        art_dir=art_dir)


@pytest.fixture(scope="session")
def tiny_model():
    """Small random (untrained) model for structural tests, float64."""
    cfg = ModelConfig(n_layers=3, d_model=32, n_heads=2, vocab_size=64,
                      max_positions=256, seed=7)
    return ModelWeights.init_random(cfg).astype(np.float64)
