"""Byte-level corpus handling: 256 raw bytes + BOS/EOS/PAD specials."""

from __future__ import annotations

from pathlib import Path

import numpy as np

BOS, EOS, PAD = 256, 257, 258
VOCAB_SIZE = 259


def encode_bytes(data: bytes) -> np.ndarray:
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


def decode_ids(ids) -> bytes:
    ids = np.asarray(ids)
    return bytes(int(t) for t in ids if t < 256)


def load_token_stream(path) -> np.ndarray:
    """Byte-tokenize a text file, or every *.txt under a directory,
    concatenated with EOS separators."""
    path = Path(path)
    if path.is_dir():
        files = sorted(path.rglob("*.txt"))
        if not files:
            raise FileNotFoundError(f"no .txt files under {path}")
    else:
        files = [path]
    parts = []
    for f in files:
        parts.append(encode_bytes(f.read_bytes()))
        parts.append(np.array([EOS], dtype=np.int64))
    return np.concatenate(parts)


def train_val_split(ids: np.ndarray, val_frac=0.05):
    n_val = max(1, int(len(ids) * val_frac))
    return ids[:-n_val], ids[-n_val:]


def iter_batches(ids: np.ndarray, batch_size: int, seq_len: int, rng,
                 epochs: int = 1, max_steps=None):
    """Yield (inputs [B,S], targets [B,S]) over non-overlapping windows,
    shuffled once per epoch with the supplied generator."""
    n_windows = (len(ids) - 1) // seq_len
    if n_windows < batch_size:
        raise ValueError("corpus too small for one batch")
    steps = 0
    for _ in range(epochs):
        order = rng.permutation(n_windows)
        for i in range(0, n_windows - batch_size + 1, batch_size):
            sel = order[i:i + batch_size]
            x = np.stack([ids[s * seq_len: s * seq_len + seq_len] for s in sel])
            y = np.stack([ids[s * seq_len + 1: s * seq_len + seq_len + 1] for s in sel])
            yield x, y
            steps += 1
            if max_steps is not None and steps >= max_steps:
                return


def sample_prompts(ids: np.ndarray, n: int, min_len: int, max_len: int, rng):
    """Random contiguous snippets of the stream, used as decoding prompts."""
    prompts = []
    for _ in range(n):
        length = int(rng.integers(min_len, max_len + 1))
        start = int(rng.integers(0, len(ids) - length))
        prompts.append(ids[start:start + length].copy())
    return prompts
