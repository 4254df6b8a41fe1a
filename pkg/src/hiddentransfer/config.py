"""Flat key=value run configuration with defaults, env overrides, hashing."""

from __future__ import annotations

import hashlib
import os
from pathlib import Path

ENV_PREFIX = "HT_"

# key -> (type, default). Everything a run needs lives here so any artifact
# can be regenerated from its stored effective config plus the seed.
SCHEMA = {
    # model
    "n_layers": (int, 8),
    "d_model": (int, 256),
    "n_heads": (int, 8),
    "vocab_size": (int, 259),
    "max_positions": (int, 512),
    "mlp_hidden": (int, 0),
    # transfer / heads
    "k": (int, 3),
    "transfer_layers": (str, ""),        # csv; empty = mid-stack default
    "mask_mode": (str, "no_masked"),
    "kl_direction": (str, "teacher_first"),
    "transfer_bias": (int, 0),
    "exit_layers": (str, ""),            # csv; empty = same as transfer
    # base pretraining
    "pretrain_epochs": (int, 2),
    "pretrain_batch": (int, 32),
    "pretrain_seq": (int, 256),
    "pretrain_lr": (float, 1e-3),
    "pretrain_max_steps": (int, 0),      # 0 = no cap
    # projection/head training
    "train_epochs": (int, 1),
    "train_batch": (int, 16),
    "train_seq": (int, 128),
    "train_lr": (float, 1e-3),
    "train_max_steps": (int, 0),
    # decoding
    "max_tokens": (int, 128),
    "tree_spec": (str, ""),              # path; empty = built-in (3,2,2)
    # analysis
    "acc_n_seq": (int, 100),
    "acc_n_splits": (int, 50),
    "acc_seeds": (int, 5),
    "acc_top_ks": (str, "1,3,5"),
    "cosine_n_seq": (int, 20),
    "cosine_n_splits": (int, 10),
    "sweep_step": (int, 1),
    "sweep_layers": (str, ""),           # csv; empty = 1..n_layers-1
    "sweep_fixed": (str, ""),
    "bench_cache_lengths": (str, "0,128,256"),
    "bench_widths": (str, "1,2,4,8,16"),
    "bench_trials": (int, 100),
    # paths
    "corpus": (str, "data/corpus.txt"),
    "base_ckpt": (str, "base.htc"),
    "bundle_ckpt": (str, "transfer.htc"),
    "medusa_ckpt": (str, "medusa.htc"),
    "exit_ckpt": (str, "exit.htc"),
    # reproducibility
    "seed": (int, 0),
}


class ConfigError(ValueError):
    pass


class RunConfig:
    def __init__(self, values=None):
        self._values = {k: d for k, (_, d) in SCHEMA.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key, raw):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key: {key}")
        typ = SCHEMA[key][0]
        try:
            self._values[key] = typ(raw)
        except (TypeError, ValueError):
            raise ConfigError(f"bad value for {key}: {raw!r}") from None

    def __getattr__(self, key):
        if key.startswith("_"):
            raise AttributeError(key)
        try:
            return self._values[key]
        except KeyError:
            raise AttributeError(key) from None

    def int_list(self, key):
        raw = self._values[key].strip()
        if not raw:
            return ()
        try:
            return tuple(int(x) for x in raw.split(","))
        except ValueError:
            raise ConfigError(f"bad integer list for {key}: {raw!r}") from None

    @classmethod
    def load(cls, path=None, env=None, overrides=None):
        """File values, then HT_* environment overrides, then CLI overrides."""
        cfg = cls()
        if path:
            for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value")
                k, _, v = line.partition("=")
                cfg.set(k.strip(), v.strip())
        env = os.environ if env is None else env
        for k in SCHEMA:
            ev = env.get(ENV_PREFIX + k.upper())
            if ev is not None:
                cfg.set(k, ev)
        for k, v in (overrides or {}).items():
            if v is not None:
                cfg.set(k, v)
        return cfg

    def serialize(self):
        return "".join(f"{k}={self._values[k]}\n" for k in sorted(SCHEMA))

    def digest(self):
        return hashlib.sha256(self.serialize().encode()).hexdigest()[:16]

    def write_effective(self, out_dir, name):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        p = out / f"{name}.config.txt"
        p.write_text(self.serialize())
        return p
