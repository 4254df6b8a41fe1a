"""Command-line entry point.

Commands: pretrain, train (transfer | medusa | early_exit), generate, bench,
analyze (accuracy | cosine | sweep | microbench | ablation).

Configuration comes from a flat key=value file (--config), overridable per
key through HT_<KEY> environment variables and the --seed/--mode flags. The
effective configuration is written next to every output artifact and its
hash is printed, so any artifact can be regenerated from what is on disk.

Exit codes: 0 success, 1 usage or configuration error, 2 artifact mismatch
(missing checkpoint or base-hash check failure), 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import analysis, checkpoint
from .config import ConfigError, RunConfig
from .corpus import decode_ids, encode_bytes, load_token_stream, train_val_split
from .heads import ExitHeads, HeadHyper, MedusaHeads, train_early_exit, train_medusa
from .model import ModelConfig, ModelWeights, TrainHyper, pretrain_base
from .transfer import (TransferConfig, TransferHyper, TransferBundle,
                       default_transfer_layers, transfer_train)
from .treedec import (DEFAULT_BRANCHING, MODES, TreeSpec, decode,
                      parse_tree_spec)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_ARTIFACT = 2
EXIT_NUMERIC = 3


class ArtifactError(Exception):
    """Missing checkpoint or checkpoint that belongs to a different base."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _resolve(path, out_dir):
    p = Path(path)
    return p if p.is_absolute() else Path(out_dir) / p


def _load_config(args):
    overrides = {"seed": getattr(args, "seed", None)}
    return RunConfig.load(path=args.config, overrides=overrides)


def _model_config(cfg):
    return ModelConfig(n_layers=cfg.n_layers, d_model=cfg.d_model,
                       n_heads=cfg.n_heads, vocab_size=cfg.vocab_size,
                       max_positions=cfg.max_positions, seed=cfg.seed,
                       mlp_hidden=cfg.mlp_hidden)


def _transfer_layers(cfg):
    layers = cfg.int_list("transfer_layers")
    return layers or default_transfer_layers(cfg.n_layers, cfg.k)


def _load_base(cfg, out_dir, dtype=np.float64):
    path = _resolve(cfg.base_ckpt, out_dir)
    if not path.exists():
        raise ArtifactError(f"base checkpoint not found: {path}")
    weights, _ = ModelWeights.load(path)
    return weights.astype(dtype), checkpoint.file_hash(path)


def _load_artifact(loader, cfg_path, out_dir, base_hash, what):
    path = _resolve(cfg_path, out_dir)
    if not path.exists():
        raise ArtifactError(f"{what} checkpoint not found: {path}")
    art = loader(path)
    try:
        art.check_base(base_hash)
    except ValueError as e:
        raise ArtifactError(str(e)) from None
    return art


def _load_tree(cfg):
    if not cfg.tree_spec:
        # built-in tree, truncated so its depth never exceeds the draft horizon
        return TreeSpec.from_branching(DEFAULT_BRANCHING[:cfg.k])
    return parse_tree_spec(Path(cfg.tree_spec).read_text())


def _read_prompts(path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ln for ln in lines if ln.strip()]


def _emit_config(cfg, out_dir, name):
    cfg.write_effective(out_dir, name)
    print(f"config_hash={cfg.digest()}")


def _corpus_ids(cfg):
    path = Path(cfg.corpus)
    if not path.exists():
        raise ArtifactError(f"corpus not found: {path}")
    return load_token_stream(path)


# -- commands -----------------------------------------------------------------


def cmd_pretrain(cfg, args):
    ids = _corpus_ids(cfg)
    hyper = TrainHyper(epochs=cfg.pretrain_epochs, batch_size=cfg.pretrain_batch,
                       seq_len=cfg.pretrain_seq, lr=cfg.pretrain_lr,
                       max_steps=cfg.pretrain_max_steps or None, seed=cfg.seed)

    def progress(step, loss):
        print(f"pretrain step={step} loss={loss:.4f}", flush=True)

    weights, stats = pretrain_base(ids, _model_config(cfg), hyper,
                                   progress=progress)
    path = _resolve(cfg.base_ckpt, args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    weights.save(path, extra_meta={"run.config_hash": cfg.digest()})
    _emit_config(cfg, args.out, "pretrain")
    print(f"base_ckpt={path}")
    print(f"base_hash={checkpoint.file_hash(path)}")
    print(f"initial_loss={stats['initial_loss']:.4f}")
    print(f"final_loss={stats['final_loss']:.4f}")
    print(f"steps={stats['steps']}")
    return EXIT_OK


def cmd_train(cfg, args):
    base, base_hash = _load_base(cfg, args.out, dtype=np.float32)
    ids = _corpus_ids(cfg)
    method = args.method

    def progress(*a):
        step, loss = a[-2], a[-1]
        print(f"{method} step={step} loss={loss:.4f}", flush=True)

    if method == "transfer":
        tconf = TransferConfig(k=cfg.k, transfer_layers=_transfer_layers(cfg),
                               mask_mode=cfg.mask_mode,
                               kl_direction=cfg.kl_direction,
                               bias=bool(cfg.transfer_bias))
        hyper = TransferHyper(epochs=cfg.train_epochs, batch_size=cfg.train_batch,
                              seq_len=cfg.train_seq, lr=cfg.train_lr,
                              max_steps=cfg.train_max_steps or None, seed=cfg.seed)
        art, stats = transfer_train(base, ids, tconf, hyper,
                                    base_hash=base_hash, progress=progress)
        path = _resolve(cfg.bundle_ckpt, args.out)
    else:
        hyper = HeadHyper(epochs=cfg.train_epochs, batch_size=cfg.train_batch,
                          seq_len=cfg.train_seq, lr=cfg.train_lr,
                          max_steps=cfg.train_max_steps or None, seed=cfg.seed)
        if method == "medusa":
            art, stats = train_medusa(base, ids, cfg.k, hyper,
                                      base_hash=base_hash, progress=progress)
            path = _resolve(cfg.medusa_ckpt, args.out)
        else:
            layers = cfg.int_list("exit_layers") or _transfer_layers(cfg)
            art, stats = train_early_exit(base, ids, layers, cfg.k, hyper,
                                          base_hash=base_hash, progress=progress)
            path = _resolve(cfg.exit_ckpt, args.out)

    path.parent.mkdir(parents=True, exist_ok=True)
    art.save(path, extra_meta={"run.config_hash": cfg.digest()})
    _emit_config(cfg, args.out, f"train_{method}")
    print(f"artifact={path}")
    print(f"artifact_hash={checkpoint.file_hash(path)}")
    if method == "transfer":
        for i in sorted(stats):
            print(f"step{i}_init_kl={stats[i]['init_kl']:.4f} "
                  f"final_kl={stats[i]['final_kl']:.4f}")
    else:
        losses = stats["losses"]
        print(f"initial_loss={losses[0]:.4f}")
        print(f"final_loss={losses[-1]:.4f}")
    return EXIT_OK


def _decode_artifacts(cfg, args, mode):
    base, base_hash = _load_base(cfg, args.out)
    bundle = medusa = None
    if mode in ("transfer_tree", "transfer_two_pass"):
        bundle = _load_artifact(TransferBundle.load, cfg.bundle_ckpt, args.out,
                                base_hash, "transfer").astype(np.float64)
    if mode == "medusa_tree":
        medusa = _load_artifact(MedusaHeads.load, cfg.medusa_ckpt, args.out,
                                base_hash, "medusa").astype(np.float64)
    return base, bundle, medusa


def cmd_generate(cfg, args):
    mode = args.mode or "transfer_tree"
    if mode not in MODES:
        raise ConfigError(f"unknown mode: {mode} (choose from {', '.join(MODES)})")
    if args.prompt is not None:
        text = args.prompt
    elif args.prompt_file:
        prompts = _read_prompts(args.prompt_file)
        if not prompts:
            raise ConfigError(f"no prompts in {args.prompt_file}")
        text = prompts[0]
    else:
        raise ConfigError("generate needs --prompt or --prompt-file")

    base, bundle, medusa = _decode_artifacts(cfg, args, mode)
    prompt_ids = encode_bytes(text.encode("utf-8"))
    tokens, stats = decode(base, prompt_ids, cfg.max_tokens, mode=mode,
                           tree_spec=_load_tree(cfg), bundle=bundle,
                           medusa=medusa, mask_mode=cfg.mask_mode)
    _emit_config(cfg, args.out, "generate")
    print(f"mode={mode}")
    for line in stats.to_records():
        print(line)
    print("---")
    sys.stdout.write(decode_ids(tokens).decode("utf-8", errors="replace") + "\n")
    return EXIT_OK


def cmd_bench(cfg, args):
    prompts = _read_prompts(args.prompt_file)
    header_cols = ["mode", "forwards", "emitted", "tokens_per_forward",
                   "wall_seconds", "speedup"]
    if not prompts:
        _emit_config(cfg, args.out, "bench")
        print("prompts=0")
        analysis.write_csv(Path(args.out) / "bench.csv", header_cols, [])
        return EXIT_OK
    modes = args.modes.split(",") if args.modes else list(MODES)
    for m in modes:
        if m not in MODES:
            raise ConfigError(f"unknown mode: {m}")
    if "autoregressive" not in modes:
        modes = ["autoregressive"] + modes

    base, base_hash = _load_base(cfg, args.out)
    bundle = medusa = None
    if any(m.startswith("transfer") for m in modes):
        bundle = _load_artifact(TransferBundle.load, cfg.bundle_ckpt, args.out,
                                base_hash, "transfer").astype(np.float64)
    if "medusa_tree" in modes:
        medusa = _load_artifact(MedusaHeads.load, cfg.medusa_ckpt, args.out,
                                base_hash, "medusa").astype(np.float64)
    tree = _load_tree(cfg)

    totals = {}
    records = []
    for mode in modes:
        forwards = emitted = 0
        wall = 0.0
        for pi, text in enumerate(prompts):
            ids = encode_bytes(text.encode("utf-8"))
            _, stats = decode(base, ids, cfg.max_tokens, mode=mode,
                              tree_spec=tree, bundle=bundle, medusa=medusa,
                              mask_mode=cfg.mask_mode)
            forwards += stats.forwards
            emitted += stats.emitted
            wall += stats.wall_time
            records.extend(stats.to_records(prefix=f"{mode}.prompt{pi}."))
        totals[mode] = (forwards, emitted, wall)

    _emit_config(cfg, args.out, "bench")
    rec_path = Path(args.out) / "bench.records.txt"
    rec_path.write_text("\n".join(records) + "\n")
    print(f"records={rec_path}")
    print(f"prompts={len(prompts)} max_tokens={cfg.max_tokens}")
    header = f"{'mode':<20} {'forwards':>9} {'emitted':>8} {'tok/fwd':>8} " \
             f"{'wall_s':>9} {'speedup':>8}"
    print(header)
    ar_wall = totals["autoregressive"][2]
    rows = []
    for mode in modes:
        f, e, wsec = totals[mode]
        speedup = 1.0 if mode == "autoregressive" else ar_wall / wsec
        line = f"{mode:<20} {f:>9} {e:>8} {e / max(f, 1):>8.3f} " \
               f"{wsec:>9.3f} {speedup:>7.2f}x"
        print(line)
        rows.append([mode, f, e, f"{e / max(f, 1):.4f}", f"{wsec:.4f}",
                     f"{speedup:.4f}"])
    analysis.write_csv(Path(args.out) / "bench.csv", header_cols, rows)
    return EXIT_OK


def cmd_analyze(cfg, args):
    which = args.which
    out = Path(args.out)
    base, base_hash = _load_base(cfg, args.out)
    _, val_ids = train_val_split(_corpus_ids(cfg))
    top_ks = cfg.int_list("acc_top_ks")
    seeds = tuple(range(cfg.acc_seeds))

    if which == "accuracy":
        def opt(loader, path, what):
            return (_load_artifact(loader, path, args.out, base_hash, what)
                    if _resolve(path, args.out).exists() else None)
        bundle = opt(TransferBundle.load, cfg.bundle_ckpt, "transfer")
        medusa = opt(MedusaHeads.load, cfg.medusa_ckpt, "medusa")
        exits = opt(ExitHeads.load, cfg.exit_ckpt, "early exit")
        if bundle:
            bundle = bundle.astype(np.float64)
        if medusa:
            medusa = medusa.astype(np.float64)
        report = analysis.eval_draft_accuracy(
            base, val_ids, cfg.k, top_ks, bundle=bundle, medusa=medusa,
            exit_heads=exits, n_seq=cfg.acc_n_seq, n_splits=cfg.acc_n_splits,
            seeds=seeds)
        path = report.save(out / "accuracy.csv")
        print(f"table={path}")
        for row in report.rows():
            print(" ".join(str(c) for c in row))
    elif which == "cosine":
        bundle = _load_artifact(TransferBundle.load, cfg.bundle_ckpt, args.out,
                                base_hash, "transfer").astype(np.float64)
        trace = analysis.cosine_trace(base, bundle, val_ids,
                                      n_seq=cfg.cosine_n_seq,
                                      n_splits=cfg.cosine_n_splits,
                                      seed=cfg.seed)
        path = trace.save(out / "cosine.csv")
        print(f"table={path}")
        for t, c in zip(trace.layers, trace.mean_cosine):
            print(f"layer={t} mean_cosine={c:.4f}")
    elif which == "sweep":
        base32 = base.astype(np.float32)
        layers = cfg.int_list("sweep_layers") or tuple(range(1, cfg.n_layers))
        hyper = TransferHyper(epochs=cfg.train_epochs, batch_size=cfg.train_batch,
                              seq_len=cfg.train_seq, lr=cfg.train_lr,
                              max_steps=cfg.train_max_steps or None,
                              seed=cfg.seed)
        header, rows = analysis.layer_sweep(
            base32, _corpus_ids(cfg), val_ids, cfg.sweep_step, layers,
            fixed_lower_layers=cfg.int_list("sweep_fixed"), top_ks=top_ks,
            hyper=hyper, seed=cfg.seed, base_hash=base_hash)
        path = analysis.write_csv(out / "sweep.csv", header, rows)
        print(f"table={path}")
        for row in rows:
            print(" ".join(str(c) for c in row))
    elif which == "microbench":
        header, rows = analysis.forward_microbench(
            base, cache_lengths=cfg.int_list("bench_cache_lengths"),
            input_widths=cfg.int_list("bench_widths"),
            n_trials=cfg.bench_trials, seed=cfg.seed)
        path = analysis.write_csv(out / "microbench.csv", header, rows)
        print(f"table={path}")
        widths = cfg.int_list("bench_widths")
        for C in cfg.int_list("bench_cache_lengths"):
            r = analysis.microbench_width_ratio(rows, C, wide=max(widths),
                                                narrow=min(widths))
            print(f"cache_len={C} width{max(widths)}/width{min(widths)}={r:.2f}")
    else:  # ablation
        bundle = _load_artifact(TransferBundle.load, cfg.bundle_ckpt, args.out,
                                base_hash, "transfer").astype(np.float64)
        header, rows, identical = analysis.ablation_masked(
            base, bundle, val_ids, k_steps=min(cfg.k, 2), top_ks=top_ks,
            n_seq=cfg.acc_n_seq, n_splits=cfg.acc_n_splits, seeds=seeds[:1])
        path = analysis.write_csv(out / "ablation.csv", header, rows)
        print(f"table={path}")
        print(f"step1_identical={identical}")
        for row in rows:
            print(" ".join(str(c) for c in row))

    _emit_config(cfg, args.out, f"analyze_{which}")
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int, help="override config seed")
    common.add_argument("--out", default="runs", help="output directory")

    p = _Parser(prog="hiddentransfer", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("pretrain", parents=[common],
                   help="train the base model on the corpus")

    t = sub.add_parser("train", parents=[common],
                       help="train a draft artifact against a frozen base")
    t.add_argument("method", choices=("transfer", "medusa", "early_exit"))

    g = sub.add_parser("generate", parents=[common], help="greedy decoding")
    g.add_argument("--mode", choices=MODES, help="decoding mode")
    g.add_argument("--prompt", help="prompt text")
    g.add_argument("--prompt-file", help="UTF-8 file, first nonblank line")

    b = sub.add_parser("bench", parents=[common],
                       help="compare decoding modes on a prompt file")
    b.add_argument("--prompt-file", required=True,
                   help="UTF-8 file, one prompt per line, blanks skipped")
    b.add_argument("--modes", help="comma-separated modes (default: all)")

    a = sub.add_parser("analyze", parents=[common], help="analytic experiments")
    a.add_argument("which", choices=("accuracy", "cosine", "sweep",
                                     "microbench", "ablation"))
    return p


COMMANDS = {"pretrain": cmd_pretrain, "train": cmd_train,
            "generate": cmd_generate, "bench": cmd_bench,
            "analyze": cmd_analyze}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ArtifactError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ARTIFACT
    except FloatingPointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
