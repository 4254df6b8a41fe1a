"""Run the full experiment pipeline through the command-line interface.

Trains the base model on the bundled corpus, distills the transfer
projections and both baseline head families against it, then produces the
decoding benchmark and every analysis table in one output directory.

With --quick a small model and short schedules are used so the whole
pipeline finishes in a few minutes; without it the defaults from the config
schema apply (hours on CPU). Any key can still be overridden via a config
file or HT_* environment variables.
"""

import argparse
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from hiddentransfer.cli import main as cli_main

QUICK = """
n_layers=6
d_model=96
n_heads=4
pretrain_epochs=1
pretrain_batch=16
pretrain_seq=128
train_epochs=1
train_batch=16
train_seq=128
train_max_steps=250
acc_n_seq=20
acc_n_splits=10
acc_seeds=2
cosine_n_seq=20
cosine_n_splits=10
sweep_layers=2,3,4,5
bench_trials=20
"""


def run(step, argv):
    print(f"\n=== {' '.join(argv)} ===", flush=True)
    code = cli_main(argv)
    if code != 0:
        sys.exit(f"step '{step}' failed with exit code {code}")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/experiments", help="output directory")
    ap.add_argument("--config", help="config file (overrides --quick defaults)")
    ap.add_argument("--quick", action="store_true",
                    help="small model and short schedules")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg_path = args.config
    tmp = None
    if cfg_path is None and args.quick:
        tmp = tempfile.NamedTemporaryFile("w", suffix=".cfg", delete=False)
        tmp.write(QUICK)
        tmp.close()
        cfg_path = tmp.name

    common = ["--out", args.out, "--seed", str(args.seed)]
    if cfg_path:
        common += ["--config", cfg_path]

    run("pretrain", ["pretrain", *common])
    for method in ("transfer", "medusa", "early_exit"):
        run(f"train {method}", ["train", method, *common])

    prompts = Path(args.out) / "prompts.txt"
    prompts.write_text("the engineer measured the copper instrument\n"
                       "a junior analyst reviewed the tide tables\n"
                       "the archivist catalogued a box of lenses\n")
    run("bench", ["bench", "--prompt-file", str(prompts), *common])
    for which in ("accuracy", "cosine", "sweep", "microbench", "ablation"):
        run(f"analyze {which}", ["analyze", which, *common])

    print(f"\nall outputs under {args.out}/")


if __name__ == "__main__":
    main()
