"""Run configuration and command-line interface, end to end on a tiny model."""

import numpy as np
import pytest

from hiddentransfer.cli import main
from hiddentransfer.config import ConfigError, RunConfig

TINY = """
n_layers=3
d_model=32
n_heads=2
max_positions=256
pretrain_epochs=1
pretrain_batch=4
pretrain_seq=64
pretrain_max_steps=40
train_epochs=1
train_batch=4
train_seq=64
train_max_steps=15
k=2
transfer_layers=1,2
max_tokens=24
acc_n_seq=2
acc_n_splits=2
acc_seeds=1
cosine_n_seq=2
cosine_n_splits=2
sweep_layers=1,2
bench_cache_lengths=0,8
bench_widths=1,4
bench_trials=3
"""


# -- RunConfig ------------------------------------------------------------------


def test_unknown_key_named():
    with pytest.raises(ConfigError, match="unknown config key: warp_speed"):
        RunConfig({"warp_speed": 9})


def test_bad_value():
    with pytest.raises(ConfigError, match="bad value for n_layers"):
        RunConfig({"n_layers": "many"})


def test_file_parsing(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("# comment\nn_layers = 4  # trailing comment\n\nd_model=64\n")
    cfg = RunConfig.load(p, env={})
    assert cfg.n_layers == 4 and cfg.d_model == 64


def test_file_missing_equals(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("n_layers 4\n")
    with pytest.raises(ConfigError, match="expected key=value"):
        RunConfig.load(p, env={})


def test_env_override_and_precedence(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("n_layers=4\nseed=1\n")
    cfg = RunConfig.load(p, env={"HT_N_LAYERS": "6"}, overrides={"seed": 9})
    assert cfg.n_layers == 6   # env beats file
    assert cfg.seed == 9       # CLI beats both


def test_digest_stable_and_sensitive():
    a = RunConfig().digest()
    assert a == RunConfig().digest()
    assert a != RunConfig({"seed": 1}).digest()
    assert len(a) == 16


def test_int_list():
    cfg = RunConfig({"transfer_layers": "3,4,5"})
    assert cfg.int_list("transfer_layers") == (3, 4, 5)
    assert RunConfig().int_list("transfer_layers") == ()
    with pytest.raises(ConfigError):
        RunConfig({"transfer_layers": "3,x"}).int_list("transfer_layers")


def test_write_effective(tmp_path):
    p = RunConfig({"seed": 3}).write_effective(tmp_path, "run")
    assert p.name == "run.config.txt"
    again = RunConfig.load(p, env={})
    assert again.seed == 3 and again.digest() == RunConfig({"seed": 3}).digest()


# -- end-to-end -----------------------------------------------------------------


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Tiny corpus + config; pretrain and transfer-train once for the module."""
    root = tmp_path_factory.mktemp("cli")
    rng = np.random.default_rng(0)
    words = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta"]
    lines = [" ".join(rng.choice(words, size=12)) for _ in range(16000)]
    (root / "corpus.txt").write_text("\n".join(lines) + "\n")
    (root / "tiny.cfg").write_text(TINY + "corpus=corpus.txt\n")
    return root


def run_cli(workdir, monkeypatch, capsys, *argv):
    monkeypatch.chdir(workdir)
    code = main([*argv, "--config", "tiny.cfg", "--out", "out"])
    return code, capsys.readouterr().out


@pytest.fixture(scope="module")
def trained_run(workdir):
    import os
    cwd = os.getcwd()
    os.chdir(workdir)
    try:
        assert main(["pretrain", "--config", "tiny.cfg", "--out", "out"]) == 0
        assert main(["train", "transfer", "--config", "tiny.cfg",
                     "--out", "out"]) == 0
    finally:
        os.chdir(cwd)
    return workdir


def test_pretrain_outputs(trained_run, capsys):
    out = trained_run / "out"
    assert (out / "base.htc").exists()
    assert (out / "pretrain.config.txt").exists()


def test_pretrain_deterministic(workdir, trained_run, monkeypatch, capsys):
    """Rerunning pretraining into a second directory reproduces the artifact."""
    monkeypatch.chdir(workdir)
    assert main(["pretrain", "--config", "tiny.cfg", "--out", "out2"]) == 0
    capsys.readouterr()
    assert (workdir / "out" / "base.htc").read_bytes() == \
        (workdir / "out2" / "base.htc").read_bytes()


def test_generate_modes_agree(trained_run, workdir, monkeypatch, capsys):
    texts, hashes = {}, set()
    for mode in ("autoregressive", "transfer_tree", "transfer_two_pass"):
        code, out = run_cli(workdir, monkeypatch, capsys, "generate",
                            "--mode", mode, "--prompt", "alpha beta gamma")
        assert code == 0
        for line in out.splitlines():
            if line.startswith("config_hash="):
                hashes.add(line)
        texts[mode] = out.split("---\n", 1)[1]
    assert len(set(texts.values())) == 1, "tree modes diverged from greedy"
    assert len(hashes) == 1


def test_bench_table(trained_run, workdir, monkeypatch, capsys):
    (workdir / "prompts.txt").write_text("alpha beta\n\ngamma delta\n")
    code, out = run_cli(workdir, monkeypatch, capsys, "bench",
                        "--prompt-file", "prompts.txt",
                        "--modes", "transfer_tree")
    assert code == 0
    csv = (workdir / "out" / "bench.csv").read_text().strip().splitlines()
    assert csv[0].startswith("mode,forwards,emitted,tokens_per_forward")
    rows = {line.split(",")[0]: line.split(",") for line in csv[1:]}
    assert set(rows) == {"autoregressive", "transfer_tree"}
    assert float(rows["autoregressive"][5]) == 1.0
    assert float(rows["transfer_tree"][3]) > 1.0
    assert int(rows["transfer_tree"][1]) < int(rows["transfer_tree"][2])


def test_bench_empty_prompt_file(trained_run, workdir, monkeypatch, capsys):
    (workdir / "empty.txt").write_text("\n\n")
    code, out = run_cli(workdir, monkeypatch, capsys, "bench",
                        "--prompt-file", "empty.txt")
    assert code == 0
    assert "prompts=0" in out
    csv = (workdir / "out" / "bench.csv").read_text().strip().splitlines()
    assert len(csv) == 1  # header only


def test_missing_artifact_exit_code(workdir, monkeypatch, capsys):
    monkeypatch.chdir(workdir)
    code = main(["generate", "--config", "tiny.cfg", "--out", "nowhere",
                 "--mode", "autoregressive", "--prompt", "x"])
    assert code == 2


def test_unknown_config_key_exit_code(workdir, monkeypatch, capsys):
    bad = workdir / "bad.cfg"
    bad.write_text("bogus_key=1\n")
    monkeypatch.chdir(workdir)
    code = main(["pretrain", "--config", str(bad)])
    assert code == 1
    assert "bogus_key" in capsys.readouterr().err


def test_bad_subcommand_exit_code(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["explode"])
    assert exc.value.code == 1


def test_seed_flag_changes_config_hash(trained_run, workdir, monkeypatch, capsys):
    _, out_a = run_cli(workdir, monkeypatch, capsys, "generate",
                       "--mode", "autoregressive", "--prompt", "alpha")
    _, out_b = run_cli(workdir, monkeypatch, capsys, "generate", "--seed", "5",
                       "--mode", "autoregressive", "--prompt", "alpha")
    ha = [l for l in out_a.splitlines() if l.startswith("config_hash=")]
    hb = [l for l in out_b.splitlines() if l.startswith("config_hash=")]
    assert ha and hb and ha != hb


def test_analyze_ablation(trained_run, workdir, monkeypatch, capsys):
    code, out = run_cli(workdir, monkeypatch, capsys, "analyze", "ablation")
    assert code == 0
    assert "step1_identical=True" in out
    assert (workdir / "out" / "ablation.csv").exists()


def test_analyze_cosine(trained_run, workdir, monkeypatch, capsys):
    code, _ = run_cli(workdir, monkeypatch, capsys, "analyze", "cosine")
    assert code == 0
    csv = (workdir / "out" / "cosine.csv").read_text().strip().splitlines()
    assert csv[0] == "layer,mean_cosine,samples"
    assert len(csv) == 1 + 3  # layers 1..3 for a 3-layer model tapped at 1
