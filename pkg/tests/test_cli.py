import csv
import json

import pytest

from prefopt.cli import main, read_config_file
from prefopt.errors import ConfigError
from prefopt.model import ModelConfig, init_model, load_checkpoint, save_checkpoint


def run(*argv):
    try:
        return main([str(a) for a in argv])
    except SystemExit as exc:
        return exc.code


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    code = run("gen-data", "--out", out, "--n-per-sensor", 10, "--n-eval-per-sensor", 10,
               "--n-neutral-per-sensor", 4, "--seed", 3)
    assert code == 0
    return out


TRAIN_FAST = ("--steps", 4, "--probe-every", 2, "--batch-size", 4)


def test_gen_data_counts(tmp_path):
    assert run("gen-data", "--out", tmp_path, "--n-per-sensor", 50, "--n-eval-per-sensor", 1,
               "--n-neutral-per-sensor", 1) == 0
    assert len((tmp_path / "train.jsonl").read_text().splitlines()) == 150
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["command"] == "gen-data" and manifest["config"]["n_per_sensor"] == 50
    assert all(len(h) == 64 for h in manifest["outputs"].values())


def test_gen_data_requires_out():
    assert run("gen-data") == 2


def test_gen_data_repeatable(tmp_path, data_dir):
    run("gen-data", "--out", tmp_path, "--n-per-sensor", 10, "--n-eval-per-sensor", 10,
        "--n-neutral-per-sensor", 4, "--seed", 3)
    for name in ("train", "eval", "neutral"):
        assert (tmp_path / f"{name}.jsonl").read_bytes() == (data_dir / f"{name}.jsonl").read_bytes()


def test_train_writes_trace_and_checkpoint(tmp_path, data_dir):
    ckpt, trace = tmp_path / "m.ckpt", tmp_path / "t.csv"
    assert run("train", "--data", data_dir / "train.jsonl", "--probe", data_dir / "eval.jsonl",
               "--out-ckpt", ckpt, "--trace", trace, *TRAIN_FAST) == 0
    header = trace.read_text().splitlines()[0].split(",")
    assert {"sft_loss", "pref_loss"} <= set(header)
    assert load_checkpoint(ckpt).config.vocab_size == 64
    manifest = json.loads((tmp_path / "m.ckpt.manifest.json").read_text())
    assert manifest["config"]["method"] == "saft" and manifest["config"]["alpha"] == 2.0
    assert manifest["outputs"][str(ckpt)] is not None


@pytest.mark.parametrize("extra", [("--steps", 0), ("--method", "sft-dpo"), ("--method", "ppo"),
                                   ("--batch-size", 0)])
def test_train_usage_errors(tmp_path, data_dir, extra):
    code = run("train", "--data", data_dir / "train.jsonl", "--out-ckpt", tmp_path / "m.ckpt", *extra)
    assert code == 2
    assert not (tmp_path / "m.ckpt").exists()


def test_train_missing_data_is_io_error(tmp_path):
    assert run("train", "--data", tmp_path / "nope.jsonl", "--out-ckpt", tmp_path / "m.ckpt") == 4


def test_dpo_with_reference_checkpoint(tmp_path, data_dir):
    ref = tmp_path / "ref.ckpt"
    train = data_dir / "train.jsonl"
    assert run("train", "--data", train, "--method", "sft", "--out-ckpt", ref, *TRAIN_FAST) == 0
    assert run("train", "--data", train, "--method", "sft-dpo", "--ref-ckpt", ref,
               "--out-ckpt", tmp_path / "dpo.ckpt", "--trace", tmp_path / "t.csv", *TRAIN_FAST) == 0
    first = tmp_path.joinpath("t.csv").read_text().splitlines()[1].split(",")
    # policy starts at the reference, where the pairwise term is ln 2
    assert float(first[3]) == pytest.approx(0.6931471805599453, abs=1e-12)
    assert run("train", "--data", train, "--method", "sft-ipo", "--auto-ref",
               "--out-ckpt", tmp_path / "ipo.ckpt", *TRAIN_FAST) == 0


def test_config_precedence(tmp_path, data_dir, monkeypatch):
    conf = tmp_path / "run.conf"
    conf.write_text("# fast run\nsteps = 3\nprobe-every = 1\nlr=0.001\n")
    args = ("train", "--data", data_dir / "train.jsonl", "--config", conf, "--batch-size", 4)
    assert run(*args, "--out-ckpt", tmp_path / "a.ckpt", "--lr", 0.002) == 0
    cfg = json.loads((tmp_path / "a.ckpt.manifest.json").read_text())["config"]
    assert (cfg["steps"], cfg["probe_every"], cfg["lr"], cfg["seed"]) == (3, 1, 0.002, 0)
    monkeypatch.setenv("PREFOPT_SEED", "7")
    assert run(*args, "--out-ckpt", tmp_path / "b.ckpt", "--seed", 1) == 0
    assert json.loads((tmp_path / "b.ckpt.manifest.json").read_text())["config"]["seed"] == 7


def test_config_file_rejects_unknown_keys(tmp_path):
    conf = tmp_path / "bad.conf"
    conf.write_text("stepz = 3\n")
    with pytest.raises(ConfigError, match="stepz"):
        read_config_file(conf)


def test_eval_report_and_determinism(tmp_path, data_dir, capsys):
    ckpt = tmp_path / "m.ckpt"
    run("train", "--data", data_dir / "train.jsonl", "--out-ckpt", ckpt, *TRAIN_FAST)
    for name in ("r1.csv", "r2.csv"):
        assert run("eval", "--ckpt", ckpt, "--data", data_dir / "eval.jsonl", "--report", tmp_path / name) == 0
    assert (tmp_path / "r1.csv").read_bytes() == (tmp_path / "r2.csv").read_bytes()
    assert "overall accuracy" in capsys.readouterr().out
    rows = list(csv.reader((tmp_path / "r1.csv").open()))
    assert rows[-1][0] == "overall" and int(rows[-1][2]) == 30


def test_eval_vocab_mismatch(tmp_path, data_dir):
    small = tmp_path / "v16.ckpt"
    save_checkpoint(init_model(ModelConfig(vocab_size=16, d_model=8, n_heads=2)), small)
    assert run("eval", "--ckpt", small, "--data", data_dir / "eval.jsonl", "--report", tmp_path / "r.csv") == 2


def test_eval_missing_checkpoint(tmp_path, data_dir):
    assert run("eval", "--ckpt", tmp_path / "none.ckpt", "--data", data_dir / "eval.jsonl",
               "--report", tmp_path / "r.csv") == 4


def test_plot_command(tmp_path, data_dir):
    trace = tmp_path / "t.csv"
    run("train", "--data", data_dir / "train.jsonl", "--out-ckpt", tmp_path / "m.ckpt", "--trace", trace, *TRAIN_FAST)
    assert run("plot", "--trace", trace, "--out-svg", tmp_path / "p.svg") == 0
    assert (tmp_path / "p.svg").read_text().startswith("<svg")
    trace.write_text("step,total_loss\n")
    assert run("plot", "--trace", trace, "--out-svg", tmp_path / "q.svg") == 2


def test_ablate_single_cell(tmp_path):
    assert run("ablate", "--param", "n", "--values", 5, "--seeds", 0, "--steps", 2,
               "--out-dir", tmp_path) == 0
    rows = (tmp_path / "summary.csv").read_text().splitlines()
    assert rows[0].startswith("param,value,n_seeds")
    assert len(rows) == 2 and rows[1].startswith("n,5,1,1,") and rows[1].endswith(",ok")
    assert (tmp_path / "n5_seed0" / "report.csv").is_file()


def test_compare_rejects_unknown_method_before_running(tmp_path):
    assert run("compare", "--methods", "saft,ppo", "--out-dir", tmp_path) == 2
    assert not any(tmp_path.iterdir())


def test_compare_orders_methods(tmp_path):
    assert run("compare", "--methods", "sft-simpo,sft", "--seeds", 0, "--steps", 2, "--n-per-sensor", 4,
               "--out-dir", tmp_path) == 0
    rows = (tmp_path / "summary.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in rows[1:]] == ["sft", "sft-simpo"]


def test_gradcheck_command(capsys):
    assert run("gradcheck", "--sample", 64) == 0
    assert capsys.readouterr().out.splitlines()[-1] == "all checks passed"
