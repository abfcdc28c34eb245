import csv
import json
import time

import numpy as np
import pytest

from tagsdc.cli import main, run_eval, summary_text
from tagsdc.config import ConfigError, RunConfig, load_config, parse_config_text
from tagsdc.datagen import TOY_GRAMMAR, generate_dataset, load_checkpoint, read_jsonl
from tagsdc.training import build_model

SMALL = ["--d", "16", "--n_layers", "1", "--n_heads", "2", "--d_ff", "32"]


# ------------------------------------------------------------------ config

def test_defaults_round_trip(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text(RunConfig().to_text())
    assert load_config(p) == RunConfig()


def test_parse_types_and_comments():
    v = parse_config_text("# header\nsteps = 7  # inline\nlr=0.5\ntie-init = no\nmode = static\n")
    assert v == {"steps": 7, "lr": 0.5, "tie_init": False, "mode": "static"}


def test_overrides_win(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("steps = 7\ntau = 2.0\n")
    cfg = load_config(p, {"steps": "9"})
    assert cfg.steps == 9 and cfg.tau == 2.0


@pytest.mark.parametrize("text, fragment", [
    ("bogus = 1\n", "bogus"),
    ("steps = many\n", "steps"),
    ("steps 7\n", ":1"),
    ("mode = sideways\n", "mode"),
    ("d = 10\nn_heads = 4\n", "divisible"),
    ("mask_ratio = 0\n", "mask_ratio"),
    ("lambda_wod = -1\n", "lambda_wod"),
])
def test_invalid_configs(tmp_path, text, fragment):
    p = tmp_path / "bad.cfg"
    p.write_text(text)
    with pytest.raises(ConfigError, match=fragment):
        load_config(p)


def test_estimator_params_cover_estimator():
    from tagsdc.estimator import TagsDCMatcher

    params = RunConfig(seed=5).estimator_params()
    assert set(params) == set(TagsDCMatcher().get_params())
    assert params["random_state"] == 5


# ------------------------------------------------------------------ datagen

def test_datagen_lines_and_bytes(tmp_path, capsys):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert main(["datagen", "--n", "64", "--seed", "1", "--out", str(a)]) == 0
    assert main(["datagen", "--n", "64", "--seed", "1", "--out", str(b)]) == 0
    assert len(a.read_text().splitlines()) == 64
    assert a.read_bytes() == b.read_bytes()
    assert read_jsonl(a) == generate_dataset(64, seed=1)


def test_datagen_unwritable(tmp_path, capsys):
    code = main(["datagen", "--n", "2", "--out", str(tmp_path / "missing" / "x.jsonl")])
    assert code == 2
    assert "error" in capsys.readouterr().err


def test_usage_errors(capsys):
    assert main([]) == 1
    assert main(["datagen", "--n", "2"]) == 1
    assert main(["eval", "--checkpoint", "x", "--data", "y", "--bogus", "1"]) == 1


# ------------------------------------------------------------------ train

def _train(tmp_path, name, *extra):
    ck, mt = tmp_path / f"{name}.ckpt", tmp_path / f"{name}.csv"
    code = main(["train", "--n_images", "8", "--batch_size", "4", *SMALL,
                 "--checkpoint", str(ck), "--metrics", str(mt), *extra])
    return code, ck, mt


def test_train_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("steps = 1\nlearning_rate = 3\n")
    assert main(["train", "--config", str(cfg)]) == 1
    assert "learning_rate" in capsys.readouterr().err
    assert main(["train", "--warp_factor", "9"]) == 1
    assert "warp_factor" in capsys.readouterr().err


def test_train_zero_steps_is_init(tmp_path, capsys):
    code, ck, mt = _train(tmp_path, "z", "--steps", "0", "--seed", "3")
    assert code == 0
    ref = build_model(TOY_GRAMMAR.vocabulary(), TOY_GRAMMAR, seed=3, d=16, n_layers=1,
                      n_heads=2, d_ff=32)
    got = load_checkpoint(ck)
    for k, v in ref.state().items():
        assert np.array_equal(got.state()[k], v)
    assert mt.read_text().count("\n") == 1


def test_train_static_vs_dynamic(tmp_path, capsys):
    outs = {}
    for mode in ("dynamic", "static"):
        code, _, mt = _train(tmp_path, mode, "--steps", "6", "--mode", mode, "--warmup_steps", "6")
        assert code == 0
        outs[mode] = mt.read_bytes()
    assert outs["dynamic"] != outs["static"]
    assert "l_irtm=" in capsys.readouterr().out


def test_train_reproducible_with_config_file(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("steps = 5\nseed = 2\nn_images = 8\nbatch_size = 4\nd = 16\nn_heads = 2\n"
                   "n_layers = 1\nd_ff = 32\n")
    paths = []
    for k in range(2):
        paths.append(tmp_path / f"m{k}.csv")
        assert main(["train", "--config", str(cfg), "--metrics", str(paths[-1]),
                     "--checkpoint", str(tmp_path / f"c{k}.ckpt")]) == 0
    assert paths[0].read_bytes() == paths[1].read_bytes()
    assert (tmp_path / "c0.ckpt").read_bytes() == (tmp_path / "c1.ckpt").read_bytes()


def test_train_from_data_file(tmp_path, capsys):
    data = tmp_path / "d.jsonl"
    assert main(["datagen", "--n", "6", "--out", str(data)]) == 0
    code, ck, _ = _train(tmp_path, "f", "--steps", "2", "--data", str(data))
    assert code == 0 and ck.exists()
    code, _, _ = _train(tmp_path, "g", "--steps", "2", "--data", str(tmp_path / "none.jsonl"))
    assert code == 2


def test_train_timing_200_steps(tmp_path, capsys):
    start = time.perf_counter()
    code = main(["train", "--n_images", "32", "--steps", "200", "--batch_size", "8",
                 "--checkpoint", str(tmp_path / "t.ckpt"), "--metrics", str(tmp_path / "t.csv")])
    assert code == 0
    assert time.perf_counter() - start < 60


# ------------------------------------------------------------------ downstream commands

@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    data = d / "data.jsonl"
    assert main(["datagen", "--n", "6", "--seed", "5", "--out", str(data)]) == 0
    ck = d / "m.ckpt"
    assert main(["train", "--n_images", "8", "--batch_size", "4", *SMALL, "--steps", "3",
                 "--checkpoint", str(ck), "--metrics", str(d / "m.csv")]) == 0
    return d, data, ck


def test_generate_negatives(trained, tmp_path):
    d, data, ck = trained
    one = tmp_path / "one.jsonl"
    one.write_text(data.read_text().splitlines()[0] + "\n")
    out = tmp_path / "neg.jsonl"
    assert main(["generate-negatives", "--checkpoint", str(ck), "--data", str(one),
                 "--out", str(out), "--K", "2", "--L", "3"]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) <= 6
    for line in lines:
        rec = json.loads(line)
        assert rec["synthetic"] != rec["source"] and 0 <= rec["itm"] <= 1
        assert len(rec["gold_wod"]) == len(rec["synthetic"].split())
        assert rec["replaced_positions"]


def test_eval_outputs(trained, tmp_path, capsys):
    d, data, ck = trained
    out = tmp_path / "eval.csv"
    assert main(["eval", "--checkpoint", str(ck), "--data", str(data), "--out", str(out)]) == 0
    assert "RSum=" in capsys.readouterr().out
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["direction", "k", "recall"] and len(rows) == 8
    assert rows[-1][0] == "rsum"


def test_eval_oracle_scorer():
    data = generate_dataset(5, seed=0)

    def oracle(images, captions):
        return np.array([float(any(c is x for x in im.captions)) for im, c in zip(images, captions)])

    rep = run_eval(oracle, data)
    assert rep.rsum == 600.0
    assert "RSum=600.0" in summary_text(rep)


def test_compare_strategies(trained, tmp_path, capsys):
    d, data, ck = trained
    out = tmp_path / "cmp"
    assert main(["compare-strategies", "--checkpoint", str(ck), "--data", str(data),
                 "--out-dir", str(out), "--batch-size", "3"]) == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["gaps_dataset.csv", "gaps_generated.csv", "gaps_inbatch.csv"]
    rows = list(csv.reader((out / "gaps_inbatch.csv").open()))
    assert rows[0] == ["bin_left", "count"] and len(rows) == 41
    assert sum(int(r[1]) for r in rows[1:]) == 6


@pytest.mark.parametrize("cmd", [
    ["eval", "--out", "x.csv"],
    ["generate-negatives", "--out", "x.jsonl"],
    ["compare-strategies", "--out-dir", "cmpdir"],
])
def test_missing_files(tmp_path, cmd, trained):
    _, data, ck = trained
    assert main([cmd[0], "--checkpoint", str(tmp_path / "no.ckpt"), "--data", str(data),
                 *[str(tmp_path / a) if i % 2 else a for i, a in enumerate(cmd[1:])]]) == 2
    assert main([cmd[0], "--checkpoint", str(ck), "--data", str(tmp_path / "no.jsonl"),
                 *[str(tmp_path / a) if i % 2 else a for i, a in enumerate(cmd[1:])]]) == 2


def test_wrong_grammar_checkpoint(tmp_path, trained):
    _, _, ck = trained
    full = tmp_path / "full.jsonl"
    assert main(["datagen", "--n", "2", "--grammar", "full", "--out", str(full)]) == 0
    assert main(["eval", "--checkpoint", str(ck), "--data", str(full)]) == 2
