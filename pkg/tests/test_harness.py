import json

import numpy as np
import pytest

from fedapt import checkpoint
from fedapt.cli import main
from fedapt.harness import config as cfgmod
from fedapt.harness.ablate import PRESETS, preset_arms, run_preset
from fedapt.harness.config import ConfigFieldError, ExperimentConfig
from fedapt.harness.runs import (cmd_eval, cmd_pretrain, cmd_train, evaluate_run, load_run, read_jsonl,
                                 run_dir)
from fedapt.promptgen import generator_param_count
from fedapt.tensor import ConfigError

TINY_YAML = """\
C: 8
classes_per_client: 4
rounds: 2
train_per_class: 8
eval_steps: 3
cw_steps: 3
val_steps: 2
test_per_class: 3
eval_shifts: [contrast:0.5]
"""


@pytest.fixture(scope="module")
def tiny():
    return cfgmod.loads(TINY_YAML)


@pytest.fixture(scope="module")
def trained(tiny, tmp_path_factory):
    out = tmp_path_factory.mktemp("harness")
    cmd_pretrain(tiny, out)
    return out, cmd_train(tiny, out, 0)


def test_config_round_trip(tiny, tmp_path):
    path = tiny.save(tmp_path / "c.yaml")
    back = cfgmod.load(path)
    assert back == tiny and back.digest() == tiny.digest()
    assert cfgmod.loads(tiny.dump()) == tiny


def test_unknown_key_rejected():
    with pytest.raises(ConfigFieldError, match="config.shots_per_clas"):
        cfgmod.loads("shots_per_clas: 8\n")


@pytest.mark.parametrize("text, field", [
    ("rounds: 0\n", "config.rounds"),
    ("train_eps: -1\n", "config.train_eps"),
    ("fusion: sum\n", "config.fusion"),
    ("baseline: linear_probe\n", "config.baseline"),
    ("classes_per_client: 7\n", "config.classes_per_client"),
    ("eval_shifts: [twist:0.5]\n", "config.eval_shifts[0]"),
    ("shots: many\n", "config.shots"),
])
def test_invalid_field_named(text, field):
    with pytest.raises(ConfigFieldError) as info:
        cfgmod.loads(text)
    assert info.value.path == field


def test_non_mapping_rejected():
    with pytest.raises(ConfigError):
        cfgmod.loads("- 1\n- 2\n")


def test_beacon_flag_changes_digest(tiny):
    assert tiny.replace(use_beacon=False).digest() != tiny.digest()
    assert tiny.replace(seed=3).digest() == tiny.digest()


def test_text_only_baseline_has_no_generator(tiny):
    from fedapt.promptgen import init_trainables
    cfg = tiny.replace(baseline="text_prompt_only")
    state = init_trainables(cfg.encoder_config(), cfg.prompt_config(), 0)
    assert generator_param_count(state) == 0 and set(state) == {"prompt"}


def test_train_writes_run_directory(trained, tiny):
    out, rdir = trained
    for name in ("config.yaml", "run.json", "final.npz", "rounds.jsonl"):
        assert (rdir / name).exists()
    rows = read_jsonl(rdir / "rounds.jsonl")
    assert [r["round"] for r in rows] == list(range(tiny.rounds))
    cfg, state, beacon, meta = load_run(rdir)
    assert meta["config_digest"] == tiny.digest() and meta["seed"] == 0
    assert beacon is not None and "prompt" in state


def test_checkpoint_dir_created(tmp_path):
    path = tmp_path / "deep" / "nested" / "ck.npz"
    checkpoint.save(path, {"a": np.ones(3, dtype=np.float32)}, {"k": 1})
    tensors, meta = checkpoint.load(path)
    assert np.array_equal(tensors["a"], np.ones(3)) and meta["k"] == 1


def test_rerun_reproduces_checkpoint(trained, tiny, tmp_path):
    out, rdir = trained
    other = tmp_path / "again"
    (other / "backbones").mkdir(parents=True)
    for f in (out / "backbones").iterdir():
        (other / "backbones" / f.name).write_bytes(f.read_bytes())
    rdir2 = cmd_train(tiny, other, 0)
    a, _ = checkpoint.load(rdir / "final.npz")
    b, _ = checkpoint.load(rdir2 / "final.npz")
    assert set(a) == set(b) and all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_eval_rows(trained, tiny):
    out, rdir = trained
    rows = evaluate_run(rdir, out, "pgd")
    assert [r["variant"] for r in rows] == ["base", "contrast:0.5"]
    for r in rows:
        assert r["config_digest"] == tiny.digest() and r["seed"] == 0 and r["budget_ok"]
        assert r["robust_acc"] <= r["clean_acc"] + 1e-12
    cw = evaluate_run(rdir, out, "cw", variants=["base"])
    assert cw[0]["attack"] == "cw"


def test_zero_budget_robust_equals_clean(trained):
    out, rdir = trained
    for attack in ("pgd", "cw"):
        r = evaluate_run(rdir, out, attack, eps=0.0, variants=["base"])[0]
        assert r["robust_acc"] == r["clean_acc"]


def test_metrics_append_only(trained):
    out, rdir = trained
    path = cmd_eval(rdir, out, ["pgd"])
    before = path.read_text()
    cmd_eval(rdir, out, ["pgd"])
    after = path.read_text()
    assert after.startswith(before) and len(after) > len(before)


def test_eval_without_training_errors(tiny, tmp_path):
    with pytest.raises(FileNotFoundError):
        evaluate_run(run_dir(tiny, tmp_path, 0), tmp_path)


def test_preset_arms_differ_only_in_studied_flag(tiny):
    base = tiny.to_dict()
    for name in PRESETS:
        for arm, cfg in preset_arms(name, tiny):
            diff = {k for k, v in cfg.to_dict().items() if base[k] != v}
            assert diff <= set(arm.changes) | {"train_per_class"}


def test_presets_need_three_seeds(tiny, tmp_path):
    with pytest.raises(ConfigError, match="at least 3 seeds"):
        run_preset("beacon", tiny, tmp_path, seeds=[0, 1])


def test_unknown_preset(tiny):
    with pytest.raises(ConfigError, match="unknown preset"):
        preset_arms("dropout", tiny)


def test_cli_end_to_end(tmp_path, capsys):
    cfg_path = tmp_path / "tiny.yaml"
    cfg_path.write_text(TINY_YAML)
    out = tmp_path / "out"
    common = ["--config", str(cfg_path), "--out", str(out)]
    assert main(["train", *common]) == 0
    rdir = run_dir(cfgmod.load(cfg_path), out, 0)
    assert (rdir / "rounds.png").exists()
    assert main(["eval", *common, "--attack", "pgd", "--attack", "cw"]) == 0
    rows = read_jsonl(rdir / "metrics.jsonl")
    assert {r["attack"] for r in rows} == {"pgd", "cw"}
    assert main(["ablate", *common, "--preset", "sharing", "--seeds", "0,1,2", "--steps", "2"]) == 0
    summary = json.loads((out / "ablate" / "sharing" / "summary.json").read_text())
    cfg = cfgmod.load(cfg_path)
    assert summary["independent_over_shared_params"] == cfg.J
    assert (out / "ablate" / "sharing" / "sharing.png").exists()


def test_cli_reports_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("rounds: zero\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "config.rounds" in capsys.readouterr().err
