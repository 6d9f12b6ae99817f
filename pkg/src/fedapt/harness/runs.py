"""Pretrain, train and evaluate commands over a config and an output directory.

Layout under ``out``::

    backbones/<pretrain digest>.npz      frozen weights, cached
    runs/<config digest>-s<seed>/
        config.yaml  run.json  final.npz  rounds.jsonl  metrics.jsonl

Every command is deterministic in (config, seed); a completed run directory
is reused instead of retrained.  ``metrics.jsonl`` is append-only.
"""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .. import checkpoint
from ..adversary import evaluate_robustness
from ..dataset import Dataset, generate_dataset, pretrain_backbone, sample_shots, zero_shot_accuracy
from ..encoders import DualEncoder, FrozenWeights
from ..federation import make_clients, partition, run_training
from ..promptgen import PromptedModel, generator_param_count, generator_tensor_count, init_trainables
from . import config as cfgmod
from .config import ExperimentConfig, parse_shift

log = logging.getLogger(__name__)

_SRC = Path(__file__).resolve().parent.parent


def code_version() -> str:
    """Package version plus a short hash of the package sources."""
    from .. import __version__
    h = hashlib.sha256()
    for path in sorted(_SRC.rglob("*.py")):
        h.update(path.relative_to(_SRC).as_posix().encode())
        h.update(path.read_bytes())
    return f"{__version__}+{h.hexdigest()[:10]}"


def append_jsonl(path: Path, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_jsonl(path: Path) -> list[dict]:
    if not Path(path).exists():
        return []
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# pretrain


def backbone_path(cfg: ExperimentConfig, out) -> Path:
    return Path(out) / "backbones" / f"{cfg.pretrain_digest()}.npz"


def cmd_pretrain(cfg: ExperimentConfig, out) -> Path:
    """Pretrain (or reuse) the frozen backbone for ``cfg``; returns its path."""
    path = backbone_path(cfg, out)
    if path.exists():
        FrozenWeights.load(path)  # verifies the digest
        log.info("reusing backbone %s", path)
        return path
    weights, report = pretrain_backbone(cfg.synthetic_spec(), cfg.encoder_config(), cfg.pretrain_epochs,
                                        cfg.pretrain_seed, per_class=cfg.pretrain_per_class,
                                        lr=cfg.pretrain_lr)
    log.info("pretrained backbone: zero-shot %.3f (chance %.3f)", report["zero_shot_acc"], report["chance"])
    weights.save(path, {"pretrain": cfg.pretrain_dict(), "report": report})
    return path


def load_backbone(cfg: ExperimentConfig, out) -> DualEncoder:
    path = backbone_path(cfg, out)
    if not path.exists():
        raise FileNotFoundError(f"no pretrained backbone at {path}; run `pretrain` first")
    weights, _ = FrozenWeights.load(path)
    return DualEncoder(weights)


# ---------------------------------------------------------------------------
# train


class Experiment(NamedTuple):
    encoder: DualEncoder
    train: Dataset  # few-shot training subset, global labels
    val: Dataset
    token_ids: np.ndarray  # (C, L), row = global class id


def build_experiment(cfg: ExperimentConfig, out, seed: int) -> Experiment:
    encoder = load_backbone(cfg, out)
    spec = cfg.synthetic_spec()
    train = sample_shots(generate_dataset(spec, "train", cfg.train_per_class), cfg.shots, seed)
    val = generate_dataset(spec, "val", cfg.val_per_class)
    return Experiment(encoder, train, val, encoder.class_tokens(range(cfg.C), cfg.data_seed))


def run_dir(cfg: ExperimentConfig, out, seed: int) -> Path:
    return Path(out) / "runs" / f"{cfg.digest()}-s{seed}"


def cmd_train(cfg: ExperimentConfig, out, seed: int | None = None) -> Path:
    """Federated training of one (config, seed); returns the run directory."""
    seed = cfg.seed if seed is None else seed
    rdir = run_dir(cfg, out, seed)
    final = rdir / "final.npz"
    if final.exists():
        checkpoint.load(final)
        log.info("reusing run %s", rdir)
        return rdir
    exp = build_experiment(cfg, out, seed)
    pcfg = cfg.prompt_config()
    part = partition(cfg.C, cfg.n_clients, cfg.classes_per_client, seed)
    clients = make_clients(exp.encoder, part, exp.train.images, exp.train.labels, cfg.data_seed)
    init = init_trainables(exp.encoder.cfg, pcfg, seed, dtype=exp.encoder.dtype)
    rdir.mkdir(parents=True, exist_ok=True)
    cfg.replace(seed=seed).save(rdir / "config.yaml")
    rounds_path = rdir / "rounds.jsonl"
    if rounds_path.exists():
        rounds_path.unlink()  # leftovers of an interrupted run
    result = run_training(exp.encoder, pcfg, cfg.fed_config(), clients, init, exp.token_ids, seed,
                          val=(exp.val.images, exp.val.labels),
                          on_round=lambda row: append_jsonl(rounds_path, [row]))
    tensors = dict(result.state)
    if result.beacon is not None:
        tensors["beacon"] = result.beacon
    meta = {"config_digest": cfg.digest(), "seed": seed, "code_version": code_version(),
            "backbone_digest": exp.encoder.weights.digest(),
            "generator_tensors": generator_tensor_count(result.state),
            "generator_params": generator_param_count(result.state)}
    (rdir / "run.json").write_text(json.dumps({**meta, "partition": [list(a) for a in part.assignment]},
                                              indent=1, sort_keys=True))
    checkpoint.save(final, tensors, meta)
    return rdir


def load_run(rdir) -> tuple[ExperimentConfig, dict[str, np.ndarray], np.ndarray | None, dict]:
    rdir = Path(rdir)
    final = rdir / "final.npz"
    if not final.exists():
        raise FileNotFoundError(f"no final checkpoint in {rdir}; run `train` first")
    cfg = cfgmod.load(rdir / "config.yaml")
    tensors, meta = checkpoint.load(final)
    beacon = tensors.pop("beacon", None)
    return cfg, tensors, beacon, meta


# ---------------------------------------------------------------------------
# eval


def _eval_rng(seed: int, variant: str, attack: str, eps: float, steps: int) -> np.random.Generator:
    key = hashlib.sha256(f"{variant}|{attack}|{eps!r}|{steps}".encode()).digest()
    return np.random.default_rng([seed, 37, int.from_bytes(key[:8], "little")])


def evaluate_run(rdir, out, attack: str = "pgd", eps: float | None = None, steps: int | None = None,
                 variants: list[str] | None = None, reuse: bool = True) -> list[dict]:
    """Clean and attacked accuracy on the base test set and shifted variants.

    ``eps`` is in units of 1/255.  Rows already present in ``metrics.jsonl``
    for the same settings and code version are returned instead of recomputed
    when ``reuse`` is set; new rows are appended.
    """
    rdir = Path(rdir)
    cfg, state, beacon, meta = load_run(rdir)
    seed = meta["seed"]
    eps = cfg.eval_eps if eps is None else float(eps)
    acfg = cfg.eval_attack(attack, eps, steps)
    variants = ["base", *cfg.eval_shifts] if variants is None else variants
    version = code_version()
    metrics_path = rdir / "metrics.jsonl"
    existing = read_jsonl(metrics_path) if reuse else []
    rows, fresh = [], []
    encoder = None
    for variant in variants:
        key = {"variant": variant, "attack": attack, "eps": eps, "steps": acfg.steps}
        hit = [r for r in existing if r["code_version"] == version
               and all(r[k] == v for k, v in key.items())]
        if hit:
            rows.append(hit[-1])
            continue
        if encoder is None:
            encoder = load_backbone(cfg, out)
            if encoder.weights.digest() != meta["backbone_digest"]:
                raise checkpoint.CheckpointError(f"{rdir}: backbone differs from the one it was trained on")
            token_ids = encoder.class_tokens(range(cfg.C), cfg.data_seed)
            scorer = PromptedModel(encoder, state, beacon, cfg.prompt_config()).prepare(token_ids)
        shift = None if variant == "base" else parse_shift(variant)
        test = generate_dataset(cfg.synthetic_spec(shift), "test", cfg.test_per_class)
        m = evaluate_robustness(scorer, test.images, test.labels, acfg,
                                _eval_rng(seed, variant, attack, eps, acfg.steps))
        row = {**key, "clean_acc": m["clean_acc"], "robust_acc": m["robust_acc"], "n": m["n"],
               "budget_ok": m["budget_ok"], "config_digest": meta["config_digest"], "seed": seed,
               "code_version": version, "baseline": cfg.baseline}
        rows.append(row)
        fresh.append(row)
    append_jsonl(metrics_path, fresh)
    return rows


def cmd_eval(rdir, out, attacks: list[str] | None = None, eps: float | None = None,
             steps: int | None = None) -> Path:
    """Evaluate a run under each requested attack; returns the metrics file."""
    cfg, *_ = load_run(rdir)
    for attack in attacks or cfg.eval_attacks:
        evaluate_run(rdir, out, attack, eps, steps, reuse=False)
    return Path(rdir) / "metrics.jsonl"


def backbone_zero_shot(cfg: ExperimentConfig, out) -> float:
    encoder = load_backbone(cfg, out)
    test = generate_dataset(cfg.synthetic_spec(), "test", cfg.test_per_class)
    return zero_shot_accuracy(encoder, test, cfg.data_seed, cfg.C)
