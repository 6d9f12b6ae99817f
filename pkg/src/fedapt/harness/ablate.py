"""Ablation presets: arms that differ from a base config in one studied flag.

Each arm is trained and evaluated for every seed (runs are cached by config
digest), then summarized by per-arm median and spread with seed-paired
differences against the first arm.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import NamedTuple

import numpy as np

from ..promptgen import generator_param_count, generator_tensor_count, init_trainables
from ..tensor import ConfigError
from .config import ExperimentConfig
from .runs import append_jsonl, cmd_pretrain, cmd_train, code_version, evaluate_run

log = logging.getLogger(__name__)


class Arm(NamedTuple):
    label: str
    changes: dict


def _preset_arms(name: str, base: ExperimentConfig) -> tuple[list[Arm], tuple[str, ...]]:
    if name == "baseline":
        return [Arm("fedapt", {"baseline": "fedapt"}),
                Arm("text_prompt_only", {"baseline": "text_prompt_only"})], ("baseline",)
    if name == "beacon":
        return [Arm("with_beacon", {"use_beacon": True}),
                Arm("without_beacon", {"use_beacon": False})], ("use_beacon",)
    if name == "sharing":
        return [Arm("shared", {"independent_generators": False}),
                Arm("independent", {"independent_generators": True})], ("independent_generators",)
    if name == "heterogeneity":
        arms = [Arm(f"{n}_per_client", {"classes_per_client": n})
                for n in (5, 10, 20, 40) if base.C % n == 0 and n <= base.C]
        return arms, ("classes_per_client",)
    if name == "epsilon":
        return [Arm(f"eps_{e}/255", {"train_eps": float(e), "eval_eps": float(e)})
                for e in (1, 2, 3)], ("train_eps", "eval_eps")
    if name == "shots":
        arms = [Arm(f"{b}_K{k}", {"baseline": b, "shots": k})
                for b in ("fedapt", "text_prompt_only") for k in (1, 2, 4, 8, 16)]
        return arms, ("baseline", "shots")
    raise ConfigError(f"unknown preset {name!r}; expected one of {PRESETS}")


PRESETS = ("baseline", "beacon", "sharing", "heterogeneity", "epsilon", "shots")


def preset_arms(name: str, base: ExperimentConfig) -> list[tuple[Arm, ExperimentConfig]]:
    """Arms of a preset with their full configs; checks arms differ only in the studied flags."""
    arms, studied = _preset_arms(name, base)
    out = []
    ref = base.to_dict()
    for arm in arms:
        changes = dict(arm.changes)
        if name == "shots":
            changes["train_per_class"] = max(base.train_per_class, max(a.changes["shots"] for a in arms))
            studied_here = studied + ("train_per_class",)
        else:
            studied_here = studied
        cfg = base.replace(**changes)
        diff = {k for k, v in cfg.to_dict().items() if ref[k] != v}
        if not diff <= set(studied_here):
            raise ConfigError(f"preset {name}: arm {arm.label} also changes {sorted(diff - set(studied_here))}")
        out.append((arm, cfg))
    return out


def _spread(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    return {"median": float(np.median(v)), "min": float(v.min()), "max": float(v.max()),
            "q25": float(np.percentile(v, 25)), "q75": float(np.percentile(v, 75))}


def run_preset(name: str, base: ExperimentConfig, out, seeds=None, attack: str = "pgd",
               eps: float | None = None, steps: int | None = None) -> dict:
    """Train and evaluate every (arm, seed); returns the summary dict.

    ``eps`` overrides the evaluation budget (1/255 units) for presets that do
    not sweep it.
    """
    seeds = list(base.seeds if seeds is None else seeds)
    if len(seeds) < 3:
        raise ConfigError(f"ablations need at least 3 seeds, got {len(seeds)}")
    arms = preset_arms(name, base)
    out = Path(out)
    cmd_pretrain(base, out)
    version = code_version()
    rows = []
    summary_arms = []
    for arm, cfg in arms:
        robust, clean = [], []
        for seed in seeds:
            rdir = cmd_train(cfg, out, seed)
            arm_eps = None if name == "epsilon" else eps
            r = evaluate_run(rdir, out, attack, arm_eps, steps, variants=["base"])[0]
            robust.append(r["robust_acc"])
            clean.append(r["clean_acc"])
            rows.append({"preset": name, "arm": arm.label, "seed": seed, "config_digest": cfg.digest(),
                         "code_version": version, "attack": attack, "eps": r["eps"], "steps": r["steps"],
                         "clean_acc": r["clean_acc"], "robust_acc": r["robust_acc"]})
            log.info("%s %s seed %d: clean %.3f robust %.3f", name, arm.label, seed,
                     r["clean_acc"], r["robust_acc"])
        entry = {"label": arm.label, "changes": arm.changes, "config_digest": cfg.digest(),
                 "robust": robust, "clean": clean, "robust_stats": _spread(robust),
                 "clean_stats": _spread(clean)}
        if name == "sharing":
            state = init_trainables(cfg.encoder_config(), cfg.prompt_config(), 0)
            entry["generator_tensors"] = generator_tensor_count(state)
            entry["generator_params"] = generator_param_count(state)
        summary_arms.append(entry)
    ref = np.asarray(summary_arms[0]["robust"])
    for entry in summary_arms[1:]:
        d = np.asarray(entry["robust"]) - ref
        entry["paired_delta_vs_first"] = {**_spread(d), "wins": int((d < 0).sum()),
                                          "ties": int((d == 0).sum()), "losses": int((d > 0).sum())}
    summary = {"preset": name, "seeds": seeds, "attack": attack, "code_version": version,
               "base_digest": base.digest(), "arms": summary_arms}
    if name == "sharing":
        a, b = summary_arms
        summary["independent_over_shared_params"] = b["generator_params"] / a["generator_params"]
    pdir = out / "ablate" / name
    append_jsonl(pdir / "rows.jsonl", rows)
    (pdir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    (pdir / "summary.txt").write_text(render_table(summary))
    return summary


def render_table(summary: dict) -> str:
    head = f"preset {summary['preset']}  seeds {summary['seeds']}  attack {summary['attack']}"
    cols = f"{'arm':<24}{'robust med':>11}{'[min, max]':>16}{'clean med':>11}{'paired d':>10}{'W/T/L':>9}"
    lines = [head, cols, "-" * len(cols)]
    for a in summary["arms"]:
        r, c = a["robust_stats"], a["clean_stats"]
        d = a.get("paired_delta_vs_first")
        dtxt = f"{d['median']:+.3f}" if d else "ref"
        wtl = f"{d['wins']}/{d['ties']}/{d['losses']}" if d else ""
        span = f"[{r['min']:.3f}, {r['max']:.3f}]"
        lines.append(f"{a['label']:<24}{r['median']:>11.3f}{span:>16}{c['median']:>11.3f}{dtxt:>10}{wtl:>9}")
        if "generator_params" in a:
            lines.append(f"{'':<24}generator tensors {a['generator_tensors']}, params {a['generator_params']}")
    if "independent_over_shared_params" in summary:
        lines.append(f"independent / shared generator parameters = {summary['independent_over_shared_params']:g}")
    lines.append("W/T/L: seeds where the first arm is above / equal / below this arm")
    return "\n".join(lines) + "\n"
