"""l-infinity attacks (PGD on cross-entropy, CW margin) and robust accuracy."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import ConfigError, Tensor

log = logging.getLogger(__name__)

LOSS_KINDS = ("ce", "cw")


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    """Budget ``eps`` and step ``alpha`` are in pixel units of [0, 1] images.

    ``eps == 0`` or ``steps == 0`` are allowed and make the attack the identity
    (apart from a random start, if enabled).
    """

    eps: float = 1 / 255
    alpha: float = 2 / 3 / 255
    steps: int = 3
    loss_kind: str = "ce"
    random_start: bool = True
    kappa: float = 0.0
    norm: str = "linf"

    def __post_init__(self):
        if self.eps < 0:
            raise ConfigError(f"eps must be >= 0, got {self.eps}")
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.norm != "linf":
            raise ConfigError("only the l-infinity norm is supported")

    @classmethod
    def training(cls, eps: float = 1 / 255, steps: int = 3, random_start: bool = True) -> "AttackConfig":
        return cls(eps=eps, alpha=(2 / 3 * eps) or 1e-12, steps=steps, random_start=random_start)

    @classmethod
    def pgd_eval(cls, eps: float = 1 / 255, steps: int = 100, random_start: bool = True) -> "AttackConfig":
        return cls(eps=eps, alpha=(eps / 4) or 1e-12, steps=steps, random_start=random_start)

    @classmethod
    def cw_eval(cls, eps: float = 1 / 255, steps: int = 50) -> "AttackConfig":
        return cls(eps=eps, alpha=(eps / 4) or 1e-12, steps=steps, loss_kind="cw", random_start=False)


def linf_project(delta: np.ndarray, eps: float) -> np.ndarray:
    return np.clip(delta, -eps, eps)


def pgd(loss_fn: Callable[[Tensor, np.ndarray], Tensor], x: np.ndarray, y: np.ndarray,
        cfg: AttackConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Sign-gradient ascent on ``loss_fn`` inside the eps ball and the pixel box.

    ``loss_fn(x_tensor, y)`` must return a scalar whose gradient w.r.t. each
    example depends only on that example (a sum of per-example losses).
    """
    x = np.asarray(x)
    if x.size and (x.min() < 0 or x.max() > 1):
        raise AttackError("clean input outside [0, 1]")
    eps, alpha = cfg.eps, cfg.alpha
    if cfg.random_start and eps > 0:
        if rng is None:
            raise AttackError("random start needs an rng")
        delta = rng.uniform(-eps, eps, size=x.shape).astype(x.dtype)
    else:
        delta = np.zeros_like(x)
    x_adv = np.clip(x + delta, 0.0, 1.0).astype(x.dtype)
    if eps == 0:
        return x_adv
    delta = x_adv - x
    for step in range(cfg.steps):
        xt = Tensor(x_adv, requires_grad=True)
        loss = loss_fn(xt, y)
        if not np.all(np.isfinite(loss.data)):
            raise AttackError(f"non-finite attack loss at step {step}: {loss.data}")
        g = T.grad(loss, [xt])[xt]
        delta = linf_project(delta + alpha * np.sign(g), eps).astype(x.dtype)
        x_adv = np.clip(x + delta, 0.0, 1.0).astype(x.dtype)
        delta = x_adv - x
    return x_adv


def ce_objective(scorer) -> Callable[[Tensor, np.ndarray], Tensor]:
    def loss(xt, y):
        return T.cross_entropy(scorer.logits(xt), y, reduction="sum")
    return loss


def cw_objective(scorer, kappa: float = 0.0) -> Callable[[Tensor, np.ndarray], Tensor]:
    # ascend on the negated margin, i.e. push the true logit below the runner-up
    def loss(xt, y):
        return T.neg(T.sum(T.margin(scorer.logits(xt), y, kappa)))
    return loss


def cw(scorer, x: np.ndarray, y: np.ndarray, cfg: AttackConfig,
       rng: np.random.Generator | None = None) -> np.ndarray:
    if scorer.n_classes < 2:
        warnings.warn("CW margin undefined with a single class; returning the clean input")
        return np.array(x, copy=True)
    return pgd(cw_objective(scorer, cfg.kappa), x, y, cfg, rng)


def attack(scorer, x: np.ndarray, y: np.ndarray, cfg: AttackConfig,
           rng: np.random.Generator | None = None) -> np.ndarray:
    if cfg.loss_kind == "cw":
        return cw(scorer, x, y, cfg, rng)
    return pgd(ce_objective(scorer), x, y, cfg, rng)


def check_budget(x: np.ndarray, x_adv: np.ndarray, eps: float, tol: float = 1e-7) -> np.ndarray:
    """Per-example flags: within the eps ball (up to ``tol``) and inside [0, 1]."""
    n = len(x)
    dev = np.abs(x_adv.astype(np.float64) - x.astype(np.float64)).reshape(n, -1).max(axis=1)
    flat = x_adv.reshape(n, -1)
    return (dev <= eps + tol) & (flat.min(axis=1) >= 0) & (flat.max(axis=1) <= 1)


def evaluate_robustness(scorer, images: np.ndarray, labels: np.ndarray, cfg: AttackConfig,
                        rng: np.random.Generator | None = None, batch: int = 100) -> dict:
    """Clean and attacked accuracy of ``scorer`` on (images, labels).

    ``labels`` index the scorer's class rows.
    """
    if len(images) == 0:
        raise ConfigError("evaluation set is empty")
    clean = robust = 0
    sound = True
    for lo in range(0, len(images), batch):
        xb, yb = images[lo:lo + batch], labels[lo:lo + batch]
        clean_pred = scorer.logits(xb).data.argmax(axis=1)
        x_adv = attack(scorer, xb, yb, cfg, rng)
        sound &= bool(check_budget(xb, x_adv, cfg.eps).all())
        adv_pred = scorer.logits(x_adv).data.argmax(axis=1)
        clean += int((clean_pred == yb).sum())
        robust += int((adv_pred == yb).sum())
    n = len(images)
    return {"clean_acc": clean / n, "robust_acc": robust / n, "budget_ok": sound, "n": n}
