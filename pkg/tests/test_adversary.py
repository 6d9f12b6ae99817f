import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedapt import tensor as T
from fedapt.adversary import (AttackConfig, AttackError, attack, check_budget, ce_objective, cw,
                              evaluate_robustness, linf_project, pgd)
from fedapt.promptgen import PromptConfig, PromptedModel, beacon_init, init_trainables
from fedapt.tensor import ConfigError, Tensor

from conftest import TINY

EPS = 1 / 255


class LinearProbe:
    """logits = flatten(x) @ W + b, a model whose input gradient is known in closed form."""

    def __init__(self, W, b):
        self.W, self.b = W, b

    @property
    def n_classes(self):
        return self.W.shape[1]

    def logits(self, x):
        x = T.as_tensor(x)
        flat = T.reshape(x, (x.shape[0], -1))
        return T.linear(flat, Tensor(self.W), Tensor(self.b))


def _probe(seed=0, shape=(4, 4, 3), k=5, dtype=np.float64):
    rng = np.random.default_rng(seed)
    d = int(np.prod(shape))
    return LinearProbe(rng.normal(size=(d, k)).astype(dtype), rng.normal(size=k).astype(dtype))


def _batch(n, seed=0, shape=(4, 4, 3), k=5, dtype=np.float64):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 1, size=(n,) + shape).astype(dtype), rng.integers(0, k, size=n)


def test_project_examples():
    d = np.array([2 * EPS, -3 * EPS])
    np.testing.assert_array_equal(linf_project(d, EPS), [EPS, -EPS])
    inside = np.array([0.5 * EPS, -EPS, 0.0])
    assert linf_project(inside, EPS).tobytes() == inside.tobytes()


@given(st.lists(st.floats(-1, 1), min_size=1, max_size=20), st.floats(1e-4, 0.1))
def test_project_idempotent(vals, eps):
    d = np.array(vals)
    once = linf_project(d, eps)
    assert linf_project(once, eps).tobytes() == once.tobytes()
    assert np.abs(once).max() <= eps


def test_one_step_equals_analytic_fgsm():
    probe = _probe()
    x, y = _batch(16)
    cfg = AttackConfig(eps=EPS, alpha=EPS, steps=1, random_start=False)
    got = pgd(ce_objective(probe), x, y, cfg)
    # closed-form input gradient of summed softmax cross-entropy of a linear probe
    z = x.reshape(16, -1) @ probe.W + probe.b
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(16), y] -= 1.0
    g = (p @ probe.W.T).reshape(x.shape)
    expect = np.clip(x + EPS * np.sign(g), 0, 1)
    assert got.tobytes() == expect.tobytes()


def test_linear_loss_single_sign_step():
    w = np.random.default_rng(1).normal(size=(3, 4, 4, 3))
    x = np.random.default_rng(2).uniform(0, 1, size=w.shape)
    alpha = 0.6 * EPS
    cfg = AttackConfig(eps=EPS, alpha=alpha, steps=1, random_start=False)
    got = pgd(lambda xt, y: T.sum(xt * w), x, None, cfg)
    np.testing.assert_array_equal(got, np.clip(x + np.clip(alpha * np.sign(w), -EPS, EPS), 0, 1))


def test_constant_loss_leaves_input():
    x, _ = _batch(4)
    cfg = AttackConfig(eps=EPS, alpha=EPS / 4, steps=10, random_start=False)
    out = pgd(lambda xt, y: T.sum(xt * 0.0), x, None, cfg)
    assert out.tobytes() == x.tobytes()


@given(st.integers(0, 1000), st.floats(1e-4, 0.05), st.integers(0, 6), st.booleans(),
       st.sampled_from(["ce", "cw"]))
def test_budget_soundness(seed, eps, steps, random_start, kind):
    probe = _probe(seed % 7, dtype=np.float32)
    x, y = _batch(8, seed, dtype=np.float32)
    x[0] = 0.0
    x[1] = 1.0  # pixels on the box boundary
    cfg = AttackConfig(eps=eps, alpha=eps / 3, steps=steps, random_start=random_start, loss_kind=kind)
    adv = attack(probe, x, y, cfg, np.random.default_rng(seed))
    assert check_budget(x, adv, eps).all()
    assert adv.dtype == x.dtype


def test_check_budget_flags_violations():
    x = np.full((2, 2), 0.5)
    adv = x.copy()
    adv[0, 0] += 2 * EPS
    assert check_budget(x, adv, EPS).tolist() == [False, True]


def test_pgd_raises_loss():
    probe = _probe(3)
    x, y = _batch(32, 3)
    cfg = AttackConfig.pgd_eval(steps=10)
    adv = pgd(ce_objective(probe), x, y, cfg, np.random.default_rng(0))
    before = T.cross_entropy(probe.logits(x), y, reduction="none").data
    after = T.cross_entropy(probe.logits(adv), y, reduction="none").data
    assert (after >= before).mean() >= 0.9


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts():
    x, y = _batch(2)
    cfg = AttackConfig(eps=EPS, alpha=EPS, steps=2, random_start=False)
    with pytest.raises(AttackError):
        pgd(lambda xt, yy: T.sum(T.log(xt * 0.0)), x, y, cfg)


def test_clean_input_range_checked():
    x, y = _batch(2)
    with pytest.raises(AttackError):
        pgd(ce_objective(_probe()), x + 2.0, y, AttackConfig(random_start=False))


def test_random_start_needs_rng():
    x, y = _batch(2)
    with pytest.raises(AttackError):
        pgd(ce_objective(_probe()), x, y, AttackConfig())


def test_cw_single_class_warns_and_returns_input():
    probe = _probe(k=1)
    x, _ = _batch(3, k=1)
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        out = cw(probe, x, np.zeros(3, dtype=int), AttackConfig.cw_eval())
    assert any("single class" in str(w.message) for w in rec)
    assert out.tobytes() == x.tobytes()


def test_cw_leaves_misclassified_points():
    probe = _probe(4)
    x, _ = _batch(8, 4)
    z = probe.logits(x).data
    wrong = z.argmin(axis=1)  # label the least likely class: margin already negative
    out = cw(probe, x, wrong, AttackConfig.cw_eval())
    assert out.tobytes() == x.tobytes()


def test_cw_robust_accuracy_not_above_clean():
    probe = _probe(5)
    x, _ = _batch(60, 5)
    y = probe.logits(x).data.argmax(axis=1)
    y[:10] = (y[:10] + 1) % 5
    m = evaluate_robustness(probe, x, y, AttackConfig.cw_eval(eps=4 / 255))
    assert m["robust_acc"] <= m["clean_acc"] and m["budget_ok"]


def test_zero_budget_and_zero_steps_keep_accuracy():
    probe = _probe(6)
    x, y = _batch(40, 6)
    for cfg in (AttackConfig.pgd_eval(eps=0.0), AttackConfig(eps=EPS, alpha=EPS, steps=0, random_start=False)):
        m = evaluate_robustness(probe, x, y, cfg, np.random.default_rng(0))
        assert m["robust_acc"] == m["clean_acc"]


def test_empty_evaluation_rejected():
    with pytest.raises(ConfigError):
        evaluate_robustness(_probe(), np.zeros((0, 4, 4, 3)), np.zeros(0, dtype=int), AttackConfig())


@pytest.mark.parametrize("kw", [dict(eps=-1.0), dict(alpha=0.0), dict(steps=-1), dict(loss_kind="kl"),
                                dict(norm="l2")])
def test_attack_config_validation(kw):
    with pytest.raises(ConfigError):
        AttackConfig(**kw)


def test_presets():
    tr, ev, c = AttackConfig.training(), AttackConfig.pgd_eval(), AttackConfig.cw_eval()
    assert (tr.eps, tr.steps) == (EPS, 3) and abs(tr.alpha - 2 * EPS / 3) < 1e-15
    assert ev.steps == 100 and abs(ev.alpha - EPS / 4) < 1e-15
    assert c.loss_kind == "cw" and c.steps == 50 and not c.random_start and c.kappa == 0.0


def test_attacks_do_not_touch_model_state(tiny_encoder32):
    enc = tiny_encoder32
    pcfg = PromptConfig()
    state = init_trainables(TINY, pcfg, 0)
    ids = enc.class_tokens(range(4), 0)
    B = beacon_init(enc, ids)
    before = (enc.weights.digest(), {k: v.tobytes() for k, v in state.items()}, B.tobytes())
    scorer = PromptedModel(enc, state, B, pcfg).prepare(ids)
    x = np.random.default_rng(0).uniform(size=(4,) + TINY.image_shape).astype(np.float32)
    y = np.arange(4)
    attack(scorer, x, y, AttackConfig.pgd_eval(steps=3), np.random.default_rng(0))
    attack(scorer, x, y, AttackConfig.cw_eval(steps=3))
    assert (enc.weights.digest(), {k: v.tobytes() for k, v in state.items()}, B.tobytes()) == before
