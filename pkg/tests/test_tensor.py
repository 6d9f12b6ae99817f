import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedapt import tensor as T
from fedapt.tensor import ConfigError, ShapeError, TapeError, Tensor, finite_diff_grad, grad

from conftest import rel_err

TOL = {np.float32: 1e-3, np.float64: 1e-5}


def _rand(rng, shape, lo=-1.0, hi=1.0):
    return rng.uniform(lo, hi, size=shape)


# each case builds (inputs, fn) where fn maps the list of input tensors to a scalar
def _op_cases():
    cases = {}

    def case(name):
        def register(fn):
            cases[name] = fn
            return fn
        return register

    @case("add")
    def _(rng):
        s = tuple(rng.integers(1, 4, size=2))
        w = rng.normal(size=s)
        return [_rand(rng, s), _rand(rng, s[1:])], lambda t: T.sum((t[0] + t[1]) * w)

    @case("sub")
    def _(rng):
        s = tuple(rng.integers(1, 4, size=2))
        w = rng.normal(size=s)
        return [_rand(rng, s), _rand(rng, s)], lambda t: T.sum((t[0] - t[1]) * w)

    @case("mul")
    def _(rng):
        s = tuple(rng.integers(1, 4, size=3))
        return [_rand(rng, s), _rand(rng, s)], lambda t: T.sum(t[0] * t[1])

    @case("scalar_mul")
    def _(rng):
        s = tuple(rng.integers(1, 5, size=2))
        c = float(rng.normal())
        w = rng.normal(size=s)
        return [_rand(rng, s)], lambda t: T.sum(t[0] * c * w)

    @case("exp")
    def _(rng):
        s = tuple(rng.integers(1, 5, size=2))
        return [_rand(rng, s)], lambda t: T.sum(T.exp(t[0]))

    @case("log")
    def _(rng):
        s = tuple(rng.integers(1, 5, size=2))
        w = rng.normal(size=s)
        return [_rand(rng, s, 0.5, 2.0)], lambda t: T.sum(T.log(t[0]) * w)

    @case("relu")
    def _(rng):
        s = tuple(rng.integers(1, 5, size=2))
        x = _rand(rng, s)
        x = np.where(np.abs(x) < 0.05, 0.3, x)  # keep clear of the kink
        w = rng.normal(size=s)
        return [x], lambda t: T.sum(T.relu(t[0]) * w)

    @case("matmul")
    def _(rng):
        b, n, k, m = rng.integers(1, 4, size=4)
        return [_rand(rng, (b, n, k)), _rand(rng, (k, m))], lambda t: T.sum(T.matmul(t[0], t[1]) * T.matmul(t[0], t[1]))

    @case("linear")
    def _(rng):
        b, n, k, m = rng.integers(1, 4, size=4)
        w = rng.normal(size=(b, n, m))
        return ([_rand(rng, (b, n, k)), _rand(rng, (k, m)), _rand(rng, (m,))],
                lambda t: T.sum(T.linear(t[0], t[1], t[2]) * w))

    @case("concat")
    def _(rng):
        a, b, c = rng.integers(1, 4, size=3)
        w = rng.normal(size=(a, b + c))
        return [_rand(rng, (a, b)), _rand(rng, (a, c))], lambda t: T.sum(T.concat([t[0], t[1]], axis=1) * w)

    @case("slice")
    def _(rng):
        s = (int(rng.integers(3, 6)), int(rng.integers(2, 5)))
        w = rng.normal(size=(s[0] - 2, s[1]))
        return [_rand(rng, s)], lambda t: T.sum(t[0][1:-1] * w)

    @case("reshape_transpose")
    def _(rng):
        a, b, c = rng.integers(1, 4, size=3)
        w = rng.normal(size=(c, b * a))
        return [_rand(rng, (a, b, c))], lambda t: T.sum(T.reshape(T.transpose(t[0], (2, 1, 0)), (c, b * a)) * w)

    @case("softmax")
    def _(rng):
        s = (int(rng.integers(1, 4)), int(rng.integers(1, 6)))
        w = rng.normal(size=s)
        return [_rand(rng, s, -3, 3)], lambda t: T.sum(T.softmax(t[0]) * w)

    @case("layer_norm")
    def _(rng):
        s = (int(rng.integers(1, 4)), int(rng.integers(2, 6)))
        w = rng.normal(size=s)
        return ([_rand(rng, s), _rand(rng, s[1:]), _rand(rng, s[1:])],
                lambda t: T.sum(T.layer_norm(t[0], t[1], t[2]) * w))

    @case("mean")
    def _(rng):
        s = tuple(rng.integers(1, 4, size=3))
        w = rng.normal(size=(s[0], s[2]))
        return [_rand(rng, s)], lambda t: T.sum(T.mean(t[0], axis=1) * w)

    @case("l2_normalize")
    def _(rng):
        s = (int(rng.integers(1, 4)), int(rng.integers(2, 6)))
        w = rng.normal(size=s)
        return [_rand(rng, s) + 0.1], lambda t: T.sum(T.l2_normalize(t[0]) * w)

    @case("cosine_similarity")
    def _(rng):
        d = int(rng.integers(2, 6))
        return [_rand(rng, (d,)), _rand(rng, (d,))], lambda t: T.cosine_similarity(t[0], t[1])

    @case("cross_entropy")
    def _(rng):
        n, k = int(rng.integers(1, 5)), int(rng.integers(2, 6))
        y = rng.integers(0, k, size=n)
        return [_rand(rng, (n, k), -3, 3)], lambda t: T.cross_entropy(t[0], y)

    @case("margin")
    def _(rng):
        n, k = int(rng.integers(1, 5)), int(rng.integers(2, 6))
        y = rng.integers(0, k, size=n)
        # distinct logits keep the runner-up well defined
        z = rng.permutation(n * k).reshape(n, k) * 0.3 + _rand(rng, (n, k), -0.05, 0.05)
        return [z], lambda t: T.sum(T.margin(t[0], y, kappa=100.0))

    @case("attention")
    def _(rng):
        heads = int(rng.integers(1, 3))
        d = heads * int(rng.integers(1, 3))
        tq, tk = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        w = rng.normal(size=(2, tq, d))
        return ([_rand(rng, (2, tq, d)), _rand(rng, (2, tk, d)), _rand(rng, (2, tk, d))],
                lambda t: T.sum(T.multi_head_attention(t[0], t[1], t[2], heads) * w))

    @case("take")
    def _(rng):
        v, d = int(rng.integers(2, 6)), int(rng.integers(1, 4))
        idx = rng.integers(0, v, size=(3, 2))
        w = rng.normal(size=(3, 2, d))
        return [_rand(rng, (v, d))], lambda t: T.sum(T.take(t[0], idx) * w)

    return cases


OP_CASES = _op_cases()
N_PER_OP = 3


def _check_case(name, seed, dtype):
    rng = np.random.default_rng([seed, len(name)])
    inputs, fn = OP_CASES[name](rng)
    params = [Tensor(x.astype(dtype), requires_grad=True) for x in inputs]
    got = grad(fn(params), params)
    for i, p in enumerate(params):
        # the reference always runs in 64-bit so it is not the limiting factor
        def f(xi, i=i):
            args = [Tensor(x.astype(np.float64)) for x in inputs]
            args[i] = Tensor(xi.data.astype(np.float64))
            return fn(args)
        ref = finite_diff_grad(f, inputs[i].astype(np.float64), h=1e-6)
        assert got[p].shape == p.shape
        assert got[p].dtype == dtype
        assert rel_err(got[p], ref) <= TOL[dtype], (name, i)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("seed", range(N_PER_OP))
@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(name, seed, dtype):
    _check_case(name, seed, dtype)


def test_gradient_case_count_at_least_100():
    assert len(OP_CASES) * N_PER_OP * 2 >= 100


# ---------------------------------------------------------------------------
# forward examples


def test_cosine_of_vector_with_itself_is_one():
    v = Tensor(np.array([0.3, -2.0, 5.0]))
    assert abs(T.cosine_similarity(v, v).item() - 1.0) <= 1e-6


def test_softmax_of_zeros_is_uniform():
    np.testing.assert_allclose(T.softmax(Tensor(np.zeros(4))).data, 0.25, atol=1e-7)


def test_layer_norm_hand_computed():
    out = T.layer_norm(Tensor(np.array([1.0, 3.0])), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-5)


def test_cosine_of_zero_vector_is_zero_with_zero_gradient():
    a = Tensor(np.zeros(3), requires_grad=True)
    b = Tensor(np.array([1.0, 2.0, 3.0]))
    out = T.cosine_similarity(a, b)
    assert out.item() == 0.0
    np.testing.assert_array_equal(grad(out, [a])[a], np.zeros(3))


def test_softmax_stable_for_large_logits():
    p = T.softmax(Tensor(np.array([1000.0, 1000.0, -1000.0]))).data
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p, [0.5, 0.5, 0.0], atol=1e-12)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_rows_sum_to_one(xs):
    assert abs(T.softmax(Tensor(np.array(xs))).data.sum() - 1.0) <= 1e-6


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=12).filter(lambda v: np.linalg.norm(v) > 1e-3))
def test_l2_normalize_has_unit_norm(xs):
    y = T.l2_normalize(Tensor(np.array(xs))).data
    assert abs(np.linalg.norm(y) - 1.0) <= 1e-6


# ---------------------------------------------------------------------------
# grad() contract


def test_grad_of_linear_map_is_weight():
    w = np.array([1.5, -2.0, 0.25])
    x = Tensor(np.array([0.1, 0.2, 0.3]), requires_grad=True)
    np.testing.assert_array_equal(grad(T.sum(x * w), [x])[x], w)


def test_cosine_gradient_at_orthogonal_pair():
    a = Tensor(np.array([1.0, 0.0]), requires_grad=True)
    b = Tensor(np.array([0.0, 1.0]))
    g = grad(T.cosine_similarity(a, b), [a])[a]
    ref = finite_diff_grad(lambda t: T.cosine_similarity(t, b), a.data, h=1e-5)
    np.testing.assert_allclose(g, [0.0, 1.0], atol=1e-9)
    np.testing.assert_allclose(ref, [0.0, 1.0], atol=1e-6)


def test_param_off_tape_gets_zeros():
    x = Tensor(np.ones(3), requires_grad=True)
    other = Tensor(np.ones((2, 2)), requires_grad=True)
    g = grad(T.sum(x), [x, other])
    np.testing.assert_array_equal(g[other], np.zeros((2, 2)))


def test_non_scalar_loss_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        grad(x * 2.0, [x])


def test_second_backward_is_an_error():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = T.sum(T.exp(x))
    grad(loss, [x])
    with pytest.raises(TapeError):
        grad(loss, [x])


def test_leaf_reusable_across_tapes():
    x = Tensor(np.array([2.0]), requires_grad=True)
    g1 = grad(T.sum(x * x), [x])[x]
    g2 = grad(T.sum(x * x), [x])[x]
    np.testing.assert_array_equal(g1, g2)


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = x * x
    np.testing.assert_allclose(grad(T.sum(y + y), [x])[x], [12.0])


def test_shape_mismatch_reports_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)|\(4,\).*\(2, 3\)"):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))


def test_heads_not_dividing_width_is_config_error():
    q = Tensor(np.ones((1, 2, 6)))
    with pytest.raises(ConfigError):
        T.multi_head_attention(q, q, q, heads=4)


def test_dtype_preserved():
    for dt in (np.float32, np.float64):
        x = Tensor(np.ones((2, 3), dtype=dt), requires_grad=True)
        y = T.layer_norm(T.softmax(x * 2.0))
        assert y.dtype == dt
        assert grad(T.sum(y), [x])[x].dtype == dt


def test_ops_are_deterministic():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(2, 5, 8)).astype(np.float32)

    def run():
        t = Tensor(a, requires_grad=True)
        out = T.multi_head_attention(t, t, t, 2)
        return out.data, grad(T.sum(out * out), [t])[t]

    (o1, g1), (o2, g2) = run(), run()
    assert o1.tobytes() == o2.tobytes() and g1.tobytes() == g2.tobytes()


# ---------------------------------------------------------------------------
# finite differences


def test_finite_diff_sum_of_squares():
    np.testing.assert_allclose(finite_diff_grad(lambda t: T.sum(t * t), np.array([3.0]), h=1e-4), [6.0], atol=1e-4)


def test_finite_diff_softmax_cross_entropy_matches_grad():
    z = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    g = grad(T.cross_entropy(z, 1), [z])[z]
    ref = finite_diff_grad(lambda t: T.cross_entropy(t, 1), z.data, h=1e-4)
    np.testing.assert_allclose(g, ref, atol=1e-4)


def test_finite_diff_of_constant_is_zero():
    np.testing.assert_array_equal(finite_diff_grad(lambda t: Tensor(np.array(4.0)), np.ones(3)), np.zeros(3))


def test_finite_diff_rejects_nonpositive_step():
    with pytest.raises(ValueError):
        finite_diff_grad(lambda t: T.sum(t), np.ones(2), h=0.0)
