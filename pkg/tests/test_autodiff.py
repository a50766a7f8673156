import numpy as np
import pytest

from dfaclab import autodiff as ad
from dfaclab.autodiff import (
    AutodiffError,
    NonFiniteError,
    ParameterSet,
    ShapeError,
    backward,
    optimizer_step,
)

from gradcheck import build_random_graph, max_gradient_error, REL_TOL


def test_matmul_identity():
    a = np.arange(12, dtype=float).reshape(3, 4)
    out = ad.matmul(ad.constant(np.eye(3)), ad.constant(a))
    np.testing.assert_array_equal(out.value, a)


def test_relu_sign_cases():
    out = ad.relu(ad.constant([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(out.value, [0.0, 0.0, 2.0])


def test_cos_at_zero():
    assert ad.cos(ad.constant([0.0])).value[0] == 1.0


def test_backward_sum_gives_ones():
    params = ParameterSet()
    p = params.add("p", np.zeros(4))
    backward(ad.reduce_sum(p))
    np.testing.assert_array_equal(p.grad, np.ones(4))


def test_backward_quadratic():
    params = ParameterSet()
    p = params.add("p", [1.0, 2.0])
    backward(ad.reduce_sum(ad.mul(p, p)))
    np.testing.assert_array_equal(p.grad, [2.0, 4.0])


def test_non_participating_parameter_keeps_zero_grad():
    params = ParameterSet()
    used = params.add("used", [1.0, 2.0])
    unused = params.add("unused", [3.0])
    backward(ad.reduce_sum(ad.mul(used, used)))
    np.testing.assert_array_equal(unused.grad, [0.0])


def test_backward_rejects_non_scalar_root():
    params = ParameterSet()
    p = params.add("p", [1.0, 2.0])
    with pytest.raises(AutodiffError, match="scalar"):
        backward(ad.mul(p, p))


def test_relu_subgradient_at_zero_is_zero():
    params = ParameterSet()
    p = params.add("p", [0.0])
    backward(ad.reduce_sum(ad.relu(p)))
    np.testing.assert_array_equal(p.grad, [0.0])


def test_abs_subgradient_at_zero_is_zero():
    params = ParameterSet()
    p = params.add("p", [0.0])
    backward(ad.reduce_sum(ad.absolute(p)))
    np.testing.assert_array_equal(p.grad, [0.0])


def test_shared_node_accumulates_both_paths():
    # a = p + p feeds sum(a*a): d/dp sum(4 p^2) = 8p
    params = ParameterSet()
    p = params.add("p", [1.0, 2.0])
    a = ad.add(p, p)
    backward(ad.reduce_sum(ad.mul(a, a)))
    np.testing.assert_array_equal(p.grad, [8.0, 16.0])


def test_three_layer_relu_network_matches_finite_differences():
    rng = np.random.default_rng(5)
    params = ParameterSet()
    x = rng.standard_normal((4, 5))
    w1 = params.add("w1", rng.standard_normal((5, 6)) * 0.5)
    b1 = params.add("b1", rng.standard_normal(6) * 0.1)
    w2 = params.add("w2", rng.standard_normal((6, 6)) * 0.5)
    b2 = params.add("b2", rng.standard_normal(6) * 0.1)
    w3 = params.add("w3", rng.standard_normal((6, 2)) * 0.5)

    def rebuild():
        h = ad.relu(ad.add(ad.matmul(ad.constant(x), w1), b1))
        h = ad.relu(ad.add(ad.matmul(h, w2), b2))
        return ad.reduce_mean(ad.mul(ad.matmul(h, w3), ad.matmul(h, w3)))

    assert max_gradient_error(params, rebuild) <= REL_TOL


def test_hundred_random_graphs_match_finite_differences():
    # Seed pinned; every graph stays away from kink-at-fd-step pathologies.
    rng = np.random.default_rng(12345)
    worst = 0.0
    for _ in range(100):
        params, rebuild = build_random_graph(rng)
        worst = max(worst, max_gradient_error(params, rebuild))
    assert worst <= REL_TOL, f"worst relative gradient error {worst:.3e}"


def test_forward_bitwise_reproducible():
    def run():
        rng = np.random.default_rng(99)
        params, rebuild = build_random_graph(rng)
        return rebuild().value.copy()

    first, second = run(), run()
    np.testing.assert_array_equal(first, second)


def test_shape_mismatch_names_primitive_and_shapes():
    a = ad.constant(np.zeros((3, 4)))
    b = ad.constant(np.zeros((5, 2)))
    with pytest.raises(ShapeError, match=r"matmul.*\(3, 4\).*\(5, 2\)"):
        ad.matmul(a, b)
    with pytest.raises(ShapeError, match="add"):
        ad.add(ad.constant(np.zeros(3)), ad.constant(np.zeros(4)))


def test_unknown_primitive_rejected():
    with pytest.raises(AutodiffError, match="unknown primitive"):
        ad.apply_primitive("gelu", (ad.constant([1.0]),))


def test_non_finite_leaf_rejected():
    with pytest.raises(NonFiniteError):
        ad.constant([1.0, np.inf])
    with pytest.raises(NonFiniteError):
        ad.parameter([np.nan])


def test_overflow_in_arithmetic_rejected():
    big = ad.constant([1e308])
    with pytest.raises(NonFiniteError, match="add"):
        ad.add(big, big)


def test_concat_and_split_gradients():
    params = ParameterSet()
    a = params.add("a", [[1.0, 2.0]])
    b = params.add("b", [[3.0, 4.0, 5.0]])
    joined = ad.concat([a, b], axis=1)
    weights = np.array([[1.0, 2.0, 3.0, 4.0, 5.0]])
    backward(ad.reduce_sum(ad.mul(joined, ad.constant(weights))))
    np.testing.assert_array_equal(a.grad, [[1.0, 2.0]])
    np.testing.assert_array_equal(b.grad, [[3.0, 4.0, 5.0]])


def test_broadcast_gradient_sums_over_expanded_axes():
    params = ParameterSet()
    v = params.add("v", [1.0, 2.0, 3.0])
    wide = ad.broadcast_to(v, (4, 3))
    backward(ad.reduce_sum(wide))
    np.testing.assert_array_equal(v.grad, [4.0, 4.0, 4.0])


def test_suffix_broadcast_bias_add():
    params = ParameterSet()
    bias = params.add("bias", [1.0, -1.0])
    x = ad.constant(np.ones((3, 2)))
    out = ad.add(x, bias)
    assert out.value.shape == (3, 2)
    backward(ad.reduce_sum(out))
    np.testing.assert_array_equal(bias.grad, [3.0, 3.0])


class TestOptimizer:
    def test_zero_grads_fixed_point(self):
        params = ParameterSet()
        p = params.add("p", [1.0, 2.0])
        before = p.value.copy()
        optimizer_step(params, 0.1)
        np.testing.assert_array_equal(p.value, before)

    def test_descent_direction(self):
        params = ParameterSet()
        p = params.add("p", [1.0])
        p.grad[:] = 1.0
        optimizer_step(params, 0.1)
        assert p.value[0] < 1.0

    def test_grads_zeroed_after_step(self):
        params = ParameterSet()
        p = params.add("p", [1.0])
        p.grad[:] = 0.5
        optimizer_step(params, 0.1)
        np.testing.assert_array_equal(p.grad, [0.0])

    def test_bitwise_deterministic_updates(self):
        def run():
            params = ParameterSet()
            p = params.add("p", [1.0, -2.0, 3.0])
            for step in range(5):
                p.grad[:] = [0.1 * (step + 1), -0.2, 0.05]
                optimizer_step(params, 0.01)
            return p.value.copy()

        np.testing.assert_array_equal(run(), run())

    def test_non_finite_grad_rejected(self):
        params = ParameterSet()
        p = params.add("p", [1.0])
        p.grad[:] = np.inf
        with pytest.raises(NonFiniteError, match="'p'"):
            optimizer_step(params, 0.1)

    def test_duplicate_parameter_name_rejected(self):
        params = ParameterSet()
        params.add("p", [1.0])
        with pytest.raises(AutodiffError, match="already exists"):
            params.add("p", [2.0])
