import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from segreweight.errors import ContractError, NumericalError
from segreweight.ndcore import OptimState, checkpoint, grad, jvp, ops, sgd_step, value_and_grad

from oracles import fd_grad, fd_jvp, rel_err, rel_err_dict
from primitive_cases import CASES, check_case


def test_grad_square():
    g = grad(lambda x: ops.total(ops.mul(x, x)), np.array(3.0))
    assert g == pytest.approx(6.0)


def test_grad_conv_sum_matches_finite_differences():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 1, 5, 5))
    w = rng.standard_normal((1, 1, 3, 3))
    b = np.zeros(1)

    def f(wv):
        return ops.total(ops.conv2d(x, wv, b))

    g = grad(f, w)
    assert rel_err(g, fd_grad(lambda a: f(a), w, 1e-5)) < 1e-6


def test_grad_constant_function_is_zero():
    p = {"a": np.ones((2, 2)), "b": np.ones(3)}
    g = grad(lambda q: np.asarray(4.0), p)
    assert all(np.all(v == 0) for v in g.values())


def test_grad_needs_scalar():
    with pytest.raises(ContractError):
        grad(lambda x: ops.relu(x), np.ones(3))


def test_jvp_identity():
    v = np.array([1.0, -2.0, 0.5])
    assert np.array_equal(jvp(lambda x: x, np.zeros(3), v), v)


def test_jvp_square_and_cube():
    def f(x):
        x2 = ops.mul(x, x)
        return ops.concat([x2, ops.mul(x2, x)], axis=0)

    out = jvp(f, np.array([2.0]), np.array([1.0]))
    np.testing.assert_allclose(out, [4.0, 12.0])


def test_jvp_tiny_conv_net_matches_finite_differences():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 2, 6, 6))
    params = {"w1": rng.standard_normal((3, 2, 3, 3)), "b1": rng.standard_normal(3),
              "w2": rng.standard_normal((2, 3, 1, 1)), "b2": rng.standard_normal(2)}
    tangent = {k: rng.standard_normal(v.shape) for k, v in params.items()}

    def net(p):
        h = ops.relu(ops.conv2d(x, p["w1"], p["b1"]))
        return ops.softmax(ops.conv2d(h, p["w2"], p["b2"]))

    assert rel_err(jvp(net, params, tangent), fd_jvp(net, params, tangent, 1e-5)) < 1e-6


def test_jvp_shape_mismatch():
    with pytest.raises(ContractError):
        jvp(lambda p: p["a"], {"a": np.ones(3)}, {"a": np.ones(4)})


def test_jvp_returns_value_too():
    val, t = jvp(lambda x: ops.scale(x, 2.0), np.ones(2), np.ones(2), return_value=True)
    np.testing.assert_array_equal(val, [2.0, 2.0])
    np.testing.assert_array_equal(t, [2.0, 2.0])


def test_relu_values():
    np.testing.assert_array_equal(ops.relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])


def test_maxpool_values():
    out = ops.maxpool2(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert out.shape == (1, 1, 1, 1) and out[0, 0, 0, 0] == 4.0


def test_upsample_values():
    out = ops.upsample2(np.array([[[[1.0, 2.0]]]]))
    np.testing.assert_array_equal(out[0, 0], [[1, 1, 2, 2], [1, 1, 2, 2]])


@pytest.mark.parametrize("bad", [
    lambda: ops.conv2d(np.ones((1, 2, 4, 4)), np.ones((1, 3, 3, 3)), np.zeros(1)),
    lambda: ops.conv2d(np.ones((1, 2, 4, 4)), np.ones((1, 2, 2, 2)), np.zeros(1)),
    lambda: ops.maxpool2(np.ones((1, 1, 3, 4))),
    lambda: ops.pixel_nll(np.ones((1, 2, 3, 3)) / 2, np.zeros((1, 3, 4), int)),
    lambda: ops.weighted_sum(np.ones(3), np.ones(4)),
])
def test_shape_rule_violations(bad):
    with pytest.raises(ContractError):
        bad()


def test_non_finite_names_primitive():
    with pytest.raises(NumericalError, match="mul"):
        grad(lambda x: ops.total(ops.mul(x, x)), np.array([1e200]))


@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_oracles(name):
    for seed in range(3):
        g_err, j_err, dot_err = check_case(name, seed)
        assert g_err < 1e-6
        assert j_err < 1e-6
        assert dot_err < 1e-10


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_grad_of_sum_is_sum_of_grads(seed):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((2, 1, 3, 3))
    b = rng.standard_normal(2)
    x1, x2 = rng.standard_normal((2, 1, 1, 4, 4))

    def f1(p):
        return ops.total(ops.relu(ops.conv2d(x1, p, b)))

    def f2(p):
        return ops.total(ops.mul(ops.conv2d(x2, p, b), ops.conv2d(x2, p, b)))

    both = grad(lambda p: ops.add(f1(p), f2(p)), w)
    np.testing.assert_allclose(both, grad(f1, w) + grad(f2, w), rtol=1e-12, atol=1e-12)


def test_deterministic_outputs():
    def run():
        rng = np.random.default_rng(11)
        x = rng.standard_normal((2, 3, 8, 8))
        w = rng.standard_normal((4, 3, 3, 3))
        return value_and_grad(lambda p: ops.total(ops.relu(ops.conv2d(x, p, np.zeros(4)))), w)

    (v1, g1), (v2, g2) = run(), run()
    assert v1.tobytes() == v2.tobytes() and g1.tobytes() == g2.tobytes()


def test_backward_visits_shared_nodes_once():
    # y = x*x used twice: d/dx (y + y) = 4x
    g = grad(lambda x: (lambda y: ops.total(ops.add(y, y)))(ops.mul(x, x)), np.array([1.5]))
    np.testing.assert_allclose(g, [6.0])


# -- optimizer ---------------------------------------------------------------

def test_sgd_plain_arithmetic():
    p, _ = sgd_step({"w": np.array(1.0)}, {"w": np.array(2.0)}, OptimState(lr=0.1))
    assert p["w"] == pytest.approx(0.8)


def test_sgd_zero_grad_fixed_point():
    params = {"w": np.array([1.0, -2.0])}
    state = OptimState.for_params(params, lr=0.5, momentum=0.9)
    new, _ = sgd_step(params, {"w": np.zeros(2)}, state)
    np.testing.assert_array_equal(new["w"], params["w"])


def test_sgd_momentum_decay_two_steps_hand_unrolled():
    m, wd, lr = 0.99, 5e-5, 0.1
    p0, g1, g2 = 1.0, 2.0, -0.5
    v1 = g1 + wd * p0
    p1 = p0 - lr * v1
    v2 = m * v1 + g2 + wd * p1
    p2 = p1 - lr * v2

    params = {"w": np.array(p0)}
    state = OptimState.for_params(params, lr, m, wd)
    params, state = sgd_step(params, {"w": np.array(g1)}, state)
    params, state = sgd_step(params, {"w": np.array(g2)}, state)
    assert params["w"] == pytest.approx(p2, abs=1e-15)
    assert state.velocity["w"] == pytest.approx(v2, abs=1e-15)


def test_sgd_shape_mismatch():
    with pytest.raises(ContractError):
        sgd_step({"w": np.ones(2)}, {"w": np.ones(3)}, OptimState(lr=0.1))


def test_sgd_does_not_mutate_inputs():
    params = {"w": np.ones(2)}
    state = OptimState.for_params(params, 0.1, 0.9)
    sgd_step(params, {"w": np.ones(2)}, state)
    np.testing.assert_array_equal(params["w"], np.ones(2))
    np.testing.assert_array_equal(state.velocity["w"], np.zeros(2))


# -- checkpoints ---------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"enc0.w": rng.standard_normal((2, 3, 3, 3)), "scalar": np.array(2.5), "v": rng.standard_normal(4)}
    checkpoint.save(tmp_path / "c.bin", tensors)
    back = checkpoint.load(tmp_path / "c.bin")
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape
        assert back[k].tobytes() == tensors[k].tobytes()


def test_checkpoint_layout_is_little_endian():
    raw = checkpoint.dumps({"ab": np.array([1.0])})
    assert raw[:4] == (1).to_bytes(4, "little")
    assert raw[4:8] == (2).to_bytes(4, "little") and raw[8:10] == b"ab"
    assert raw[10:14] == (1).to_bytes(4, "little") and raw[14:18] == (1).to_bytes(4, "little")
    assert np.frombuffer(raw[18:], "<f8")[0] == 1.0


def test_checkpoint_truncated():
    raw = checkpoint.dumps({"a": np.ones(3)})
    with pytest.raises(ContractError):
        checkpoint.loads(raw[:-3])


def test_rel_err_dict_helper():
    assert rel_err_dict({"a": np.ones(2)}, {"a": np.ones(2)}) == 0.0
