import itertools

import numpy as np
import pytest

from hazelab import autodiff
from hazelab.autodiff import Graph, NumericalError, Parameter, ShapeError, grad_check, sgd_step
from opcases import OPERATOR_CASES, SHAPE, separated


@pytest.mark.parametrize("name", sorted(OPERATOR_CASES))
def test_operator_finite_differences(name):
    build, make = OPERATOR_CASES[name]
    for trial in range(5):
        rng = np.random.default_rng([trial, 11])
        report = grad_check(build(trial), make(rng), eps=1e-3, seed=trial)
        assert report.worst < 1e-3, report.max_rel_error
        assert sum(report.skipped.values()) == 0


def test_separated_inputs_avoid_kinks():
    x = separated(np.random.default_rng(0))
    assert x.shape == SHAPE
    d = np.diff(np.sort(x.ravel()))
    assert d.min() >= 0.02 - 1e-12
    assert np.abs(x).min() >= 0.01 - 1e-12 and np.abs(x - 1).min() >= 0.01 - 1e-12


def test_identity_conv_and_constant_minpool():
    g = Graph("id", dtype=np.float64)
    x = g.input("x", 3)
    y = g.conv2d(x, 3, 1, name="c")
    g.set_output(g.minpool(y, 5))
    g.params["c.weight"].value[:] = np.eye(3)[:, :, None, None]
    const = np.full((1, 3, 6, 7), 0.42)
    assert np.array_equal(g.forward({"x": const}), const)

    g2 = Graph("id2", dtype=np.float64)
    g2.set_output(g2.conv2d(g2.input("x", 3), 3, 1, name="c"))
    g2.params["c.weight"].value[:] = np.eye(3)[:, :, None, None]
    x = np.random.default_rng(0).standard_normal((2, 3, 4, 5))
    assert np.array_equal(g2.forward({"x": x}), x)


def test_brelu_values():
    g = Graph("b", dtype=np.float64)
    g.set_output(g.brelu(g.input("x", 1)))
    out = g.forward({"x": np.array([-0.5, 0.5, 1.5]).reshape(1, 1, 1, 3)})
    assert out.ravel().tolist() == [0.0, 0.5, 1.0]
    _, gi = g.backward(np.ones((1, 1, 1, 3)))
    assert gi["x"].ravel().tolist() == [0.0, 1.0, 0.0]


def test_relu_subgradient_zero_at_kink():
    g = Graph("r", dtype=np.float64)
    g.set_output(g.relu(g.input("x", 1)))
    g.forward({"x": np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 3)})
    _, gi = g.backward(np.ones((1, 1, 1, 3)))
    assert gi["x"].ravel().tolist() == [0.0, 0.0, 1.0]


def _minpool_bruteforce_grad(x, k, upstream):
    # subgradient: each output pixel sends its upstream value to the first
    # minimal element of its window in row-major order
    n, c, h, w = x.shape
    p = (k - 1) // 2
    grad = np.zeros_like(x)
    for b, ch, i, j in itertools.product(range(n), range(c), range(h), range(w)):
        best = None
        for di, dj in itertools.product(range(k), range(k)):
            yy, xx = i + di - p, j + dj - p
            if 0 <= yy < h and 0 <= xx < w and (best is None or x[b, ch, yy, xx] < x[b, ch][best]):
                best = (yy, xx)
        grad[b, ch][best] += upstream[b, ch, i, j]
    return grad


@pytest.mark.parametrize("k", [3, 5])
def test_minpool_routes_to_lowest_index_argmin(k):
    rng = np.random.default_rng(k)
    x = rng.integers(0, 3, (1, 2, 5, 6)).astype(np.float64)  # lots of ties
    up = rng.standard_normal((1, 2, 5, 6))
    g = Graph("m", dtype=np.float64)
    g.set_output(g.minpool(g.input("x", 2), k))
    out = g.forward({"x": x})
    _, gi = g.backward(up)
    np.testing.assert_allclose(gi["x"], _minpool_bruteforce_grad(x, k, up), atol=1e-12)
    assert np.all(out == out.round())


def test_maxpool_ties_go_to_first():
    g = Graph("p", dtype=np.float64)
    g.set_output(g.maxpool(g.input("x", 1)))
    g.forward({"x": np.ones((1, 1, 2, 2))})
    _, gi = g.backward(np.ones((1, 1, 1, 1)))
    assert gi["x"].ravel().tolist() == [1.0, 0.0, 0.0, 0.0]


def test_channel_min_ties_go_to_first():
    g = Graph("cm", dtype=np.float64)
    g.set_output(g.channel_min(g.input("x", 3)))
    x = np.array([0.5, 0.2, 0.2]).reshape(1, 3, 1, 1)
    assert g.forward({"x": x}).item() == 0.2
    _, gi = g.backward(np.ones((1, 1, 1, 1)))
    assert gi["x"].ravel().tolist() == [0.0, 1.0, 0.0]


def test_linear_graph_gradient_is_transpose():
    g = Graph("lin", seed=3, dtype=np.float64)
    x = g.input("x", 3)
    h = g.conv2d(x, 5, 3, dilation=2)
    h = g.conv_transpose2d(g.scalar_affine(h, 0.7), 2)
    g.set_output(h)
    rng = np.random.default_rng(1)
    xv = rng.standard_normal((2, 3, 6, 6))
    up = rng.standard_normal((2, 2, 12, 12))
    # biases are zero, so the graph is linear: <up, L x> = <L^T up, x>
    lhs = np.sum(up * g.forward({"x": xv}))
    _, gi = g.backward(up)
    assert lhs == pytest.approx(np.sum(gi["x"] * xv), rel=1e-12)


def test_backward_before_forward():
    g = Graph("e", dtype=np.float64)
    g.set_output(g.relu(g.input("x", 1)))
    with pytest.raises(RuntimeError):
        g.backward(np.ones((1, 1, 2, 2)))


def test_shape_errors():
    g = Graph("s", dtype=np.float64)
    x = g.input("x", 3)
    g.set_output(g.maxpool(x))
    with pytest.raises(ShapeError):
        g.forward({"x": np.zeros((1, 3, 5, 4))})
    with pytest.raises(ShapeError):
        g.forward({"x": np.zeros((3, 4, 4))})
    with pytest.raises(ShapeError):
        g.forward({"y": np.zeros((1, 3, 4, 4))})
    g.forward({"x": np.zeros((1, 3, 4, 4))})
    with pytest.raises(ShapeError):
        g.backward(np.zeros((1, 3, 4, 4)))

    g2 = Graph("s2")
    a = g2.input("a", 3)
    with pytest.raises(ShapeError):
        g2.add(a, g2.input("b", 2))
    with pytest.raises(ShapeError):
        g2.concat([a, g2.maxpool(a)])
    with pytest.raises(ValueError):
        g2.conv2d(a, 3, 2)
    with pytest.raises(ValueError):
        g2.minpool(a, 4)


def test_forward_pure_and_deterministic_init():
    build = OPERATOR_CASES["conv2d_5x5"][0]
    a, b = build(7), build(7)
    x = np.random.default_rng(0).standard_normal(SHAPE)
    assert a.forward({"x": x}).tobytes() == a.forward({"x": x}).tobytes() == b.forward({"x": x}).tobytes()
    assert not np.array_equal(a.params["conv1.weight"].value, build(8).params["conv1.weight"].value)


def test_init_range_and_zero_bias():
    g = Graph("i", seed=0)
    g.conv2d(g.input("x", 4), 6, 3, name="c")
    s = np.sqrt(1 / 36)
    w = g.params["c.weight"].value
    assert np.abs(w).max() <= s and np.abs(w).max() > 0.9 * s
    assert np.all(g.params["c.bias"].value == 0)


def test_sgd_examples():
    params = {"p": Parameter("p", np.array([1.0]))}
    sgd_step(params, {"p": np.array([2.0])}, 0.1)
    assert params["p"].value.tolist() == [0.8]
    sgd_step(params, {"p": np.array([0.0])}, 0.1)
    assert params["p"].value.tolist() == [0.8]
    with pytest.raises(ValueError):
        sgd_step(params, {"p": np.array([1.0])}, 0.0)


def test_sgd_aborts_on_nonfinite_without_partial_update():
    params = {"a": Parameter("a", np.ones(2)), "b": Parameter("b", np.ones(2))}
    with pytest.raises(NumericalError):
        sgd_step(params, {"a": np.ones(2), "b": np.array([1.0, np.nan])}, 0.5)
    assert params["a"].value.tolist() == [1.0, 1.0]


def test_grad_check_identity_and_determinism():
    g = Graph("ident", dtype=np.float64)
    g.set_output(g.scalar_affine(g.input("x", 2), 1.0, 0.0))
    x = np.random.default_rng(0).standard_normal((1, 2, 3, 3))
    assert grad_check(g, {"x": x}).worst < 1e-9
    build, make = OPERATOR_CASES["minpool_3"]
    inp = make(np.random.default_rng(5))
    r1 = grad_check(build(1), inp, eps=1e-3, seed=4)
    r2 = grad_check(build(1), inp, eps=1e-3, seed=4)
    assert r1 == r2


def test_grad_check_detects_wrong_gradient(monkeypatch):
    make = OPERATOR_CASES["relu"][1]
    monkeypatch.setattr(autodiff, "channel_min_backward", lambda g, arg, c: np.zeros((g.shape[0], c) + g.shape[2:]))
    g = Graph("bad", dtype=np.float64)
    g.set_output(g.channel_min(g.input("x", 3)))
    assert grad_check(g, make(np.random.default_rng(0)), eps=1e-3).worst > 0.5


def test_grad_check_subsamples_large_parameters():
    g = Graph("big", dtype=np.float64)
    g.set_output(g.conv2d(g.input("x", 3), 8, 5, name="c"))
    x = np.random.default_rng(0).standard_normal((1, 3, 6, 6))
    r = grad_check(g, {"x": x}, max_elements=50)
    assert r.checked["c.weight"] == 50 and r.checked["c.bias"] == 8


def test_grad_check_steps_around_kinks():
    # an input sitting 1e-4 from a relu kink cannot be differenced at h=1e-3
    g = Graph("k", dtype=np.float64)
    g.set_output(g.relu(g.input("x", 1)))
    x = np.array([1e-4, 0.5, -0.5, 2.0]).reshape(1, 1, 2, 2)
    r = grad_check(g, {"x": x}, eps=1e-3)
    assert r.skipped["input:x"] == 0 and r.worst < 1e-9
    r = grad_check(g, {"x": x}, eps=1e-3, shrink=0)
    assert r.skipped["input:x"] == 1 and r.worst < 1e-9


def test_astype_is_independent_copy():
    build = OPERATOR_CASES["conv2d_3x3"][0]
    g = build(0)
    g32 = g.astype(np.float32)
    g32.params["conv1.weight"].value[:] = 0
    assert np.any(g.params["conv1.weight"].value != 0)
    assert g32.forward({"x": np.ones(SHAPE)}).dtype == np.float32
