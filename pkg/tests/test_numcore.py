import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tgdlf import numcore as nc
from tgdlf.numcore import Tensor


def param(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


def central_grad(f, p, h=1e-6):
    """Plain central differences, independent of finite_diff_check."""
    g = np.zeros_like(p.data)
    flat, out = p.data.reshape(-1), g.reshape(-1)
    with nc.no_grad():
        for i in range(flat.size):
            o = flat[i]
            flat[i] = o + h
            up = float(f().data)
            flat[i] = o - h
            down = float(f().data)
            flat[i] = o
            out[i] = (up - down) / (2 * h)
    return g


def test_matmul_identity_and_hand_example():
    x = np.arange(6.0).reshape(2, 3)
    assert np.array_equal((Tensor(np.eye(2)) @ Tensor(x)).data, x)
    out = nc.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1], [1]]))
    assert out.data.tolist() == [[3.0], [7.0]]


def test_matmul_shape_errors():
    with pytest.raises(nc.ShapeError):
        nc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(nc.ShapeError):
        nc.matmul(Tensor(np.ones((4, 2, 3))), Tensor(np.ones((5, 3, 2))))


def test_matmul_gradient_vs_finite_differences():
    rng = np.random.default_rng(0)
    a, b = param(rng.normal(size=(3, 4))), param(rng.normal(size=(4, 2)))
    f = lambda: nc.sum_all(nc.matmul(a, b))
    nc.backward(f())
    for p in (a, b):
        fd = central_grad(f, p)
        assert np.allclose(p.grad, fd, rtol=1e-6, atol=1e-9)


def test_batched_matmul_gradients():
    rng = np.random.default_rng(1)
    a, b, w = param(rng.normal(size=(2, 3, 4))), param(rng.normal(size=(2, 4, 5))), param(rng.normal(size=(5, 2)))
    f = lambda: nc.sum_all(nc.mul(nc.matmul(nc.matmul(a, b), w), Tensor(rng_fixed)))
    rng_fixed = rng.normal(size=(2, 3, 2))
    assert nc.finite_diff_check(f, [a, b, w], 1e-6) < 1e-6


def test_softmax_rows_examples():
    y = nc.softmax_rows(Tensor(np.zeros((2, 5)))).data
    assert np.allclose(y, 0.2)
    y = nc.softmax_rows(Tensor([[1000.0, 1000.0]])).data
    assert y.tolist() == [[0.5, 0.5]]


def test_softmax_mask_zeroes_entries():
    mask = np.tril(np.ones((3, 3), dtype=bool))
    y = nc.softmax_rows(Tensor(np.random.default_rng(0).normal(size=(3, 3))), mask).data
    assert np.all(y[~mask] == 0)
    assert np.allclose(y.sum(axis=-1), 1.0)


def test_softmax_jvp_vs_finite_differences():
    rng = np.random.default_rng(2)
    x = param(rng.normal(size=(4, 4)))
    v = rng.normal(size=(4, 4))
    f = lambda: nc.sum_all(nc.mul(nc.softmax_rows(x), Tensor(v)))
    nc.backward(f())
    fd = central_grad(f, x)
    assert np.max(np.abs(x.grad - fd) / np.maximum(np.abs(fd), 1e-8)) < 1e-6


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 6), elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(x):
    y = nc.softmax_rows(Tensor(x)).data
    assert np.all(np.abs(y.sum(axis=-1) - 1.0) < 1e-12)
    assert np.all((y >= 0) & (y <= 1))


def test_layer_norm_examples():
    gain, bias = Tensor(np.ones(4)), Tensor(np.zeros(4))
    out = nc.layer_norm(Tensor(np.full((1, 4), 3.0)), gain, bias).data
    assert np.allclose(out, 0.0)
    out = nc.layer_norm(Tensor([[-1.0, 1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    assert np.allclose(out, [[-1.0, 1.0]], atol=1e-5)


def test_layer_norm_gradients():
    rng = np.random.default_rng(3)
    x, g, b = param(rng.normal(size=(5, 6))), param(rng.normal(size=6)), param(rng.normal(size=6))
    w = Tensor(rng.normal(size=(5, 6)))
    f = lambda: nc.sum_all(nc.mul(nc.layer_norm(x, g, b), w))
    assert nc.finite_diff_check(f, [x, g, b], 1e-6) < 1e-5


def test_elementwise_examples():
    assert nc.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    x = np.arange(4.0)
    assert np.array_equal(nc.add(Tensor(x), Tensor(np.zeros(4))).data, x)
    with pytest.raises(nc.ShapeError):
        nc.add(Tensor(np.ones((2, 3))), Tensor(np.ones(2)))


def test_composite_expression_gradient():
    rng = np.random.default_rng(4)
    a, b, c = param(rng.normal(size=(3, 4))), param(rng.normal(size=4)), param(rng.normal(size=(3, 4)))
    f = lambda: nc.mean_all(nc.mul(nc.relu(nc.add(a, b)), nc.scale(nc.sub(c, a), 0.5)))
    assert nc.finite_diff_check(f, [a, b, c], 1e-6) < 1e-6


def test_backward_quadratic_and_independent_parameter():
    w, p = param([3.0]), param([1.0])
    nc.backward(nc.sum_all(nc.mul(w, w)))
    assert w.grad.tolist() == [6.0]
    assert p.grad.tolist() == [0.0]


def test_backward_accumulates_without_reset():
    w = param([3.0])
    nc.backward(nc.sum_all(nc.mul(w, w)))
    nc.backward(nc.sum_all(nc.mul(w, w)))
    assert w.grad.tolist() == [12.0]


def test_backward_rejects_non_scalar():
    with pytest.raises(ValueError):
        nc.backward(nc.mul(param([1.0, 2.0]), param([1.0, 2.0])))


def test_shared_subexpression_sums_paths():
    x = param([2.0])
    y = nc.mul(x, x)
    nc.backward(nc.sum_all(nc.add(y, nc.mul(y, x))))  # x^2 + x^3
    assert np.isclose(x.grad[0], 2 * 2 + 3 * 4)


def test_tape_is_in_execution_order():
    x = param([1.0, 2.0])
    a = nc.scale(x, 2.0)
    b = nc.mul(a, x)
    loss = nc.sum_all(b)
    tape = nc.Tape.from_loss(loss)
    assert [t for t in tape.nodes] == [a, b, loss]


def test_gradient_linearity():
    rng = np.random.default_rng(5)
    w = param(rng.normal(size=(4,)))
    m = Tensor(rng.normal(size=(4,)))
    fa = lambda: nc.sum_all(nc.mul(nc.relu(w), m))
    fb = lambda: nc.mean_all(nc.mul(w, w))
    alpha, beta = 0.7, -1.3
    nc.backward(fa())
    ga = w.grad.copy()
    w.zero_grad()
    nc.backward(fb())
    gb = w.grad.copy()
    w.zero_grad()
    nc.backward(nc.add(nc.scale(fa(), alpha), nc.scale(fb(), beta)))
    assert np.allclose(w.grad, alpha * ga + beta * gb, atol=1e-10)


def test_finite_diff_check_linear_and_quadratic():
    w = param(np.random.default_rng(6).normal(size=5))
    c = Tensor(np.arange(5.0))
    assert nc.finite_diff_check(lambda: nc.sum_all(nc.mul(w, c)), [w], 1e-5) < 1e-9
    assert nc.finite_diff_check(lambda: nc.sum_all(nc.mul(w, w)), [w], 1e-5) < 1e-8


def test_finite_diff_check_detects_wrong_gradient():
    w = param([0.5, -1.5])

    def broken():
        out = nc.mul(w, w)
        out._backward = lambda g: nc._accumulate(w, g * w.data)  # missing factor 2
        return nc.sum_all(out)

    assert nc.finite_diff_check(broken, [w], 1e-5, fallback_steps=(1e-4, 1e-3)) > 0.4


def test_no_grad_skips_recording():
    w = param([1.0])
    with nc.no_grad():
        out = nc.mul(w, w)
    assert out._backward is None and not out.requires_grad


def test_forward_is_deterministic():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(3, 4))
    f = lambda: nc.softmax_rows(nc.matmul(Tensor(x), Tensor(x.T))).data
    assert np.array_equal(f(), f())


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(8)
    params = {"a.weight": rng.normal(size=(3, 4)), "b": np.array([np.pi, 1e-300, -0.0])}
    nc.save_params(tmp_path / "ck.npz", params)
    back = nc.load_params(tmp_path / "ck.npz")
    assert set(back) == set(params)
    for k in params:
        assert back[k].shape == params[k].shape
        assert back[k].tobytes() == params[k].tobytes()
