import numpy as np
import pytest

from lvnc.errors import ContractError, DimensionError
from lvnc.tensor import (Tape, Tensor, add, backward, concat_channels, conv2d, finite_diff_grad,
                         maxpool2, mean_all, mul, relu, scale, softmax_channels, sum_all, upsample2)
from oracles import naive_conv2d


def _check_grad(build, shape, seed=0, tol=1e-6):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal(shape), requires_grad=True)
    w = rng.standard_normal(build(x).shape)

    def f(t):
        return float((build(t).data * w).sum())

    with Tape() as tape:
        out = build(x)
        loss = sum_all(mul(out, Tensor(w)))
    backward(tape, loss, [x])
    np.testing.assert_allclose(x.grad, finite_diff_grad(f, x), rtol=tol, atol=1e-8)


@pytest.mark.parametrize("padding,k", [(0, 3), (1, 3), (0, 1), (2, 3)])
def test_conv2d_forward_matches_loops(padding, k):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 6, 5))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b), padding)
    np.testing.assert_allclose(out.data, naive_conv2d(x, w, b, padding), rtol=1e-12, atol=1e-12)


def test_conv2d_gradients():
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((2, 2, 5, 5)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal(3), requires_grad=True)
    target = rng.standard_normal((2, 3, 5, 5))

    def loss_value():
        return float((naive_conv2d(x.data, w.data, b.data, 1) * target).sum())

    with Tape() as tape:
        loss = sum_all(mul(conv2d(x, w, b, 1), Tensor(target)))
    backward(tape, loss, [x, w, b])
    for t in (x, w, b):
        np.testing.assert_allclose(t.grad, finite_diff_grad(lambda _: loss_value(), t),
                                   rtol=1e-6, atol=1e-8)


def test_conv2d_rejects_channel_mismatch():
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)), 1)


def test_elementwise_and_shape_op_gradients():
    _check_grad(lambda t: relu(t), (2, 3, 4, 4), seed=3)
    _check_grad(lambda t: upsample2(t), (1, 2, 3, 3), seed=4)
    _check_grad(lambda t: softmax_channels(t), (2, 4, 3, 3), seed=5)
    _check_grad(lambda t: concat_channels(t, scale(t, 2.0)), (1, 2, 2, 2), seed=6)
    _check_grad(lambda t: add(mul(t, t), t), (3, 3), seed=7)


def test_maxpool_gradient_without_ties():
    _check_grad(lambda t: maxpool2(t), (2, 2, 4, 6), seed=8)


def test_maxpool_tie_goes_to_first_in_row_major_order():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with Tape() as tape:
        loss = sum_all(maxpool2(x))
    backward(tape, loss, [x])
    assert x.grad.tolist() == [[[[1.0, 0.0], [0.0, 0.0]]]]


def test_maxpool_odd_size_rejected():
    with pytest.raises(DimensionError):
        maxpool2(Tensor(np.zeros((1, 1, 3, 4))))


def test_softmax_sums_to_one_and_is_stable():
    x = Tensor(np.array([[[[1000.0]], [[1001.0]], [[-1000.0]]]]))
    p = softmax_channels(x).data
    assert np.isfinite(p).all()
    assert p.sum() == pytest.approx(1.0)
    assert p[0, 1, 0, 0] == pytest.approx(1 / (1 + np.exp(-1)))


def test_nothing_recorded_outside_tape_or_without_grad():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    y = relu(x)
    assert not y.requires_grad
    with Tape() as tape:
        relu(Tensor(np.ones((2, 2))))
    assert len(tape) == 0


def test_backward_requires_scalar_loss():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = relu(x)
    with pytest.raises(ContractError):
        backward(tape, y, [x])


def test_unreachable_parameter_gets_zero_gradient_and_reuse_accumulates():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    unused = Tensor(np.ones(4), requires_grad=True)
    with Tape() as tape:
        # x used twice: d/dx (sum(x) + mean(x)) = 1 + 1/3
        loss = add(sum_all(x), mean_all(x))
    backward(tape, loss, [x, unused])
    np.testing.assert_allclose(x.grad, np.full(3, 1 + 1 / 3))
    assert unused.grad.tolist() == [0.0] * 4


def test_tape_is_thread_local():
    import threading

    x = Tensor(np.ones(3), requires_grad=True)
    seen = []
    with Tape() as tape:
        t = threading.Thread(target=lambda: seen.append(relu(x).requires_grad))
        t.start()
        t.join()
    assert seen == [False]
    assert len(tape) == 0


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ContractError):
        finite_diff_grad(lambda t: 0.0, Tensor(np.zeros(1)), h=0.0)
