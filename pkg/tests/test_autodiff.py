import numpy as np
import pytest

from pulseface.autodiff import (
    Tensor,
    avgpool3d,
    conv3d,
    dense,
    global_pool,
    gradcheck,
    no_grad,
    parameter,
    relu,
    upsample_temporal,
)
from pulseface.errors import NumericalError, ShapeError


def test_scalar_expression_gradients():
    x = parameter(3.0)
    y = parameter(-2.0)
    z = x * y + x**2 - y / x
    z.backward()
    # dz/dx = y + 2x + y/x^2, dz/dy = x - 1/x
    assert x.grad == pytest.approx(-2.0 + 6.0 - 2.0 / 9.0)
    assert y.grad == pytest.approx(3.0 - 1.0 / 3.0)


def test_broadcast_gradient_is_summed():
    x = parameter(np.ones((4, 3)))
    b = parameter(np.zeros(3))
    (x + b).sum().backward()
    np.testing.assert_allclose(b.grad, [4.0, 4.0, 4.0])
    np.testing.assert_allclose(x.grad, np.ones((4, 3)))


def test_shared_node_accumulates():
    x = parameter(2.0)
    y = x * x
    (y + y).backward()
    assert x.grad == pytest.approx(8.0)


def test_relu_backward_masks_negatives():
    x = parameter([-1.0, 0.5, 2.0])
    relu(x).sum().backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 1.0])


def test_no_grad_builds_no_graph():
    x = parameter([1.0, 2.0])
    with no_grad():
        y = (x * 3.0).sum()
    assert not y.requires_grad
    assert y.ctx is None


def test_backward_requires_scalar_or_explicit_gradient():
    x = parameter([1.0, 2.0])
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_division_by_zero_is_numerical_error():
    with pytest.raises(NumericalError):
        parameter([1.0]) / Tensor([0.0])


def test_sqrt_of_negative_is_numerical_error():
    with pytest.raises(NumericalError):
        parameter([-1.0]).sqrt()


def test_shape_mismatch_is_reported():
    with pytest.raises(ShapeError):
        parameter(np.ones(3)) + parameter(np.ones(4))
    with pytest.raises(ShapeError):
        parameter(np.ones((2, 3))) @ parameter(np.ones((2, 3)))


def test_gradcheck_elementwise(rng):
    a = parameter(rng.uniform(0.5, 1.5, (3, 4)))
    b = parameter(rng.normal(size=(4,)))

    def fn(a, b):
        return ((a * b - b / a) ** 2).mean() + (a + 1.0).sqrt().sum()

    assert gradcheck(fn, [a, b]) < 1e-6


def test_gradcheck_dense(rng):
    x = parameter(rng.normal(size=(5, 4)))
    w = parameter(rng.normal(size=(4, 3)))
    b = parameter(rng.normal(size=(3,)))
    assert gradcheck(lambda x, w, b: (dense(x, w, b) ** 2).sum(), [x, w, b]) < 1e-6


@pytest.mark.parametrize("padding", [0, 1, (1, 0, 0)])
def test_gradcheck_conv3d(rng, padding):
    x = parameter(rng.normal(size=(2, 2, 4, 5, 5)))
    w = parameter(rng.normal(size=(3, 2, 3, 3, 3)) * 0.3)
    b = parameter(rng.normal(size=(3,)))
    if padding == (1, 0, 0):
        w = parameter(rng.normal(size=(3, 2, 3, 1, 1)))
    assert gradcheck(lambda x, w, b: (conv3d(x, w, b, padding) ** 2).mean(), [x, w, b]) < 1e-6


def test_gradcheck_pool_upsample_and_global_pool(rng):
    x = parameter(rng.normal(size=(1, 2, 4, 5, 5)))

    def fn(x):
        pooled = avgpool3d(x, (2, 2, 2))
        return (global_pool(upsample_temporal(pooled, 2) ** 2)).sum()

    assert gradcheck(fn, [x]) < 1e-6


def test_identity_kernel_reproduces_input(rng):
    x = Tensor(rng.normal(size=(1, 1, 4, 6, 6)))
    w = np.zeros((1, 1, 3, 3, 3))
    w[0, 0, 1, 1, 1] = 1.0
    out = conv3d(x, Tensor(w), Tensor(np.zeros(1)), padding=1)
    np.testing.assert_allclose(out.numpy(), x.numpy())


def test_conv3d_output_shape_without_padding():
    out = conv3d(Tensor(np.ones((2, 3, 6, 8, 8))), Tensor(np.ones((4, 3, 3, 3, 3))), Tensor(np.zeros(4)))
    assert out.shape == (2, 4, 4, 6, 6)
    np.testing.assert_allclose(out.numpy(), 81.0)


def test_avgpool_drops_remainder():
    out = avgpool3d(Tensor(np.arange(2 * 5 * 5, dtype=float).reshape(1, 1, 2, 5, 5)), (1, 2, 2))
    assert out.shape == (1, 1, 2, 2, 2)
    assert out.numpy()[0, 0, 0, 0, 0] == pytest.approx((0 + 1 + 5 + 6) / 4)


def test_conv3d_matches_torch(rng):
    torch = pytest.importorskip("torch")
    x = rng.normal(size=(2, 3, 5, 6, 6))
    w = rng.normal(size=(4, 3, 3, 3, 3))
    b = rng.normal(size=(4,))
    ours = conv3d(Tensor(x), Tensor(w), Tensor(b), padding=1).numpy()
    ref = torch.nn.functional.conv3d(
        torch.from_numpy(x), torch.from_numpy(w), torch.from_numpy(b), padding=1
    ).numpy()
    np.testing.assert_allclose(ours, ref, atol=1e-10)


def test_conv3d_gradients_match_torch(rng):
    torch = pytest.importorskip("torch")
    x = rng.normal(size=(1, 2, 4, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3, 3))
    b = rng.normal(size=(3,))

    tx, tw, tb = parameter(x), parameter(w), parameter(b)
    (conv3d(tx, tw, tb, padding=1) ** 2).sum().backward()

    rx, rw, rb = (torch.tensor(v, requires_grad=True) for v in (x, w, b))
    (torch.nn.functional.conv3d(rx, rw, rb, padding=1) ** 2).sum().backward()
    np.testing.assert_allclose(tx.grad, rx.grad.numpy(), rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(tw.grad, rw.grad.numpy(), rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(tb.grad, rb.grad.numpy(), rtol=1e-9, atol=1e-9)


def test_avgpool_matches_torch(rng):
    torch = pytest.importorskip("torch")
    x = rng.normal(size=(1, 2, 4, 7, 7))
    ours = avgpool3d(Tensor(x), (2, 2, 2)).numpy()
    ref = torch.nn.functional.avg_pool3d(torch.from_numpy(x), (2, 2, 2)).numpy()
    np.testing.assert_allclose(ours, ref, atol=1e-12)
