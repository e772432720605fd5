import numpy as np
import pytest

from sgdpo import autodiff as ad
from sgdpo.autodiff import Tensor


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def test_constant_graph():
    assert ad.forward(ad.add(Tensor(2.0), Tensor(3.0))) == 5.0


def test_identity_matmul():
    v = np.arange(4.0)
    assert np.array_equal(ad.forward(Tensor(np.eye(4)) @ Tensor(v)), v)


def test_softmax_rows_normalised():
    x = Tensor(np.random.default_rng(0).normal(size=(5, 7)) * 10)
    assert np.abs(ad.softmax(x).data.sum(-1) - 1).max() < 1e-12


def test_square_derivative():
    x = leaf(3.0)
    ad.backward(x * x)
    assert x.grad == pytest.approx(6.0)


def test_log_sigmoid_derivative_at_zero():
    x = leaf(0.0)
    ad.backward(ad.log_sigmoid(x))
    assert x.grad == pytest.approx(0.5)


def test_log_sigmoid_stable_in_tails():
    x = leaf([-1000.0, 1000.0])
    y = ad.log_sigmoid(x)
    assert np.isfinite(y.data).all()
    ad.backward(y.sum())
    assert x.grad == pytest.approx([1.0, 0.0])


def test_non_scalar_root_rejected():
    with pytest.raises(ValueError):
        ad.backward(leaf([1.0, 2.0]) * 2.0)


def test_shape_mismatch_raised_at_construction():
    with pytest.raises(ad.ShapeError):
        leaf(np.ones(3)) + leaf(np.ones(4))
    with pytest.raises(ad.ShapeError):
        leaf(np.ones((2, 3))) @ leaf(np.ones((2, 3)))


def test_stop_gradient_blocks_adjoint():
    x = leaf(2.0)
    y = x * ad.stop_gradient(x * x)
    assert y.data == 8.0
    ad.backward(y)
    assert x.grad == pytest.approx(4.0)  # only the direct factor


def test_stop_gradient_only_path_gives_zero():
    a, b = leaf(1.5), leaf(0.5)
    loss = ad.log_sigmoid(a - ad.stop_gradient(b * 3.0))
    ad.backward(loss)
    assert b.grad is None or b.grad == 0.0
    assert a.grad != 0.0


def test_log_softmax_gather_gradient_closed_form():
    rng = np.random.default_rng(1)
    logits = leaf(rng.normal(size=(3, 6)))
    idx = np.array([0, 5, 2])
    ad.backward(ad.gather(ad.log_softmax(logits), idx).sum())
    soft = np.exp(logits.data) / np.exp(logits.data).sum(-1, keepdims=True)
    expected = np.eye(6)[idx] - soft
    assert np.abs(logits.grad - expected).max() < 1e-14


def test_quadratic_grad_check():
    x0 = np.linspace(-1, 1, 10)
    a = np.arange(1.0, 11.0)
    rep = ad.grad_check(lambda p: (Tensor(a) * p["x"] * p["x"]).sum(), x0, tol=1e-9)
    assert rep.passed, rep
    assert rep.max_rel_err < 1e-9


def test_three_layer_network_grad_check():
    rng = np.random.default_rng(2)
    params = {
        "w1": rng.normal(size=(4, 6)),
        "w2": rng.normal(size=(6, 5)) * 0.5,
        "w3": rng.normal(size=(5, 3)) * 0.5,
        "b": rng.normal(size=3),
    }
    x = Tensor(rng.normal(size=(8, 4)))
    tgt = rng.integers(0, 3, 8)

    def loss(p):
        h = ad.tanh(x @ p["w1"])
        h = ad.gelu(h @ p["w2"])
        out = ad.log_softmax(h @ p["w3"] + p["b"])
        return -ad.mean(ad.gather(out, tgt))

    rep = ad.grad_check(loss, params, tol=1e-6, max_coords=None)
    assert rep.passed, rep
    assert rep.n_checked == sum(v.size for v in params.values())


def test_grad_check_samples_at_least_64():
    x0 = np.random.default_rng(0).normal(size=500)
    rep = ad.grad_check(lambda p: (p["x"] ** 3).sum(), x0, max_coords=10)
    assert rep.n_checked == 64


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_reports_nonfinite_loss():
    rep = ad.grad_check(lambda p: ad.log(p["x"]).sum(), np.array([-1.0, 2.0]))
    assert not rep.passed
    assert rep.nonfinite


def test_grad_check_flags_wrong_gradient():
    def wrong(p):
        # forward is x^2, backward pretends 3x
        x = p["x"]
        return ad._node((x.data**2).sum(), (x,), lambda g: (g * 3 * x.data,), "bad")

    rep = ad.grad_check(wrong, np.array([1.0, 2.0]))
    assert not rep.passed


def test_broadcast_gradients_reduce():
    a = leaf(np.ones((3, 4)))
    b = leaf(np.ones(4))
    ad.backward(((a * b) + b).sum())
    assert b.grad == pytest.approx(np.full(4, 6.0))


def test_getitem_and_stack_gradients():
    x = leaf(np.arange(6.0).reshape(2, 3))
    y = ad.stack([x[0, 1:], x[1, [0, 0]]]).sum()
    ad.backward(y)
    assert np.array_equal(x.grad, [[0, 1, 1], [2, 0, 0]])


def test_no_grad_builds_no_graph():
    x = leaf(1.0)
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_backward_is_deterministic():
    rng = np.random.default_rng(3)
    w0 = rng.normal(size=(5, 5))
    grads = []
    for _ in range(2):
        w = leaf(w0.copy())
        ad.backward(ad.log_softmax(w @ w).sum() * 0.3)
        grads.append(w.grad.tobytes())
    assert grads[0] == grads[1]


def test_ndarray_left_operand_dispatches_to_tensor():
    x = leaf(np.ones(3))
    y = np.full(3, 2.0) - x
    assert isinstance(y, Tensor)
    ad.backward(y.sum())
    assert np.array_equal(x.grad, -np.ones(3))
