import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from popinv import autodiff as ad
from popinv.autodiff import Tape, Variable
from popinv.errors import ContractViolation

from oracles import assert_grads_match, tape_value_and_grads


def test_record_arithmetic_identities():
    x = Variable(2.0)
    y = Variable(3.0)
    assert float(ad.add(x, y).value) == 5.0
    assert float(ad.exp(Variable(0.0)).value) == 1.0
    out = ad.matmul(Variable(np.eye(3)), Variable([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(out.value, [1.0, 2.0, 3.0])


def test_shape_mismatch_raises():
    with pytest.raises(ContractViolation):
        ad.matmul(Variable(np.ones((2, 3))), Variable(np.ones((2, 3))))
    with pytest.raises(ContractViolation):
        ad.dot(Variable(np.ones(3)), Variable(np.ones(4)))


def test_detach_freezes_factor():
    x = Variable(3.0, requires_grad=True)
    with Tape() as tape:
        loss = ad.mul(x, ad.detach(x))
        tape.backward(loss)
    assert float(x.grad) == pytest.approx(3.0)


def test_detach_alone_has_zero_gradient():
    x = Variable(3.0, requires_grad=True)
    with Tape() as tape:
        loss = ad.mul(ad.detach(x), 2.0)
        grads = tape.backward(loss)
    assert x not in grads
    assert x.grad is None
    assert float(loss.value) == 6.0


def test_detach_preserves_value_and_is_idempotent():
    x = Variable(np.array([1.5, -2.0]), requires_grad=True)
    d1 = ad.detach(x)
    d2 = ad.detach(d1)
    np.testing.assert_array_equal(d1.value, x.value)
    np.testing.assert_array_equal(d2.value, x.value)
    assert d1.detached and d2.detached
    for d in (d1, d2):
        y = Variable(2.0, requires_grad=True)
        with Tape() as tape:
            loss = ad.vsum(ad.mul(d, y))
            tape.backward(loss)
        assert x.grad is None
        assert float(y.grad) == pytest.approx(-0.5)


def test_backward_square():
    x = Variable(3.0, requires_grad=True)
    with Tape() as tape:
        tape.backward(ad.mul(x, x))
    assert float(x.grad) == pytest.approx(6.0)


def test_backward_requires_scalar_loss():
    x = Variable(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ad.mul(x, 2.0)
        with pytest.raises(ContractViolation):
            tape.backward(y)


def test_sort_routes_through_permutation():
    v = Variable(np.array([2.0, 1.0]), requires_grad=True)
    w = np.array([10.0, 20.0])
    with Tape() as tape:
        loss = ad.vsum(ad.mul(ad.sort(v), w))
        tape.backward(loss)
    np.testing.assert_allclose(v.grad, [20.0, 10.0])


def test_sort_is_stable_on_ties():
    v = np.array([1.0, 1.0, 0.5])
    perm = np.argsort(v, kind="stable")
    np.testing.assert_array_equal(perm, [2, 0, 1])
    var = Variable(v, requires_grad=True)
    w = np.array([100.0, 10.0, 1.0])
    with Tape() as tape:
        tape.backward(ad.vsum(ad.mul(ad.sort(var), w)))
    np.testing.assert_allclose(var.grad, [10.0, 1.0, 100.0])


def test_quadratic_minimum_zero_gradient():
    a = Variable(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    b = np.array([1.0, 2.0, 3.0])
    with Tape() as tape:
        tape.backward(ad.vmean(ad.power(ad.sub(a, b), 2.0)))
    np.testing.assert_allclose(a.grad, np.zeros(3), atol=1e-15)


def test_adjoint_linearity():
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=5)

    def f(v):
        return ad.vsum(ad.mul(v["x"], v["x"]))

    def g(v):
        return ad.vsum(ad.exp(ad.mul(v["x"], 0.3)))

    a, b = 2.5, -1.25
    _, gf = tape_value_and_grads(f, {"x": x0})
    _, gg = tape_value_and_grads(g, {"x": x0})
    _, gc = tape_value_and_grads(lambda v: ad.add(ad.mul(f(v), a), ad.mul(g(v), b)), {"x": x0})
    np.testing.assert_allclose(gc["x"], a * gf["x"] + b * gg["x"], atol=1e-12)


def test_fd_agreement_primitive_chain():
    rng = np.random.default_rng(1)
    for trial in range(10):
        x = rng.uniform(0.5, 1.5, size=6)
        y = rng.uniform(0.5, 1.5, size=6)
        W = rng.normal(size=(4, 6)) * 0.5

        def loss(v):
            u = ad.div(ad.mul(v["x"], v["y"]), ad.add(v["y"], 2.0))
            u = ad.add(ad.sqrt(ad.add(u, 1.0)), ad.log(v["x"]))
            u = ad.gelu(ad.sub(ad.cos(u), 0.2))
            w = ad.matmul(W, u)
            s = ad.sort(w)
            return ad.add(
                ad.vmean(ad.power(s, 2.0)),
                ad.add(ad.vsum(ad.vabs(v["y"]), axis=None), ad.mul(ad.amax(w), 0.1)),
            )

        assert_grads_match(loss, {"x": x, "y": y})


def test_fd_agreement_matrix_ops():
    rng = np.random.default_rng(2)
    for trial in range(5):
        A = rng.normal(size=(3, 4))
        B = rng.normal(size=(4, 2))

        def loss(v):
            m = ad.matmul(v["A"], v["B"])
            t = ad.matmul(ad.transpose(m), m)
            return ad.add(ad.vsum(t), ad.vsum(ad.vmean(ad.power(m, 2.0), axis=0)))

        assert_grads_match(loss, {"A": A, "B": B})


def test_fd_agreement_reductions_axes():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(5, 3))

    def loss(v):
        col_mean = ad.vmean(v["X"], axis=0)
        row_sum = ad.vsum(v["X"], axis=1)
        return ad.add(ad.vsum(ad.power(col_mean, 2.0)), ad.vmean(ad.power(row_sum, 2.0)))

    assert_grads_match(loss, {"X": X})


def test_fd_agreement_gather_and_select():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(6, 3))
    idx = np.array([0, 2, 2, 5])

    def loss(v):
        g = ad.take(v["X"], idx, axis=0)
        return ad.add(ad.vsum(ad.power(g, 2.0)), ad.select(ad.vsum(g, axis=1), 1))

    assert_grads_match(loss, {"X": X})


def test_fd_agreement_scatter_and_eig():
    rng = np.random.default_rng(5)
    d = 4
    rows, cols = np.tril_indices(d)
    vals = rng.normal(size=rows.size) * 0.3 + np.where(rows == cols, 1.5, 0.0)

    def loss(v):
        L = ad.scatter_matrix(v["vals"], rows, cols, (d, d))
        gamma = ad.matmul(L, ad.transpose(L))
        ext = ad.eig_extremes(gamma)
        return ad.div(ad.select(ext, 1), ad.select(ext, 0))

    assert_grads_match(loss, {"vals": vals})


def test_eig_extremes_values():
    g = np.diag([4.0, 1.0, 2.5])
    out = ad.eig_extremes(Variable(g))
    np.testing.assert_allclose(out.value, [1.0, 4.0])


def test_sort_first_order_prediction():
    rng = np.random.default_rng(6)
    x = rng.normal(size=8)
    w = rng.normal(size=8)

    def loss(v):
        return ad.vsum(ad.mul(ad.sort(v["x"]), w))

    val0, grads = tape_value_and_grads(loss, {"x": x})
    direction = rng.normal(size=8)
    eps = 1e-7
    perm0 = np.argsort(x, kind="stable")
    perm1 = np.argsort(x + eps * direction, kind="stable")
    np.testing.assert_array_equal(perm0, perm1)
    val1, _ = tape_value_and_grads(loss, {"x": x + eps * direction})
    predicted = eps * float(grads["x"] @ direction)
    assert val1 - val0 == pytest.approx(predicted, rel=1e-6, abs=1e-12)


def test_gelu_matches_gaussian_cdf_form():
    from scipy.special import erf

    x = np.linspace(-3, 3, 31)
    out = ad.gelu(Variable(x))
    np.testing.assert_allclose(out.value, x * 0.5 * (1 + erf(x / np.sqrt(2))), atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=9))
def test_sort_permutation_property(values):
    x = np.asarray(values, dtype=float)
    w = np.arange(1.0, x.size + 1.0)

    def loss(v):
        return ad.vsum(ad.mul(ad.sort(v["x"]), w))

    _, grads = tape_value_and_grads(loss, {"x": x})
    perm = np.argsort(x, kind="stable")
    expected = np.empty_like(x)
    expected[perm] = w
    np.testing.assert_allclose(grads["x"], expected)


def test_sort_adjoint_fault_hook_breaks_gradients():
    x = np.array([3.0, 1.0, 2.0])
    w = np.array([1.0, 2.0, 3.0])

    def loss(v):
        return ad.vsum(ad.mul(ad.sort(v["x"]), w))

    ad._SORT_ADJOINT_FAULT = True
    try:
        with pytest.raises(AssertionError):
            assert_grads_match(loss, {"x": x})
    finally:
        ad._SORT_ADJOINT_FAULT = False
    assert_grads_match(loss, {"x": x})


def test_concurrent_tapes_are_disjoint():
    import threading

    errs = []

    def worker(seed):
        try:
            rng = np.random.default_rng(seed)
            x0 = rng.normal(size=20)
            x = Variable(x0, requires_grad=True)
            for _ in range(50):
                with Tape() as tape:
                    tape.backward(ad.vsum(ad.mul(x, x)))
                np.testing.assert_allclose(x.grad, 2 * x0, atol=1e-12)
        except Exception as e:  # noqa: BLE001
            errs.append(e)

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errs
