import numpy as np
import pytest

from tinypeft import autodiff as ad
from tinypeft.autodiff import ComputeGraph, Tensor, grad_check
from tinypeft.errors import ContractError, DimensionError


def test_matmul_identity():
    a = Tensor([[1.0, 0.0], [0.0, 1.0]])
    b = Tensor([[3.0, 4.0], [5.0, 6.0]])
    assert np.array_equal(ad.matmul(a, b).data, b.data)


def test_matmul_zero_operand():
    a = Tensor([[1.0, 2.0]])
    b = Tensor([[0.0], [0.0]])
    assert np.array_equal(ad.matmul(a, b).data, [[0.0]])


def test_matmul_shape_mismatch_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 2)))

    def f():
        return ad.sum_all(ad.mul(ad.matmul(a, b), w))

    assert grad_check(f, [a, b], h=1e-5) < 1e-6


def test_softmax_symmetry():
    y = ad.softmax_rows(Tensor([[0.0, 0.0]]))
    assert np.array_equal(y.data, [[0.5, 0.5]])


def test_softmax_stabilized_no_overflow():
    y = ad.softmax_rows(Tensor([[1000.0, 0.0]]))
    assert np.all(np.isfinite(y.data))
    assert y.data[0, 0] > 1.0 - 1e-12
    assert y.data[0, 1] < 1e-12


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(1)
    y = ad.softmax_rows(Tensor(rng.standard_normal((5, 7)) * 5))
    assert np.max(np.abs(y.data.sum(axis=1) - 1.0)) < 1e-12


def test_grad_check_quadratic():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    x.data = x.data.reshape(1, 3)

    def f():
        return ad.sum_all(ad.mul(x, x))

    assert grad_check(f, [x], h=1e-5) < 1e-8
    assert np.allclose(x.grad, [[2.0, 4.0, 6.0]])


def test_grad_check_constant_function():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    c = Tensor(np.full((1, 1), 7.0))

    def f():
        return ad.sum_all(c)

    assert grad_check(f, [x], h=1e-5) == 0.0
    assert x.grad is None or not np.any(x.grad)


def test_grad_check_rejects_nonscalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ContractError):
        grad_check(lambda: ad.mul(x, x), [x])


def _rand(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _op_cases(rng):
    """One scalar-valued closure per differentiable op, on dims <= 8."""
    a = _rand(rng, 4, 5)
    b = _rand(rng, 4, 5)
    bias = _rand(rng, 5)
    m1 = _rand(rng, 3, 6)
    m2 = _rand(rng, 6, 4)
    gamma = _rand(rng, 6)
    beta = _rand(rng, 6)
    x = _rand(rng, 5, 6)
    table = _rand(rng, 7, 4)
    ids = np.array([0, 3, 3, 6, 1])
    wd = _rand(rng, 6, 2)
    wu = Tensor(rng.standard_normal((2, 6)) * 0.3, requires_grad=True)
    logits = _rand(rng, 5, 6)
    targets = np.array([1, 4, 0, 2, 5])
    mix = Tensor(rng.standard_normal((5, 6)))
    w45 = Tensor(rng.standard_normal((4, 5)))
    w34 = Tensor(rng.standard_normal((3, 4)))
    w63 = Tensor(rng.standard_normal((6, 3)))
    w54 = Tensor(rng.standard_normal((5, 4)))
    w85 = Tensor(rng.standard_normal((8, 5)))
    w4_10 = Tensor(rng.standard_normal((4, 10)))
    w53 = Tensor(rng.standard_normal((5, 3)))
    w56 = Tensor(rng.standard_normal((5, 6)))

    def weighted(t, w):
        return ad.sum_all(ad.mul(t, w))

    return [
        ("add", lambda: weighted(ad.add(a, b), w45), [a, b]),
        ("add_bias", lambda: weighted(ad.add_bias(a, bias), w45), [a, bias]),
        ("mul", lambda: ad.sum_all(ad.mul(a, b)), [a, b]),
        ("scale", lambda: ad.sum_all(ad.scale(a, -1.7)), [a]),
        ("matmul", lambda: weighted(ad.matmul(m1, m2), w34), [m1, m2]),
        ("transpose", lambda: weighted(ad.transpose(m1), w63), [m1]),
        ("reshape", lambda: weighted(ad.reshape(a, (5, 4)), w54), [a]),
        ("concat0", lambda: weighted(ad.concat([a, b], 0), w85), [a, b]),
        ("concat1", lambda: weighted(ad.concat([a, b], 1), w4_10), [a, b]),
        ("narrow", lambda: weighted(ad.narrow(x, 1, 2, 3), w53), [x]),
        ("gather", lambda: weighted(ad.gather_rows(table, ids), w54), [table]),
        ("relu", lambda: weighted(ad.relu(x), w56), [x]),
        ("layer_norm", lambda: weighted(ad.layer_norm(x, gamma, beta), w56), [x, gamma, beta]),
        ("softmax", lambda: weighted(ad.softmax_rows(x), mix), [x]),
        ("cross_entropy", lambda: ad.scale(ad.cross_entropy_logits(logits, targets, ignore_id=0)[0], 0.25), [logits]),
        ("lowrank_linear", lambda: weighted(ad.lowrank_delta(x, wd, wu, False), mix), [x, wd, wu]),
        ("lowrank_relu", lambda: weighted(ad.lowrank_delta(x, wd, wu, True), mix), [x, wd, wu]),
        ("sum_mean", lambda: ad.mean_all(ad.mul(a, a)), [a]),
    ]


def test_every_op_passes_grad_check():
    rng = np.random.default_rng(7)
    for name, f, params in _op_cases(rng):
        err = grad_check(f, params, h=1e-5)
        assert err < 1e-4, f"{name}: max relative error {err:.3e}"


def test_shared_subexpression_gradients_accumulate():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 3)))

    def f():
        h = ad.matmul(x, x)  # x used twice
        return ad.sum_all(ad.mul(ad.add(h, x), w))

    assert grad_check(f, [x], h=1e-5) < 1e-6


def test_gather_scatter_accumulates_repeated_ids():
    table = Tensor(np.zeros((4, 2)), requires_grad=True)
    ids = np.array([2, 2, 2])
    with ComputeGraph() as g:
        out = ad.sum_all(ad.gather_rows(table, ids))
        g.backward(out)
    assert np.array_equal(table.grad, [[0, 0], [0, 0], [3, 3], [0, 0]])


def test_dropout_eval_is_identity_bit_exact():
    x = Tensor(np.random.default_rng(0).standard_normal((4, 4)))
    assert ad.dropout(x, 0.5, training=False) is x
    assert ad.dropout(x, 0.0, rng=np.random.default_rng(0), training=True) is x


def test_dropout_deterministic_given_seed():
    x = Tensor(np.ones((8, 8)))
    y1 = ad.dropout(x, 0.4, rng=np.random.default_rng(5), training=True)
    y2 = ad.dropout(x, 0.4, rng=np.random.default_rng(5), training=True)
    assert np.array_equal(y1.data, y2.data)
    kept = y1.data[y1.data != 0]
    assert np.allclose(kept, 1.0 / 0.6)


def test_dropout_gradient():
    rng = np.random.default_rng(9)
    x = Tensor(rng.standard_normal((4, 4)), requires_grad=True)

    def f():
        # fresh generator per call so the mask is identical across evaluations
        return ad.sum_all(ad.dropout(x, 0.3, rng=np.random.default_rng(11), training=True))

    assert grad_check(f, [x], h=1e-5) < 1e-6


def test_backward_requires_scalar_root():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with ComputeGraph() as g:
        y = ad.mul(x, x)
        with pytest.raises(ContractError):
            g.backward(y)


def test_no_recording_outside_graph():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    y = ad.mul(x, x)
    assert y.requires_grad is False


def test_ops_produce_finite_values_on_finite_inputs():
    rng = np.random.default_rng(13)
    x = Tensor(rng.standard_normal((6, 6)) * 1e3)
    for t in (ad.softmax_rows(x), ad.layer_norm(x, Tensor(np.ones(6)), Tensor(np.zeros(6)))):
        assert np.all(np.isfinite(t.data))
