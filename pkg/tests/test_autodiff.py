import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from granet import autodiff as ad
from granet.autodiff import Tensor, finite_diff_check
from granet.errors import ContractError, DimensionError, NumericError
from granet.nn import SharedMLP


def leaf(a):
    return Tensor(a, requires_grad=True)


def test_matmul_identity_and_hand_case():
    eye = Tensor(np.eye(2))
    np.testing.assert_array_equal(ad.matmul(eye, eye).data, np.eye(2))
    out = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_grad_is_b_transpose_broadcast():
    rng = np.random.default_rng(0)
    a = leaf(rng.normal(size=(3, 4)))
    b = Tensor(rng.normal(size=(4, 2)))
    ad.sum(ad.matmul(a, b)).backward()
    np.testing.assert_allclose(a.grad, np.tile(b.data.sum(axis=1), (3, 1)))
    assert finite_diff_check(lambda x: ad.sum(ad.matmul(x, b)), a) < 1e-8


def test_activation_examples():
    np.testing.assert_array_equal(ad.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    assert ad.sigmoid(ad.relu(Tensor([0.0]))).data[0] == 0.5
    np.testing.assert_array_equal(ad.relu(Tensor([-3.2, 3.2])).data, [0.0, 3.2])


@pytest.mark.parametrize("fn", [ad.relu, ad.sigmoid, ad.softmax])
def test_activations_reject_non_finite(fn):
    with pytest.raises(NumericError):
        fn(Tensor([1.0, np.nan]))


def test_softmax_axis_out_of_range():
    with pytest.raises(ContractError):
        ad.softmax(Tensor(np.zeros((2, 2))), axis=2)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 5), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    s = ad.softmax(Tensor(x), axis=1).data
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 16, elements=st.floats(-1e6, 1e6)))
def test_sigmoid_strictly_inside_unit_interval(x):
    s = ad.sigmoid(Tensor(x)).data
    assert np.all(s > 0) and np.all(s < 1)


def test_structural_examples():
    c = ad.concat([Tensor([[1.0], [2.0]]), Tensor([[3.0], [4.0]])], axis=1)
    np.testing.assert_array_equal(c.data, [[1, 3], [2, 4]])

    x = leaf([1.0, 5.0, 2.0])
    m = ad.max_pool(x, axis=0)
    assert m.item() == 5.0
    m.backward()
    np.testing.assert_array_equal(x.grad, [0, 1, 0])

    s = ad.scale_rows(Tensor(np.ones((2, 3))), Tensor([2.0, 0.0]))
    np.testing.assert_array_equal(s.data, [[2, 2, 2], [0, 0, 0]])


def test_max_pool_tie_goes_to_lowest_index():
    x = leaf([3.0, 1.0, 3.0])
    ad.max_pool(x, axis=0).backward()
    np.testing.assert_array_equal(x.grad, [1, 0, 0])


def test_shape_mismatches_raise():
    with pytest.raises(DimensionError):
        ad.concat([Tensor(np.zeros((2, 1))), Tensor(np.zeros((3, 1)))], axis=1)
    with pytest.raises(DimensionError):
        ad.scale_rows(Tensor(np.zeros((2, 3))), Tensor(np.zeros(3)))
    with pytest.raises(DimensionError):
        ad.add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))


def test_backward_examples():
    w = leaf([1.0, 2.0, 3.0])
    ad.sum(w).backward()
    np.testing.assert_array_equal(w.grad, [1, 1, 1])

    w = leaf([1.0, 2.0])
    (ad.sum(ad.mul(w, w)) * 0.5).backward()
    np.testing.assert_array_equal(w.grad, [1, 2])


def test_backward_rejects_non_scalar():
    with pytest.raises(ContractError):
        ad.backward(ad.relu(leaf([1.0, 2.0])))


def test_backward_is_deterministic():
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=(6, 4))
    grads = []
    for _ in range(2):
        mlp = SharedMLP(4, 5, np.random.default_rng(1))
        x = leaf(x0)
        ad.sum(ad.softmax(mlp(x), axis=1)).backward()
        grads.append(x.grad.copy())
    assert np.array_equal(grads[0], grads[1])


def test_record_is_topologically_ordered():
    a = leaf([1.0, 2.0])
    b = ad.relu(a)
    c = ad.sum(ad.add(b, ad.mul(b, a)))
    rec = ad.ComputationRecord.trace(c)
    pos = {id(n): k for k, n in enumerate(rec.nodes)}
    for entry in rec.entries():
        for inp in entry.inputs:
            assert pos[inp] < pos[entry.output]


def test_finite_diff_linear_is_exact():
    x = leaf(np.random.default_rng(0).normal(size=(3, 3)))
    assert finite_diff_check(ad.sum, x) <= 1e-10


def test_finite_diff_sigmoid_relu_chain():
    x = leaf(np.random.default_rng(1).normal(size=10))
    assert finite_diff_check(lambda t: ad.sum(ad.sigmoid(ad.relu(t))), x) <= 1e-4


def test_finite_diff_detects_corrupted_backward():
    def bad_square(t):
        return ad._result(t.data**2, (t,), lambda g: (g * t.data,), "bad_square")  # missing factor 2

    x = leaf(np.linspace(1.0, 3.0, 5))
    assert finite_diff_check(lambda t: ad.sum(bad_square(t)), x) > 1e-2


def test_shared_mlp_zero_and_identity():
    x = Tensor(np.abs(np.random.default_rng(0).normal(size=(5, 3))) + 0.1)
    zero = SharedMLP(3, 4, rng=None, norm=False)
    np.testing.assert_array_equal(zero(x).data, 0.0)
    ident = SharedMLP(3, 3, rng=None, norm=False)
    ident.weight.data[...] = np.eye(3)
    np.testing.assert_array_equal(ident(x).data, x.data)


def test_shared_mlp_grad_matches_finite_differences():
    rng = np.random.default_rng(7)
    mlp = SharedMLP(10, 8, rng)
    x = leaf(rng.normal(size=(4, 10)))
    w = Tensor(rng.normal(size=(4, 8)))
    f = lambda t: ad.sum(ad.mul(mlp(t), w))  # noqa: E731
    assert finite_diff_check(f, x) < 1e-4
    for p in mlp.parameters():
        assert finite_diff_check(lambda _: f(x), p) < 1e-4


def test_shared_mlp_batch_of_one_with_norm_is_rejected():
    mlp = SharedMLP(3, 2, np.random.default_rng(0))
    with pytest.raises(ContractError, match="degenerate"):
        mlp(Tensor(np.ones((1, 3))))
    mlp.eval()
    assert mlp(Tensor(np.ones((1, 3)))).shape == (1, 2)


def test_shared_mlp_applies_same_weights_at_every_position():
    rng = np.random.default_rng(2)
    mlp = SharedMLP(3, 4, rng, norm=False)
    x = rng.normal(size=(2, 5, 3))
    out = mlp(Tensor(x)).data
    flat = mlp(Tensor(x.reshape(10, 3))).data
    np.testing.assert_array_equal(out.reshape(10, 4), flat)


def test_batch_norm_running_stats_and_inference():
    rng = np.random.default_rng(5)
    mlp = SharedMLP(2, 2, rng)
    x = Tensor(rng.normal(size=(50, 2)))
    for _ in range(200):
        mlp(x)
    mlp.eval()
    train_out = mlp.train()(x).data
    eval_out = mlp.eval()(x).data
    np.testing.assert_allclose(eval_out, train_out, atol=1e-4)


def test_gather_accumulates_repeated_rows():
    t = leaf(np.arange(6.0).reshape(3, 2))
    g = ad.gather(t, [[0, 0], [2, 0]])
    assert g.shape == (2, 2, 2)
    ad.sum(g).backward()
    np.testing.assert_array_equal(t.grad, [[3, 3], [0, 0], [1, 1]])
    with pytest.raises(ContractError):
        ad.gather(t, [3])


@pytest.mark.parametrize(
    "fn",
    [
        lambda t: ad.sum(ad.mul(ad.softmax(t, axis=1), ad.softmax(t, axis=0))),
        lambda t: ad.sum(ad.mul(ad.log_softmax(t, axis=1), t)),
        lambda t: ad.sum(ad.max_pool(ad.transpose(t), axis=1)),
        lambda t: ad.sum(ad.scale_cols(t, ad.sigmoid(ad.sum(t, axis=0)))),
        lambda t: ad.sum(ad.mul(ad.reshape(t, (2, 6)), ad.reshape(t, (2, 6)))),
        lambda t: ad.sum(ad.concat([t, ad.relu(t)], axis=0)),
    ],
)
def test_primitive_gradients(fn):
    x = leaf(np.random.default_rng(11).normal(size=(3, 4)))
    assert finite_diff_check(fn, x) < 1e-6
