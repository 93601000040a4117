import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from emblaunder import autodiff as ad
from emblaunder.selftest import OP_NAMES, gradcheck_cases


def _case(name, seed):
    for n, fn, inputs in gradcheck_cases(np.random.default_rng(seed)):
        if n == name:
            return fn, inputs
    raise KeyError(name)


@pytest.mark.parametrize("name", OP_NAMES)
def test_op_gradient_matches_finite_differences(name):
    fn, inputs = _case(name, 5)
    report = ad.grad_check(fn, inputs)
    assert report.passed, f"{name}: {report.max_rel_err}"


def test_every_listed_op_is_checked():
    assert {"matmul", "conv2d", "layer_norm", "softmax", "cross_entropy", "l2_normalize", "gelu"} <= set(OP_NAMES)


def test_grad_check_flags_a_wrong_backward():
    def bad_square(x):
        y = ad.Tensor.from_op(x.data**2, (x,), lambda g: (g * x.data,), "bad_square")
        return ad.tsum(y)

    report = ad.grad_check(bad_square, [np.array([1.0, 2.0, -3.0])])
    assert not report.passed
    assert report.worst == pytest.approx(0.5, rel=1e-3)


def test_broadcast_gradient_reduces_to_parent_shape():
    a = ad.Tensor(np.ones((3, 4)), requires_grad=True)
    b = ad.Tensor(np.arange(4.0), requires_grad=True)
    g = ad.backward(ad.tsum(a * b))
    assert g[b].shape == (4,)
    np.testing.assert_allclose(g[b], np.full(4, 3.0))
    np.testing.assert_allclose(g[a], np.tile(np.arange(4.0), (3, 1)))


def test_shared_node_accumulates():
    x = ad.Tensor(np.array([2.0]), requires_grad=True)
    y = x * x + x
    np.testing.assert_allclose(ad.backward(ad.tsum(y))[x], [5.0])


def test_l2_normalize_zero_vector_raises():
    with pytest.raises(ad.ZeroNormError):
        ad.l2_normalize(ad.Tensor(np.zeros((1, 3))))


def test_matmul_shape_mismatch_raises():
    with pytest.raises(ad.ShapeError):
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))


def test_nonfinite_values_are_rejected():
    with pytest.raises(ad.NonFiniteError):
        ad.Tensor(np.array([np.nan]))


def test_backward_needs_scalar_and_a_grad_path():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ad.ShapeError):
        ad.backward(x * 2.0)
    with pytest.raises(ad.GraphError):
        ad.backward(ad.tsum(ad.Tensor(np.ones(3))))


def test_tensors_are_immutable():
    t = ad.Tensor(np.ones(3))
    with pytest.raises(ValueError):
        t.data[0] = 2.0


def test_gradient_map_is_keyed_by_tensor():
    x = ad.Tensor(np.ones(2), requires_grad=True)
    g = ad.backward(ad.tsum(x * 3.0))
    assert x in g and g[x.node_id] is g[x]


def test_conv_matches_direct_loop(rng):
    x = rng.normal(size=(1, 5, 5, 2))
    w = rng.normal(size=(3, 3, 2, 4))
    out = ad.conv2d(ad.Tensor(x, dtype=np.float64), ad.Tensor(w, dtype=np.float64), stride=2, padding=1).numpy()
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((1, 3, 3, 4))
    for i in range(3):
        for j in range(3):
            ref[0, i, j] = np.einsum("hwc,hwco->o", xp[0, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3], w)
    np.testing.assert_allclose(out, ref, rtol=1e-10)


def test_bilinear_resize_identity_when_size_unchanged(rng):
    x = rng.random((2, 6, 6, 3))
    np.testing.assert_allclose(ad.bilinear_resize(ad.Tensor(x, dtype=np.float64), 6, 6).numpy(), x, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(2, 6)), elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(x):
    p = ad.softmax(ad.Tensor(x, dtype=np.float64), axis=-1).numpy()
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.float64, 5, elements=st.floats(-10, 10)).filter(lambda v: np.linalg.norm(v) > 1e-3),
    arrays(np.float64, 5, elements=st.floats(-10, 10)).filter(lambda v: np.linalg.norm(v) > 1e-3),
)
def test_cosine_similarity_bounded_and_symmetric(u, v):
    a = ad.cosine_similarity(ad.Tensor(u, dtype=np.float64), ad.Tensor(v, dtype=np.float64)).item()
    b = ad.cosine_similarity(ad.Tensor(v, dtype=np.float64), ad.Tensor(u, dtype=np.float64)).item()
    assert -1 - 1e-9 <= a <= 1 + 1e-9
    assert a == pytest.approx(b, abs=1e-12)
