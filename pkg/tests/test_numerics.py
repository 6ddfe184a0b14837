import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import grad_error, weighted_sum
from wimamba.numerics import (
    DimensionError,
    NumericError,
    Tensor,
    concat,
    conv1d_depthwise,
    count_macs,
    cross_entropy,
    elementwise,
    finite_difference_gradient,
    flip,
    getitem,
    linear,
    matmul,
    max_relative_error,
    mean,
    no_grad,
    parameter,
    reshape,
    rms_normalize,
    silu,
    softmax,
    softplus,
    take_rows,
    track_allocations,
    transpose,
    tsum,
)
from wimamba.numerics import instrument


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    A = np.array([[1.5, -2.0], [0.25, 3.0]])
    assert np.array_equal(matmul(Tensor(np.eye(2)), Tensor(A)).data, A.astype(np.float32))


def test_matmul_hand_example(f64):
    out = matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5], [6]]))
    assert out.data.tolist() == [[17.0], [39.0]]


def test_matmul_backward_of_sum_is_ones_times_bT(f64, rng):
    A = parameter(rng.standard_normal((3, 4)))
    B = Tensor(rng.standard_normal((4, 2)))
    tsum(matmul(A, B)).backward()
    assert np.allclose(A.grad, np.ones((3, 2)) @ B.data.T)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_matmul_associativity(f64, rng):
    A, B, C = (Tensor(rng.standard_normal((4, 4))) for _ in range(3))
    left = matmul(matmul(A, B), C).data
    right = matmul(A, matmul(B, C)).data
    assert np.max(np.abs(left - right)) < 1e-10


def test_matmul_counts_macs():
    with count_macs() as c:
        matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((4, 5))))
    assert c.count == 3 * 4 * 5


# ---------------------------------------------------------------- elementwise

def test_elementwise_scalar_values(f64):
    assert elementwise("silu", Tensor(0.0)).item() == 0.0
    assert elementwise("sigmoid", Tensor(0.0)).item() == 0.5
    assert abs(elementwise("softplus", Tensor(0.0)).item() - np.log(2)) < 1e-12
    assert abs(elementwise("softplus", Tensor(0.0)).item() - 0.693147) < 1e-6


def test_softplus_overflow_branch(f64):
    x = Tensor([30.5, 100.0, 1000.0, -1000.0])
    out = softplus(x).data
    assert np.all(np.isfinite(out))
    assert out[:3].tolist() == [30.5, 100.0, 1000.0]
    assert out[3] == 0.0


def test_elementwise_unknown_kind():
    with pytest.raises(ValueError):
        elementwise("tanh", Tensor(1.0))


def test_broadcast_only_scalar_or_equal_shape():
    a = Tensor(np.ones((2, 3)))
    assert (a * Tensor(2.0)).data.tolist() == [[2.0] * 3] * 2
    assert (a + 1.0).shape == (2, 3)
    with pytest.raises(DimensionError):
        a + Tensor(np.ones(3))
    with pytest.raises(DimensionError):
        elementwise("mul", a, Tensor(np.ones((3, 2))))
    with pytest.raises(DimensionError):
        a * np.ones(3)


def test_float32_is_preserved_by_numpy_scalars():
    a = Tensor(np.ones(4))
    assert (a * np.float64(0.5)).dtype == np.float32
    assert (a + np.ones(4)).dtype == np.float32


@pytest.mark.parametrize("kind", ["softplus", "sigmoid", "silu", "exp"])
def test_unary_gradients(f64, rng, kind):
    x = parameter(rng.standard_normal((5, 6)) * 3)
    w = rng.standard_normal((5, 6))
    assert grad_error(lambda: weighted_sum(elementwise(kind, x), w), [x]) < 1e-4


@pytest.mark.parametrize("kind", ["add", "mul"])
def test_binary_gradients(f64, rng, kind):
    a = parameter(rng.standard_normal((4, 3)))
    b = parameter(rng.standard_normal((4, 3)))
    s = parameter(np.array(0.7))
    w = rng.standard_normal((4, 3))
    assert grad_error(lambda: weighted_sum(elementwise(kind, a, b), w), [a, b]) < 1e-4
    assert grad_error(lambda: weighted_sum(elementwise(kind, a, s), w), [a, s]) < 1e-4


# ---------------------------------------------------------------- rms_normalize

def test_rms_normalize_constant_vector(f64):
    out = rms_normalize(Tensor([2.0, 2.0, 2.0, 2.0]), Tensor(np.ones(4)), eps=1e-12)
    assert np.allclose(out.data, 1.0)


def test_rms_normalize_zero_vector():
    out = rms_normalize(Tensor(np.zeros(4)), Tensor(np.ones(4)))
    assert np.array_equal(out.data, np.zeros(4))


def test_rms_normalize_gradient(f64, rng):
    x = parameter(rng.standard_normal((3, 5)))
    g = parameter(rng.uniform(0.5, 1.5, 5))
    w = rng.standard_normal((3, 5))
    assert grad_error(lambda: weighted_sum(rms_normalize(x, g), w), [x, g]) < 1e-4


def test_rms_normalize_gain_shape_error():
    with pytest.raises(DimensionError):
        rms_normalize(Tensor(np.ones((2, 4))), Tensor(np.ones(3)))


# ---------------------------------------------------------------- finite differences

def test_finite_difference_square(f64):
    x = Tensor([3.0])
    g = finite_difference_gradient(lambda: x * x, x, h=1e-5)
    assert abs(g[0] - 6.0) < 1e-8


def test_finite_difference_silu_matches_tape(f64, rng):
    x = parameter(rng.standard_normal(7))
    tsum(silu(x)).backward()
    numeric = finite_difference_gradient(lambda: tsum(silu(x)), x)
    assert max_relative_error(x.grad, numeric) < 1e-4


def test_finite_difference_constant(f64):
    x = Tensor(np.arange(4.0))
    assert np.array_equal(finite_difference_gradient(lambda: 5.0, x), np.zeros(4))


def test_finite_difference_nonfinite_raises(f64):
    x = Tensor([0.0])
    with pytest.raises(NumericError):
        finite_difference_gradient(lambda: np.inf, x)


# ---------------------------------------------------------------- conv

def test_conv_identity_kernel(rng):
    x = Tensor(rng.standard_normal((6, 3)))
    k = Tensor(np.tile([[1.0], [0.0], [0.0], [0.0]], (1, 3)))
    assert np.array_equal(conv1d_depthwise(x, k).data, x.data)


def test_conv_one_step_delay(f64):
    x = Tensor(np.array([[1.0], [2.0], [3.0], [4.0]]))
    k = Tensor(np.array([[0.0], [1.0], [0.0], [0.0]]))
    assert conv1d_depthwise(x, k).data[:, 0].tolist() == [0.0, 1.0, 2.0, 3.0]


def test_conv_zero_kernel(rng):
    x = Tensor(rng.standard_normal((5, 2)))
    assert np.array_equal(conv1d_depthwise(x, Tensor(np.zeros((4, 2)))).data, np.zeros((5, 2)))


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        conv1d_depthwise(Tensor(np.zeros((5, 2))), Tensor(np.zeros((4, 3))))


def test_conv_is_causal(rng):
    x = rng.standard_normal((8, 2))
    k = Tensor(rng.standard_normal((4, 2)))
    base = conv1d_depthwise(Tensor(x), k).data
    x2 = x.copy()
    x2[5] += 1.0
    moved = conv1d_depthwise(Tensor(x2), k).data
    assert np.array_equal(base[:5], moved[:5])
    assert not np.allclose(base[5:], moved[5:])


def test_conv_gradient(f64, rng):
    x = parameter(rng.standard_normal((6, 3)))
    k = parameter(rng.standard_normal((4, 3)))
    b = parameter(rng.standard_normal(3))
    w = rng.standard_normal((6, 3))
    assert grad_error(lambda: weighted_sum(conv1d_depthwise(x, k, b), w), [x, k, b]) < 1e-4


# ---------------------------------------------------------------- remaining differentiable ops

SHAPE = st.tuples(st.integers(1, 8), st.integers(1, 8))


@settings(max_examples=15, deadline=None)
@given(shape=SHAPE, seed=st.integers(0, 2**16))
def test_gradients_on_random_shapes(shape, seed):
    from wimamba.numerics import default_dtype

    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        x = parameter(rng.standard_normal(shape))
        W = parameter(rng.standard_normal((3, shape[1])))
        bias = parameter(rng.standard_normal(3))
        rows = rng.integers(0, shape[0], size=4)
        cases = [
            (lambda: weighted_sum(linear(x, W, bias), wl), [x, W, bias]),
            (lambda: weighted_sum(softmax(x), ws), [x]),
            (lambda: weighted_sum(transpose(x), ws.T), [x]),
            (lambda: weighted_sum(flip(x, 0), ws), [x]),
            (lambda: weighted_sum(take_rows(x, rows), wr), [x]),
            (lambda: weighted_sum(reshape(x, (-1,)), ws.reshape(-1)), [x]),
            (lambda: weighted_sum(concat([x, x], axis=0), np.concatenate([ws, ws])), [x]),
            (lambda: weighted_sum(getitem(x, (slice(0, 1),)), ws[:1]), [x]),
            (lambda: mean(x * x), [x]),
            (lambda: tsum(x, axis=0).sum(), [x]),
            (lambda: cross_entropy(x, labels), [x]),
        ]
        wl = rng.standard_normal((shape[0], 3))
        ws = rng.standard_normal(shape)
        wr = rng.standard_normal((4, shape[1]))
        labels = rng.integers(0, shape[1], size=shape[0])
        for build, leaves in cases:
            assert grad_error(build, leaves) < 1e-4


def test_tape_is_deterministic(f64, rng):
    data = rng.standard_normal((4, 5))

    def run():
        x = parameter(data.copy())
        W = parameter(np.linspace(-1, 1, 15).reshape(3, 5))
        loss = tsum(softplus(linear(x, W)) * 1.5)
        loss.backward()
        return loss.data.copy(), x.grad.copy(), W.grad.copy()

    a, b = run(), run()
    for u, v in zip(a, b):
        assert np.array_equal(u, v)


def test_every_reachable_parameter_gets_grad(rng):
    x = parameter(rng.standard_normal((2, 3)))
    W = parameter(rng.standard_normal((4, 3)))
    unused = parameter(np.ones(2))
    tsum(linear(x, W)).backward()
    assert x.grad is not None and x.grad.shape == x.shape
    assert W.grad is not None and W.grad.shape == W.shape
    assert unused.grad is None


def test_no_grad_records_nothing(rng):
    x = parameter(rng.standard_normal(3))
    with no_grad():
        y = silu(x)
    assert not y.requires_grad
    with pytest.raises(RuntimeError):
        tsum(y).backward()


def test_backward_needs_scalar():
    x = parameter(np.ones(3))
    with pytest.raises(DimensionError):
        (x * 2.0).backward()


def test_check_finite():
    from wimamba.numerics import check_finite

    with pytest.raises(NumericError):
        check_finite(Tensor([1.0, np.nan]))


# ---------------------------------------------------------------- instrumentation

def test_allocation_tracker_counts_live_bytes():
    with track_allocations() as t:
        a = Tensor(np.zeros(100, dtype=np.float32))
        b = Tensor(np.zeros(50, dtype=np.float32))
        assert t.live == 600
        del a
        assert t.live == 200
        del b
    assert t.peak == 600 and t.live == 0


def test_views_are_not_double_counted():
    base = np.zeros(10, dtype=np.float32)
    with track_allocations() as t:
        Tensor(base[2:5])
    assert t.peak == 0


def test_scratch_accounting():
    with track_allocations() as t:
        with instrument.scratch(np.zeros(8)):
            assert t.live == 64
    assert t.live == 0 and t.peak == 64
