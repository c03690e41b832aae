import numpy as np
import pytest
from hypothesis import given, strategies as st

from outfitrank import autodiff as ad
from outfitrank.autodiff import OptimizerState, Parameter, Tensor
from outfitrank.layers import FEATURE_NET, MATCHING_NET


def P(data, name="p", group=FEATURE_NET):
    return Parameter(np.asarray(data, dtype=np.float64), name, group, dtype=np.float64)


# -- forward examples ---------------------------------------------------------------

def test_elementwise_add():
    assert np.array_equal((Tensor([1.0, 2.0]) + Tensor([3.0, 4.0])).data, [4.0, 6.0])


def test_identity_matmul():
    m = np.array([[5.0, 6.0], [7.0, 8.0]])
    assert np.array_equal((Tensor(np.eye(2)) @ Tensor(m)).data, m)


def test_relu_of_negative_preactivation():
    W, x = Tensor([[-1.0]]), Tensor([2.0])
    assert np.array_equal(ad.relu(W @ x).data, [0.0])


def test_shape_error_names_both_shapes():
    with pytest.raises(ad.ShapeError) as e:
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
    assert "(2, 3)" in str(e.value)
    with pytest.raises(ad.ShapeError) as e:
        Tensor(np.ones(3)) + Tensor(np.ones(4))
    assert "(3,)" in str(e.value) and "(4,)" in str(e.value)


def test_non_finite_forward_is_an_error():
    with pytest.raises(ad.NonFiniteError):
        Tensor([1.0]) * Tensor([np.inf])


# -- backward examples --------------------------------------------------------------

def test_square_derivative():
    x = P([3.0], "x")
    g = ad.backward((x * x).sum())
    assert g[x][0] == 6.0


def test_linear_map_gradient():
    W = P([[1.0, 1.0]], "W")
    a, b = 0.7, -2.5
    g = ad.backward((W @ Tensor([a, b])).sum())
    assert np.allclose(g[W], [[a, b]])


def test_fan_out_accumulates_by_summation():
    x = P([2.0], "x")
    y = x * x + x * 3.0 + x
    assert ad.backward(y.sum())[x][0] == pytest.approx(2 * 2.0 + 3.0 + 1.0)


def test_backward_requires_scalar_root():
    x = P([1.0, 2.0])
    with pytest.raises(ad.ShapeError):
        ad.backward(x * 2.0)


def test_each_node_visited_once():
    x = P([1.0], "x")
    y = x
    for _ in range(50):
        y = y + y          # a diamond chain: 2**50 paths, 51 nodes
    order = ad.topological_order(y.sum())
    assert len(order) == len({id(n) for n in order})
    assert ad.backward(y.sum())[x][0] == pytest.approx(2.0 ** 50)


def test_gradient_shape_matches_value_shape(rng):
    W = P(rng.standard_normal((4, 3)), "W")
    x = Tensor(rng.standard_normal((5, 4)))
    g = ad.backward(ad.relu(x @ W).mean())
    assert g[W].shape == W.shape


def test_no_grad_builds_no_graph():
    x = P([1.0])
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


# -- gradient check -----------------------------------------------------------------

def test_gradient_check_quadratic_form(rng):
    A = rng.standard_normal((4, 4))
    x = P(rng.standard_normal(4), "x")
    fn = lambda: (x @ Tensor(A @ A.T) * x).sum()
    assert ad.gradient_check(fn, [x]) < 1e-6


def test_gradient_check_constant_function_is_exact():
    x = P([1.0, 2.0], "x")
    assert ad.gradient_check(lambda: (x * 0.0).sum() + 3.0, [x]) == 0.0


def test_gradient_check_fc_softmax_rank_loss(rng):
    from outfitrank.layers import linear, softmax2
    from outfitrank.models import rank_loss
    W = P(rng.standard_normal((6, 2)) * 0.5, "W", MATCHING_NET)
    b = P(rng.standard_normal(2) * 0.1, "b", MATCHING_NET)
    xp, xm = Tensor(rng.standard_normal((5, 6))), Tensor(rng.standard_normal((5, 6)))

    def fn():
        sp = softmax2(linear(xp, W, b))[:, 0]
        sm = softmax2(linear(xm, W, b))[:, 0]
        return rank_loss(sp, sm).mean()
    assert ad.gradient_check(fn, [W, b]) < 1e-4


def test_gradient_check_rejects_float32():
    x = Parameter(np.ones(2, np.float32), "x", FEATURE_NET)
    with pytest.raises(TypeError):
        ad.gradient_check(lambda: (x * x).sum(), [x])


OPS = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "relu": lambda a, b: ad.relu(a) * b,
    "softplus": lambda a, b: ad.softplus(a * 3.0) + b,
    "concat": lambda a, b: ad.concat([a, b], axis=1) * 1.5,
    "index": lambda a, b: a[:, ::-1] * b,
    "reshape": lambda a, b: (a.reshape(-1) * b.reshape(-1)),
    "take_rows": lambda a, b: ad.take_rows(a, np.array([0, 0, a.shape[0] - 1])) * 2.0,
}


@pytest.mark.parametrize("op", sorted(OPS))
@given(rows=st.integers(1, 4), cols=st.integers(1, 4), seed=st.integers(0, 2**16))
def test_elementary_ops_match_finite_differences(op, rows, cols, seed):
    r = np.random.default_rng(seed)
    # keep relu inputs away from the kink so central differences are valid
    a_data = r.standard_normal((rows, cols))
    a_data = np.where(np.abs(a_data) < 0.05, 0.5, a_data)
    a, b = P(a_data, "a"), P(r.standard_normal((rows, cols)), "b")
    weight = None

    def fn():
        nonlocal weight
        out = OPS[op](a, b)
        if weight is None:
            weight = Tensor(r.standard_normal(out.shape))
        return (out * weight).sum()
    assert ad.gradient_check(fn, [a, b]) < 1e-4


@given(n=st.integers(1, 5), k=st.integers(1, 4), m=st.integers(1, 3), seed=st.integers(0, 2**16))
def test_matmul_gradients_including_unit_dims(n, k, m, seed):
    r = np.random.default_rng(seed)
    A, B = P(r.standard_normal((n, k)), "A"), P(r.standard_normal((k, m)), "B")
    w = Tensor(r.standard_normal((n, m)))
    assert ad.gradient_check(lambda: (A @ B * w).sum(), [A, B]) < 1e-4


@given(batch=st.integers(1, 6), seed=st.integers(0, 2**16))
def test_batch_gradient_is_sum_of_sample_gradients(batch, seed):
    r = np.random.default_rng(seed)
    W = P(r.standard_normal((3, 2)), "W")
    X = r.standard_normal((batch, 3))
    total = ad.backward(ad.softplus(Tensor(X) @ W).sum())[W]
    parts = sum(ad.backward(ad.softplus(Tensor(X[i:i + 1]) @ W).sum())[W] for i in range(batch))
    assert np.allclose(total, parts, rtol=1e-12, atol=1e-12)


def test_forward_backward_bit_deterministic(rng):
    W = rng.standard_normal((8, 4)).astype(np.float32)
    X = rng.standard_normal((16, 8)).astype(np.float32)
    runs = []
    for _ in range(2):
        p = Parameter(W, "W", FEATURE_NET)
        y = ad.softplus(Tensor(X) @ p).mean()
        runs.append((y.data.tobytes(), ad.backward(y)[p].tobytes()))
    assert runs[0] == runs[1]


# -- optimizer -------------------------------------------------------------------------

def test_sgd_zero_gradient_keeps_parameter():
    p = P([1.5, -2.0])
    ad.sgd_step([p], {p: np.zeros(2)}, OptimizerState({FEATURE_NET: 0.1}))
    assert np.array_equal(p.data, [1.5, -2.0])


def test_sgd_plain_step():
    p = P([1.0])
    ad.sgd_step([p], {p: np.array([2.0])}, OptimizerState({FEATURE_NET: 0.1}, momentum=0.0))
    assert p.data[0] == pytest.approx(0.8)


def test_sgd_two_momentum_steps():
    p = P([0.0])
    state = OptimizerState({FEATURE_NET: 0.1}, momentum=0.9)
    for _ in range(2):
        ad.sgd_step([p], {p: np.array([1.0])}, state)
    assert p.data[0] == pytest.approx(-0.29)


def test_sgd_per_group_rates():
    a, b = P([1.0], "a", FEATURE_NET), P([1.0], "b", MATCHING_NET)
    state = OptimizerState({FEATURE_NET: 0.0, MATCHING_NET: 0.5}, momentum=0.0)
    ad.sgd_step([a, b], {a: np.array([1.0]), b: np.array([1.0])}, state)
    assert a.data[0] == 1.0 and b.data[0] == 0.5


def test_sgd_non_finite_gradient_names_parameter():
    p = P([1.0], "the-weight")
    with pytest.raises(ad.NonFiniteError, match="the-weight"):
        ad.sgd_step([p], {p: np.array([np.nan])}, OptimizerState({FEATURE_NET: 0.1}))


def test_sgd_shape_mismatch():
    p = P([1.0, 2.0])
    with pytest.raises(ad.ShapeError):
        ad.sgd_step([p], {p: np.zeros(3)}, OptimizerState({FEATURE_NET: 0.1}))


@pytest.mark.parametrize("mu", [-0.1, 1.0, 1.5])
def test_momentum_range(mu):
    with pytest.raises(ValueError):
        OptimizerState({FEATURE_NET: 0.1}, momentum=mu)


# -- serialization ---------------------------------------------------------------------

@given(shape=st.lists(st.integers(1, 4), min_size=0, max_size=4), seed=st.integers(0, 100),
       dtype=st.sampled_from([np.float32, np.float64]))
def test_tensor_bytes_round_trip(shape, seed, dtype):
    arr = np.random.default_rng(seed).standard_normal(shape).astype(dtype)
    blob = ad.tensor_to_bytes(arr)
    back, end = ad.tensor_from_bytes(blob, dtype)
    assert end == len(blob) and back.shape == arr.shape and back.tobytes() == arr.tobytes()


def test_tensor_bytes_layout():
    blob = ad.tensor_to_bytes(np.array([[1.0, 2.0]], dtype=np.float32))
    assert blob[:8] == (2).to_bytes(8, "little")
    assert blob[8:16] == (1).to_bytes(8, "little") and blob[16:24] == (2).to_bytes(8, "little")
    assert blob[24:] == np.array([1.0, 2.0], dtype="<f4").tobytes()


def test_truncated_blob_is_rejected():
    blob = ad.tensor_to_bytes(np.ones(4))
    with pytest.raises(ValueError):
        ad.tensor_from_bytes(blob[:-1], np.float64)
