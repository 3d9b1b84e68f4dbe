import numpy as np
import pytest

from model.layers import Parameter, TransformerEncoder
from model.tensor import (
    Tensor,
    concat,
    cross_entropy,
    exp,
    finite_difference_check,
    gelu,
    getitem,
    is_grad_enabled,
    layer_norm,
    log,
    log_softmax,
    logsumexp,
    make_rng,
    no_grad,
    scaled_dot_attention,
    set_default_dtype,
    sigmoid,
    softmax,
    stack,
    tanh,
)
from utils.errors import NonDeterministicError, NumericError
from tests.conftest import assert_distribution


# ---------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------
def test_softmax_examples():
    np.testing.assert_allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5], atol=1e-12)
    np.testing.assert_allclose(softmax(Tensor(np.log([1.0, 2.0, 3.0]))).data, [1 / 6, 2 / 6, 3 / 6], atol=1e-12)
    out = softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)


def test_softmax_is_shift_invariant_and_permutation_equivariant(rng):
    x = rng.standard_normal((5, 7))
    base = softmax(Tensor(x), axis=1).data
    assert_distribution(base, axis=1)
    np.testing.assert_allclose(softmax(Tensor(x + 123.4), axis=1).data, base, atol=1e-9)
    perm = rng.permutation(7)
    np.testing.assert_allclose(softmax(Tensor(x[:, perm]), axis=1).data, base[:, perm], atol=1e-12)


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_softmax_rejects_non_finite(bad):
    with pytest.raises(NumericError, match="non-finite"):
        softmax(Tensor([0.0, bad]))


# ---------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------
def test_attention_single_key_returns_its_value():
    q = Tensor([[1.0, 2.0]])
    v = Tensor([[3.0, -1.0]])
    out, weights = scaled_dot_attention(q, q, v)
    np.testing.assert_allclose(weights.data, [[1.0]])
    np.testing.assert_allclose(out.data, v.data)


def test_attention_identical_keys_split_evenly():
    k = Tensor([[1.0, 0.0], [1.0, 0.0]])
    _, weights = scaled_dot_attention(Tensor([[0.3, 0.7]]), k, Tensor([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_allclose(weights.data, [[0.5, 0.5]], atol=1e-12)


def test_attention_matches_scalar_oracle():
    q = np.array([[0.1, -0.4, 0.3], [0.9, 0.2, -0.5]])
    k = np.array([[0.5, 0.1, -0.2], [-0.3, 0.8, 0.4]])
    v = np.array([[1.0, 2.0, 3.0], [-1.0, 0.5, 0.25]])
    out, weights = scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v))

    expected = np.zeros((2, 3))
    for i in range(2):
        scores = [sum(q[i, c] * k[j, c] for c in range(3)) / np.sqrt(3.0) for j in range(2)]
        e = [np.exp(s - max(scores)) for s in scores]
        w = [x / sum(e) for x in e]
        for c in range(3):
            expected[i, c] = w[0] * v[0, c] + w[1] * v[1, c]
    np.testing.assert_allclose(out.data, expected, atol=1e-10)
    assert_distribution(weights.data, axis=1)


def test_attention_masked_positions_get_zero_weight(rng):
    q, k, v = (Tensor(rng.standard_normal((3, 4))) for _ in range(3))
    mask = np.array([[True, False, True]] * 3)
    out, weights = scaled_dot_attention(q, k, v, mask)
    assert np.all(weights.data[:, 1] == 0.0)
    assert_distribution(weights.data, axis=1)
    # rows are convex combinations of the visible value rows
    w = weights.data[:, [0, 2]]
    np.testing.assert_allclose(out.data, w @ v.data[[0, 2]], atol=1e-12)


def test_attention_errors(rng):
    q = Tensor(rng.standard_normal((2, 3)))
    with pytest.raises(NumericError, match="query dim"):
        scaled_dot_attention(q, Tensor(np.ones((2, 4))), Tensor(np.ones((2, 4))))
    with pytest.raises(NumericError, match="every key masked"):
        scaled_dot_attention(q, q, q, np.array([[True, True], [False, False]]))
    with pytest.raises(NumericError, match="mask shape"):
        scaled_dot_attention(q, q, q, np.ones((3, 3), dtype=bool))


# ---------------------------------------------------------------------
# layer_norm
# ---------------------------------------------------------------------
def test_layer_norm_examples():
    ones, zeros = Tensor(np.ones(2)), Tensor(np.zeros(2))
    np.testing.assert_allclose(layer_norm(Tensor([[5.0, 5.0]]), ones, zeros).data, [[0.0, 0.0]], atol=1e-12)
    np.testing.assert_allclose(layer_norm(Tensor([[1.0, -1.0]]), ones, zeros, eps=1e-12).data, [[1.0, -1.0]], atol=1e-9)


def test_layer_norm_row_statistics(rng):
    x = rng.standard_normal((3, 4)) * 3.0 + 1.0
    gain = rng.uniform(0.5, 2.0, 4)
    bias = rng.standard_normal(4)
    out = layer_norm(Tensor(x), Tensor(gain), Tensor(bias), eps=1e-12).data
    normed = (out - bias) / gain
    np.testing.assert_allclose(normed.mean(axis=1), 0.0, atol=1e-9)
    np.testing.assert_allclose(normed.var(axis=1), 1.0, atol=1e-9)


def test_layer_norm_errors():
    with pytest.raises(NumericError):
        layer_norm(Tensor(np.ones((1, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
    with pytest.raises(NumericError):
        layer_norm(Tensor(np.ones((1, 2))), Tensor(np.ones(3)), Tensor(np.zeros(2)))


# ---------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------
def test_backward_sum_of_squares():
    x = Parameter([1.0, 2.0])
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_backward_cross_entropy():
    logits = Parameter([[0.0, 0.0]])
    cross_entropy(logits, np.array([0])).backward()
    np.testing.assert_allclose(logits.grad, [[-0.5, 0.5]], atol=1e-12)


def test_backward_needs_scalar():
    x = Parameter([1.0, 2.0])
    with pytest.raises(NumericError, match="scalar"):
        (x * 2.0).backward()


def test_repeated_backward_accumulates():
    x = Parameter([1.0, 2.0])
    loss = (x * x).sum()
    loss.backward()
    loss.backward()
    np.testing.assert_allclose(x.grad, [4.0, 8.0])


def test_shared_subexpression_sums_gradients():
    x = Parameter([0.5, -1.5, 2.0])
    y = tanh(x) * x
    (y + y * 3.0).sum().backward()

    duplicate = Parameter(x.data.copy())
    (tanh(duplicate) * duplicate + tanh(duplicate) * duplicate * 3.0).sum().backward()
    np.testing.assert_allclose(x.grad, duplicate.grad, atol=1e-12)


def test_no_grad_builds_no_graph():
    x = Parameter([1.0])
    with no_grad():
        assert not is_grad_enabled()
        y = x * 2.0
    assert is_grad_enabled()
    assert not y.requires_grad


def test_make_rng_is_deterministic():
    assert np.array_equal(make_rng(7).standard_normal(5), make_rng(7).standard_normal(5))


def test_set_default_dtype_rejects_integers():
    with pytest.raises(NumericError):
        set_default_dtype("int32")
    set_default_dtype("float32")
    assert Tensor([1.0]).data.dtype == np.float32


# ---------------------------------------------------------------------
# finite-difference harness
# ---------------------------------------------------------------------
def test_finite_difference_quadratic():
    x = Parameter([3.0])
    report = finite_difference_check(lambda: (x * x).sum(), [x])
    assert report.passed
    assert report.max_rel_error < 1e-8
    assert report.probe_count == 1


def test_finite_difference_catches_a_wrong_gradient_rule():
    x = Parameter([0.3, -0.7])

    def wrong_square(a):
        return Tensor.from_op(a.data**2, (a,), lambda g: (g * a.data,), "wrong_square")

    report = finite_difference_check(lambda: wrong_square(x).sum(), [x])
    assert not report.passed


def test_finite_difference_rejects_nondeterministic_functions():
    x = Parameter([1.0])
    calls = []

    def drifting():
        calls.append(1)
        return (x * x).sum() + float(len(calls))

    with pytest.raises(NonDeterministicError):
        finite_difference_check(drifting, [x])


def test_finite_difference_rejects_bad_step():
    x = Parameter([1.0])
    with pytest.raises(NumericError):
        finite_difference_check(lambda: (x * x).sum(), [x], h=0.0)


OPS = {
    "tanh": lambda x: tanh(x),
    "sigmoid": lambda x: sigmoid(x),
    "gelu": lambda x: gelu(x),
    "exp": lambda x: exp(x * 0.3),
    "log": lambda x: log(x * x + 1.0),
    "softmax": lambda x: softmax(x, axis=-1) * np.arange(1.0, 4.0),
    "log_softmax": lambda x: log_softmax(x, axis=0),
    "logsumexp": lambda x: logsumexp(x, axis=1),
    "matmul": lambda x: x @ x.T,
    "div": lambda x: x / (x * x + 2.0),
    "concat": lambda x: concat([x, x * 2.0], axis=1) * np.arange(6.0),
    "stack": lambda x: stack([x, tanh(x)], axis=0) * 1.5,
    "getitem": lambda x: getitem(x, (np.array([0, 1, 1]), np.array([2, 0, 0]))),
    "layer_norm": lambda x: layer_norm(x, Tensor(np.array([1.0, 2.0, 0.5])), Tensor(np.zeros(3))) * np.arange(3.0),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_every_op_passes_the_gradient_check(name):
    x = Parameter(make_rng(1).standard_normal((2, 3)))
    op = OPS[name]
    report = finite_difference_check(lambda: (op(x) * op(x)).sum(), [x], probes_per_param=None, atol=1e-9, op_name=name)
    assert report.passed, report


def test_encoder_block_passes_the_gradient_check():
    rng = make_rng(3)
    encoder = TransformerEncoder(d_model=4, n_layers=1, n_heads=2, ff_mult=2, rng=rng)
    x = Tensor(rng.standard_normal((2, 3, 4)))
    mask = np.array([[True, True, True], [True, True, False]])
    target = rng.standard_normal((2, 3, 4))

    def f():
        diff = encoder(x, mask) - target
        return (diff * diff).sum()

    report = finite_difference_check(f, encoder.parameters(), probes_per_param=4, atol=1e-10)
    assert report.passed, report
