import numpy as np
import pytest

from model.contagion import ContagionEncoder
from model.tensor import Tensor, finite_difference_check, make_rng
from utils.errors import NumericError


@pytest.fixture
def encoder(rng):
    return ContagionEncoder(vocab_size=20, d_model=8, max_len=10, rng=rng, n_layers=1, n_heads=2, ff_mult=2)


def test_embed_is_the_sum_of_three_tables(encoder):
    ids = np.array([[5, 6, 7]])
    tags = np.array([[0, 1, 0]])
    expected = encoder.E_W.weight.data[ids] + encoder.E_P.weight.data[np.arange(3)] + encoder.E_R.weight.data[tags]
    np.testing.assert_allclose(encoder.embed(ids, tags).data, expected)


def test_reason_tags_enter_only_through_their_embedding(encoder):
    ids = np.array([[5, 6, 7]])
    base = encoder.embed(ids, np.zeros((1, 3), dtype=np.int64)).data
    tagged = encoder.embed(ids, np.array([[0, 1, 0]])).data
    delta = encoder.E_R.weight.data[1] - encoder.E_R.weight.data[0]
    np.testing.assert_allclose(tagged - base, np.array([[np.zeros(8), delta, np.zeros(8)]]), atol=1e-12)


def test_embed_errors(encoder):
    with pytest.raises(NumericError, match="reason tags"):
        encoder.embed(np.array([[5, 6]]), np.array([[0]]))
    with pytest.raises(NumericError, match="max_len"):
        encoder.embed(np.full((1, 11), 5), np.zeros((1, 11), dtype=np.int64))


def test_encode_prepends_the_context_slot(encoder, rng):
    E_C = Tensor(rng.standard_normal((2, 4, 8)))
    mask = np.array([[True] * 4, [True, True, False, False]])
    context = encoder.encode(E_C, mask)
    assert context.H.shape == (2, 5, 8)
    assert context.mask.tolist() == [[True] * 5, [True, True, True, False, False]]

    single = encoder.encode(Tensor(E_C.data[0]))
    np.testing.assert_allclose(single.H.data[0], context.H.data[0], atol=1e-12)


def test_encode_leaves_room_for_the_context_slot(encoder, rng):
    encoder.encode(Tensor(rng.standard_normal((1, 9, 8))))
    with pytest.raises(NumericError, match="max_len - 1"):
        encoder.encode(Tensor(rng.standard_normal((1, 10, 8))))


def test_single_reason_row_sets_q_to_its_value(encoder, rng):
    H = Tensor(rng.standard_normal((1, 4, 8)))
    h_tilde = Tensor(rng.standard_normal((1, 1, 8)))
    Q = encoder.aggregate(H, h_tilde)
    expected = h_tilde.data[0, 0] @ encoder.W_v.weight.data
    np.testing.assert_allclose(Q.data[0], expected, atol=1e-12)


def test_masked_reason_rows_are_ignored(encoder, rng):
    H = Tensor(rng.standard_normal((1, 3, 8)))
    h = rng.standard_normal((1, 4, 8))
    masked = encoder.aggregate(H, Tensor(h), reason_mask=np.array([[True, True, False, False]]))
    trimmed = encoder.aggregate(H, Tensor(h[:, :2]))
    np.testing.assert_allclose(masked.data, trimmed.data, atol=1e-12)


def test_q_averages_only_real_rows(encoder, rng):
    H = rng.standard_normal((1, 4, 8))
    h_tilde = Tensor(rng.standard_normal((1, 2, 8)))
    masked = encoder.aggregate(Tensor(H), h_tilde, H_mask=np.array([[True, True, False, False]]))
    trimmed = encoder.aggregate(Tensor(H[:, :2]), h_tilde)
    np.testing.assert_allclose(masked.data, trimmed.data, atol=1e-12)


def test_aggregate_needs_a_reason_row(encoder):
    with pytest.raises(NumericError, match="reason row"):
        encoder.aggregate(Tensor(np.ones((1, 3, 8))), Tensor(np.ones((1, 0, 8))))


def test_forward_shapes(encoder, rng):
    ids = np.array([[5, 6, 7, 0], [8, 9, 0, 0]])
    tags = np.array([[0, 1, 0, 0], [1, 0, 0, 0]])
    mask = ids != 0
    context, Q = encoder(ids, tags, mask, Tensor(rng.standard_normal((2, 4, 8))))
    assert context.H.shape == (2, 5, 8)
    assert Q.shape == (2, 8)
    _, self_Q = encoder(ids, tags, mask)
    assert self_Q.shape == (2, 8)


def test_contagion_gradients():
    encoder = ContagionEncoder(vocab_size=12, d_model=4, max_len=6, rng=make_rng(4), n_layers=1, n_heads=2, ff_mult=2)
    ids = np.array([[5, 6, 7], [8, 9, 0]])
    tags = np.array([[0, 1, 0], [1, 0, 0]])
    mask = ids != 0
    h_tilde = Tensor(make_rng(5).standard_normal((2, 3, 4)))

    def f():
        _, Q = encoder(ids, tags, mask, h_tilde)
        return (Q * Q).sum()

    params = [encoder.E_R.weight, encoder.W_q.weight, encoder.W_k.weight, encoder.W_v.weight]
    report = finite_difference_check(f, params, probes_per_param=6, atol=1e-10)
    assert report.passed, report
