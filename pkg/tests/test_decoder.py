import logging

import numpy as np
import pytest

from model.decoder import (
    BLOCKED_IDS,
    PointerGeneratorDecoder,
    copy_scatter,
    decode_step,
    generate,
    response_loss,
)
from model.layers import Parameter
from model.tensor import Tensor, finite_difference_check, make_rng
from utils.corpus import SOS_ID
from utils.errors import NumericError
from tests.conftest import assert_distribution

V = 12


@pytest.fixture
def decoder(rng):
    return PointerGeneratorDecoder(V, 8, 6, rng, n_layers=1, n_heads=2, ff_mult=2)


@pytest.fixture
def memory(rng):
    return {
        "memory": Tensor(rng.standard_normal((2, 4, 8))),
        "memory_mask": np.ones((2, 4), dtype=bool),
        "copy_ids": np.array([[5, 6, 7], [8, V, 0]]),
        "copy_mask": np.array([[True, True, True], [True, True, False]]),
        "n_oov": 1,
    }


def run(decoder, memory, prefix, **kwargs):
    prefix = np.asarray(prefix)
    return decoder(prefix, np.ones(prefix.shape, dtype=bool), **memory, **kwargs)


def test_copy_scatter():
    scatter = copy_scatter(np.array([[2, 4, 2]]), np.array([[True, True, False]]), 5)
    assert scatter.shape == (1, 3, 5)
    assert scatter[0, 0, 2] == 1.0 and scatter[0, 1, 4] == 1.0
    assert scatter[0, 2].sum() == 0.0
    with pytest.raises(NumericError, match="extended vocabulary"):
        copy_scatter(np.array([[5]]), np.array([[True]]), 5)


def test_mixture_is_a_distribution_over_the_extended_vocabulary(decoder, memory):
    out = run(decoder, memory, [[SOS_ID, 5, 6], [SOS_ID, 8, 9]])
    assert out.P_w.shape == (2, 3, V + 1)
    assert_distribution(out.P_w.data, axis=-1)
    assert np.all((out.p_gen.data > 0) & (out.p_gen.data < 1))
    assert np.all(out.p_copy.data[1, :, 2] == 0.0)


def test_forced_gates_select_one_side(decoder, memory):
    prefix = [[SOS_ID, 5], [SOS_ID, 8]]
    generating = run(decoder, memory, prefix, force_gate=1.0)
    np.testing.assert_allclose(generating.P_w.data[..., :V], generating.p_vocab.data)
    assert np.all(generating.P_w.data[..., V] == 0.0)

    copying = run(decoder, memory, prefix, force_gate=0.0)
    # only context ids receive mass; the OOV id is reachable through copying alone
    support = {5, 6, 7}, {8, V}
    for b in range(2):
        nonzero = set(np.nonzero(copying.P_w.data[b, 0])[0].tolist())
        assert nonzero <= support[b]
    assert copying.P_w.data[1, 0, V] == pytest.approx(copying.p_copy.data[1, 0, 1])

    with pytest.raises(NumericError, match="forced gate"):
        run(decoder, memory, prefix, force_gate=1.5)


def test_repeated_context_tokens_pool_their_copy_mass(decoder, rng):
    memory = Tensor(rng.standard_normal((1, 3, 8)))
    out = decoder(
        np.array([[SOS_ID]]), np.ones((1, 1), dtype=bool), memory, np.ones((1, 3), dtype=bool),
        np.array([[7, 7, 9]]), np.ones((1, 3), dtype=bool), force_gate=0.0,
    )
    assert out.P_w.data[0, 0, 7] == pytest.approx(out.p_copy.data[0, 0, 0] + out.p_copy.data[0, 0, 1])


def test_future_tokens_do_not_leak(decoder, memory):
    a = run(decoder, memory, [[SOS_ID, 5, 6], [SOS_ID, 8, 9]]).P_w.data
    b = run(decoder, memory, [[SOS_ID, 5, 10], [SOS_ID, 8, 11]]).P_w.data
    np.testing.assert_allclose(a[:, :2], b[:, :2], atol=1e-12)
    assert not np.allclose(a[:, 2], b[:, 2])


def test_prefix_errors(decoder, memory):
    with pytest.raises(NumericError, match="empty"):
        run(decoder, memory, np.zeros((2, 0), dtype=np.int64))
    with pytest.raises(NumericError, match="max_len"):
        run(decoder, memory, np.full((2, 7), SOS_ID))


def test_decode_step_is_the_last_position(decoder, memory):
    prefix = np.array([[SOS_ID, 5], [SOS_ID, 8]])
    full = run(decoder, memory, prefix).P_w.data
    step = decode_step(decoder, prefix, **memory).P_w.data
    np.testing.assert_allclose(step, full[:, -1], atol=1e-12)
    with pytest.raises(NumericError, match="SOS"):
        decode_step(decoder, np.array([[5, 6], [SOS_ID, 8]]), **memory)


def test_response_loss():
    P_w = Tensor(np.array([[[0.5, 0.5, 0.0], [0.1, 0.2, 0.7]]]))
    targets = np.array([[0, 2]])
    assert response_loss(P_w, targets, np.array([[True, True]])).item() == pytest.approx(-(np.log(0.5) + np.log(0.7)) / 2)
    assert response_loss(P_w, targets, np.array([[True, False]])).item() == pytest.approx(-np.log(0.5))
    with pytest.raises(NumericError, match="at least one"):
        response_loss(P_w, targets, np.zeros((1, 2), dtype=bool))


def test_response_loss_floors_zero_probabilities(caplog):
    P_w = Parameter(np.array([[[0.5, 0.5, 0.0]]]))
    with caplog.at_level(logging.WARNING):
        loss = response_loss(P_w, np.array([[2]]), np.array([[True]]))
    assert loss.item() == pytest.approx(-np.log(1e-12))
    assert "floored" in caplog.text
    loss.backward()
    assert np.all(P_w.grad == 0.0)


def test_greedy_generation(decoder, memory):
    first = generate(decoder, max_len=5, **memory)
    second = generate(decoder, max_len=5, **memory)
    assert first == second
    assert len(first) == 2
    for row in first:
        assert len(row) <= 5
        assert not set(row) & set(BLOCKED_IDS)
        assert all(0 <= i < V + 1 for i in row)


def test_top_k_generation(decoder, memory):
    with pytest.raises(NumericError, match="rng"):
        generate(decoder, mode="topk", **memory)
    with pytest.raises(ValueError, match="decode mode"):
        generate(decoder, mode="beam", **memory)
    sampled = generate(decoder, mode="topk", top_k=3, rng=make_rng(1), **memory)
    assert sampled == generate(decoder, mode="topk", top_k=3, rng=make_rng(1), **memory)
    assert generate(decoder, mode="topk", top_k=1, rng=make_rng(1), **memory) == generate(decoder, **memory)


def test_decoder_gradients():
    decoder = PointerGeneratorDecoder(V, 4, 5, make_rng(7), n_layers=1, n_heads=2, ff_mult=2)
    memory = Tensor(make_rng(8).standard_normal((2, 3, 4)))
    prefix = np.array([[SOS_ID, 5, 6], [SOS_ID, 8, 0]])
    prefix_mask = prefix != 0
    targets = np.array([[5, 6, 3], [8, V, 0]])
    copy_ids = np.array([[5, 6, 9], [8, V, 0]])
    copy_mask = np.array([[True, True, True], [True, True, False]])

    def f():
        out = decoder(prefix, prefix_mask, memory, np.ones((2, 3), dtype=bool), copy_ids, copy_mask, n_oov=1)
        return response_loss(out.P_w, targets, prefix_mask)

    params = [decoder.gate.weight, decoder.copy_query.weight, decoder.out.weight, decoder.token_emb.weight]
    report = finite_difference_check(f, params, probes_per_param=6, atol=1e-10)
    assert report.passed, report
