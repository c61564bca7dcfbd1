import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import naive_channel_stats
from zeroshot_quant.errors import InvalidArgument
from zeroshot_quant.tensor import (ChannelStats, activation_channel_stats, gaussian_tensor,
                                   make_rng, weight_channel_stats)


def test_gaussian_tensor_is_seed_deterministic():
    a = gaussian_tensor((2, 3, 4, 4), 0.0, 1.0, 7)
    b = gaussian_tensor((2, 3, 4, 4), 0.0, 1.0, 7)
    assert a.dtype == np.float32
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, gaussian_tensor((2, 3, 4, 4), 0.0, 1.0, 8))


def test_gaussian_tensor_moments():
    t = gaussian_tensor((200_000,), 1.5, 0.5, 0).astype(np.float64)
    assert abs(t.mean() - 1.5) < 0.01
    assert abs(t.std() - 0.5) < 0.01


def test_gaussian_zero_std_is_constant():
    t = gaussian_tensor((3, 3), 2.0, 0.0, 1)
    assert np.all(t == 2.0)


@pytest.mark.parametrize("std", [-1e-9, -1.0])
def test_negative_std_rejected(std):
    with pytest.raises(InvalidArgument):
        gaussian_tensor((2,), 0.0, std, 0)


def test_seed_must_fit_64_bits():
    make_rng(2**64 - 1)
    with pytest.raises(InvalidArgument):
        make_rng(2**64)
    with pytest.raises(InvalidArgument):
        make_rng(-1)


def test_channel_stats_validation():
    with pytest.raises(InvalidArgument):
        ChannelStats([0.0, 1.0], [1.0])
    with pytest.raises(InvalidArgument):
        ChannelStats([0.0], [-0.1])
    s = ChannelStats.constant(0.5, 2.0, 3)
    assert len(s) == 3 and s == ChannelStats([0.5] * 3, [2.0] * 3)


def test_activation_stats_match_naive_loop():
    t = gaussian_tensor((3, 4, 5, 2), 0.3, 1.7, 11)
    st_ = activation_channel_stats(t)
    mu, sd = naive_channel_stats(t)
    np.testing.assert_allclose(st_.mean, mu, rtol=0, atol=1e-12)
    np.testing.assert_allclose(st_.std, sd, rtol=0, atol=1e-12)


def test_activation_stats_rejects_bad_input():
    with pytest.raises(InvalidArgument):
        activation_channel_stats(np.zeros((2, 3)))
    with pytest.raises(InvalidArgument):
        activation_channel_stats(np.zeros((0, 3, 2, 2)))


@given(arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(1, 4), st.integers(1, 3),
                                    st.integers(1, 3)),
              elements=st.floats(-100, 100, width=32)))
def test_weight_stats_are_order_independent(w):
    a = weight_channel_stats(w)
    perm = np.random.default_rng(0).permutation(w[0].size)
    shuffled = w.reshape(w.shape[0], -1)[:, perm].reshape(w.shape)
    b = weight_channel_stats(shuffled)
    assert a == b
    assert np.all(a.std >= 0)
    np.testing.assert_allclose(a.mean, w.reshape(w.shape[0], -1).astype(np.float64).mean(1),
                               rtol=1e-12, atol=1e-9)
