import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cfmkit.errors import ConfigError, DimensionError
from cfmkit.rng import RngStream, make_dropout_mask, sample_standard_normal
from cfmkit.tensor import Tensor


def test_same_seed_and_position_repeat_bitwise():
    a = sample_standard_normal(RngStream(11, position=5), (3, 4))
    b = sample_standard_normal(RngStream(11, position=5), (3, 4))
    assert a.data.tobytes() == b.data.tobytes()


def test_draws_advance_position():
    s = RngStream(1)
    first = s.normal(4)
    second = s.normal(4)
    assert s.position == 2
    assert not np.array_equal(first, second)
    np.testing.assert_array_equal(RngStream(1, position=1).normal(4), second)


def test_shape_and_moments():
    assert sample_standard_normal(RngStream(0), (2, 3)).size == 6
    x = RngStream(2024).normal(100_000)
    assert abs(x.mean()) < 0.02
    assert abs(x.var() - 1.0) < 0.05


def test_split_children_are_independent_and_recorded():
    root = RngStream(9)
    a, b = root.split(0), root.split(1)
    assert a.lineage == (0,) and b.lineage == (1,)
    assert not np.array_equal(a.normal(8), b.normal(8))
    np.testing.assert_array_equal(RngStream(9).split(0).normal(8), RngStream(9, (0,)).normal(8))


def test_state_round_trip():
    s = RngStream(5, (2, 7))
    s.uniform(3)
    t = RngStream.from_state(s.state())
    np.testing.assert_array_equal(s.normal(5), t.normal(5))


def test_zero_rate_mask_keeps_everything():
    s = RngStream(0)
    m = make_dropout_mask(s, (4, 5), 0.0)
    assert m.scale == 1.0
    assert m.bits.all()
    assert s.position == 0


def test_mask_is_deterministic_given_stream_state():
    a = make_dropout_mask(RngStream(3, position=2), (10, 10), 0.05)
    b = make_dropout_mask(RngStream(3, position=2), (10, 10), 0.05)
    assert a.bits.tobytes() == b.bits.tobytes()


def test_kept_fraction_binomial_bound():
    m = make_dropout_mask(RngStream(77), (100, 100), 0.05)
    assert 0.94 <= m.kept_fraction() <= 0.96


@pytest.mark.parametrize("rate", [1.0, 1.5, -0.1])
def test_invalid_rate_is_config_error(rate):
    with pytest.raises(ConfigError):
        make_dropout_mask(RngStream(0), (2, 2), rate)


def test_mask_shape_checked():
    m = make_dropout_mask(RngStream(0), (2, 3), 0.5)
    with pytest.raises(DimensionError):
        m.apply(Tensor(np.ones((3, 2))))


@given(st.floats(0.01, 0.9), st.integers(0, 2**32))
def test_applying_twice_scales_once_more(rate, seed):
    m = make_dropout_mask(RngStream(seed), (6, 7), rate)
    x = Tensor(RngStream(seed + 1).normal((6, 7)))
    once = m.apply(x).data
    twice = m.apply(m.apply(x)).data
    np.testing.assert_allclose(twice, once * m.scale, rtol=1e-14)
