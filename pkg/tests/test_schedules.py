import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cfmkit.errors import ConfigError, DomainError
from cfmkit.rng import RngStream
from cfmkit.schedules import DeltaSchedule, TimeSampler, delta_at, sample_times


def test_first_and_last_bins_hit_the_endpoints():
    s = DeltaSchedule(total_epochs=80)
    assert delta_at(s, 0) == 0.1
    assert delta_at(s, 9) == 0.1
    assert delta_at(s, 79) == 0.001


def test_middle_bin_linear_value():
    s = DeltaSchedule(total_epochs=80)
    assert delta_at(s, 40) == pytest.approx(0.1 - 4 * 0.099 / 7, abs=1e-15)
    assert delta_at(s, 40) == pytest.approx(0.043429, abs=5e-7)


def test_exponential_mode_is_geometric():
    s = DeltaSchedule(total_epochs=8, mode="exponential")
    v = np.array(s.values())
    np.testing.assert_allclose(v[1:] / v[:-1], (0.001 / 0.1) ** (1 / 7), rtol=1e-12)


@pytest.mark.parametrize("epoch", [-1, 80])
def test_epoch_out_of_range(epoch):
    with pytest.raises(DomainError):
        delta_at(DeltaSchedule(total_epochs=80), epoch)


@pytest.mark.parametrize("kw", [dict(mode="cosine"), dict(bins=1), dict(start=0.001, end=0.1), dict(total_epochs=0)])
def test_bad_schedule_settings(kw):
    kw.setdefault("total_epochs", 10)
    with pytest.raises(ConfigError):
        DeltaSchedule(**kw)


@given(st.integers(1, 400), st.integers(2, 12), st.sampled_from(["linear", "exponential"]))
def test_schedule_nonincreasing_with_k_distinct_values(n, k, mode):
    s = DeltaSchedule(total_epochs=n, bins=k, mode=mode)
    seq = [delta_at(s, e) for e in range(n)]
    assert all(a >= b for a, b in zip(seq, seq[1:]))
    assert len(set(s.values())) == k
    assert all(a > b for a, b in zip(s.values(), s.values()[1:]))
    if n >= k:
        assert len(set(seq)) == k


def test_single_segment_zero_clamp_covers_unit_interval():
    t, i = sample_times(TimeSampler(1, RngStream(0), 0.0), 20_000)
    assert (i == 0).all()
    assert t.min() >= 0.0 and t.max() <= 1.0
    assert t.min() < 0.01 and t.max() > 0.99


@given(st.integers(1, 6), st.floats(0.0, 0.99), st.integers(0, 2**31))
def test_pairs_keep_both_points_in_segment(S, frac, seed):
    dt = frac / S
    t, i = sample_times(TimeSampler(S, RngStream(seed), dt), 256)
    assert ((i >= 0) & (i < S)).all()
    assert (t >= i / S).all()
    assert (t + dt <= (i + 1) / S + 1e-12).all()


def test_segment_fraction_binomial_bound():
    _, i = sample_times(TimeSampler(2, RngStream(1), 0.01), 100_000)
    assert 0.49 <= (i == 0).mean() <= 0.51


def test_clamp_as_wide_as_segment_is_rejected():
    with pytest.raises(ConfigError):
        sample_times(TimeSampler(2, RngStream(0), 0.5), 4)
    with pytest.raises(ConfigError):
        TimeSampler(0, RngStream(0))
