import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tgdlf.dataset import build_district_dataset, clean, fill_missing_linear, outlier_mask
from tgdlf.decomposition import compute_load_ratio, extract_weekly_trend, hour_of_week
from tgdlf.synthgen import SynthSpec, generate, inject_gaps_and_spikes
from tgdlf.transfer import daily_ratio_vectors, mmd


def districts(spec):
    return [build_district_dataset(clean(r), i) for r, i in zip(generate(spec), spec.district_ids())]


def test_same_seed_is_bit_identical():
    a, b = generate(SynthSpec(seed=3, days=20)), generate(SynthSpec(seed=3, days=20))
    for x, y in zip(a, b):
        assert x.load.tobytes() == y.load.tobytes()
        assert x.weather().tobytes() == y.weather().tobytes()
    c = generate(SynthSpec(seed=4, days=20))
    assert not np.array_equal(a[0].load, c[0].load)


def test_shapes_ids_and_groups():
    spec = SynthSpec(n_districts=5, days=15)
    raws = generate(spec)
    assert len(raws) == 5 and all(len(r) == 15 * 24 for r in raws)
    assert spec.groups == [0, 0, 0, 1, 1]
    assert spec.district_ids() == ["east1", "east2", "east3", "west1", "west2"]
    assert all(r.is_clean() for r in raws)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 1.0), st.floats(0.0, 0.6))
def test_loads_strictly_positive(seed, corr, amp):
    spec = SynthSpec(days=14, seed=seed, correlation=corr, profile_amplitude=amp,
                     weather_coefs=(0.6, 0.3, -0.3, 0.3), noise_scale=0.2)
    assert all(np.all(r.load > 0) for r in generate(spec))


def test_noise_free_trend_recovers_planted_profile():
    spec = SynthSpec(days=70, seed=1, noise_scale=0.0, weather_coefs=(0, 0, 0, 0), n_districts=1)
    raw = generate(spec)[0]
    # the generator's load is base * profile[slot]; recover profile up to scale
    slot = np.array([hour_of_week(t) for t in raw.timestamps])
    profile = np.zeros(168)
    profile[slot[:168]] = raw.load[:168]
    implied = np.roll(profile, -24) / profile  # ratio of slot s+24 to slot s, labelled s+24
    implied = np.roll(implied, 24)
    ratio = compute_load_ratio(raw.load, hour_of_week(raw.timestamps[24]))
    trend = extract_weekly_trend(ratio, filter_width=1)
    assert np.max(np.abs(trend.profile - implied)) < 1e-6


def test_same_group_mmd_smaller_than_cross_group():
    for seed in range(5):
        ds = districts(SynthSpec(seed=seed))
        within = mmd(daily_ratio_vectors(ds[0]), daily_ratio_vectors(ds[1]))
        across = mmd(daily_ratio_vectors(ds[0]), daily_ratio_vectors(ds[2]))
        assert within < across


def test_correlation_knob_is_monotone():
    medians = []
    for rho in (0.5, 0.8, 0.95):
        vals = []
        for seed in range(3):
            ds = districts(SynthSpec(seed=seed, correlation=rho, days=60))
            vals.append(mmd(daily_ratio_vectors(ds[0]), daily_ratio_vectors(ds[1]), bandwidth=0.2))
        medians.append(np.median(vals))
    assert medians[0] > medians[1] > medians[2]


def test_corruption_identity_and_positions():
    raw = generate(SynthSpec(days=30))[0]
    same, c = inject_gaps_and_spikes(raw, 0, 0)
    assert np.array_equal(same.load, raw.load) and len(c.spike_positions) == 0
    bad, c = inject_gaps_and_spikes(raw, 4, 5, seed=2)
    again, c2 = inject_gaps_and_spikes(raw, 4, 5, seed=2)
    assert np.array_equal(bad.load, again.load, equal_nan=True)
    assert np.array_equal(c.spike_positions, c2.spike_positions)
    assert len(c.spike_positions) == 5 and 4 <= len(c.gap_positions) <= 12
    factors = bad.load[c.spike_positions] / raw.load[c.spike_positions]
    assert np.all((factors >= 5) & (factors <= 10))
    assert np.all(np.isnan(bad.temperature[c.gap_positions]))
    with pytest.raises(ValueError):
        inject_gaps_and_spikes(generate(SynthSpec(days=14))[0], 100, 100)


def test_cleaning_repairs_default_corruption():
    for seed in range(3):
        for i, raw in enumerate(generate(SynthSpec(seed=seed))):
            bad, c = inject_gaps_and_spikes(raw, seed=10 * seed + i)
            assert outlier_mask(fill_missing_linear(bad.load))[c.spike_positions].mean() >= 0.9
            repaired = clean(bad)
            assert np.mean((repaired.load - raw.load) ** 2) < 0.01 * np.var(raw.load)


def test_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(days=5)
    with pytest.raises(ValueError):
        SynthSpec(correlation=1.5)
    with pytest.raises(ValueError):
        SynthSpec(n_districts=3, groups=[0, 1])
