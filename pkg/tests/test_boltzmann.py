import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boltzformer.boltzmann import (
    AttentionSet,
    BoltzmannField,
    SamplerConfig,
    baseline_attention_set,
    bernoulli_trials,
    boltzmann_distribution,
    boltzmann_probabilities,
    confidence_map,
    inclusion_probability,
    level_attention_masks,
    multinomial_attention_set,
    resample_field,
    sample_attention_set,
    sample_masks,
    temperature_at,
    trial_count,
)
from boltzformer.errors import ConfigError, NumericalError
from boltzformer.grid import SpatialField
from boltzformer.rng import layer_uniforms, substream


def field_of(p):
    return BoltzmannField(SpatialField(np.asarray(p, dtype=np.float64)), 1.0)


def binomial_band(p, n):
    return 3 * math.sqrt(p * (1 - p) / n)


# --- confidence map -------------------------------------------------------


def test_confidence_zero_mu():
    sem = SpatialField(np.random.default_rng(0).normal(size=(3, 4, 5)))
    np.testing.assert_array_equal(confidence_map(np.zeros(5), sem).data, 0.5)


def test_confidence_ln3_pixel():
    mu = np.array([math.sqrt(math.log(3)), 0.0])
    sem = np.zeros((2, 2, 2))
    sem[1, 0] = mu
    u = confidence_map(mu, SpatialField(sem)).plane(0)
    # sigmoid(ln 3) = 3 / 4
    assert u[1, 0] == pytest.approx(0.75, abs=1e-12)
    assert u[0, 0] == u[0, 1] == u[1, 1] == 0.5


def test_confidence_antisymmetry():
    rng = np.random.default_rng(1)
    sem = SpatialField(rng.normal(size=(4, 4, 3)))
    mu = rng.normal(size=3)
    np.testing.assert_allclose(confidence_map(-mu, sem).data, 1 - confidence_map(mu, sem).data, atol=1e-15)


def test_confidence_dim_mismatch():
    with pytest.raises(ConfigError):
        confidence_map(np.zeros(3), SpatialField(np.zeros((2, 2, 4))))


# --- Boltzmann distribution ------------------------------------------------


def test_constant_confidence_is_uniform():
    p = boltzmann_distribution(SpatialField.full(4, 4, 0.3), 0.7).probabilities.plane(0)
    np.testing.assert_allclose(p, 1 / 16, atol=1e-15)


def test_two_cell_distribution():
    p = boltzmann_distribution(SpatialField(np.array([[0.2, 0.8]])), 1.0).probabilities.plane(0)
    # e^0.2 / (e^0.2 + e^0.8) = 1 / (1 + e^0.6)
    np.testing.assert_allclose(p, [[0.35434369377420455, 0.6456563062257954]], atol=1e-12)


def test_high_temperature_is_nearly_uniform():
    u = np.random.default_rng(2).uniform(0, 1, size=(4, 4))
    p = boltzmann_distribution(SpatialField(u), 100.0).probabilities.data
    assert p.max() - p.min() < 1e-2


def test_low_temperature_concentrates():
    u = np.random.default_rng(3).uniform(0, 1, size=(4, 4))
    p = boltzmann_distribution(SpatialField(u), 1e-3).probabilities.plane(0)
    assert p.reshape(-1)[np.argmax(u)] > 1 - 1e-9


def test_distribution_errors():
    with pytest.raises(ConfigError):
        boltzmann_probabilities(np.zeros((2, 2)), 0.0)
    with pytest.raises(NumericalError):
        boltzmann_probabilities(np.array([[np.nan, 0.0]]), 1.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=9, max_size=9), st.floats(0.05, 5), st.floats(-3, 3))
def test_monotone_and_shift_invariant(vals, tau, shift):
    u = np.array(vals).reshape(3, 3)
    p = boltzmann_probabilities(u, tau)
    assert abs(p.sum() - 1) <= 1e-12
    flat_u, flat_p = u.reshape(-1), p.reshape(-1)
    for i in range(9):
        for j in range(9):
            if flat_u[i] > flat_u[j]:
                assert flat_p[i] >= flat_p[j]
    np.testing.assert_allclose(boltzmann_probabilities(u + shift, tau), p, atol=1e-9)


def test_temperature_schedule():
    assert temperature_at(1.0, 0) == 1.0
    assert temperature_at(1.0, 1) == 0.5
    assert temperature_at(1.0, 8) == pytest.approx(1 / 9)
    taus = [temperature_at(0.5, l) for l in range(9)]
    assert all(a > b for a, b in zip(taus, taus[1:]))


def test_trial_count():
    assert trial_count(0.10, 64) == 7
    assert trial_count(0.10, 10) == 1
    assert trial_count(0.10, 1024) == 103
    assert trial_count(0.001, 16) == 1


def test_resampled_field_stays_normalized():
    p = boltzmann_distribution(SpatialField(np.random.default_rng(4).uniform(size=(8, 8))), 0.5)
    r = resample_field(p, 16, 16)
    assert abs(r.probabilities.data.sum() - 1) <= 1e-9
    assert r.probabilities.shape == (16, 16, 1)


# --- sampling -------------------------------------------------------------


def test_inclusion_probability_closed_form():
    # 1 - (15/16)^4 = 14911 / 65536
    np.testing.assert_allclose(inclusion_probability(np.full(16, 1 / 16), 4), 14911 / 65536, rtol=1e-14)
    assert inclusion_probability(np.array([1.0]), 3)[0] == 1.0
    assert inclusion_probability(np.array([0.0]), 3)[0] == 0.0
    # no cancellation for tiny p: ~ N p
    assert inclusion_probability(np.array([1e-18]), 5)[0] == pytest.approx(5e-18, rel=1e-12)


def test_one_hot_always_selected():
    p = np.zeros((4, 4))
    p[2, 3] = 1.0
    rng = np.random.default_rng(0)
    for _ in range(50):
        s = sample_attention_set(field_of(p), 3, rng)
        assert s.indices == ((2, 3),)


def test_bernoulli_stage_matches_law_uniform():
    draws = 100_000
    u = substream(0, 1).random((draws, 16))
    keep = bernoulli_trials(np.full(16, 1 / 16), 4, u)
    target = 14911 / 65536
    rates = keep.mean(axis=0)
    assert np.all(np.abs(rates - target) <= binomial_band(target, draws))


def test_bernoulli_stage_matches_law_nonuniform():
    rng = np.random.default_rng(5)
    p = rng.dirichlet(np.ones(16) * 0.5)
    draws = 20_000
    keep = bernoulli_trials(p, 3, substream(0, 2).random((draws, 16)))
    target = 1 - (1 - p) ** 3
    band = 3 * np.sqrt(target * (1 - target) / draws) + 1e-12
    assert np.all(np.abs(keep.mean(axis=0) - target) <= band)


def test_multinomial_oracle_has_same_marginals():
    # the exact with-replacement scheme has the same marginal law
    p = np.full((4, 4), 1 / 16)
    rng = np.random.default_rng(6)
    draws = 20_000
    hits = np.zeros((4, 4))
    for _ in range(draws):
        s = multinomial_attention_set(field_of(p), 4, rng)
        hits += s.mask()
        assert len(s) <= 4
    target = 14911 / 65536
    assert np.all(np.abs(hits / draws - target) <= binomial_band(target, draws))


def test_concentrated_single_trial():
    p = np.full(16, 0.01 / 15)
    p[5] = 0.99
    rng = np.random.default_rng(7)
    hits = sum(5 in sample_attention_set(field_of(p.reshape(4, 4)), 1, rng).flat_indices() for _ in range(10_000))
    assert hits >= 9800


def test_sampler_repairs_empty_and_oversized_rows():
    p = np.array([[0.1, 0.4, 0.2, 0.3], [0.25, 0.25, 0.25, 0.25]])
    u = np.array([[0.99, 0.99, 0.99, 0.99], [0.0, 0.0, 0.0, 0.0]])
    keep = sample_masks(p, 2, u)
    # empty row -> argmax; full row capped to N, ties to lower index
    np.testing.assert_array_equal(keep, [[False, True, False, False], [True, True, False, False]])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 16))
def test_set_size_bounds(seed, side, n):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(side * side))
    s = sample_attention_set(field_of(p.reshape(side, side)), n, rng)
    assert 1 <= len(s) <= n


def test_sampling_is_deterministic():
    p = field_of(np.random.default_rng(8).dirichlet(np.ones(64)).reshape(8, 8))
    a = sample_attention_set(p, 7, substream(3, 11, 2))
    b = sample_attention_set(p, 7, substream(3, 11, 2))
    assert a == b


def test_layer_uniforms_are_keyed_per_example():
    u = layer_uniforms(0, [5, 9], 2, 3, 10)
    assert u.shape == (2, 3, 10)
    np.testing.assert_array_equal(layer_uniforms(0, [9], 2, 3, 10)[0], u[1])
    assert not np.array_equal(layer_uniforms(0, [5], 3, 3, 10)[0], u[0])


def test_expected_size_under_ratio():
    n_cells = 32 * 32
    n = trial_count(0.10, n_cells)
    p = np.random.default_rng(9).dirichlet(np.ones(n_cells))
    u = substream(0, 3).random((200, n_cells))
    sizes = sample_masks(np.broadcast_to(p, u.shape), n, u).sum(axis=1)
    assert sizes.max() <= n <= math.ceil(0.10 * n_cells)


# --- baselines ------------------------------------------------------------


def test_full_baseline():
    assert len(baseline_attention_set("full", None, 8, 8)) == 64


def test_threshold_baseline():
    logits = np.full((4, 4), -2.0)
    assert len(baseline_attention_set("threshold", SpatialField(logits), 4, 4)) == 16
    logits[0, 1] = logits[2, 2] = logits[3, 0] = 1.5
    s = baseline_attention_set("threshold", SpatialField(logits), 4, 4, 0.5)
    assert s.indices == ((0, 1), (2, 2), (3, 0))
    assert len(baseline_attention_set("threshold", None, 4, 4)) == 16
    with pytest.raises(ConfigError):
        baseline_attention_set("boltzmann", None, 4, 4)


def test_level_masks_dispatch():
    shape = (2, 3)
    full = level_attention_masks("full", None, 1, None, None, 0.5, (4, 4), shape)
    assert full.shape == (2, 3, 16) and full.all()
    logits = np.full((2, 3, 2, 2), -1.0)
    logits[..., 0, 0] = 5.0
    thr = level_attention_masks("threshold", None, 1, None, logits, 0.5, (4, 4), shape)
    assert thr.shape == (2, 3, 16) and thr[..., 0].all() and not thr.all()


def test_sampler_config_validation():
    with pytest.raises(ConfigError):
        SamplerConfig(tau0=0)
    with pytest.raises(ConfigError):
        SamplerConfig(sample_ratio=1.5)
    with pytest.raises(ConfigError):
        SamplerConfig(policy="random")
    assert SamplerConfig().n_trials(64) == 7


def test_attention_set_round_trip():
    m = np.zeros((3, 5), dtype=bool)
    m[1, 4] = m[2, 0] = True
    s = AttentionSet.from_mask(m)
    np.testing.assert_array_equal(s.mask(), m)
    np.testing.assert_array_equal(s.flat_indices(), [9, 10])
