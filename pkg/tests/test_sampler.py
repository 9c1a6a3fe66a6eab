import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import quad

from mgslab.sampler import (
    MLE,
    ZERO,
    DegenerateProposalError,
    ProposalConfig,
    WeightUnderflowError,
    candidate_weights,
    combine,
    expand_sigma2,
    log_weights,
    mixture_log_density,
    noise_scale,
    sample_proposal,
    snis_variance,
)

SLICES = {"a": slice(0, 1), "b": slice(1, 4)}


def test_noise_scale_global():
    assert noise_scale(np.array([1.0, -1.0, 0.0, 0.0])) == pytest.approx(0.5)
    assert noise_scale(np.array([1.0, -1.0, 0.0, 0.0]), noise=0.1) == pytest.approx(0.05)


def test_noise_scale_per_tensor():
    s2 = noise_scale(np.array([-1.0, 0.0, 1.0, 0.0]), "per_tensor", SLICES)
    assert s2 == pytest.approx({"a": 1.0, "b": 1 / 3})
    np.testing.assert_allclose(expand_sigma2(s2, SLICES, 4), [1.0, 1 / 3, 1 / 3, 1 / 3])


def test_noise_scale_rejects_degenerate():
    with pytest.raises(DegenerateProposalError):
        noise_scale(np.zeros(3))
    with pytest.raises(DegenerateProposalError):
        noise_scale(np.array([1.0, 0.0, 0.0, 0.0]), "per_tensor", SLICES)
    with pytest.raises(ValueError):
        noise_scale(np.ones(2), "per_layer")
    with pytest.raises(DegenerateProposalError):
        ProposalConfig(1.0, 1.5)


def test_mixture_density_hand_value():
    # d=2, sigma2=1, pi=0.5 at delta=0 with MLE mean (1, 0)
    got = mixture_log_density(np.zeros(2), np.array([1.0, 0.0]), ProposalConfig(1.0, 0.5))
    assert got == pytest.approx(np.log(0.5 * (1 + np.exp(-0.5)) / (2 * np.pi)), abs=1e-12)


def test_mixture_density_endpoints_are_single_gaussians():
    m = np.array([0.3])
    d = np.array([0.1])
    assert mixture_log_density(d, m, ProposalConfig(1.0, 1.0)) == pytest.approx(-0.5 * 0.01 - 0.5 * np.log(2 * np.pi))
    assert mixture_log_density(d, m, ProposalConfig(1.0, 0.0)) == pytest.approx(-0.5 * 0.04 - 0.5 * np.log(2 * np.pi))


@pytest.mark.parametrize("pi", [0.0, 0.3, 1.0])
def test_mixture_density_integrates_to_one(pi):
    cfg = ProposalConfig(0.7, pi)
    total, _ = quad(lambda x: np.exp(mixture_log_density(np.array([x]), np.array([1.5]), cfg)), -20, 20)
    assert total == pytest.approx(1.0, abs=1e-9)


def test_mixture_density_survives_high_dimension():
    # raw densities underflow in 20k dimensions; the log form must not
    d = np.full(20_000, 0.01)
    lq = mixture_log_density(d, np.zeros_like(d), ProposalConfig(1e-4, 0.5))
    assert np.isfinite(lq)


def test_proposal_moments():
    rng = np.random.default_rng(0)
    m, s2, pi, n = np.array([1.0, -2.0]), 0.25, 0.3, 100_000
    cfg = ProposalConfig(s2, pi)
    draws, comps = zip(*(sample_proposal(m, cfg, rng) for _ in range(n)))
    draws = np.array(draws)
    np.testing.assert_allclose(draws.mean(0), (1 - pi) * m, atol=0.02)
    np.testing.assert_allclose(draws.var(0), s2 + pi * (1 - pi) * m * m, rtol=0.02)
    assert np.mean([c == ZERO for c in comps]) == pytest.approx(pi, abs=0.005)
    assert set(comps) == {ZERO, MLE}


def test_weights_hand_value():
    w = candidate_weights(1.0, [0.0, 1.0], [0.0, 0.0], 1.0)
    np.testing.assert_allclose(w, [0.7310585786300049, 0.2689414213699951], rtol=1e-12)


def test_weights_errors():
    with pytest.raises(ValueError):
        candidate_weights(0.0, [], [], 1.0)
    with pytest.raises(ValueError):
        log_weights(0.0, [1.0], [0.0], -1.0)
    with pytest.raises(WeightUnderflowError):
        candidate_weights(0.0, [np.inf, np.inf], [0.0, 0.0], 1.0)


def test_weights_drop_non_finite_candidates():
    w = candidate_weights(0.0, [np.inf, 1.0], [0.0, 0.0], 1.0)
    np.testing.assert_array_equal(w, [0.0, 1.0])


floats = st.floats(-50, 50)


@given(st.lists(st.tuples(floats, floats), min_size=1, max_size=8), floats, st.floats(0, 20), floats)
def test_weight_invariances(pairs, base, alpha, shift):
    costs, log_qs = map(list, zip(*pairs))
    w = candidate_weights(base, costs, log_qs, alpha)
    assert abs(w.sum() - 1.0) < 1e-9
    np.testing.assert_allclose(candidate_weights(base + shift, costs, log_qs, alpha), w, atol=1e-9)
    np.testing.assert_allclose(candidate_weights(base, costs, [q + shift for q in log_qs], alpha), w, atol=1e-9)
    np.testing.assert_allclose(
        candidate_weights(base, [c + shift for c in costs], log_qs, alpha), w, atol=1e-9
    )


def test_alpha_zero_is_pure_density_correction():
    lq = np.array([-1.0, 0.0, 2.0])
    w = candidate_weights(5.0, [0.0, 9.0, 1.0], lq, 0.0)
    np.testing.assert_allclose(w, np.exp(-lq) / np.exp(-lq).sum(), rtol=1e-12)


def test_combine_and_variance():
    deltas = [np.array([1.0, 0.0]), np.array([0.0, 1.0])]
    c = combine(deltas, [0.25, 0.75])
    np.testing.assert_allclose(c, [0.25, 0.75])
    np.testing.assert_allclose(snis_variance(deltas, [0.25, 0.75], c), [0.1875, 0.1875])
    assert np.array_equal(combine(deltas, [1.0, 0.0]), deltas[0])
