import numpy as np
import pytest

from ivope.core import Dataset, RunConfig, derive_rng_stream
from ivope.envs import PartialObs, ToyTabular, sample_dataset
from ivope.errors import HorizonError, SingularSystemError
from ivope.estimators import estimate_dm, fit_nuisances
from ivope.oracle import eta_mc
from ivope.pomdp import (
    ConstantFeatures,
    build_hf_dataset,
    estimate_pomdp_dm,
    fit_gq,
    initial_futures,
)


def _data(env, n, T, seed):
    return sample_dataset(env, n, T, derive_rng_stream(seed, "pomdp"))


@pytest.fixture(scope="module")
def toy_fit(toy_pi):
    d = _data(ToyTabular(), 500, 100, 0)
    nuis = fit_nuisances(d, toy_pi, RunConfig())
    gq = fit_gq(build_hf_dataset(d), nuis.ratios, nuis.pa, 0.9, extra_futures=initial_futures(d, 1))
    return d, nuis, gq


def test_window_layout_one_episode():
    states = np.arange(6, dtype=float)[None, :, None]
    actions = np.array([[0, 1, 0, 1, 1]])
    d = Dataset(states, np.zeros((1, 5), dtype=int), actions, np.arange(5.0)[None])
    pairs = build_hf_dataset(d, 1, 1)
    assert len(pairs) == 5 - 1
    first = pairs[0]
    np.testing.assert_array_equal(first.H, [0.0, 0.0])  # (O_0, A_0)
    np.testing.assert_array_equal(first.F, [1.0])  # O_1
    assert first.r == 1.0 and first.a == 1
    np.testing.assert_array_equal(first.F_next, [2.0])


@pytest.mark.parametrize("M_H, M_F", [(1, 1), (2, 1), (1, 2), (2, 3)])
def test_pair_count(M_H, M_F):
    d = _data(ToyTabular(), 3, 10, 1)
    pairs = build_hf_dataset(d, M_H, M_F)
    assert len(pairs) == d.n * (d.horizon - M_H - M_F + 1)
    assert pairs.F.shape[1] == M_F + (M_F - 1)
    assert pairs.H.shape[1] == 2 * M_H


def test_short_horizon_errors():
    d = _data(ToyTabular(), 2, 3, 2)
    with pytest.raises(HorizonError):
        build_hf_dataset(d, 2, 1)
    with pytest.raises(ValueError):
        build_hf_dataset(d, 0, 1)


def test_stationarity_of_closed_form(toy_fit):
    _, _, gq = toy_fit
    assert np.abs(gq.stationarity).max() < 1e-8


def test_stationarity_with_outer_ridge(toy_fit):
    d, nuis, _ = toy_fit
    gq = fit_gq(build_hf_dataset(d), nuis.ratios, nuis.pa, 0.9, penalties=(1.0, 1e-3, 1e-2), extra_futures=initial_futures(d, 1))
    assert np.abs(gq.stationarity).max() < 1e-8
    assert gq.objective > 0


def test_constant_gq_returns_constant(toy_fit):
    d, nuis, gq = toy_fit
    flat = type(gq)(**{**gq.__dict__, "theta": np.full_like(gq.theta, 7.0)})
    rep = estimate_pomdp_dm(d, flat, nuis.ratios, nuis.pa)
    assert rep.eta_hat == pytest.approx(7.0)


def test_gamma_zero_is_instrumented_regression(toy_fit):
    d, nuis, _ = toy_fit
    pairs = build_hf_dataset(d)
    gq = fit_gq(pairs, nuis.ratios, nuis.pa, 0.0, penalties=(1.0, 0.0, 0.0), extra_futures=initial_futures(d, 1))
    Psi = gq.h_features(pairs.H, pairs.z, pairs.a)
    Phi = gq.q_features(pairs.F, pairs.z, pairs.a)
    # two-stage least squares of R on future features with history instruments
    fitted = Psi @ np.linalg.lstsq(Psi, Phi, rcond=None)[0]
    tsls = np.linalg.lstsq(fitted, pairs.r, rcond=None)[0]
    np.testing.assert_allclose(gq.theta, tsls, atol=1e-8)


def test_constant_history_basis_is_singular(toy_fit):
    d, nuis, _ = toy_fit
    with pytest.raises(SingularSystemError):
        fit_gq(build_hf_dataset(d), nuis.ratios, nuis.pa, 0.9, h_features=ConstantFeatures())


def test_invalid_penalties(toy_fit):
    d, nuis, _ = toy_fit
    with pytest.raises(ValueError):
        fit_gq(build_hf_dataset(d), nuis.ratios, nuis.pa, 0.9, penalties=(0.0, 1e-3, 0.0))


def test_fully_observed_reduction(toy_fit):
    d, nuis, gq = toy_fit
    pomdp = estimate_pomdp_dm(d, gq, nuis.ratios, nuis.pa)
    mdp = estimate_dm(d, nuis)
    assert abs(pomdp.eta_hat - mdp.eta_hat) < 2 * np.hypot(pomdp.se, mdp.se)


def test_partial_observation_on_policy_value():
    env = PartialObs()
    # target equal to the observed law of A given O: every IV weight is one
    pi = env.behavior_policy()
    truth = eta_mc(env, pi, 0.9, 200_000, 150, derive_rng_stream(0, "partialobs-oracle"))
    d = _data(env, 1000, 100, 3)
    nuis = fit_nuisances(d, pi, RunConfig())
    gq = fit_gq(build_hf_dataset(d), nuis.ratios, nuis.pa, 0.9, extra_futures=initial_futures(d, 1))
    rep = estimate_pomdp_dm(d, gq, nuis.ratios, nuis.pa)
    assert abs(rep.eta_hat - truth.eta) < 3 * rep.se + truth.error_bound
