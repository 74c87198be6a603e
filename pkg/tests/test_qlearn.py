import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ivope.core import RunConfig, TabularIndex, TargetPolicy, derive_rng_stream
from ivope.envs import Continuous2D, ToyTabular, sample_dataset
from ivope.errors import NonConvergenceError, SingularSystemError
from ivope.nuisance import build_ratios, fit_cond
from ivope.oracle import exact_dp, true_nuisances
from ivope.qlearn import (
    LinearFeatures,
    QModel,
    TabularFeatures,
    fqe_iv,
    fqe_nuc,
    nuc_value,
    policy_weights,
    value_from_q,
)


def _fitted(data, pi):
    pz, pa = fit_cond(data, "Z_given_S"), fit_cond(data, "A_given_ZS")
    return build_ratios(pa, pz, pi), pa


def test_gamma_zero_is_one_step_regression(toy_data, toy_pi):
    ratios, pa = _fitted(toy_data, toy_pi)
    q = fqe_iv(toy_data, ratios, pa, 0.0)
    tr = toy_data.flat
    for s in (0, 1):
        for z in (0, 1):
            for a in (0, 1):
                m = (tr.s[:, 0] == s) & (tr.z == z) & (tr.a == a)
                assert q.predict(np.array([[s]]), [z], [a])[0] == pytest.approx(tr.r[m].mean())


def test_constant_reward_fixed_point(toy_data, toy_pi):
    data = toy_data.with_rewards(np.ones_like(toy_data.rewards))
    ratios, pa = _fitted(data, toy_pi)
    q = fqe_iv(data, ratios, pa, 0.9)
    assert np.allclose(q.coef, 10.0, atol=1e-4)


def test_constant_reward_fixed_point_linear():
    data = sample_dataset(Continuous2D(), 100, 20, derive_rng_stream(1, "c"))
    data = data.with_rewards(np.ones_like(data.rewards))
    pi = TargetPolicy.logistic([1.0, 1.0, 1.0])
    ratios, pa = _fitted(data, pi)
    q = fqe_iv(data, ratios, pa, 0.9)
    s = data.states[:, 0]
    assert np.allclose(value_from_q(q, ratios, pa, s), 10.0, atol=1e-4)


def test_table_q_matches_exact_dp(toy, toy_pi):
    data = sample_dataset(toy, 2000, 100, derive_rng_stream(2, "q"))
    ratios, pa = _fitted(data, toy_pi)
    q = fqe_iv(data, ratios, pa, 0.9)
    Q = exact_dp(toy, toy_pi, 0.9).details["Q"]
    assert np.abs(q.table() - Q).max() < 0.5


def test_fixed_point_normal_equations(toy_data, toy_pi):
    ratios, pa = _fitted(toy_data, toy_pi)
    q = fqe_iv(toy_data, ratios, pa, 0.9, RunConfig(fqe_tol=1e-10))
    tr = toy_data.flat
    resid = tr.r + 0.9 * value_from_q(q, ratios, pa, tr.s_next) - q.predict(tr.s, tr.z, tr.a)
    Phi = q.features(tr.s, tr.z, tr.a)
    assert np.abs(Phi.T @ resid / len(resid)).max() < 1e-8


def test_contraction_and_bounds(toy_data, toy_pi):
    ratios, pa = _fitted(toy_data, toy_pi)
    q = fqe_iv(toy_data, ratios, pa, 0.9)
    h = np.array(q.history)
    ratio = h[6:] / h[5:-1]
    assert np.median(ratio) <= 0.9 + 0.1
    assert q.table().min() >= 0 and q.table().max() <= 10 / (1 - 0.9)


def test_nonconvergence_carries_history(toy_data, toy_pi):
    ratios, pa = _fitted(toy_data, toy_pi)
    with pytest.raises(NonConvergenceError) as err:
        fqe_iv(toy_data, ratios, pa, 0.9, RunConfig(fqe_max_iters=3))
    assert len(err.value.history) == 3


def test_unobserved_cell_makes_design_singular(toy_data, toy_pi):
    ratios, pa = _fitted(toy_data, toy_pi)
    feats = TabularFeatures(TabularIndex.from_states(np.array([[0.0], [1.0], [2.0]])))
    with pytest.raises(SingularSystemError):
        fqe_iv(toy_data, ratios, pa, 0.9, features=feats)


def test_value_from_constant_q(toy_data, toy_pi):
    ratios, pa = _fitted(toy_data, toy_pi)
    feats = TabularFeatures(TabularIndex.from_states(np.array([[0.0], [1.0]])))
    q = QModel(feats, np.full(8, 3.5), 0.9, True, 0, ())
    assert np.allclose(value_from_q(q, ratios, pa, np.array([[0.0], [1.0]])), 3.5)


def test_value_with_degenerate_weights(toy_data):
    pz, pa = fit_cond(toy_data, "Z_given_S"), fit_cond(toy_data, "A_given_ZS")
    s = np.array([[0.0], [1.0]])
    p1 = pa.predict(s, np.ones(2))
    ratios = build_ratios(pa, pz, TargetPolicy.tabular(p1))  # c1 = 1, c0 = 0
    feats = TabularFeatures(TabularIndex.from_states(s))
    coef = np.arange(8.0)
    q = QModel(feats, coef, 0.9, True, 0, ())
    expected = (1 - p1) * coef.reshape(2, 2, 2)[:, 1, 0] + p1 * coef.reshape(2, 2, 2)[:, 1, 1]
    assert np.allclose(value_from_q(q, ratios, pa, s), expected)


def test_true_nuisances_reproduce_exact_values(toy, toy_pi):
    nuis = true_nuisances(toy, toy_pi, 0.9, 100)
    dp = exact_dp(toy, toy_pi, 0.9)
    s = np.array([[0.0], [1.0]])
    assert np.allclose(value_from_q(nuis.q, nuis.ratios, nuis.pa, s), dp.details["V"], atol=1e-10)


@settings(max_examples=25)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1), st.integers(0, 1))
def test_linear_features_layout(s1, s2, z, a):
    f = LinearFeatures(2)(np.array([[s1, s2]]), [z], [a])[0]
    assert np.allclose(f, [1, s1, s2, z, a, s1 * z, s2 * z, s1 * a, s2 * a, z * a])


def test_policy_weights_sum_to_one(toy_data, toy_pi):
    ratios, pa = _fitted(toy_data, toy_pi)
    w = policy_weights(ratios, pa, np.array([[0.0], [1.0]]))
    assert np.allclose(w.sum(axis=(1, 2)), 1.0)
    assert np.allclose(w[:, :, 1].sum(axis=1), [0.25, 0.5])


def test_nuc_gamma_zero_regression(toy_data, toy_pi):
    q = fqe_nuc(toy_data, toy_pi, 0.0)
    tr = toy_data.flat
    m = (tr.s[:, 0] == 1) & (tr.a == 1)
    assert q.predict(np.array([[1.0]]), None, [1])[0] == pytest.approx(tr.r[m].mean())


def test_nuc_unbiased_without_confounding():
    env, pi = ToyTabular(action_confounding=0.0), TargetPolicy.tabular([0.25, 0.5])
    data = sample_dataset(env, 1000, 100, derive_rng_stream(3, "nuc"))
    q = fqe_nuc(data, pi, 0.9)
    v = nuc_value(q, pi, data.initial_states)
    eta = exact_dp(env, pi, 0.9).eta
    assert abs(v.mean() - eta) < 2 * v.std(ddof=1) / np.sqrt(data.n) + 0.1


def test_nuc_biased_under_confounding(toy, toy_pi):
    eta = exact_dp(toy, toy_pi, 0.9).eta
    est = []
    for r in range(5):
        data = sample_dataset(toy, 1000, 100, derive_rng_stream(4, "nuc", r))
        est.append(nuc_value(fqe_nuc(data, toy_pi, 0.9), toy_pi, data.initial_states).mean())
    est = np.array(est)
    assert abs(est.mean() - eta) > 3 * est.std(ddof=1) / np.sqrt(len(est))
