from dataclasses import replace

import numpy as np
import pytest

from ivope.core import TargetPolicy, derive_rng_stream
from ivope.envs import Continuous2D, ToyTabular, make_env, sample_dataset
from ivope.errors import CapExceededError
from ivope.oracle import (
    OracleCache,
    OracleValue,
    behavior_implied_policy,
    brute_force_sum,
    continuous2d_value,
    eta_mc,
    exact_dp,
    interventional_dp,
    onpolicy_mc,
    true_omega,
)

# frozen after agreement of exact_dp, brute_force_sum(10) and eta_mc(10^6)
TOY_ETA = 33.30445835734227
# frozen after agreement of Gauss-Hermite quadrature and on-policy Monte Carlo
C2D_ETA = 13.50113404675131


def test_frozen_toy_value(toy, toy_pi):
    assert exact_dp(toy, toy_pi, 0.9).eta == pytest.approx(TOY_ETA, abs=1e-9)


def test_gamma_zero_is_one_step_reward(toy, toy_pi):
    # independent one-step computation straight from the generative formulas
    total = 0.0
    for s in (0.0, 1.0):
        arr = np.array([s])
        p = [toy.true_pa1(arr[:, None], z)[0] for z in (0, 1)]
        c1 = (toy_pi.prob1(arr[:, None])[0] - p[0]) / (p[1] - p[0])
        for z, cz in ((0, 1 - c1), (1, c1)):
            for u in (0.0, 1.0):
                pa = toy.p_a_given_u(s, z, u)
                er = (1 - pa) * toy.p_outcome(s, 0, u) + pa * toy.p_outcome(s, 1, u)
                total += 0.5 * cz * 0.5 * 10 * er
    assert exact_dp(toy, toy_pi, 0.0).eta == pytest.approx(total, abs=1e-12)


def test_constant_reward(toy, toy_pi):
    model = toy.tabular_model()
    flat = replace(model, reward_values=np.full_like(model.reward_values, 10.0))
    assert exact_dp(flat, toy_pi, 0.9).eta == pytest.approx(100.0)


@pytest.mark.parametrize("T", [0, 3, 10])
def test_brute_force_matches_exact(toy, toy_pi, T):
    bf = brute_force_sum(toy, toy_pi, 0.9, T)
    assert bf.error_bound > 0
    assert abs(bf.eta - TOY_ETA) <= bf.error_bound


def test_full_tuple_enumeration_agrees(toy, toy_pi):
    a = brute_force_sum(toy, toy_pi, 0.9, 3, full_tuples=True)
    b = brute_force_sum(toy, toy_pi, 0.9, 3)
    assert a.eta == pytest.approx(b.eta, rel=1e-12)


def test_horizon_zero_equals_gamma_zero(toy, toy_pi):
    assert brute_force_sum(toy, toy_pi, 0.9, 0).eta == pytest.approx(exact_dp(toy, toy_pi, 0.0).eta, abs=1e-12)


def test_cap(toy, toy_pi):
    with pytest.raises(CapExceededError):
        brute_force_sum(toy, toy_pi, 0.9, 8, full_tuples=True)
    with pytest.raises(CapExceededError):
        brute_force_sum(toy, toy_pi, 0.9, 30)


def test_behavior_implied_policy_gives_observational_return(toy):
    pi = behavior_implied_policy(toy)
    model = toy.tabular_model()
    # observational chain: Z and A drawn by the behavior law
    pz = np.column_stack([1 - model.p_z1, model.p_z1])
    w = pz[:, :, None] * model.p_a
    r = np.einsum("sza,sza->s", w, model.r_mean)
    P = np.einsum("sza,szat->st", w, model.p_next)
    T, marg, total = 6, model.nu.copy(), 0.0
    for t in range(T + 1):
        total += 0.9**t * marg @ r
        marg = marg @ P
    assert brute_force_sum(toy, pi, 0.9, T).eta == pytest.approx(total, rel=1e-12)


def test_eta_mc_unit_weights_under_behavior_implied_policy(toy):
    pi = behavior_implied_policy(toy)
    v = eta_mc(toy, pi, 0.9, 2000, 20, derive_rng_stream(0, "mc"))
    d = sample_dataset(toy, 2000, 20, derive_rng_stream(0, "mc"))
    plain = float(np.mean(d.rewards @ 0.9 ** np.arange(20)))
    assert v.eta == pytest.approx(plain, rel=1e-12)


def test_eta_mc_agrees_with_exact(toy, toy_pi):
    v = eta_mc(toy, toy_pi, 0.9, 100_000, 150, derive_rng_stream(1, "mc"))
    assert abs(v.eta - TOY_ETA) <= v.error_bound


def test_ratio_proposal_agrees_with_exact(toy, toy_pi):
    v = eta_mc(toy, toy_pi, 0.9, 50_000, 150, derive_rng_stream(4, "mc"), iv_proposal="ratio")
    assert v.method.startswith("MonteCarloIdentified")
    assert abs(v.eta - TOY_ETA) <= v.error_bound


def test_ratio_proposal_agrees_with_weighted_on_adcampaign():
    env = make_env("adcampaign")
    pi = env.target_policy()
    weighted = eta_mc(env, pi, 0.9, 50_000, 30, derive_rng_stream(5, "mc"))
    direct = eta_mc(env, pi, 0.9, 50_000, 30, derive_rng_stream(5, "mc"), iv_proposal="ratio")
    assert direct.details["sd"] < weighted.details["sd"] / 10
    assert direct.agrees_with(weighted)


def test_unknown_proposal():
    with pytest.raises(ValueError):
        eta_mc(ToyTabular(), TargetPolicy.tabular([0.5, 0.5]), 0.9, 10, 5, 0, iv_proposal="uniform")


def test_eta_mc_spread_grows_with_horizon(toy, toy_pi):
    short = eta_mc(toy, toy_pi, 0.9, 20_000, 10, derive_rng_stream(2, "mc"))
    long = eta_mc(toy, toy_pi, 0.9, 20_000, 50, derive_rng_stream(2, "mc"))
    assert long.details["sd"] > short.details["sd"]


def test_identified_and_interventional_values_differ_on_toy(toy, toy_pi):
    # U enters the outcome jointly with A, so the identified value is not causal here
    assert exact_dp(toy, toy_pi, 0.9).eta != pytest.approx(interventional_dp(toy, toy_pi, 0.9).eta, abs=0.05)
    free = ToyTabular(action_confounding=0.0)
    assert exact_dp(free, toy_pi, 0.9).eta == pytest.approx(interventional_dp(free, toy_pi, 0.9).eta, rel=1e-10)


def test_quadrature_matches_onpolicy_mc():
    pi = TargetPolicy.logistic([1.0, 1.0, 1.0])
    quad = continuous2d_value(pi, 0.9)
    assert quad.eta == pytest.approx(C2D_ETA, abs=1e-9)
    mc = onpolicy_mc(Continuous2D(), pi, 0.9, 50_000, 200, derive_rng_stream(3, "mc"))
    assert abs(mc.eta - quad.eta) <= mc.error_bound


def test_quadrature_rejects_other_policies():
    with pytest.raises(ValueError):
        continuous2d_value(TargetPolicy.logistic([0.0, 1.0, 2.0]), 0.9)


def test_true_omega_normalises(toy, toy_pi):
    omega = true_omega(toy, toy_pi, 0.9, 30)
    model = toy.tabular_model()
    Pb = np.einsum("sz,sza,szat->st", np.column_stack([1 - model.p_z1, model.p_z1]), model.p_a, model.p_next)
    pD, marg = np.zeros(model.m), model.nu.copy()
    for _ in range(30):
        pD += marg / 30
        marg = marg @ Pb
    assert np.all(omega > 0)
    assert pD @ omega == pytest.approx(1.0)


def test_cache_round_trip(tmp_path, toy, toy_pi):
    cache = OracleCache(tmp_path / "oracle.csv")
    calls = []

    def compute():
        calls.append(1)
        return exact_dp(toy, toy_pi, 0.9)

    first = cache.get_or_compute(toy, toy_pi, 0.9, "ExactDP", "", compute)
    second = cache.get_or_compute(toy, toy_pi, 0.9, "ExactDP", "", compute)
    assert len(calls) == 1
    assert second.details.get("cached") and second.eta == first.eta
    cache.get_or_compute(toy, toy_pi, 0.5, "ExactDP", "", compute)
    assert len(calls) == 2


def test_agreement_helper():
    assert OracleValue(1.0, "a", 0.1).agrees_with(OracleValue(1.15, "b", 0.1))
    assert not OracleValue(1.0, "a", 0.0).agrees_with(OracleValue(1.15, "b", 0.1))
