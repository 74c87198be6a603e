import numpy as np
import pytest

from ivope import selection as sel
from ivope.core import Dataset, RunConfig, derive_rng_stream
from ivope.envs import Continuous2D, ToyTabular, make_highorder, sample_dataset
from ivope.errors import HorizonError
from ivope.estimators import estimate_dr, fit_nuisances


def _data(env, n, T, seed, tag="selection"):
    return sample_dataset(env, n, T, derive_rng_stream(seed, tag))


def _fixed(rejected):
    def test(data, k, alpha):
        return sel.OrderTestResult(k, 0.0 if rejected else 1.0, 0.0, 1, rejected, alpha, data.n)

    return test


def test_augment_state_layout():
    states = np.array([[[1.0], [2.0], [3.0]]])
    d = Dataset(states, np.array([[1, 0]]), np.array([[0, 1]]), np.zeros((1, 2)))
    assert sel.augment_state(d, 1) is d
    aug = sel.augment_state(d, 2)
    # (O_t, O_{t-1}, Z_{t-1}, A_{t-1}) with zero padding before the start
    np.testing.assert_array_equal(aug.states[0], [[1, 0, 0, 0], [2, 1, 1, 0], [3, 2, 0, 1]])
    np.testing.assert_array_equal(aug.rewards, d.rewards)
    assert sel.augment_state(d, 3).state_dim == 7
    with pytest.raises(ValueError):
        sel.augment_state(d, 0)


def test_order_test_guards():
    d = _data(ToyTabular(), 5, 5, 0)
    with pytest.raises(HorizonError):
        sel.test_markov_order(d, 2)
    with pytest.raises(ValueError):
        sel.test_markov_order(d, 0)


def test_size_under_order_one():
    rejected = sum(sel.test_markov_order(_data(ToyTabular(), 200, 50, r, "size"), 1).rejected for r in range(20))
    assert rejected <= 3


def test_power_against_order_two():
    env = make_highorder(ToyTabular(), 2)
    results = [sel.test_markov_order(_data(env, 500, 100, r, "power"), 1) for r in range(5)]
    assert sum(r.rejected for r in results) >= 4
    assert all(0.0 <= r.p_value <= 1.0 and r.df > 0 for r in results)


def test_order_two_accepted_on_order_two_data():
    env = make_highorder(ToyTabular(), 2)
    res = sel.test_markov_order(_data(env, 500, 100, 0, "power"), 2)
    assert res.k == 2 and not res.rejected


def test_continuous_data_p_value():
    res = sel.test_markov_order(_data(Continuous2D(), 200, 30, 1), 1)
    assert 0.0 <= res.p_value <= 1.0
    assert res.clusters == 200


def test_accepting_test_uses_plain_dr(toy_pi):
    d = _data(ToyTabular(), 200, 30, 2)
    out = sel.select_and_estimate(d, toy_pi, 3, test=_fixed(False))
    assert out.order == 1 and not out.pomdp and len(out.tests) == 1
    direct = estimate_dr(d, fit_nuisances(d, toy_pi, RunConfig()))
    assert out.report.eta_hat == pytest.approx(direct.eta_hat, rel=1e-12)


def test_all_rejected_falls_back_to_pomdp(toy_pi):
    d = _data(ToyTabular(), 300, 50, 3)
    out = sel.select_and_estimate(d, toy_pi, 2, test=_fixed(True))
    assert out.order is None and out.pomdp
    assert len(out.tests) == 2
    assert out.report.method == "pomdp_dm"


def test_selects_order_two(toy_pi):
    env = make_highorder(ToyTabular(), 2)
    out = sel.select_and_estimate(_data(env, 500, 100, 0, "power"), toy_pi, 3)
    assert out.order == 2
    assert out.tests[0].rejected and not out.tests[1].rejected


def test_select_rejects_bad_k(toy_pi):
    with pytest.raises(ValueError):
        sel.select_and_estimate(_data(ToyTabular(), 10, 10, 4), toy_pi, 0)
