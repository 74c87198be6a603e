"""Fast invariant checks that need no test framework.

Each check returns ``(ok, detail)``; :func:`run_selftest` runs them all on
small ToyTabular datasets and reports one line per check.
"""

from __future__ import annotations

import numpy as np

from .core import RunConfig, TargetPolicy, derive_rng_stream, discounted_return
from .envs import ToyTabular, sample_dataset
from .estimators import augmentation_terms, eif_components, estimate_dm, estimate_dr, fit_nuisances
from .oracle import brute_force_sum, exact_dp
from .pomdp import build_hf_dataset, fit_gq, initial_futures

__all__ = ["CHECKS", "run_selftest"]

_PI = TargetPolicy.tabular([0.25, 0.5])


def _data(seed=0, n=200, T=30):
    return sample_dataset(ToyTabular(), n, T, derive_rng_stream(seed, "selftest"))


def check_rng_determinism():
    a = derive_rng_stream(42, "env", 0).random(100)
    b = derive_rng_stream(42, "env", 0).random(100)
    c = derive_rng_stream(42, "env", 1).random(100)
    return bool(np.array_equal(a, b) and not np.array_equal(a, c)), "same key repeats, new index differs"


def check_discounted_return():
    v = discounted_return([10.0, 0.0, 10.0], 0.5)
    return v == 12.5, f"[10,0,10] at 0.5 -> {v}"


def check_ratio_sums_to_one():
    nuis = fit_nuisances(_data(), _PI, RunConfig())
    s = np.array([[0.0], [1.0]])
    err = float(np.abs(nuis.ratios.c(s).sum(axis=1) - 1.0).max())
    return err < 1e-12, f"max |c0 + c1 - 1| = {err:.2e}"


def check_omega_identity():
    data, cfg = _data(), RunConfig()
    nuis = fit_nuisances(data, _PI, cfg)
    tr = data.flat
    lhs = float(np.sum(nuis.omega.predict(tr.s) * (1.0 - cfg.gamma * nuis.ratios.rho(tr.s, tr.z))))
    rhs = (1.0 - cfg.gamma) * len(tr.r)
    return abs(lhs - rhs) < 1e-8 * rhs, f"sum omega (1 - gamma rho) = {lhs:.10g} vs {rhs:.10g}"


def check_dr_decomposition():
    data = _data()
    nuis = fit_nuisances(data, _PI, RunConfig())
    gap = estimate_dr(data, nuis).eta_hat - estimate_dm(data, nuis).eta_hat
    phi = float(augmentation_terms(data, nuis).phi.mean())
    return abs(gap - phi) < 1e-9 * max(1.0, abs(phi)), f"DR - DM = {gap:.12g}, mean phi = {phi:.12g}"


def check_eif_regrouping():
    data = _data()
    nuis = fit_nuisances(data, _PI, RunConfig())
    psi1, psi2, psi3 = eif_components(data, nuis)
    phi = augmentation_terms(data, nuis).phi
    err = float(np.abs(psi1 + psi2 + psi3 - phi).max())
    return err < 1e-9, f"max |psi1 + psi2 + psi3 - phi| = {err:.2e}"


def check_brute_force_horizon_zero():
    env = ToyTabular()
    a = brute_force_sum(env, _PI, 0.9, 0).eta
    b = exact_dp(env, _PI, 0.0).eta
    return abs(a - b) < 1e-12, f"T=0 sum {a:.12g} vs gamma=0 DP {b:.12g}"


def check_gq_stationarity():
    data = _data()
    nuis = fit_nuisances(data, _PI, RunConfig())
    gq = fit_gq(build_hf_dataset(data), nuis.ratios, nuis.pa, 0.9, extra_futures=initial_futures(data, 1))
    err = float(np.abs(gq.stationarity).max())
    return err < 1e-8, f"max |stationarity residual| = {err:.2e}"


CHECKS = {
    "rng_determinism": check_rng_determinism,
    "discounted_return": check_discounted_return,
    "ratio_sums_to_one": check_ratio_sums_to_one,
    "omega_identity": check_omega_identity,
    "dr_decomposition": check_dr_decomposition,
    "eif_regrouping": check_eif_regrouping,
    "brute_force_horizon_zero": check_brute_force_horizon_zero,
    "gq_stationarity": check_gq_stationarity,
}


def run_selftest(out=print) -> bool:
    ok_all = True
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failed check, not a traceback
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        ok_all &= bool(ok)
        out(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return ok_all
