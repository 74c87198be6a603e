"""Double robustness under deliberately wrong nuisance models.

Starting from the exact nuisances of the toy environment we corrupt them
in the three ways used by the replication study:

  M1  omega doubled/halved per state and p_z mixed toward 1/2 (ratio side wrong)
  M2  Q shifted by a frozen N(5, 4) draw per (s, z, a) cell (Q side wrong)
  M3  both

DR should stay on target under M1 and M2. Under M3 it has no guarantee,
and how far it drifts depends on the particular Q shift draw.

Run:  python demos/double_robustness.py
For the full 100-replication study:  ivope run demos/specs/double_robustness.ini
"""

from ivope.core import derive_rng_stream
from ivope.envs import ToyTabular, sample_dataset
from ivope.estimators import apply_misspecification, draw_q_shift, estimate_dm, estimate_dr, estimate_mis
from ivope.experiment import DEFAULT_TABULAR_TARGET as pi
from ivope.oracle import exact_dp, true_nuisances

env, gamma, T = ToyTabular(), 0.9, 100
truth = exact_dp(env, pi, gamma).eta
data = sample_dataset(env, 1000, T, derive_rng_stream(0, "dr-demo"))
exact = true_nuisances(env, pi, gamma, T)
shift = draw_q_shift(exact.q.coef.size // 4, derive_rng_stream(0, "q_shift"))

ratio_side = dict(omega_scale=(2.0, 0.5), pz_alpha=0.55)
scenarios = {
    "M0 (all correct)": {},
    "M1 (ratios wrong)": ratio_side,
    "M2 (Q wrong)": {"q_shift": shift},
    "M3 (both wrong)": {**ratio_side, "q_shift": shift},
}

print(f"true value {truth:.3f}; relative errors below\n")
print(f"{'scenario':<20}{'DM':>9}{'MIS':>9}{'DR':>9}")
for label, kw in scenarios.items():
    nuis = apply_misspecification(exact, **kw) if kw else exact
    errs = [(fn(data, nuis).eta_hat - truth) / truth for fn in (estimate_dm, estimate_mis, estimate_dr)]
    print(f"{label:<20}" + "".join(f"{e:9.4f}" for e in errs))
