"""Direct, marginal importance sampling and doubly robust value estimators.

Every estimator returns an :class:`EstimateReport` whose standard error is
the sample standard deviation of per-trajectory contributions over
sqrt(n); episodes are the clustering unit.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import norm

from .core import Dataset, RunConfig, TargetPolicy
from .errors import OverlapError
from .nuisance import CondModel, RatioSet, build_ratios, fit_behavior_policy, fit_cond
from .qlearn import (
    QModel,
    default_features,
    fqe_iv,
    fqe_nuc,
    nuc_value,
    nuc_view,
    value_from_q,
)
from .ratio import OmegaModel, default_basis, fit_omega, solve_omega

__all__ = [
    "NuisanceSet",
    "AugmentationTerms",
    "EstimateReport",
    "fit_nuisances",
    "augmentation_terms",
    "eif_components",
    "estimate_dm",
    "estimate_mis",
    "estimate_dr",
    "apply_misspecification",
    "draw_q_shift",
    "estimate_nuc_dm",
    "estimate_nuc_mis",
    "estimate_nuc_drl",
    "REPORT_FIELDS",
]


@dataclass(frozen=True, eq=False)
class NuisanceSet:
    pa: CondModel
    pz: CondModel
    q: QModel | None
    omega: OmegaModel | None
    ratios: RatioSet

    def replace(self, **changes) -> "NuisanceSet":
        return replace(self, **changes)


REPORT_FIELDS = ("method", "n", "T", "gamma", "eta_hat", "se", "ci_lo", "ci_hi", "seed")


@dataclass(frozen=True, eq=False)
class EstimateReport:
    method: str
    eta_hat: float
    se: float
    ci: tuple
    n: int
    horizon: int
    gamma: float
    contributions: np.ndarray
    alpha: float = 0.05
    diagnostics: dict = field(default_factory=dict)

    def to_row(self, seed=None) -> dict:
        return {
            "method": self.method,
            "n": self.n,
            "T": self.horizon,
            "gamma": self.gamma,
            "eta_hat": self.eta_hat,
            "se": self.se,
            "ci_lo": self.ci[0],
            "ci_hi": self.ci[1],
            "seed": "" if seed is None else seed,
        }

    def covers(self, value: float) -> bool:
        return self.ci[0] <= value <= self.ci[1]


def _report(method, contribs, data_n, horizon, gamma, alpha=0.05, eta=None, **diag) -> EstimateReport:
    contribs = np.asarray(contribs, dtype=float)
    eta = float(contribs.mean()) if eta is None else float(eta)
    n = len(contribs)
    se = float(contribs.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
    z = float(norm.ppf(1.0 - alpha / 2.0))
    return EstimateReport(method, eta, se, (eta - z * se, eta + z * se), data_n, horizon, gamma, contribs, alpha, diag)


def _gamma(nuis: NuisanceSet) -> float:
    if nuis.q is not None:
        return nuis.q.gamma
    return nuis.omega.gamma


def fit_nuisances(
    data: Dataset,
    pi: TargetPolicy,
    cfg: RunConfig,
    q_features=None,
    omega_basis=None,
    nu=None,
) -> NuisanceSet:
    """Fit p_z, p_a, Q and omega with the defaults for the dataset type."""
    pz = fit_cond(data, "Z_given_S")
    pa = fit_cond(data, "A_given_ZS")
    ratios = build_ratios(pa, pz, pi, cfg.overlap_floor)
    q = fqe_iv(data, ratios, pa, cfg.gamma, cfg, features=q_features)
    omega = fit_omega(data, ratios, cfg.gamma, basis=omega_basis, nu=nu)
    return NuisanceSet(pa, pz, q, omega, ratios)


# IV estimators ------------------------------------------------------------

def estimate_dm(data: Dataset, nuis: NuisanceSet, alpha: float = 0.05) -> EstimateReport:
    v0 = value_from_q(nuis.q, nuis.ratios, nuis.pa, data.initial_states)
    return _report("dm", v0, data.n, data.horizon, nuis.q.gamma, alpha)


def estimate_mis(data: Dataset, nuis: NuisanceSet, alpha: float = 0.05) -> EstimateReport:
    g = nuis.omega.gamma
    tr = data.flat
    w = nuis.omega.predict(tr.s) * nuis.ratios.rho(tr.s, tr.z)
    per_step = (w * tr.r).reshape(data.n, data.horizon) / (1.0 - g)
    return _report("mis", per_step.mean(axis=1), data.n, data.horizon, g, alpha)


@dataclass(frozen=True, eq=False)
class AugmentationTerms:
    """Per-transition pieces of the augmentation, shaped (n, T)."""

    y: np.ndarray
    e_y: np.ndarray
    e_a: np.ndarray
    delta: np.ndarray
    weight: np.ndarray
    phi: np.ndarray


def _q_all(q: QModel, s):
    n = len(s)
    return np.stack(
        [np.column_stack([q.predict(s, np.full(n, z), np.full(n, a)) for a in (0, 1)]) for z in (0, 1)],
        axis=1,
    )  # [n, z, a]


def augmentation_terms(data: Dataset, nuis: NuisanceSet) -> AugmentationTerms:
    g = nuis.q.gamma
    tr = data.flat
    n = len(tr)
    rows = np.arange(n)
    v_next = value_from_q(nuis.q, nuis.ratios, nuis.pa, tr.s_next)
    y = tr.r + g * v_next
    qs = _q_all(nuis.q, tr.s)
    p0, p1 = nuis.ratios.arms(tr.s)
    pa1 = np.column_stack([p0, p1])  # P(A=1 | z, s)
    pa_full = np.stack([1.0 - pa1, pa1], axis=-1)  # [n, z, a]
    ey_z = (pa_full * qs).sum(axis=2)  # E[Y | Z=z, S]
    e_y = ey_z[rows, tr.z]
    e_a = pa1[rows, tr.z]
    nuis.ratios.c(tr.s)  # raises IvWeakError before dividing
    delta = (ey_z[:, 1] - ey_z[:, 0]) / (p1 - p0)
    weight = nuis.omega.predict(tr.s) * nuis.ratios.rho(tr.s, tr.z) / (1.0 - g)
    phi = weight * (y - e_y - (tr.a - e_a) * delta)
    shape = (data.n, data.horizon)
    return AugmentationTerms(*(v.reshape(shape) for v in (y, e_y, e_a, delta, weight, phi)))


def eif_components(data: Dataset, nuis: NuisanceSet):
    """(psi1, psi2, psi3) with psi1 + psi2 + psi3 = phi pointwise.

    psi1 is the temporal-difference part, psi2 the gap between Q at the
    observed action and its mean over actions, psi3 the action-residual
    correction.
    """
    aug = augmentation_terms(data, nuis)
    tr = data.flat
    q_obs = nuis.q.predict(tr.s, tr.z, tr.a).reshape(aug.y.shape)
    a = tr.a.reshape(aug.y.shape)
    psi1 = aug.weight * (aug.y - q_obs)
    psi2 = aug.weight * (q_obs - aug.e_y)
    psi3 = -aug.weight * (a - aug.e_a) * aug.delta
    return psi1, psi2, psi3


def estimate_dr(data: Dataset, nuis: NuisanceSet, alpha: float = 0.05) -> EstimateReport:
    v0 = value_from_q(nuis.q, nuis.ratios, nuis.pa, data.initial_states)
    aug = augmentation_terms(data, nuis)
    contribs = v0 + aug.phi.mean(axis=1)
    eta = v0.mean() + aug.phi.mean()
    return _report(
        "dr", contribs, data.n, data.horizon, nuis.q.gamma, alpha, eta=eta,
        dm=float(v0.mean()), phi_mean=float(aug.phi.mean()),
    )


# misspecification shifts --------------------------------------------------

def draw_q_shift(cells: int, rng, mean: float = 5.0, var: float = 4.0) -> np.ndarray:
    """Frozen per-(s, z, a) additive Q shifts ~ N(mean, var)."""
    return rng.normal(mean, np.sqrt(var), size=(cells, 2, 2))


def apply_misspecification(
    nuis: NuisanceSet,
    omega_scale=None,
    pz_alpha: float | None = None,
    q_shift=None,
) -> NuisanceSet:
    """Shifted copies of oracle-valued tabular nuisances.

    ``omega_scale`` multiplies omega per state cell, ``pz_alpha`` mixes
    p_z(1|s) into alpha p_z(1|s) + (1 - alpha) p_z(0|s), and ``q_shift`` (an
    array shaped like the Q table) is added to Q.
    """
    if nuis.pz.kind != "table" or nuis.pa.kind != "table":
        raise TypeError("misspecification shifts are defined for tabular nuisances only")
    out = nuis
    if pz_alpha is not None:
        if not 0.0 <= pz_alpha <= 1.0:
            raise ValueError("pz_alpha must lie in [0, 1]")
        p1 = nuis.pz.values
        pz = replace(nuis.pz, values=pz_alpha * p1 + (1.0 - pz_alpha) * (1.0 - p1))
        out = out.replace(pz=pz, ratios=build_ratios(out.pa, pz, out.ratios.pi, out.ratios.overlap_floor))
    if omega_scale is not None:
        if nuis.omega is None or nuis.omega.basis.kind != "onehot":
            raise TypeError("omega shift needs a one-hot omega model")
        out = out.replace(omega=nuis.omega.with_beta(nuis.omega.beta * np.asarray(omega_scale, dtype=float)))
    if q_shift is not None:
        if nuis.q is None or nuis.q.kind != "table":
            raise TypeError("Q shift needs a tabular Q model")
        shift = np.asarray(q_shift, dtype=float).reshape(nuis.q.coef.shape)
        out = out.replace(q=nuis.q.with_coef(nuis.q.coef + shift))
    return out


# NUC baselines ------------------------------------------------------------

def _nuc_fit(data: Dataset, pi: TargetPolicy, cfg: RunConfig, include_iv: bool):
    view = nuc_view(data, include_iv)
    pool = np.vstack([view.s, view.s_next])
    feats = default_features(pool, data.discrete, with_iv=False)
    q = fqe_nuc(view, pi, cfg.gamma, cfg, features=feats)
    return view, q


def _nuc_ratio(view, pi, discrete):
    pi0 = fit_behavior_policy(view.s, view.a, discrete)
    p0 = pi0.prob(view.s, view.a)
    if (p0 < 1e-4).any():
        raise OverlapError(f"fitted behavior probability below 1e-4 at {int((p0 < 1e-4).sum())} transitions")
    return pi.prob(view.s, view.a) / p0


def _nuc_omega(view, beta, gamma, discrete):
    basis = default_basis(np.vstack([view.s, view.s_next]), discrete)
    b, *_ = solve_omega(basis(view.s), basis(view.s_next), beta, basis(view.s0).mean(axis=0), gamma)
    return basis(view.s) @ b


def estimate_nuc_dm(data: Dataset, pi: TargetPolicy, gamma: float, cfg: RunConfig | None = None, include_iv: bool = True) -> EstimateReport:
    cfg = replace(cfg or RunConfig(), gamma=gamma)
    view, q = _nuc_fit(data, pi, cfg, include_iv)
    return _report("nuc_dm", nuc_value(q, pi, view.s0), data.n, data.horizon, gamma, cfg.alpha_ci)


def estimate_nuc_mis(data: Dataset, pi: TargetPolicy, gamma: float, cfg: RunConfig | None = None, include_iv: bool = True) -> EstimateReport:
    cfg = replace(cfg or RunConfig(), gamma=gamma)
    view = nuc_view(data, include_iv)
    beta = _nuc_ratio(view, pi, data.discrete)
    omega = _nuc_omega(view, beta, gamma, data.discrete)
    per_step = (omega * beta * view.r).reshape(view.n, view.steps) / (1.0 - gamma)
    return _report("nuc_mis", per_step.mean(axis=1), data.n, data.horizon, gamma, cfg.alpha_ci)


def estimate_nuc_drl(data: Dataset, pi: TargetPolicy, gamma: float, cfg: RunConfig | None = None, include_iv: bool = True) -> EstimateReport:
    cfg = replace(cfg or RunConfig(), gamma=gamma)
    view, q = _nuc_fit(data, pi, cfg, include_iv)
    beta = _nuc_ratio(view, pi, data.discrete)
    omega = _nuc_omega(view, beta, gamma, data.discrete)
    td = view.r + gamma * nuc_value(q, pi, view.s_next) - q.predict(view.s, None, view.a)
    aug = (omega * beta * td).reshape(view.n, view.steps) / (1.0 - gamma)
    v0 = nuc_value(q, pi, view.s0)
    return _report("nuc_drl", v0 + aug.mean(axis=1), data.n, data.horizon, gamma, cfg.alpha_ci)
