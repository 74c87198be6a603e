"""Ground-truth policy values.

* :func:`exact_dp` solves the identified Bellman system of a finite model.
* :func:`brute_force_sum` evaluates the truncated identification sum over
  explicit trajectories, without any linear solve.
* :func:`eta_mc` reweights behavior episodes by per-step c(Z|S)/p_z(Z|S)
  products (or draws Z from c itself, which removes the weights);
  :func:`onpolicy_mc` averages returns of interventional episodes.
* :func:`interventional_dp` solves the true causal process with U
  enumerated. It differs from :func:`exact_dp` whenever the environment lets
  U and A interact in the outcome model, which the toy environment does.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import expit

from .core import TabularIndex, TargetPolicy, derive_rng_stream
from .envs import Environment, TabularModel, rollout, sample_under_target
from .errors import CapExceededError, SingularSystemError
from .estimators import NuisanceSet
from .nuisance import CondModel, build_ratios
from .qlearn import QModel, TabularFeatures
from .ratio import OmegaModel, OneHotBasis

__all__ = [
    "OracleValue",
    "exact_dp",
    "brute_force_sum",
    "eta_mc",
    "onpolicy_mc",
    "interventional_dp",
    "true_q",
    "true_omega",
    "true_nuisances",
    "behavior_implied_policy",
    "continuous2d_value",
    "OracleCache",
]


@dataclass(frozen=True)
class OracleValue:
    eta: float
    method: str
    error_bound: float
    details: dict = field(default_factory=dict, compare=False)

    def agrees_with(self, other: "OracleValue") -> bool:
        return abs(self.eta - other.eta) <= self.error_bound + other.error_bound


def _model(env_or_model) -> TabularModel:
    if isinstance(env_or_model, TabularModel):
        return env_or_model
    if getattr(env_or_model, "has_tabular_model", False):
        return env_or_model.tabular_model()
    raise TypeError(f"{type(env_or_model).__name__} has no finite enumeration")


def _c(model: TabularModel, pi: TargetPolicy) -> np.ndarray:
    p0, p1 = model.p_a1[:, 0], model.p_a1[:, 1]
    c1 = (pi.prob1(model.keys) - p0) / (p1 - p0)
    return np.column_stack([1.0 - c1, c1])


def _kernel(model: TabularModel, pi: TargetPolicy):
    """Identified one-step reward vector and state kernel under pi."""
    w = _c(model, pi)[:, :, None] * model.p_a  # [s, z, a]
    r = np.einsum("sza,sza->s", w, model.r_mean)
    P = np.einsum("sza,szat->st", w, model.p_next)
    return r, P, w


def true_q(model, pi: TargetPolicy, gamma: float):
    """(Q[s, z, a], V[s]) of the identified Bellman equation."""
    model = _model(model)
    r, P, _ = _kernel(model, pi)
    A = np.eye(model.m) - gamma * P
    if np.linalg.matrix_rank(A) < model.m:
        raise SingularSystemError("I - gamma P is singular")
    V = np.linalg.solve(A, r)
    Q = model.r_mean + gamma * np.einsum("szat,t->sza", model.p_next, V)
    return Q, V


def exact_dp(env, pi: TargetPolicy, gamma: float) -> OracleValue:
    model = _model(env)
    Q, V = true_q(model, pi, gamma)
    return OracleValue(float(model.nu @ V), "ExactDP", 0.0, {"V": V, "Q": Q})


def interventional_dp(env, pi: TargetPolicy, gamma: float) -> OracleValue:
    model = _model(env)
    pi1 = pi.prob1(model.keys)
    pa = np.column_stack([1.0 - pi1, pi1])  # [s, a]
    pu = np.column_stack([1.0 - model.p_u1, model.p_u1])  # [s, u]
    r = np.einsum("su,sa,sua->s", pu, pa, model.int_r_mean)
    P = np.einsum("su,sa,suat->st", pu, pa, model.int_next)
    V = np.linalg.solve(np.eye(model.m) - gamma * P, r)
    return OracleValue(float(model.nu @ V), "Interventional", 0.0, {"V": V})


def behavior_implied_policy(env) -> TargetPolicy:
    """pi(1|s) = sum_z p_z(z|s) p_a(1|z,s): the observed law of A given S."""
    model = _model(env)
    if model.keys.shape[1] != 1:
        raise ValueError("behavior-implied tabular policy needs a one-column state")
    p = (1.0 - model.p_z1) * model.p_a1[:, 0] + model.p_z1 * model.p_a1[:, 1]
    order = np.argsort(model.keys[:, 0])
    return TargetPolicy.tabular(p[order])


def _tail_bound(model, P_abs_rowsum, gamma, T_trunc):
    rmax = float(np.abs(model.reward_values).max())
    kappa = float(P_abs_rowsum.max())
    q = gamma * max(kappa, 1.0)
    if q >= 1.0:
        return float("inf")
    return rmax * q ** (T_trunc + 1) / (1.0 - q)


def brute_force_sum(env, pi: TargetPolicy, gamma: float, T_trunc: int, full_tuples: bool = False, cap: int = 2**22) -> OracleValue:
    """Truncated identification sum over explicit trajectories.

    Term t sums gamma^t r_t prod_j c(z_j|s_j) p_a(a_j|z_j,s_j) p(r_j, s_{j+1}|...)
    over every trajectory prefix. With ``full_tuples`` every
    (z_j, a_j, r_j, s_{j+1}) combination is enumerated; the default
    enumerates state sequences and sums (z_j, a_j, r_j) inside each factor,
    which is the same sum regrouped and reaches longer horizons.
    """
    model = _model(env)
    if T_trunc < 0:
        raise ValueError("T_trunc must be non-negative")
    m = model.m
    w = _c(model, pi)[:, :, None] * model.p_a  # [s, z, a]
    k = len(model.reward_values)
    if full_tuples:
        per_step = 4 * k * m
        size = m * per_step ** (T_trunc + 1)
        if size > cap:
            raise CapExceededError(f"{size} trajectory terms exceed the cap of {cap}")
        # factor[s, z, a, r, s'] = c p_a p(r, s')
        factor = (w[:, :, :, None, None] * model.p_rs).reshape(m, per_step)
        rew = np.broadcast_to(model.reward_values[None, None, :, None], (2, 2, k, m)).reshape(per_step)
        nxt = np.broadcast_to(np.arange(m)[None, None, None, :], (2, 2, k, m)).reshape(per_step)
        prefix_w = model.nu.copy()  # weight of each prefix
        prefix_s = np.arange(m)  # current state of each prefix
        total = 0.0
        for t in range(T_trunc + 1):
            step_w = prefix_w[:, None] * factor[prefix_s]  # (prefixes, per_step)
            total += gamma**t * float(np.sum(step_w * rew[None, :]))
            prefix_w = step_w.reshape(-1)
            prefix_s = np.broadcast_to(nxt[None, :], step_w.shape).reshape(-1)
    else:
        size = m ** (T_trunc + 1)
        if size > cap:
            raise CapExceededError(f"{size} state paths exceed the cap of {cap}")
        K = np.zeros((m, m))
        rbar = np.zeros(m)
        for s, z, a, r in itertools.product(range(m), (0, 1), (0, 1), range(k)):
            K[s] += w[s, z, a] * model.p_rs[s, z, a, r]
            rbar[s] += w[s, z, a] * model.reward_values[r] * model.p_rs[s, z, a, r].sum()
        total = 0.0
        for t in range(T_trunc + 1):
            paths = np.array(list(itertools.product(range(m), repeat=t + 1)))
            weight = model.nu[paths[:, 0]].copy()
            for j in range(t):
                weight *= K[paths[:, j], paths[:, j + 1]]
            total += gamma**t * float(np.sum(weight * rbar[paths[:, t]]))
    kernel = np.abs(w).sum(axis=(1, 2))  # per-step absolute mass of the signed kernel
    bound = _tail_bound(model, kernel, gamma, T_trunc)
    return OracleValue(total, f"BruteForceSum({T_trunc})", bound)


def _rng(rng_or_seed, tag):
    if isinstance(rng_or_seed, np.random.Generator):
        return rng_or_seed
    return derive_rng_stream(int(rng_or_seed), tag, 0)


def _mc_bound(values, gamma, T, reward_max):
    sd = float(np.std(values, ddof=1))
    bound = float(3.0 * sd / np.sqrt(len(values)))
    tail = 0.0 if reward_max is None else reward_max * gamma**T / (1.0 - gamma)
    return sd, bound, tail


def eta_mc(
    env: Environment,
    pi: TargetPolicy,
    gamma: float,
    n_episodes: int,
    T: int,
    rng,
    chunk: int = 200_000,
    iv_proposal: str = "behavior",
) -> OracleValue:
    """Weighted Monte Carlo: mean of sum_t gamma^t R_t prod_{j<=t} c(Z_j|S_j)/q(Z_j|S_j).

    With ``iv_proposal="behavior"`` the IV is drawn from the environment and
    q = p_z, the textbook estimator. With ``"ratio"`` the IV is drawn from
    q(1|s) = clip(c(1|s), 0.02, 0.98) instead, so every weight is exactly one
    wherever 0.02 <= c <= 0.98 and the variance drops to that of plain returns.
    ``error_bound`` is 3 sd / sqrt(N') plus, when the environment declares
    ``reward_max``, the truncation tail reward_max gamma^T / (1 - gamma).
    """
    if iv_proposal not in ("behavior", "ratio"):
        raise ValueError("iv_proposal must be 'behavior' or 'ratio'")
    rng = _rng(rng, "eta_mc")

    def c1(obs):
        p0, p1 = env.true_pa1(obs, np.zeros(len(obs))), env.true_pa1(obs, np.ones(len(obs)))
        return (pi.prob1(obs) - p0) / (p1 - p0)

    def q1(obs):
        return env.true_pz1(obs) if iv_proposal == "behavior" else np.clip(c1(obs), 0.02, 0.98)

    returns = np.empty(n_episodes)
    for start in range(0, n_episodes, chunk):
        m = min(chunk, n_episodes - start)
        steps = rollout(env, m, T, rng, z_prob1=None if iv_proposal == "behavior" else q1)
        weight = np.ones(m)
        ret = np.zeros(m)
        for t in range(T):
            obs, z, a, r = next(steps)
            c, q = c1(obs), q1(obs)
            weight *= np.where(z == 1, c / q, (1.0 - c) / (1.0 - q))
            ret += gamma**t * r * weight
        returns[start : start + m] = ret
    sd, bound, tail = _mc_bound(returns, gamma, T, getattr(env, "reward_max", None))
    label = "MonteCarloWeighted" if iv_proposal == "behavior" else "MonteCarloIdentified"
    return OracleValue(float(returns.mean()), f"{label}({n_episodes})", bound + tail, {"sd": sd, "tail": tail, "T": T})


def onpolicy_mc(env: Environment, pi: TargetPolicy, gamma: float, n_episodes: int, T: int, rng, chunk: int = 200_000) -> OracleValue:
    """Mean discounted return of interventional episodes (actions drawn from pi)."""
    rng = _rng(rng, "onpolicy_mc")
    disc = gamma ** np.arange(T)
    returns = np.empty(n_episodes)
    for start in range(0, n_episodes, chunk):
        m = min(chunk, n_episodes - start)
        d = sample_under_target(env, pi, m, T, rng)
        returns[start : start + m] = d.rewards @ disc
    sd, bound, tail = _mc_bound(returns, gamma, T, getattr(env, "reward_max", None))
    return OracleValue(float(returns.mean()), f"MonteCarloOnPolicy({n_episodes})", bound + tail, {"sd": sd, "tail": tail, "T": T})


def continuous2d_value(pi: TargetPolicy, gamma: float, nodes: int = 80) -> OracleValue:
    """Closed form for the invariant-sum Continuous2D and policies of x = s1 + s2.

    The sum x is constant along an episode, rewards average x + 2 pi(1|x),
    so eta = E[2 pi(1|x)] / (1 - gamma) with x ~ N(0, 2).
    """
    b = np.asarray(pi.params)
    if pi.kind != "logistic" or len(b) != 3 or b[1] != b[2]:
        raise ValueError("closed form needs a logistic policy in s1 + s2")
    t, wts = hermegauss(nodes)
    x = np.sqrt(2.0) * t
    mean_pi = float(np.sum(wts * expit(b[0] + b[1] * x)) / np.sqrt(2.0 * np.pi))
    return OracleValue(2.0 * mean_pi / (1.0 - gamma), "Quadrature", 1e-10)


# oracle-valued nuisances --------------------------------------------------

def true_omega(model, pi: TargetPolicy, gamma: float, horizon: int) -> np.ndarray:
    """d_gamma^pi(s) / p_D(s) with p_D the pooled law of S_0..S_{T-1} under behavior."""
    model = _model(model)
    _, P, _ = _kernel(model, pi)
    d = (1.0 - gamma) * np.linalg.solve((np.eye(model.m) - gamma * P).T, model.nu)
    Pb = np.einsum("sz,sza,szat->st", model.p_z, model.p_a, model.p_next)
    pD = np.zeros(model.m)
    marg = model.nu.copy()
    for _ in range(horizon):
        pD += marg
        marg = marg @ Pb
    pD /= horizon
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(pD > 0, d / pD, 0.0)


def true_nuisances(model, pi: TargetPolicy, gamma: float, horizon: int, overlap_floor: float = 1e-3) -> NuisanceSet:
    """Exact p_z, p_a, Q and omega laid out like fitted tabular nuisances."""
    model = _model(model)
    index = TabularIndex(model.keys)
    order = np.argsort(index.locate(model.keys))  # model rows in index order
    pz = CondModel("table", "Z_given_S", False, model.p_z1[order], index, 0.5)
    pa = CondModel("table", "A_given_ZS", True, model.p_a1[order], index, np.array([0.5, 0.5]))
    ratios = build_ratios(pa, pz, pi, overlap_floor)
    Q, _ = true_q(model, pi, gamma)
    q = QModel(TabularFeatures(index, with_iv=True), Q[order].reshape(-1), gamma, True, 0, ())
    omega = OmegaModel(OneHotBasis(index), true_omega(model, pi, gamma, horizon)[order], gamma, 1.0)
    return NuisanceSet(pa, pz, q, omega, ratios)


# cache --------------------------------------------------------------------

class OracleCache:
    """CSV cache of oracle values keyed by (env, policy, gamma, method, params)."""

    FIELDS = ("env_hash", "pi_hash", "gamma", "method", "params", "eta", "error_bound")

    def __init__(self, path):
        self.path = Path(path)

    @staticmethod
    def digest(obj) -> str:
        return hashlib.blake2b(repr(obj).encode("utf-8"), digest_size=8).hexdigest()

    def _rows(self):
        if not self.path.exists():
            return []
        with self.path.open(newline="", encoding="utf-8") as fh:
            return list(csv.DictReader(fh))

    def get_or_compute(self, env, pi: TargetPolicy, gamma: float, method: str, params: str, compute) -> OracleValue:
        key = (self.digest(env), self.digest(pi.describe()), repr(float(gamma)), method, params)
        for row in self._rows():
            if tuple(row[f] for f in self.FIELDS[:5]) == key:
                return OracleValue(float(row["eta"]), row["method"], float(row["error_bound"]), {"cached": True})
        value = compute()
        new = not self.path.exists()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if new:
                w.writerow(self.FIELDS)
            w.writerow([*key, repr(value.eta), repr(value.error_bound)])
        return value
