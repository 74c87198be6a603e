"""Future-dependent Q-function by linear minimax, and the POMDP direct estimator.

Windows: history H_t = (O_{t-M_H..t-1}, A_{t-M_H..t-1}) and future
F_t = (O_{t..t+M_F-1}, A_{t..t+M_F-2}). With q = phi_F' theta and
discriminator xi = psi_H' w, the inner maximisation is a ridge-regularised
quadratic in w, so the saddle point solves

    (M' W M + alpha' I) theta = M' W k,    W = (lambda G + alpha I)^{-1},

with k = E[psi R], M = E[psi (phi - gamma phi')'] and G = E[psi psi'].
The ridges alpha and alpha' are relative: each multiplies the mean diagonal
of the matrix it regularises, so the fit does not depend on how features or
rewards are scaled. The outer ridge alpha' defaults to zero: it shrinks g_Q
toward zero along the slowly-mixing directions, which biases the value, and
M' W M is already positive definite whenever M has full column rank.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Dataset
from .errors import HorizonError, OverlapError, SingularSystemError
from .estimators import EstimateReport, _report
from .nuisance import CondModel, RatioSet
from .qlearn import LinearFeatures, TabularFeatures, policy_weights
from .core import TabularIndex

__all__ = [
    "HistoryFuturePair",
    "HistoryFutureData",
    "ConstantFeatures",
    "GQModel",
    "build_hf_dataset",
    "initial_futures",
    "fit_gq",
    "estimate_pomdp_dm",
]


@dataclass(frozen=True)
class HistoryFuturePair:
    H: np.ndarray
    F: np.ndarray
    z: int
    a: int
    r: float
    o_next: np.ndarray
    F_next: np.ndarray


@dataclass(frozen=True, eq=False)
class HistoryFutureData:
    """Struct-of-arrays view of all (H, F, Z, A, R, O', F') pairs."""

    H: np.ndarray
    F: np.ndarray
    z: np.ndarray
    a: np.ndarray
    r: np.ndarray
    o_next: np.ndarray
    F_next: np.ndarray
    episode: np.ndarray
    t: np.ndarray
    M_H: int
    M_F: int
    discrete: bool

    def __len__(self):
        return len(self.r)

    def __getitem__(self, i) -> HistoryFuturePair:
        return HistoryFuturePair(self.H[i], self.F[i], int(self.z[i]), int(self.a[i]), float(self.r[i]), self.o_next[i], self.F_next[i])


def _future(data: Dataset, t: int, M_F: int) -> np.ndarray:
    n = data.n
    obs = data.states[:, t : t + M_F, :].reshape(n, -1)
    acts = data.actions[:, t : t + M_F - 1].astype(float)
    return np.hstack([obs, acts])


def _history(data: Dataset, t: int, M_H: int) -> np.ndarray:
    n = data.n
    obs = data.states[:, t - M_H : t, :].reshape(n, -1)
    acts = data.actions[:, t - M_H : t].astype(float)
    return np.hstack([obs, acts])


def build_hf_dataset(data: Dataset, M_H: int = 1, M_F: int = 1) -> HistoryFutureData:
    """One pair per episode and t in [M_H, T - M_F]; edge steps are dropped."""
    if M_H < 1 or M_F < 1:
        raise ValueError("window lengths must be at least 1")
    T = data.horizon
    if T < M_H + M_F + 1:
        raise HorizonError(f"horizon {T} too short for M_H={M_H}, M_F={M_F} (need {M_H + M_F + 1})")
    ts = range(M_H, T - M_F + 1)
    parts = {k: [] for k in ("H", "F", "z", "a", "r", "o", "Fn", "ep", "t")}
    ep = np.arange(data.n)
    for t in ts:
        parts["H"].append(_history(data, t, M_H))
        parts["F"].append(_future(data, t, M_F))
        parts["z"].append(data.ivs[:, t])
        parts["a"].append(data.actions[:, t])
        parts["r"].append(data.rewards[:, t])
        parts["o"].append(data.states[:, t + 1, :])
        parts["Fn"].append(_future(data, t + 1, M_F))
        parts["ep"].append(ep)
        parts["t"].append(np.full(data.n, t))
    # episode-major order
    stack = {k: np.stack(v, axis=1) for k, v in parts.items()}
    flat = {k: v.reshape(data.n * len(ts), *v.shape[2:]) for k, v in stack.items()}
    return HistoryFutureData(
        H=flat["H"], F=flat["F"], z=flat["z"].astype(int), a=flat["a"].astype(int), r=flat["r"],
        o_next=flat["o"], F_next=flat["Fn"], episode=flat["ep"], t=flat["t"],
        M_H=M_H, M_F=M_F, discrete=data.discrete,
    )


def initial_futures(data: Dataset, M_F: int) -> np.ndarray:
    """F_{i,0} = (O_{0..M_F-1}, A_{0..M_F-2}) for every episode."""
    if M_F > data.horizon:
        raise HorizonError("future window longer than the episode")
    return _future(data, 0, M_F)


class ConstantFeatures:
    """Single constant discriminator; useful for rank diagnostics."""

    kind = "constant"
    with_iv = True
    dim = 1

    def __call__(self, rows, z, a):
        return np.ones((len(np.asarray(rows)), 1))


@dataclass(frozen=True, eq=False)
class GQModel:
    q_features: object
    h_features: object
    theta: np.ndarray
    w: np.ndarray
    gamma: float
    penalties: tuple
    objective: float
    moment: np.ndarray
    stationarity: np.ndarray
    gram_condition: float
    M_F: int

    @property
    def moment_norm(self) -> float:
        return float(np.linalg.norm(self.moment))

    def predict(self, F, z, a) -> np.ndarray:
        return self.q_features(F, z, a) @ self.theta


def _default(rows, discrete):
    if discrete:
        return TabularFeatures(TabularIndex.from_states(rows), with_iv=True)
    return LinearFeatures(rows.shape[1], with_iv=True)


def fit_gq(
    pairs: HistoryFutureData,
    ratios: RatioSet,
    pa: CondModel,
    gamma: float,
    penalties=(1.0, 1e-3, 0.0),
    q_features=None,
    h_features=None,
    extra_futures=None,
) -> GQModel:
    """Closed-form linear minimax fit of g_Q.

    ``penalties`` is (lambda, alpha, alpha'). ``extra_futures`` are further F
    rows (e.g. initial futures) the default tabular basis must cover.
    """
    lam, alpha, alpha_p = (float(p) for p in penalties)
    if lam <= 0 or alpha < 0 or alpha_p < 0:
        raise ValueError("need lambda > 0 and alpha, alpha' >= 0")
    if q_features is None:
        rows = [pairs.F, pairs.F_next] + ([np.asarray(extra_futures, dtype=float)] if extra_futures is not None else [])
        q_features = _default(np.vstack(rows), pairs.discrete)
    h_features = h_features or _default(pairs.H, pairs.discrete)
    N = len(pairs)
    Phi = q_features(pairs.F, pairs.z, pairs.a)
    w_next = policy_weights(ratios, pa, pairs.o_next)
    Phi_next = np.zeros_like(Phi)
    for z in (0, 1):
        for a in (0, 1):
            Phi_next += w_next[:, z, a][:, None] * q_features(pairs.F_next, np.full(N, z), np.full(N, a))
    Psi = h_features(pairs.H, pairs.z, pairs.a)
    k = Psi.T @ pairs.r / N
    M = Psi.T @ (Phi - gamma * Phi_next) / N
    G = Psi.T @ Psi / N
    p = M.shape[1]
    rank = np.linalg.matrix_rank(M)
    if rank < p:
        raise SingularSystemError(
            f"moment matrix has rank {rank} < {p}: histories do not identify the future-dependent Q (invertibility fails)"
        )
    inner = lam * G
    W = np.linalg.inv(inner + alpha * np.trace(inner) / len(inner) * np.eye(len(inner)))
    outer = M.T @ W @ M
    ridge = alpha_p * np.trace(outer) / p
    theta = np.linalg.solve(outer + ridge * np.eye(p), M.T @ W @ k)
    moment = k - M @ theta
    w = W @ moment
    objective = 0.5 * float(moment @ W @ moment) + 0.5 * ridge * float(theta @ theta)
    stationarity = M.T @ w - ridge * theta
    return GQModel(
        q_features, h_features, theta, w, gamma, (lam, alpha, alpha_p), objective, moment,
        stationarity, float(np.linalg.cond(G)), pairs.M_F,
    )


def estimate_pomdp_dm(
    data: Dataset,
    gq: GQModel,
    ratios: RatioSet,
    pa: CondModel,
    alpha: float = 0.05,
) -> EstimateReport:
    """Average over episodes of sum_{z,a} c(z|O_0) p_a(a|z,O_0) g_Q(F_0, z, a)."""
    F0 = initial_futures(data, gq.M_F)
    O0 = data.initial_states
    c = ratios.c(O0)
    limit = 1.0 / ratios.overlap_floor
    if np.abs(c).max() > limit:
        raise OverlapError(f"|c(z|o)| reaches {np.abs(c).max():.3g} > {limit:g}")
    w = policy_weights(ratios, pa, O0)
    n = data.n
    contrib = np.zeros(n)
    for z in (0, 1):
        for a in (0, 1):
            contrib += w[:, z, a] * gq.predict(F0, np.full(n, z), np.full(n, a))
    return _report("pomdp_dm", contrib, data.n, data.horizon, gq.gamma, alpha, objective=gq.objective)
