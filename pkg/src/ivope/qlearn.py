"""Fitted-Q evaluation for the IV-augmented Q(s, z, a) and the NUC Q(s, a)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Dataset, RunConfig, TabularIndex, TargetPolicy
from .errors import NonConvergenceError, SingularSystemError
from .nuisance import CondModel, RatioSet

__all__ = [
    "TabularFeatures",
    "LinearFeatures",
    "default_features",
    "QModel",
    "fqe_iv",
    "fqe_nuc",
    "value_from_q",
    "policy_weights",
    "nuc_view",
    "NucView",
]


def _as2d(states):
    s = np.asarray(states, dtype=float)
    return s[:, None] if s.ndim == 1 else s


class TabularFeatures:
    """One-hot over (state cell, z, a), or (state cell, a) when ``with_iv`` is False."""

    kind = "table"

    def __init__(self, index: TabularIndex, with_iv: bool = True):
        self.index = index
        self.with_iv = with_iv
        self.per_cell = 4 if with_iv else 2
        self.dim = len(index) * self.per_cell

    def columns(self, states, z, a) -> np.ndarray:
        cell = self.index.locate(_as2d(states))
        a = np.broadcast_to(np.asarray(a, dtype=int), cell.shape)
        if self.with_iv:
            return cell * 4 + 2 * np.broadcast_to(np.asarray(z, dtype=int), cell.shape) + a
        return cell * 2 + a

    def __call__(self, states, z, a) -> np.ndarray:
        col = self.columns(states, z, a)
        out = np.zeros((len(col), self.dim))
        out[np.arange(len(col)), col] = 1.0
        return out


class LinearFeatures:
    """(1, s, z, a, s*z, s*a, z*a) with IV, (1, s, a, s*a) without."""

    kind = "linear"

    def __init__(self, state_dim: int, with_iv: bool = True):
        self.state_dim = state_dim
        self.with_iv = with_iv
        self.dim = 3 * state_dim + 4 if with_iv else 2 * state_dim + 2

    def __call__(self, states, z, a) -> np.ndarray:
        s = _as2d(states)
        n = len(s)
        a = np.broadcast_to(np.asarray(a, dtype=float), (n,))[:, None]
        one = np.ones((n, 1))
        if not self.with_iv:
            return np.hstack([one, s, a, s * a])
        z = np.broadcast_to(np.asarray(z, dtype=float), (n,))[:, None]
        return np.hstack([one, s, z, a, s * z, s * a, z * a])


def default_features(states, discrete: bool, with_iv: bool = True):
    states = np.asarray(states, dtype=float)
    if discrete:
        return TabularFeatures(TabularIndex.from_states(states), with_iv)
    return LinearFeatures(states.shape[-1], with_iv)


@dataclass(frozen=True, eq=False)
class QModel:
    features: object
    coef: np.ndarray
    gamma: float
    converged: bool
    iterations: int
    history: tuple

    @property
    def kind(self) -> str:
        return self.features.kind

    @property
    def with_iv(self) -> bool:
        return self.features.with_iv

    def predict(self, states, z, a) -> np.ndarray:
        return self.features(states, z, a) @ self.coef

    def table(self) -> np.ndarray:
        """Q values reshaped to (cells, 2, 2) [s, z, a] or (cells, 2) [s, a]."""
        if self.kind != "table":
            raise TypeError("only tabular Q models have a table view")
        return self.coef.reshape(len(self.features.index), *((2, 2) if self.with_iv else (2,)))

    def with_coef(self, coef) -> "QModel":
        return QModel(self.features, np.asarray(coef, dtype=float), self.gamma, self.converged, self.iterations, self.history)


def policy_weights(ratios: RatioSet, pa: CondModel, states) -> np.ndarray:
    """(N, 2, 2) weights c(z|s) p_a(a|z,s)."""
    s = _as2d(states)
    c = ratios.c(s)
    p1 = np.column_stack([pa.predict(s, np.zeros(len(s))), pa.predict(s, np.ones(len(s)))])
    pa_arr = np.stack([1.0 - p1, p1], axis=-1)
    return c[:, :, None] * pa_arr


def value_from_q(q: QModel, ratios: RatioSet, pa: CondModel, states) -> np.ndarray:
    """V(s) = sum_{z,a} c(z|s) p_a(a|z,s) Q(s,z,a), vectorised over rows of ``states``."""
    s = _as2d(states)
    w = policy_weights(ratios, pa, s)
    n = len(s)
    out = np.zeros(n)
    for z in (0, 1):
        for a in (0, 1):
            out += w[:, z, a] * q.predict(s, np.full(n, z), np.full(n, a))
    return out


def _iterate(Phi, W_next, R, gamma, max_iters, tol):
    G = Phi.T @ Phi
    if np.linalg.matrix_rank(G) < G.shape[0]:
        raise SingularSystemError(
            f"singular design matrix: rank {np.linalg.matrix_rank(G)} < {G.shape[0]} features"
        )
    b = np.linalg.solve(G, Phi.T @ R)
    M = np.linalg.solve(G, Phi.T @ W_next)
    theta = np.zeros(Phi.shape[1])
    history = []
    for it in range(1, max_iters + 1):
        new = b + gamma * (M @ theta)
        change = float(np.abs(new - theta).max())
        history.append(change)
        theta = new
        if not np.isfinite(theta).all():
            raise NonConvergenceError("fitted-Q iterates diverged", history)
        if change < tol:
            return theta, it, history
    raise NonConvergenceError(f"fitted-Q did not converge in {max_iters} iterations", history)


def fqe_iv(
    data: Dataset,
    ratios: RatioSet,
    pa: CondModel,
    gamma: float,
    cfg: RunConfig | None = None,
    features=None,
) -> QModel:
    """Iterate least squares of R + gamma V_l(S') on features of (S, Z, A), from Q = 0."""
    cfg = cfg or RunConfig(gamma=gamma)
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    tr = data.flat
    feats = features or default_features(data.states, data.discrete, with_iv=True)
    Phi = feats(tr.s, tr.z, tr.a)
    w = policy_weights(ratios, pa, tr.s_next)
    n = len(tr)
    W_next = np.zeros_like(Phi)
    for z in (0, 1):
        for a in (0, 1):
            W_next += w[:, z, a][:, None] * feats(tr.s_next, np.full(n, z), np.full(n, a))
    theta, iters, hist = _iterate(Phi, W_next, tr.r, gamma, cfg.fqe_max_iters, cfg.fqe_tol)
    return QModel(feats, theta, gamma, True, iters, tuple(hist))


@dataclass(frozen=True)
class NucView:
    """Transitions seen by the NUC baselines, optionally with Z appended to the state."""

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    s0: np.ndarray
    n: int
    steps: int


def nuc_view(data: Dataset, include_iv: bool = False) -> NucView:
    S = data.states
    n, T = data.n, data.horizon
    if not include_iv:
        tr = data.flat
        return NucView(tr.s, tr.a, tr.r, tr.s_next, data.initial_states, n, T)
    if T < 2:
        raise ValueError("appending Z to the state needs T >= 2 (Z_T is never observed)")
    Zf = data.ivs.astype(float)[:, :, None]
    aug = np.concatenate([S[:, :T, :], Zf], axis=2)
    d = aug.shape[2]
    return NucView(
        s=aug[:, :-1].reshape(-1, d),
        a=data.actions[:, :-1].reshape(-1).astype(int),
        r=data.rewards[:, :-1].reshape(-1),
        s_next=aug[:, 1:].reshape(-1, d),
        s0=aug[:, 0],
        n=n,
        steps=T - 1,
    )


def fqe_nuc(
    data: Dataset | NucView,
    pi: TargetPolicy,
    gamma: float,
    cfg: RunConfig | None = None,
    features=None,
    include_iv: bool = False,
) -> QModel:
    """Fitted-Q over (s, a) assuming no unmeasured confounding."""
    cfg = cfg or RunConfig(gamma=gamma)
    if isinstance(data, Dataset):
        discrete = data.discrete
        view = nuc_view(data, include_iv)
    else:
        view, discrete = data, features is not None and features.kind == "table"
    feats = features or default_features(np.vstack([view.s, view.s_next]), discrete, with_iv=False)
    Phi = feats(view.s, None, view.a)
    p1 = pi.prob1(view.s_next)
    n = len(view.r)
    W_next = (1.0 - p1)[:, None] * feats(view.s_next, None, np.zeros(n)) + p1[:, None] * feats(
        view.s_next, None, np.ones(n)
    )
    theta, iters, hist = _iterate(Phi, W_next, view.r, gamma, cfg.fqe_max_iters, cfg.fqe_tol)
    return QModel(feats, theta, gamma, True, iters, tuple(hist))


def nuc_value(q: QModel, pi: TargetPolicy, states) -> np.ndarray:
    s = _as2d(states)
    p1 = pi.prob1(s)
    n = len(s)
    return (1.0 - p1) * q.predict(s, None, np.zeros(n)) + p1 * q.predict(s, None, np.ones(n))
