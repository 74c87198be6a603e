"""Closed-form linear minimax estimate of the marginal density ratio omega(s).

With omega(s) = xi(s)' beta and discriminators f in the span of the same
basis xi, the moment conditions

    (1 - gamma) E_nu[f(S)] = E[ omega(S_t) (f(S_t) - gamma w_t f(S_{t+1})) ]

for every basis coordinate give a p x p linear system. ``w_t`` is the IV
ratio rho(S_t, Z_t) for the IV estimator and pi/pi_0 for the NUC baseline.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from itertools import combinations_with_replacement

import numpy as np

from .core import Dataset, TabularIndex
from .errors import SingularSystemError
from .nuisance import RatioSet

__all__ = ["OneHotBasis", "PolynomialBasis", "default_basis", "OmegaModel", "fit_omega", "solve_omega", "moment_residuals"]


def _as2d(states):
    s = np.asarray(states, dtype=float)
    return s[:, None] if s.ndim == 1 else s


class OneHotBasis:
    kind = "onehot"

    def __init__(self, index: TabularIndex):
        self.index = index
        self.dim = len(index)

    def __call__(self, states) -> np.ndarray:
        cell = self.index.locate(_as2d(states))
        out = np.zeros((len(cell), self.dim))
        out[np.arange(len(cell)), cell] = 1.0
        return out


class PolynomialBasis:
    """Monomials of the state up to ``degree`` (constant included).

    Columns listed in ``binary`` hold 0/1 values, so their powers are
    skipped (z**2 == z would make the basis rank deficient).
    """

    kind = "polynomial"

    def __init__(self, state_dim: int, degree: int = 2, binary=()):
        self.state_dim = state_dim
        self.degree = degree
        self.binary = tuple(sorted(binary))
        terms = [c for k in range(1, degree + 1) for c in combinations_with_replacement(range(state_dim), k)]
        self.terms = [c for c in terms if not any(c.count(j) > 1 for j in self.binary)]
        self.dim = 1 + len(self.terms)

    def __call__(self, states) -> np.ndarray:
        s = _as2d(states)
        cols = [np.ones(len(s))] + [np.prod(s[:, list(t)], axis=1) for t in self.terms]
        return np.column_stack(cols)


def default_basis(states, discrete: bool):
    states = np.asarray(states, dtype=float)
    if discrete:
        return OneHotBasis(TabularIndex.from_states(states))
    flat = states.reshape(-1, states.shape[-1])
    binary = [j for j in range(flat.shape[1]) if np.isin(flat[:, j], (0.0, 1.0)).all()]
    return PolynomialBasis(flat.shape[1], 2, binary)


@dataclass(frozen=True, eq=False)
class OmegaModel:
    basis: object
    beta: np.ndarray
    gamma: float
    condition: float
    jitter: float = 0.0

    def predict(self, states) -> np.ndarray:
        return self.basis(states) @ self.beta

    def with_beta(self, beta) -> "OmegaModel":
        return OmegaModel(self.basis, np.asarray(beta, dtype=float), self.gamma, self.condition, self.jitter)


def _nu_mean(basis, nu, s0):
    if nu is None:
        return basis(s0).mean(axis=0)
    support, probs = nu
    probs = np.asarray(probs, dtype=float)
    if probs.min() < 0 or not np.isclose(probs.sum(), 1.0):
        raise ValueError("nu probabilities must be non-negative and sum to one")
    return probs @ basis(support)


def solve_omega(xi, xi_next, w, nu_mean, gamma, cond_limit: float = 1e10):
    """Return (beta, condition number, jitter) for the omega moment system."""
    N = len(xi)
    A = (xi - gamma * w[:, None] * xi_next).T @ xi
    b = (1.0 - gamma) * N * nu_mean
    p = A.shape[0]
    rank = np.linalg.matrix_rank(A)
    if rank < p:
        raise SingularSystemError(f"omega moment matrix has rank {rank} < {p} (basis not identified by the data)")
    cond = float(np.linalg.cond(A))
    jitter = 0.0
    if cond > cond_limit:
        jitter = 1e-8 * float(np.trace(np.abs(A))) / p
        warnings.warn(f"omega system ill-conditioned (cond={cond:.3g}); adding ridge {jitter:.3g}", RuntimeWarning)
        A = A + jitter * np.eye(p)
    return np.linalg.solve(A, b), cond, jitter


def fit_omega(
    data: Dataset,
    ratios: RatioSet,
    gamma: float,
    basis=None,
    nu=None,
) -> OmegaModel:
    """Fit omega(s) = xi(s)' beta.

    ``nu`` is ``None`` (empirical law of S_{i,0}) or a pair
    ``(support_states, probabilities)`` for a known initial law.
    """
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    tr = data.flat
    basis = basis or default_basis(data.states, data.discrete)
    rho = ratios.rho(tr.s, tr.z)
    beta, cond, jitter = solve_omega(basis(tr.s), basis(tr.s_next), rho, _nu_mean(basis, nu, data.initial_states), gamma)
    return OmegaModel(basis, beta, gamma, cond, jitter)


def moment_residuals(omega: OmegaModel, data: Dataset, ratios: RatioSet, nu=None) -> np.ndarray:
    """Empirical L(omega, xi_j) for each basis coordinate; zero at the fitted solution."""
    tr = data.flat
    g = omega.gamma
    xi, xi1 = omega.basis(tr.s), omega.basis(tr.s_next)
    w = ratios.rho(tr.s, tr.z)
    lhs = (1.0 - g) * _nu_mean(omega.basis, nu, data.initial_states)
    rhs = ((xi - g * w[:, None] * xi1) * omega.predict(tr.s)[:, None]).mean(axis=0)
    return lhs - rhs
