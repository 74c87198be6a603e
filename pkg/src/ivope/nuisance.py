"""Observable conditional laws p_z(z|s), p_a(a|z,s), E[R|z,s] and the IV ratios.

Discrete datasets use Laplace-smoothed frequency tables keyed on the
observed state rows; continuous datasets use logistic regression fitted by
iteratively reweighted least squares (IRLS) and ordinary least squares for
the reward mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .core import Dataset, TabularIndex, TargetPolicy
from .errors import DataError, IvWeakError, NonConvergenceError, OverlapError, SeparationError

__all__ = [
    "CondModel",
    "RatioSet",
    "fit_cond",
    "fit_binary",
    "fit_mean",
    "irls_logistic",
    "build_ratios",
    "fit_behavior_policy",
]

TARGETS = ("Z_given_S", "A_given_ZS", "R_given_ZS")


def _as2d(states):
    s = np.asarray(states, dtype=float)
    return s[:, None] if s.ndim == 1 else s


@dataclass(frozen=True, eq=False)
class CondModel:
    """A fitted conditional of a binary outcome (probability) or a real mean.

    kind is ``"table"``, ``"logistic"`` or ``"linear"``. For tables ``values``
    has shape (m,) when the model ignores z and (m, 2) when it conditions on
    z; ``prior`` holds the fallback for unseen cells. For regressions
    ``values`` is the coefficient vector over (1, s[, z]).
    """

    kind: str
    target: str
    uses_z: bool
    values: np.ndarray
    index: TabularIndex | None = None
    prior: np.ndarray | float | None = None
    diagnostics: dict = field(default_factory=dict)

    def predict(self, states, z=None) -> np.ndarray:
        s = _as2d(states)
        if self.uses_z:
            if z is None:
                raise ValueError(f"{self.target} model needs z")
            z = np.broadcast_to(np.asarray(z, dtype=float), (len(s),))
        if self.kind == "table":
            idx = self.index.locate(s, strict=False)
            seen = idx >= 0
            if self.uses_z:
                zi = z.astype(int)
                out = np.empty(len(s))
                out[seen] = self.values[idx[seen], zi[seen]]
                out[~seen] = np.asarray(self.prior)[zi[~seen]] if np.ndim(self.prior) else self.prior
                return out
            out = np.empty(len(s))
            out[seen] = self.values[idx[seen]]
            out[~seen] = self.prior
            return out
        design = np.column_stack([np.ones(len(s)), s] + ([z] if self.uses_z else []))
        eta = design @ self.values
        return expit(eta) if self.kind == "logistic" else eta

    def prob(self, states, value, z=None) -> np.ndarray:
        p1 = self.predict(states, z)
        return np.where(np.asarray(value) == 1, p1, 1.0 - p1)


# IRLS ---------------------------------------------------------------------

def _deviance(y, p):
    p = np.clip(p, 1e-300, 1.0 - 1e-16)
    return -2.0 * np.sum(y * np.log(p) + (1.0 - y) * np.log1p(-p))


def irls_logistic(X, y, max_iter: int = 100, tol: float = 1e-8):
    """Newton-Raphson / IRLS for logistic regression.

    Returns ``(coef, cov, trace)`` where ``cov`` is the inverse Fisher
    information and ``trace`` lists the deviance per iteration. Convergence
    is declared when the relative deviance change drops below ``tol``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.all(y == y[0]):
        raise SeparationError("outcome has no variation; the logistic fit separates completely")
    beta = np.zeros(X.shape[1])
    dev_old = _deviance(y, np.full(len(y), 0.5))
    trace = [dev_old]
    for _ in range(max_iter):
        p = expit(X @ beta)
        w = p * (1.0 - p)
        H = X.T @ (X * w[:, None])
        g = X.T @ (y - p)
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            raise SeparationError("singular information matrix during IRLS") from None
        beta = beta + step
        dev = _deviance(y, expit(X @ beta))
        trace.append(dev)
        if dev < 1e-6 * len(y) and np.abs(beta).max() > 20:
            raise SeparationError("fitted probabilities reached 0/1 (separation)")
        if abs(dev_old - dev) / (abs(dev) + 0.1) < tol:
            p = expit(X @ beta)
            H = X.T @ (X * (p * (1.0 - p))[:, None])
            return beta, np.linalg.inv(H), trace
        dev_old = dev
    raise NonConvergenceError(f"IRLS did not converge in {max_iter} iterations", trace)


# generic fitters ----------------------------------------------------------

def fit_binary(states, y, z=None, discrete: bool = False, target: str = "binary") -> CondModel:
    """P(y=1 | s[, z]) by smoothed table (discrete) or logistic IRLS."""
    s = _as2d(states)
    y = np.asarray(y, dtype=float)
    if len(y) == 0:
        raise DataError("cannot fit a conditional on an empty sample")
    if np.all(y == y[0]):
        raise SeparationError(f"{target}: outcome is constant ({y[0]:g}) across the sample")
    uses_z = z is not None
    if discrete:
        index = TabularIndex.from_states(s)
        cell = index.locate(s)
        if uses_z:
            z = np.asarray(z, dtype=int)
            flat = cell * 2 + z
            ones = np.bincount(flat, weights=y, minlength=2 * len(index)).reshape(-1, 2)
            tot = np.bincount(flat, minlength=2 * len(index)).reshape(-1, 2)
            prior = np.array([(y[z == v].sum() + 1.0) / ((z == v).sum() + 2.0) for v in (0, 1)])
        else:
            ones = np.bincount(cell, weights=y, minlength=len(index))
            tot = np.bincount(cell, minlength=len(index))
            prior = (y.sum() + 1.0) / (len(y) + 2.0)
        values = (ones + 1.0) / (tot + 2.0)
        return CondModel("table", target, uses_z, values, index, prior, {"counts": tot})
    design = np.column_stack([np.ones(len(s)), s] + ([np.asarray(z, dtype=float)] if uses_z else []))
    coef, cov, trace = irls_logistic(design, y)
    return CondModel("logistic", target, uses_z, coef, diagnostics={"cov": cov, "trace": trace})


def fit_mean(states, y, z=None, discrete: bool = False, target: str = "mean") -> CondModel:
    """E[y | s[, z]] by cell means (discrete) or least squares on (1, s[, z])."""
    s = _as2d(states)
    y = np.asarray(y, dtype=float)
    uses_z = z is not None
    if discrete:
        index = TabularIndex.from_states(s)
        cell = index.locate(s)
        if uses_z:
            z = np.asarray(z, dtype=int)
            flat = cell * 2 + z
            sums = np.bincount(flat, weights=y, minlength=2 * len(index)).reshape(-1, 2)
            tot = np.bincount(flat, minlength=2 * len(index)).reshape(-1, 2)
            prior = np.array([y[z == v].mean() if (z == v).any() else y.mean() for v in (0, 1)])
            values = np.where(tot > 0, sums / np.maximum(tot, 1), prior[None, :])
        else:
            sums = np.bincount(cell, weights=y, minlength=len(index))
            tot = np.bincount(cell, minlength=len(index))
            prior = float(y.mean())
            values = sums / np.maximum(tot, 1)
        return CondModel("table", target, uses_z, values, index, prior, {"counts": tot})
    design = np.column_stack([np.ones(len(s)), s] + ([np.asarray(z, dtype=float)] if uses_z else []))
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    return CondModel("linear", target, uses_z, coef)


def fit_cond(data: Dataset, target: str) -> CondModel:
    if target not in TARGETS:
        raise ValueError(f"target must be one of {TARGETS}")
    tr = data.flat
    if target == "Z_given_S":
        return fit_binary(tr.s, tr.z, discrete=data.discrete, target=target)
    if target == "A_given_ZS":
        return fit_binary(tr.s, tr.a, z=tr.z, discrete=data.discrete, target=target)
    return fit_mean(tr.s, tr.r, z=tr.z, discrete=data.discrete, target=target)


def fit_behavior_policy(states, actions, discrete: bool) -> CondModel:
    """pi_0(1|s) ignoring Z and U; deliberately confounded (baselines only)."""
    return fit_binary(states, actions, discrete=discrete, target="A_given_S")


# IV ratios ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RatioSet:
    """c(z|s) = weights turning the two IV arms into the target policy.

    c1 = (pi - p0A) / (p1A - p0A), c0 = (p1A - pi) / (p1A - p0A), and
    rho(s, z) = c(z|s) / p_z(z|s).
    """

    pa: CondModel
    pz: CondModel
    pi: TargetPolicy
    overlap_floor: float = 1e-3

    def arms(self, states):
        s = _as2d(states)
        p0 = self.pa.predict(s, np.zeros(len(s)))
        p1 = self.pa.predict(s, np.ones(len(s)))
        return p0, p1

    def c(self, states) -> np.ndarray:
        """(N, 2) array with columns c(0|s), c(1|s)."""
        s = _as2d(states)
        p0, p1 = self.arms(s)
        gap = p1 - p0
        weak = np.abs(gap) < self.overlap_floor
        if weak.any():
            raise IvWeakError(
                f"|p1A - p0A| < {self.overlap_floor:g} at {int(weak.sum())} of {len(s)} states",
                count=int(weak.sum()),
            )
        pi1 = self.pi.prob1(s)
        c1 = (pi1 - p0) / gap
        return np.column_stack([1.0 - c1, c1])

    def c_of(self, states, z) -> np.ndarray:
        cc = self.c(states)
        return cc[np.arange(len(cc)), np.asarray(z, dtype=int)]

    def pz_of(self, states, z) -> np.ndarray:
        return self.pz.prob(states, z)

    def rho(self, states, z) -> np.ndarray:
        pz = self.pz_of(states, z)
        if (pz <= 0).any():
            raise OverlapError("p_z(z|s) is zero at an observed (s, z)")
        return self.c_of(states, z) / pz

    def weights(self, states) -> np.ndarray:
        """(N, 2, 2) array c(z|s) p_a(a|z,s) indexed [n, z, a]."""
        s = _as2d(states)
        cc = self.c(s)
        p0, p1 = self.arms(s)
        pa = np.stack([np.column_stack([1.0 - p0, p0]), np.column_stack([1.0 - p1, p1])], axis=1)
        return cc[:, :, None] * pa


def build_ratios(pa: CondModel, pz: CondModel, pi: TargetPolicy, overlap_floor: float = 1e-3) -> RatioSet:
    if not pa.uses_z:
        raise ValueError("the action model must condition on (z, s)")
    if overlap_floor <= 0:
        raise ValueError("overlap_floor must be positive")
    return RatioSet(pa, pz, pi, overlap_floor)
