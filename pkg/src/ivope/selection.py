"""Markov-order testing and the select-then-estimate loop.

The order test regresses the next observation on the last k
(observation, IV, action) triplets and asks whether the (k+1)-th lag adds
explanatory power, using an episode-clustered Wald statistic referred to an
F(q, G - 1) distribution. Any callable with the :class:`OrderTest`
signature can replace it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Protocol

import numpy as np
from scipy import linalg, stats

from .core import Dataset, RunConfig, TabularIndex, TargetPolicy
from .errors import HorizonError
from .estimators import EstimateReport, estimate_dr, fit_nuisances
from .nuisance import build_ratios, fit_cond
from .pomdp import build_hf_dataset, estimate_pomdp_dm, fit_gq, initial_futures

__all__ = [
    "OrderTestResult",
    "OrderTest",
    "LagRegressionTest",
    "test_markov_order",
    "augment_state",
    "SelectionResult",
    "select_and_estimate",
]


@dataclass(frozen=True)
class OrderTestResult:
    k: int
    p_value: float
    statistic: float
    df: int
    rejected: bool
    alpha: float
    clusters: int


class OrderTest(Protocol):
    def __call__(self, data: Dataset, k: int, alpha: float) -> OrderTestResult: ...


def _triplets(data: Dataset, lag: int, start: int, stop: int) -> np.ndarray:
    """(O_{t-lag}, Z_{t-lag}, A_{t-lag}) for t in [start, stop), shape (n, stop-start, d+2)."""
    sl = slice(start - lag, stop - lag)
    return np.concatenate(
        [data.states[:, sl, :], data.ivs[:, sl, None].astype(float), data.actions[:, sl, None].astype(float)],
        axis=2,
    )


def _onehot(rows) -> np.ndarray:
    cell = TabularIndex(rows).locate(rows)
    out = np.zeros((len(cell), cell.max() + 1))
    out[np.arange(len(cell)), cell] = 1.0
    return out


def _poly2(rows) -> np.ndarray:
    cols = [np.ones(len(rows)), *rows.T]
    cols += [rows[:, i] * rows[:, j] for i, j in combinations_with_replacement(range(rows.shape[1]), 2)]
    return np.column_stack(cols)


def _independent_columns(X, tol=1e-9) -> np.ndarray:
    if X.shape[1] == 0:
        return np.zeros(0, dtype=int)
    _, R, piv = linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int((diag > tol * max(diag[0], 1e-300) * max(X.shape)).sum()) if len(diag) else 0
    return np.sort(piv[:rank])


class LagRegressionTest:
    """Clustered Wald test that lag k+1 adds nothing given the last k triplets.

    Discrete data use a saturated dummy model of the current window;
    continuous data use a degree-2 polynomial of it. The added lag enters
    as cell dummies (discrete) or linearly (continuous).
    """

    def __call__(self, data: Dataset, k: int, alpha: float = 0.05) -> OrderTestResult:
        T = data.horizon
        if k < 1:
            raise ValueError("order k must be at least 1")
        if T < 2 * k + 2:
            raise HorizonError(f"horizon {T} too short to test order {k} (need T >= {2 * k + 2})")
        n, d = data.n, data.state_dim
        start, stop = k, T
        window = np.concatenate([_triplets(data, j, start, stop) for j in range(k)], axis=2)
        lag = _triplets(data, k, start, stop)
        Y = data.states[:, start + 1 : stop + 1, :]
        rows = n * (stop - start)
        window, lag, Y = window.reshape(rows, -1), lag.reshape(rows, -1), Y.reshape(rows, d)
        if data.discrete:
            X0, X1 = _onehot(window), _onehot(lag)
        else:
            X0, X1 = _poly2(window), lag
        X0 = X0[:, _independent_columns(X0)]
        # lag columns that add something beyond the window model
        beta0, *_ = np.linalg.lstsq(X0, X1, rcond=None)
        resid1 = X1 - X0 @ beta0
        keep = _independent_columns(resid1, tol=1e-7)
        X = np.hstack([X0, X1[:, keep]])
        p0, q = X0.shape[1], len(keep)
        B, *_ = np.linalg.lstsq(X, Y, rcond=None)
        E = Y - X @ B
        live = np.flatnonzero(E.var(axis=0) > 1e-12 * max(1.0, float(Y.var())))
        if q == 0 or len(live) == 0:
            return OrderTestResult(k, 1.0, 0.0, 0, False, alpha, n)
        bread = np.linalg.pinv(X.T @ X)
        Xg = X.reshape(n, stop - start, -1)
        Eg = E[:, live].reshape(n, stop - start, -1)
        scores = np.einsum("gtp,gtd->gpd", Xg, Eg)  # per-episode X'e
        infl = np.einsum("qp,gpd->gqd", bread[p0:], scores).reshape(n, -1)
        V = infl.T @ infl * n / (n - 1)
        b = B[p0:][:, live].reshape(-1)
        stat = float(b @ np.linalg.lstsq(V, b, rcond=None)[0])
        df = len(b)
        f = stat / df
        p = float(stats.f.sf(f, df, n - 1))
        p = min(max(p, 0.0), 1.0)
        return OrderTestResult(k, p, stat, df, p < alpha, alpha, n)


_DEFAULT_TEST = LagRegressionTest()


def test_markov_order(data: Dataset, k: int, alpha: float = 0.05, test: OrderTest | None = None) -> OrderTestResult:
    return (test or _DEFAULT_TEST)(data, k, alpha)


test_markov_order.__test__ = False  # keep pytest from collecting it


def augment_state(data: Dataset, k: int) -> Dataset:
    """S~_t = (O_t, O_{t-1}, Z_{t-1}, A_{t-1}, ..., O_{t-k+1}, Z_{t-k+1}, A_{t-k+1}).

    Triplets before the episode start are zero-padded. ``k = 1`` returns the
    data unchanged.
    """
    if k < 1:
        raise ValueError("order k must be at least 1")
    if k == 1:
        return data
    n, T, d = data.n, data.horizon, data.state_dim
    pad = k - 1
    O = np.concatenate([np.zeros((n, pad, d)), data.states], axis=1)
    Z = np.concatenate([np.zeros((n, pad)), data.ivs.astype(float)], axis=1)
    A = np.concatenate([np.zeros((n, pad)), data.actions.astype(float)], axis=1)
    blocks = [data.states]
    for j in range(1, k):
        # position of time t in the padded arrays is t + pad
        idx = np.arange(T + 1) + pad - j
        blocks += [O[:, idx, :], Z[:, idx, None], A[:, idx, None]]
    states = np.concatenate(blocks, axis=2)
    return Dataset(states, data.ivs, data.actions, data.rewards, data.discrete)


@dataclass(frozen=True, eq=False)
class SelectionResult:
    order: int | None
    pomdp: bool
    tests: tuple
    report: EstimateReport
    details: dict = field(default_factory=dict)


def select_and_estimate(
    data: Dataset,
    pi: TargetPolicy,
    K: int,
    alpha: float = 0.05,
    cfg: RunConfig | None = None,
    test: OrderTest | None = None,
    windows=(1, 1),
) -> SelectionResult:
    """Test orders 1..K in turn; estimate with DR at the first accepted order.

    If every order is rejected, fall back to the POMDP direct estimator with
    history/future windows ``windows``.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    cfg = cfg or RunConfig()
    results = []
    for k in range(1, K + 1):
        res = test_markov_order(data, k, alpha, test)
        results.append(res)
        if not res.rejected:
            aug = augment_state(data, k)
            nuis = fit_nuisances(aug, pi, cfg)
            return SelectionResult(k, False, tuple(results), estimate_dr(aug, nuis, cfg.alpha_ci))
    pz = fit_cond(data, "Z_given_S")
    pa = fit_cond(data, "A_given_ZS")
    ratios = build_ratios(pa, pz, pi, cfg.overlap_floor)
    M_H, M_F = windows
    pairs = build_hf_dataset(data, M_H, M_F)
    gq = fit_gq(pairs, ratios, pa, cfg.gamma, extra_futures=initial_futures(data, M_F))
    return SelectionResult(None, True, tuple(results), estimate_pomdp_dm(data, gq, ratios, pa, cfg.alpha_ci))
