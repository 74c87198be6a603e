"""Generative confounded environments.

Each environment keeps its latent confounder ``U_t`` (and any exogenous
noise) internal; only (S_t, Z_t, A_t, R_t) reach the returned
:class:`~ivope.core.Dataset`.

Environments are immutable. A rollout draws the same random numbers per
step whether actions come from the behavior policy or from a target policy,
so paired runs share noise.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.special import expit

from .config import floats, parse_sections, read_sections
from .core import Dataset, TargetPolicy
from .errors import DataError, SpecError

__all__ = [
    "ToyTabular",
    "Continuous2D",
    "AdCampaign",
    "AdCampaignParams",
    "HighOrder",
    "PartialObs",
    "TabularModel",
    "sample_dataset",
    "sample_under_target",
    "make_highorder",
    "make_env",
    "rollout",
]


class Environment:
    """Interface shared by all simulators (see the concrete classes)."""

    name = "env"
    state_dim = 1
    discrete = False
    has_tabular_model = False

    def initial(self, n, rng):
        raise NotImplementedError

    def observe(self, x, rng):
        return x

    def initial_carry(self, n):
        return None

    def update_carry(self, carry, obs, z, a):
        return carry

    def draw_u(self, n, rng, carry):
        raise NotImplementedError

    def draw_z(self, obs, rng):
        raise NotImplementedError

    def draw_a(self, obs, z, u, rng):
        raise NotImplementedError

    def outcome(self, x, z, a, u, rng):
        raise NotImplementedError

    # observed-law conditionals (U marginalised); used by the weighted oracle
    def true_pz1(self, obs):
        raise NotImplementedError(f"{self.name} has no closed-form p_z")

    def true_pa1(self, obs, z):
        raise NotImplementedError(f"{self.name} has no closed-form p_a")


def _bern(p, rng):
    return (rng.random(np.shape(p)) < p).astype(np.int8)


# ToyTabular ---------------------------------------------------------------

@dataclass(frozen=True)
class ToyTabular(Environment):
    """Binary state, binary latent U, rewards in {0, 10}.

    ``action_confounding`` is the coefficient of U in the behavior policy;
    setting it to 0 gives an unconfounded variant.
    """

    action_confounding: float = 0.5

    name = "toy"
    state_dim = 1
    discrete = True
    has_tabular_model = True
    reward_max = 10.0
    u_values = (0.0, 1.0)

    def initial(self, n, rng):
        return _bern(np.full(n, 0.5), rng).astype(float)[:, None]

    def draw_u(self, n, rng, carry):
        return _bern(np.full(n, 0.5), rng).astype(float)

    def u_prob1(self, carry):
        return 0.5

    def draw_z(self, obs, rng):
        s = obs[:, 0]
        delta = np.where(rng.random(len(s)) < 0.5, 0.25, 0.0)
        return _bern(expit(s + delta - 2.0), rng)

    def p_a_given_u(self, s, z, u):
        return expit(s + 2.0 * z + self.action_confounding * u - 2.0)

    def draw_a(self, obs, z, u, rng):
        return _bern(self.p_a_given_u(obs[:, 0], z, u), rng)

    @staticmethod
    def p_outcome(s, a, u):
        return expit(s + a + u - 2.0)

    def outcome(self, x, z, a, u, rng):
        p = self.p_outcome(x[:, 0], a, u)
        r = 10.0 * _bern(p, rng)
        s_next = _bern(p, rng).astype(float)[:, None]
        return r, s_next

    def true_pz1(self, obs):
        s = np.asarray(obs, dtype=float).reshape(len(obs), -1)[:, 0]
        return 0.5 * expit(s + 0.25 - 2.0) + 0.5 * expit(s - 2.0)

    def true_pa1(self, obs, z):
        s = np.asarray(obs, dtype=float).reshape(len(obs), -1)[:, 0]
        return 0.5 * self.p_a_given_u(s, z, 0.0) + 0.5 * self.p_a_given_u(s, z, 1.0)

    def tabular_model(self) -> "TabularModel":
        return _toy_tabular_model(self, lags=0, u_prob1=lambda lag_actions: 0.5)


# Continuous2D -------------------------------------------------------------

@dataclass(frozen=True)
class Continuous2D(Environment):
    """Two-dimensional Gaussian-start environment with U in {-0.5, 0.5}.

    By default the second state coordinate updates from its own previous
    value, which keeps S_1 + S_2 invariant. ``literal_transition=True`` feeds
    S_{t,1} into both coordinates instead; that variant drifts without bound.
    """

    literal_transition: bool = False

    name = "continuous2d"
    state_dim = 2
    discrete = False
    u_values = (-0.5, 0.5)

    def initial(self, n, rng):
        return rng.standard_normal((n, 2))

    def draw_u(self, n, rng, carry):
        return np.where(rng.random(n) < 0.5, -0.5, 0.5)

    def draw_z(self, obs, rng):
        return _bern(expit(obs[:, 0] + obs[:, 1]), rng)

    def draw_a(self, obs, z, u, rng):
        return _bern(expit(obs[:, 0] + obs[:, 1] + 2.0 * z + u), rng)

    def outcome(self, x, z, a, u, rng):
        s1, s2 = x[:, 0], x[:, 1]
        r = s1 + s2 + 2.0 * a + 2.5 * u
        base2 = s1 if self.literal_transition else s2
        s_next = np.column_stack([s1 + 0.5 * u + a - 0.5, base2 - 0.5 * u - a + 0.5])
        return r, s_next

    def true_pz1(self, obs):
        return expit(obs[:, 0] + obs[:, 1])

    def true_pa1(self, obs, z):
        x = obs[:, 0] + obs[:, 1] + 2.0 * np.asarray(z)
        return 0.5 * expit(x - 0.5) + 0.5 * expit(x + 0.5)


# AdCampaign ---------------------------------------------------------------

_AD_DIM = 6


@dataclass(frozen=True)
class AdCampaignParams:
    """Surrogate coefficients for the advertising environment.

    beta_a acts on (1, S, Z); beta_r on (1, S, Z, A); ``transition`` is the
    6 x 9 mean map applied to (1, S, Z, A); ``target_beta`` acts on
    (1, S, E[Z]).
    """

    p_z: float
    beta_a: tuple
    beta_r: tuple
    transition: tuple
    sigma: tuple
    target_beta: tuple
    version: int = 1

    def __post_init__(self):
        d = _AD_DIM
        shapes = {"beta_a": d + 2, "beta_r": d + 3, "transition": d * (d + 3), "sigma": d, "target_beta": d + 2}
        for name, size in shapes.items():
            vals = tuple(float(v) for v in np.ravel(getattr(self, name)))
            if len(vals) != size:
                raise SpecError(f"AdCampaign {name} needs {size} values, got {len(vals)}")
            if not np.isfinite(vals).all():
                raise SpecError(f"AdCampaign {name} must be finite")
            object.__setattr__(self, name, vals)
        if not 0.0 < self.p_z < 1.0:
            raise SpecError("AdCampaign p_z must lie in (0, 1)")
        if min(self.sigma) <= 0:
            raise SpecError("AdCampaign sigma entries must be positive")

    @property
    def transition_matrix(self) -> np.ndarray:
        return np.asarray(self.transition).reshape(_AD_DIM, _AD_DIM + 3)

    @classmethod
    def from_text(cls, text: str, source: str = "<string>") -> "AdCampaignParams":
        sec = parse_sections(text, source).get("adcampaign")
        if sec is None:
            raise SpecError(f"{source}: missing [adcampaign] section")
        known = {"version", "p_z", "beta_a", "beta_r", "transition", "sigma", "target_beta"}
        unknown = sorted(set(sec) - known)
        if unknown:
            raise SpecError(f"{source}: unknown keys {unknown} (line {sec[unknown[0]].line})")
        missing = sorted(known - set(sec))
        if missing:
            raise SpecError(f"{source}: missing keys {missing}")
        return cls(
            p_z=floats(sec["p_z"], source)[0],
            beta_a=tuple(floats(sec["beta_a"], source)),
            beta_r=tuple(floats(sec["beta_r"], source)),
            transition=tuple(floats(sec["transition"], source)),
            sigma=tuple(floats(sec["sigma"], source)),
            target_beta=tuple(floats(sec["target_beta"], source)),
            version=int(floats(sec["version"], source)[0]),
        )

    @classmethod
    def load(cls, path=None) -> "AdCampaignParams":
        if path is None:
            text = resources.files("ivope.data").joinpath("adcampaign_v1.cfg").read_text(encoding="utf-8")
            return cls.from_text(text, "adcampaign_v1.cfg")
        read_sections(path)  # existence and syntax check with a clear message
        return cls.from_text(Path(path).read_text(encoding="utf-8"), str(path))

    def dumps(self) -> str:
        def row(vals):
            return ", ".join(repr(float(v)) for v in vals)

        return "\n".join(
            [
                "[adcampaign]",
                f"version = {self.version}",
                f"p_z = {self.p_z!r}",
                f"beta_a = {row(self.beta_a)}",
                f"beta_r = {row(self.beta_r)}",
                f"transition = {row(self.transition)}",
                f"sigma = {row(self.sigma)}",
                f"target_beta = {row(self.target_beta)}",
                "",
            ]
        )


@dataclass(frozen=True)
class AdCampaign(Environment):
    """Six-dimensional surrogate with a randomised bid Z, no latent U.

    The IV enters reward and transition models directly, as in a model fitted
    to logged data with Z as a covariate.
    """

    params: AdCampaignParams = field(default_factory=AdCampaignParams.load)

    name = "adcampaign"
    state_dim = _AD_DIM
    discrete = False

    def initial(self, n, rng):
        return rng.standard_normal((n, _AD_DIM))

    def draw_u(self, n, rng, carry):
        return np.zeros(n)

    def draw_z(self, obs, rng):
        return _bern(np.full(len(obs), self.params.p_z), rng)

    def draw_a(self, obs, z, u, rng):
        return _bern(self.true_pa1(obs, z), rng)

    def outcome(self, x, z, a, u, rng):
        n = len(x)
        design = np.column_stack([np.ones(n), x, z, a])
        r = _bern(expit(design @ np.asarray(self.params.beta_r)), rng).astype(float)
        mean = design @ self.params.transition_matrix.T
        s_next = mean + rng.standard_normal((n, _AD_DIM)) * np.asarray(self.params.sigma)
        return r, s_next

    def true_pz1(self, obs):
        return np.full(len(obs), self.params.p_z)

    def true_pa1(self, obs, z):
        n = len(obs)
        design = np.column_stack([np.ones(n), obs, np.broadcast_to(z, (n,))])
        return expit(design @ np.asarray(self.params.beta_a))

    def target_policy(self) -> TargetPolicy:
        """Logistic target over (1, S, E[Z]) with E[Z] folded into the intercept."""
        b = np.asarray(self.params.target_beta)
        return TargetPolicy.logistic(np.r_[b[0] + b[-1] * self.params.p_z, b[1:-1]])


# PartialObs ---------------------------------------------------------------

@dataclass(frozen=True)
class PartialObs(Environment):
    """Latent binary state observed through a symmetric noisy channel.

    Reward and transition are additive in (S, A, U); the IV depends on the
    observation only.
    """

    accuracy: float = 0.8

    name = "partialobs"
    state_dim = 1
    discrete = True

    def __post_init__(self):
        if not 0.5 < self.accuracy < 1.0:
            raise SpecError("PartialObs accuracy must lie in (0.5, 1)")

    def initial(self, n, rng):
        return _bern(np.full(n, 0.5), rng).astype(float)[:, None]

    def observe(self, x, rng):
        flip = rng.random(len(x)) >= self.accuracy
        return np.where(flip[:, None], 1.0 - x, x)

    def draw_u(self, n, rng, carry):
        return _bern(np.full(n, 0.5), rng).astype(float)

    def draw_z(self, obs, rng):
        return _bern(self.true_pz1(obs), rng)

    def draw_a(self, obs, z, u, rng):
        return _bern(expit(-1.0 + 2.0 * z + u + 0.5 * obs[:, 0]), rng)

    def outcome(self, x, z, a, u, rng):
        s = x[:, 0]
        r = 2.0 * s + 2.0 * a + 2.0 * u + 0.5 * rng.standard_normal(len(s))
        s_next = _bern(0.15 + 0.35 * s + 0.25 * a + 0.2 * u, rng).astype(float)[:, None]
        return r, s_next

    def true_pz1(self, obs):
        return expit(np.asarray(obs, dtype=float).reshape(len(obs), -1)[:, 0] - 0.5)

    def true_pa1(self, obs, z):
        o = np.asarray(obs, dtype=float).reshape(len(obs), -1)[:, 0]
        return 0.5 * expit(-1.0 + 2.0 * z + 0.5 * o) + 0.5 * expit(2.0 * z + 0.5 * o)

    def behavior_policy(self) -> TargetPolicy:
        """Observed law of A given O, as a tabular policy on the observation."""
        o = np.array([[0.0], [1.0]])
        pz = self.true_pz1(o)
        return TargetPolicy.tabular((1.0 - pz) * self.true_pa1(o, np.zeros(2)) + pz * self.true_pa1(o, np.ones(2)))


# HighOrder ----------------------------------------------------------------

@dataclass(frozen=True)
class HighOrder(Environment):
    """Wraps a base environment so that U_t depends on the last k-1 actions.

    P(U_t = high) = 0.2 + 0.6 * mean(A_{t-1}, ..., A_{t-k+1}); actions before
    the episode start count as 0. The observed process is then order-k but
    not order-(k-1) Markov.
    """

    base: Environment
    k: int

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("HighOrder needs k >= 2")
        if not hasattr(self.base, "u_values"):
            raise ValueError(f"{type(self.base).__name__} exposes no binary latent to modulate")

    @property
    def name(self):
        return f"highorder{self.k}-{self.base.name}"

    @property
    def state_dim(self):
        return self.base.state_dim

    @property
    def discrete(self):
        return self.base.discrete

    @property
    def has_tabular_model(self):
        return isinstance(self.base, ToyTabular)

    @property
    def reward_max(self):
        return self.base.reward_max

    def u_prob1(self, lag_actions):
        return 0.2 + 0.6 * np.mean(lag_actions, axis=-1)

    def initial(self, n, rng):
        return self.base.initial(n, rng)

    def initial_carry(self, n):
        return np.zeros((n, self.k - 1), dtype=np.int8)

    def update_carry(self, carry, obs, z, a):
        return np.column_stack([a, carry[:, :-1]]) if self.k > 2 else np.asarray(a)[:, None]

    def draw_u(self, n, rng, carry):
        lo, hi = self.base.u_values
        return np.where(rng.random(n) < self.u_prob1(carry), hi, lo)

    def draw_z(self, obs, rng):
        return self.base.draw_z(obs, rng)

    def draw_a(self, obs, z, u, rng):
        return self.base.draw_a(obs, z, u, rng)

    def outcome(self, x, z, a, u, rng):
        return self.base.outcome(x, z, a, u, rng)

    def tabular_model(self) -> "TabularModel":
        if not isinstance(self.base, ToyTabular):
            raise NotImplementedError("tabular enumeration needs a ToyTabular base")
        return _toy_tabular_model(self.base, lags=self.k - 1, u_prob1=self.u_prob1)


def make_highorder(base: Environment, k: int) -> HighOrder:
    return HighOrder(base, k)


# rollouts -----------------------------------------------------------------

def rollout(env: Environment, n: int, T: int, rng, policy: TargetPolicy | None = None, burn_in: int = 0, z_prob1=None):
    """Yield ``(obs_t, z_t, a_t, r_t)`` for t = 0..T-1 and finally ``obs_T``.

    ``z_prob1(obs)`` replaces the environment's IV law when given. The
    generator's last item is the terminal observation array alone.
    """
    x = env.initial(n, rng)
    carry = env.initial_carry(n)
    for t in range(burn_in + T):
        obs = env.observe(x, rng)
        u = env.draw_u(n, rng, carry)
        z = env.draw_z(obs, rng) if z_prob1 is None else _bern(z_prob1(obs), rng)
        a = env.draw_a(obs, z, u, rng)
        if policy is not None:
            a = _bern(policy.prob1(obs), rng)
        r, x_next = env.outcome(x, z, a, u, rng)
        carry = env.update_carry(carry, obs, z, a)
        if t >= burn_in:
            yield obs, z, a, r
        x = x_next
    yield env.observe(x, rng)


def _collect(env, n, T, rng, policy=None, burn_in=0) -> Dataset:
    if n < 1 or T < 1:
        raise DataError("n and T must be positive")
    d = env.state_dim
    states = np.empty((n, T + 1, d))
    ivs = np.empty((n, T), dtype=np.int8)
    actions = np.empty((n, T), dtype=np.int8)
    rewards = np.empty((n, T))
    steps = rollout(env, n, T, rng, policy, burn_in)
    for t in range(T):
        obs, z, a, r = next(steps)
        states[:, t], ivs[:, t], actions[:, t], rewards[:, t] = obs, z, a, r
    states[:, T] = next(steps)
    return Dataset(states, ivs, actions, rewards, discrete=env.discrete)


def sample_dataset(env: Environment, n: int, T: int, rng, burn_in: int = 0) -> Dataset:
    """Draw n behavior-policy episodes of length T (after ``burn_in`` discarded steps)."""
    return _collect(env, n, T, rng, None, burn_in)


def sample_under_target(env: Environment, pi: TargetPolicy, n: int, T: int, rng) -> Dataset:
    """Interventional episodes: A_t ~ pi(.|S_t), ignoring U_t and Z_t."""
    return _collect(env, n, T, rng, pi)


def make_env(kind: str, params_path=None, k: int = 2, literal_transition: bool = False) -> Environment:
    kind = kind.lower()
    if kind == "toy":
        return ToyTabular()
    if kind == "toy-unconfounded":
        return ToyTabular(action_confounding=0.0)
    if kind == "continuous2d":
        return Continuous2D(literal_transition=literal_transition)
    if kind == "adcampaign":
        return AdCampaign(AdCampaignParams.load(params_path))
    if kind == "partialobs":
        return PartialObs()
    if kind == "highorder":
        return make_highorder(ToyTabular(), k)
    raise SpecError(f"unknown environment {kind!r}")


# exact enumeration --------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TabularModel:
    """Observed-law conditionals of a finite environment, U and delta enumerated.

    Axes: s (state cell), z, a, r (index into ``reward_values``), s'.
    The ``int_*`` arrays describe the interventional process where U is
    drawn from ``p_u1`` and actions ignore U and Z.
    """

    keys: np.ndarray
    nu: np.ndarray
    p_z1: np.ndarray
    p_a1: np.ndarray
    reward_values: np.ndarray
    p_rs: np.ndarray
    p_u1: np.ndarray
    int_r_mean: np.ndarray
    int_next: np.ndarray

    @property
    def m(self) -> int:
        return len(self.keys)

    @property
    def r_mean(self) -> np.ndarray:
        return np.einsum("szark,r->sza", self.p_rs, self.reward_values)

    @property
    def p_next(self) -> np.ndarray:
        return self.p_rs.sum(axis=3)

    @property
    def p_a(self) -> np.ndarray:
        """(m, 2, 2) array p_a[s, z, a]."""
        return np.stack([1.0 - self.p_a1, self.p_a1], axis=-1)

    @property
    def p_z(self) -> np.ndarray:
        return np.column_stack([1.0 - self.p_z1, self.p_z1])


def _toy_tabular_model(env: ToyTabular, lags: int, u_prob1) -> TabularModel:
    keys = [k for k in itertools.product((0, 1), repeat=1 + 3 * lags)]
    index = {k: i for i, k in enumerate(keys)}
    m = len(keys)
    rvals = np.array([0.0, 10.0])
    p_z1 = np.empty(m)
    p_a1 = np.empty((m, 2))
    p_rs = np.zeros((m, 2, 2, 2, m))
    p_u1 = np.empty(m)
    int_r = np.empty((m, 2, 2))
    int_next = np.zeros((m, 2, 2, m))
    nu = np.zeros(m)

    def next_key(key, o_next, z, a):
        return (o_next, key[0], z, a) + key[1 : 1 + 3 * (lags - 1)] if lags else (o_next,)

    for key, i in index.items():
        o = float(key[0])
        lag_actions = np.array(key[3::3], dtype=float)
        pu = float(u_prob1(lag_actions)) if lags else 0.5
        p_u1[i] = pu
        pz1 = float(env.true_pz1(np.array([[o]]))[0])
        p_z1[i] = pz1
        if all(v == 0 for v in key[1:]):
            nu[i] = 0.5
        prior = np.array([1.0 - pu, pu])
        for a in (0, 1):
            for u in (0, 1):
                q = float(env.p_outcome(o, a, u))
                int_r[i, u, a] = 10.0 * q
                for z in (0, 1):
                    pzz = pz1 if z else 1.0 - pz1
                    for o_next, po in ((0, 1.0 - q), (1, q)):
                        int_next[i, u, a, index[next_key(key, o_next, z, a)]] += pzz * po
        for z in (0, 1):
            pa1_u = np.array([env.p_a_given_u(o, z, u) for u in (0, 1)])
            p_a1[i, z] = float(prior @ pa1_u)
            for a in (0, 1):
                w = prior * (pa1_u if a else 1.0 - pa1_u)
                post = w / w.sum()
                for u in (0, 1):
                    q = float(env.p_outcome(o, a, u))
                    for o_next in (0, 1):
                        j = index[next_key(key, o_next, z, a)]
                        po = q if o_next else 1.0 - q
                        p_rs[i, z, a, 0, j] += post[u] * (1.0 - q) * po
                        p_rs[i, z, a, 1, j] += post[u] * q * po
    return TabularModel(
        keys=np.array(keys, dtype=float),
        nu=nu,
        p_z1=p_z1,
        p_a1=p_a1,
        reward_values=rvals,
        p_rs=p_rs,
        p_u1=p_u1,
        int_r_mean=int_r,
        int_next=int_next,
    )
