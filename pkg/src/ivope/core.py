"""Shared data model: trajectories, datasets, target policies, run settings and RNG streams."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from .errors import DataError

__all__ = [
    "Trajectory",
    "Dataset",
    "TargetPolicy",
    "RunConfig",
    "TabularIndex",
    "derive_rng_stream",
    "discounted_return",
    "save_csv",
    "load_csv",
]


def _readonly(x, dtype):
    arr = np.array(x, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Trajectory:
    """One observed episode (S_0..S_T, Z_0..Z_{T-1}, A_0..A_{T-1}, R_0..R_{T-1})."""

    states: np.ndarray
    ivs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        if states.ndim == 1:
            states = states[:, None]
        object.__setattr__(self, "states", _readonly(states, float))
        object.__setattr__(self, "ivs", _readonly(self.ivs, np.int8))
        object.__setattr__(self, "actions", _readonly(self.actions, np.int8))
        object.__setattr__(self, "rewards", _readonly(self.rewards, float))
        T = len(self.rewards)
        if len(self.ivs) != T or len(self.actions) != T:
            raise DataError("ivs, actions and rewards must share one length")
        if self.states.shape[0] != T + 1:
            raise DataError(f"expected {T + 1} states, got {self.states.shape[0]}")
        for name in ("ivs", "actions"):
            v = getattr(self, name)
            if v.size and not np.isin(v, (0, 1)).all():
                raise DataError(f"{name} must be binary")

    @property
    def horizon(self) -> int:
        return len(self.rewards)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Rectangular panel of n episodes of length T.

    Arrays are stored stacked: ``states`` has shape (n, T+1, d) and the
    per-step arrays have shape (n, T).
    """

    states: np.ndarray
    ivs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    discrete: bool = False

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        if states.ndim == 2:
            states = states[:, :, None]
        if states.ndim != 3:
            raise DataError("states must have shape (n, T+1, d)")
        object.__setattr__(self, "states", _readonly(states, float))
        for name, dt in (("ivs", np.int8), ("actions", np.int8), ("rewards", float)):
            object.__setattr__(self, name, _readonly(getattr(self, name), dt))
        n, T1, _ = self.states.shape
        for name in ("ivs", "actions", "rewards"):
            if getattr(self, name).shape != (n, T1 - 1):
                raise DataError(f"{name} has shape {getattr(self, name).shape}, expected {(n, T1 - 1)}")
        if n < 1 or T1 < 2:
            raise DataError("dataset needs at least one episode of length >= 1")
        if not (np.isin(self.ivs, (0, 1)).all() and np.isin(self.actions, (0, 1)).all()):
            raise DataError("ivs and actions must be binary")
        if not np.isfinite(self.states).all() or not np.isfinite(self.rewards).all():
            raise DataError("states and rewards must be finite")
        if self.discrete and not np.array_equal(self.states, np.rint(self.states)):
            raise DataError("discrete datasets need integer-coded states")

    @classmethod
    def from_trajectories(cls, trajectories: Sequence[Trajectory], discrete: bool = False) -> "Dataset":
        trajectories = list(trajectories)
        if not trajectories:
            raise DataError("no trajectories")
        shapes = {t.states.shape for t in trajectories}
        if len(shapes) != 1:
            raise DataError(f"ragged panel: state shapes {sorted(shapes)}")
        return cls(
            states=np.stack([t.states for t in trajectories]),
            ivs=np.stack([t.ivs for t in trajectories]),
            actions=np.stack([t.actions for t in trajectories]),
            rewards=np.stack([t.rewards for t in trajectories]),
            discrete=discrete,
        )

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def horizon(self) -> int:
        return self.states.shape[1] - 1

    @property
    def state_dim(self) -> int:
        return self.states.shape[2]

    @property
    def trajectories(self) -> list[Trajectory]:
        return [
            Trajectory(self.states[i], self.ivs[i], self.actions[i], self.rewards[i])
            for i in range(self.n)
        ]

    @property
    def initial_states(self) -> np.ndarray:
        return self.states[:, 0, :]

    @cached_property
    def flat(self) -> "Transitions":
        """All (S_t, Z_t, A_t, R_t, S_{t+1}) tuples, episode-major."""
        d = self.state_dim
        return Transitions(
            s=self.states[:, :-1, :].reshape(-1, d),
            z=self.ivs.reshape(-1).astype(int),
            a=self.actions.reshape(-1).astype(int),
            r=self.rewards.reshape(-1),
            s_next=self.states[:, 1:, :].reshape(-1, d),
        )

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.states[idx], self.ivs[idx], self.actions[idx], self.rewards[idx], self.discrete)

    def with_rewards(self, rewards) -> "Dataset":
        return Dataset(self.states, self.ivs, self.actions, rewards, self.discrete)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.discrete == other.discrete
            and np.array_equal(self.states, other.states)
            and np.array_equal(self.ivs, other.ivs)
            and np.array_equal(self.actions, other.actions)
            and np.array_equal(self.rewards, other.rewards)
        )

    __hash__ = None


@dataclass(frozen=True)
class Transitions:
    s: np.ndarray
    z: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray

    def __len__(self):
        return len(self.r)


@dataclass(frozen=True)
class TargetPolicy:
    """Memoryless binary-action target policy.

    ``tabular``: ``table[s]`` is pi(1|s) for the integer code in state column
    ``column``. ``logistic``: pi(1|s) = sigmoid(beta_0 + beta_1 s_1 + ...),
    reading only the leading ``len(beta) - 1`` state coordinates, so the same
    policy applies unchanged to augmented states.
    """

    kind: str
    params: tuple
    column: int = 0

    def __post_init__(self):
        params = tuple(float(p) for p in self.params)
        object.__setattr__(self, "params", params)
        if self.kind == "tabular":
            if not params or not all(0.0 <= p <= 1.0 for p in params):
                raise ValueError("tabular policy probabilities must lie in [0, 1]")
        elif self.kind == "logistic":
            if len(params) < 1 or not np.isfinite(params).all():
                raise ValueError("logistic policy needs a finite coefficient vector")
        else:
            raise ValueError(f"unknown policy kind {self.kind!r}")

    @classmethod
    def tabular(cls, probs, column: int = 0) -> "TargetPolicy":
        return cls("tabular", tuple(np.ravel(probs)), column)

    @classmethod
    def logistic(cls, beta) -> "TargetPolicy":
        return cls("logistic", tuple(np.ravel(beta)))

    def prob1(self, states) -> np.ndarray:
        s = np.asarray(states, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        if self.kind == "tabular":
            code = np.rint(s[:, self.column]).astype(int)
            if code.min(initial=0) < 0 or code.max(initial=0) >= len(self.params):
                raise ValueError("state code outside the policy table")
            return np.asarray(self.params)[code]
        beta = np.asarray(self.params)
        k = len(beta) - 1
        if s.shape[1] < k:
            raise ValueError(f"policy reads {k} state coordinates, got {s.shape[1]}")
        return expit(beta[0] + s[:, :k] @ beta[1:])

    def prob(self, states, a) -> np.ndarray:
        p1 = self.prob1(states)
        return np.where(np.asarray(a) == 1, p1, 1.0 - p1)

    def describe(self) -> str:
        return f"{self.kind}:" + ",".join(repr(p) for p in self.params)

    @classmethod
    def parse(cls, text: str) -> "TargetPolicy":
        """Inverse of :meth:`describe`, e.g. ``"tabular:0.25,0.5"``."""
        kind, _, body = text.partition(":")
        if not body:
            raise ValueError(f"policy string {text!r} must look like kind:p1,p2,...")
        return cls(kind.strip(), tuple(float(v) for v in body.split(",")))


@dataclass(frozen=True)
class RunConfig:
    gamma: float = 0.9
    n_trajectories: int = 500
    horizon: int = 100
    seed: int = 0
    overlap_floor: float = 1e-3
    fqe_max_iters: int = 500
    fqe_tol: float = 1e-6
    alpha_ci: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.overlap_floor <= 0:
            raise ValueError("overlap_floor must be positive")
        if self.n_trajectories < 1 or self.horizon < 1:
            raise ValueError("n_trajectories and horizon must be positive")
        if not 0.0 < self.alpha_ci < 1.0:
            raise ValueError("alpha_ci must lie in (0, 1)")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")


class TabularIndex:
    """Dense lookup from integer-coded state rows to cell numbers 0..m-1."""

    def __init__(self, keys):
        keys = np.asarray(keys, dtype=float)
        if keys.ndim == 1:
            keys = keys[:, None]
        ikeys = np.rint(keys).astype(np.int64)
        if not np.array_equal(ikeys, keys) or ikeys.min(initial=0) < 0:
            raise DataError("tabular states must be non-negative integers")
        self.keys = np.unique(ikeys, axis=0)
        self.dims = tuple(int(v) for v in self.keys.max(axis=0) + 1)
        self._table = np.full(int(np.prod(self.dims)), -1, dtype=np.int64)
        self._table[np.ravel_multi_index(self.keys.T, self.dims)] = np.arange(len(self.keys))

    @classmethod
    def from_states(cls, *arrays) -> "TabularIndex":
        rows = [np.asarray(a, dtype=float).reshape(-1, np.asarray(a).shape[-1]) for a in arrays]
        return cls(np.concatenate(rows))

    def __len__(self):
        return len(self.keys)

    def locate(self, states, strict: bool = True) -> np.ndarray:
        s = np.asarray(states, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        if s.shape[1] != len(self.dims):
            raise DataError(f"expected {len(self.dims)} state columns, got {s.shape[1]}")
        si = np.rint(s).astype(np.int64)
        inside = ((si >= 0) & (si < np.asarray(self.dims))).all(axis=1)
        out = np.full(len(si), -1, dtype=np.int64)
        if inside.any():
            out[inside] = self._table[np.ravel_multi_index(si[inside].T, self.dims)]
        if strict and (out < 0).any():
            bad = si[out < 0][0]
            raise DataError(f"state {tuple(bad)} was never observed")
        return out


def _tag_words(tag: str) -> list[int]:
    digest = hashlib.blake2b(tag.encode("utf-8"), digest_size=16).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def derive_rng_stream(seed: int, purpose_tag: str, index: int = 0) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by (seed, tag, index).

    The tag is hashed with a fixed digest so keys do not depend on Python's
    per-process string hashing.
    """
    if not 0 <= int(seed) < 2**64 or int(index) < 0:
        raise ValueError("seed must be a u64 and index non-negative")
    seed = int(seed)
    entropy = [seed & 0xFFFFFFFF, seed >> 32, *_tag_words(purpose_tag), int(index)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def discounted_return(traj, gamma: float) -> float:
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    rewards = np.asarray(traj.rewards if hasattr(traj, "rewards") else traj, dtype=float)
    return float(np.sum(rewards * gamma ** np.arange(rewards.shape[-1])))


# CSV persistence ---------------------------------------------------------

def save_csv(data: Dataset, path) -> Path:
    path = Path(path)
    d = data.state_dim
    header = ["episode", "t", *[f"s_{j}" for j in range(d)], "z", "a", "r"]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(data.n):
            for t in range(data.horizon + 1):
                s = [repr(float(v)) for v in data.states[i, t]]
                if t < data.horizon:
                    tail = [str(int(data.ivs[i, t])), str(int(data.actions[i, t])), repr(float(data.rewards[i, t]))]
                else:
                    tail = ["", "", ""]
                w.writerow([str(i), str(t), *s, *tail])
    return path


def load_csv(path, discrete: bool | None = None) -> Dataset:
    """Read a dataset written by :func:`save_csv`.

    ``discrete=None`` infers the flag from whether every state is an integer.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = rows[0]
    scols = [h for h in header if h.startswith("s_")]
    expected = ["episode", "t", *[f"s_{j}" for j in range(len(scols))], "z", "a", "r"]
    if header != expected or not scols:
        raise DataError(f"{path}: unexpected header {header}")
    body = rows[1:]
    episodes = sorted({int(r[0]) for r in body})
    if episodes != list(range(len(episodes))):
        raise DataError(f"{path}: episode ids must be 0..n-1")
    per = len(body) // max(len(episodes), 1)
    if per * len(episodes) != len(body) or per < 2:
        raise DataError(f"{path}: ragged or truncated panel")
    n, T, d = len(episodes), per - 1, len(scols)
    states = np.empty((n, T + 1, d))
    ivs = np.empty((n, T), dtype=np.int8)
    actions = np.empty((n, T), dtype=np.int8)
    rewards = np.empty((n, T))
    for lineno, r in enumerate(body, start=2):
        i, t = int(r[0]), int(r[1])
        if not (0 <= t <= T) or r[0] != str(i):
            raise DataError(f"{path}:{lineno}: bad episode/time index")
        states[i, t] = [float(v) for v in r[2 : 2 + d]]
        z, a, rew = r[2 + d :]
        if t < T:
            ivs[i, t], actions[i, t], rewards[i, t] = int(z), int(a), float(rew)
        elif (z, a, rew) != ("", "", ""):
            raise DataError(f"{path}:{lineno}: terminal row must have empty z/a/r")
    if discrete is None:
        discrete = bool(np.array_equal(states, np.rint(states)))
    return Dataset(states, ivs, actions, rewards, discrete)
