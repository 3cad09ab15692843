"""Episodic environments: the JITAI physical-activity simulator and three tabular MDPs.

Both kinds share a small interface used by the policies::

    env.reset() -> features
    env.step(action) -> (features, reward, done)
    env.n_actions, env.feature_dim, env.horizon

The JITAI dynamics are also exposed as pure functions (``jitai_reset``,
``jitai_step``, ``observe``) over an immutable ``JitaiState``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Protocol

import numpy as np
from scipy.special import expit

from .errors import ConfigError, InvalidInput


class Environment(Protocol):
    n_actions: int
    feature_dim: int
    horizon: int

    def reset(self) -> np.ndarray: ...

    def step(self, action: int) -> tuple[np.ndarray, float, bool]: ...


EnvFactory = Callable[[np.random.SeedSequence], Environment]


# --------------------------------------------------------------------------- JITAI


@dataclass(frozen=True)
class JitaiConfig:
    sigma: float = 0.1
    delta_h: float = 0.1
    eps_h: float = 0.05
    delta_d: float = 0.1
    eps_d: float = 0.4
    mu_s: tuple[float, float] = (0.1, 0.1)
    rho1: float = 50.0
    rho2: float = 200.0
    d_threshold: float = 0.99
    horizon: int = 50

    def __post_init__(self):
        object.__setattr__(self, "mu_s", tuple(float(v) for v in self.mu_s))
        if len(self.mu_s) != 2:
            raise ConfigError("mu_s must have one entry per context")
        if not self.sigma > 0:
            raise ConfigError("sigma must be positive")
        for name in ("delta_h", "eps_h", "delta_d", "eps_d"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if not (self.rho1 > 0 and self.rho2 > 0):
            raise ConfigError("rho1 and rho2 must be positive")
        if not 0 < self.d_threshold <= 1:
            raise ConfigError("d_threshold must lie in (0, 1]")
        if self.horizon < 1:
            raise ConfigError("horizon must be at least 1")


@dataclass(frozen=True)
class JitaiState:
    c: int
    x: float
    p: tuple[float, float]
    l: int
    h: float = 0.0
    d: float = 0.0
    s: float = 0.0
    t: int = 0


JITAI_ACTIONS = 4
FEATURE_MODES = ("prob", "onehot")


def _draw_context(cfg: JitaiConfig, rng: np.random.Generator) -> dict:
    c = int(rng.random() < 0.5)
    x = c + cfg.sigma * rng.standard_normal()
    # Posterior over c given x under a uniform prior and N(c, sigma^2) likelihood.
    p1 = float(expit((2.0 * x - 1.0) / (2.0 * cfg.sigma**2)))
    p = (1.0 - p1, p1)
    return {"c": c, "x": float(x), "p": p, "l": int(p[1] > p[0])}


def jitai_reset(cfg: JitaiConfig, rng: np.random.Generator) -> JitaiState:
    return JitaiState(h=0.0, d=0.0, s=0.0, t=0, **_draw_context(cfg, rng))


def jitai_step(state: JitaiState, action: int, cfg: JitaiConfig,
               rng: np.random.Generator) -> tuple[JitaiState, float, bool]:
    """Advance one day: habituation, disengagement, step count, then a new context."""
    if action not in range(JITAI_ACTIONS):
        raise InvalidInput(f"JITAI action must be in 0..3, got {action}")
    tailored = action == state.c + 2

    if action == 0:
        h = (1.0 - cfg.delta_h) * state.h
    else:
        h = min(1.0, state.h + cfg.eps_h)

    if action == 0:
        d = state.d
    elif action == 1 or tailored:
        d = (1.0 - cfg.delta_d) * state.d
    else:
        d = min(1.0, state.d + cfg.eps_d)

    base = cfg.mu_s[state.c]
    if action == 1:
        reward = base + (1.0 - h) * cfg.rho1
    elif tailored:
        reward = base + (1.0 - h) * cfg.rho2
    else:
        reward = base

    t = state.t + 1
    done = d > cfg.d_threshold or t >= cfg.horizon
    new = JitaiState(h=h, d=d, s=reward, t=t, **_draw_context(cfg, rng))
    return new, reward, done


def observe(state: JitaiState, mode: str = "prob") -> np.ndarray:
    """Agent features: an intercept plus either p(c=1) or the inferred context."""
    if mode == "prob":
        return np.array([1.0, state.p[1]])
    if mode == "onehot":
        return np.array([1.0, float(state.l)])
    raise ConfigError(f"unknown feature mode {mode!r}; expected one of {FEATURE_MODES}")


class JitaiEnv:
    n_actions = JITAI_ACTIONS
    feature_dim = 2

    def __init__(self, cfg: JitaiConfig, rng: np.random.Generator, feature_mode: str = "prob"):
        if feature_mode not in FEATURE_MODES:
            raise ConfigError(f"unknown feature mode {feature_mode!r}")
        self.cfg = cfg
        self.rng = rng
        self.feature_mode = feature_mode
        self.horizon = cfg.horizon
        self.state: JitaiState | None = None

    def reset(self) -> np.ndarray:
        self.state = jitai_reset(self.cfg, self.rng)
        return observe(self.state, self.feature_mode)

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        self.state, reward, done = jitai_step(self.state, action, self.cfg, self.rng)
        return observe(self.state, self.feature_mode), reward, done


# --------------------------------------------------------------------------- tabular MDPs


@dataclass(frozen=True, eq=False)
class TabularMdp:
    name: str
    transition: np.ndarray  # (n_states, n_actions) -> next state
    reward: np.ndarray      # (n_states, n_actions) -> reward
    start: np.ndarray       # distribution over start states
    horizon: int = 100

    def __post_init__(self):
        transition = np.asarray(self.transition, dtype=int)
        reward = np.asarray(self.reward, dtype=float)
        start = np.asarray(self.start, dtype=float)
        if transition.shape != reward.shape or transition.ndim != 2:
            raise ConfigError("transition and reward tables must share shape (n_states, n_actions)")
        if transition.min() < 0 or transition.max() >= transition.shape[0]:
            raise ConfigError("transition targets out of range")
        if start.shape != (transition.shape[0],) or not np.isclose(start.sum(), 1.0) or start.min() < 0:
            raise ConfigError("start must be a distribution over states")
        if self.horizon < 0:
            raise ConfigError("horizon must be nonnegative")
        object.__setattr__(self, "transition", transition)
        object.__setattr__(self, "reward", reward)
        object.__setattr__(self, "start", start)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "start": self.start.tolist(),
            "horizon": self.horizon,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TabularMdp":
        return cls(data["name"], data["transition"], data["reward"], data["start"], data.get("horizon", 100))


MDP1 = TabularMdp(
    "mdp1",
    transition=[[0, 1], [0, 1]],
    reward=[[0, 10], [10, 0]],
    start=[1.0, 0.0],
)
MDP2 = TabularMdp(
    "mdp2",
    transition=[[0, 1], [1, 1]],
    reward=[[1, 10], [0, 0]],
    start=[1.0, 0.0],
)
MDP3 = TabularMdp(
    "mdp3",
    transition=[[0, 0], [0, 1], [2, 3], [3, 3]],
    reward=[[0, 0], [10, 1], [1, 10], [0, 0]],
    start=[0.0, 0.5, 0.5, 0.0],
)
BUILTIN_MDPS = {m.name: m for m in (MDP1, MDP2, MDP3)}


def mdp_reset(mdp: TabularMdp, rng: np.random.Generator) -> int:
    return int(rng.choice(mdp.n_states, p=mdp.start))


def mdp_step(mdp: TabularMdp, state: int, action: int) -> tuple[int, float]:
    if state not in range(mdp.n_states):
        raise InvalidInput(f"state {state} out of range for {mdp.name}")
    if action not in range(mdp.n_actions):
        raise InvalidInput(f"action {action} out of range for {mdp.name}")
    return int(mdp.transition[state, action]), float(mdp.reward[state, action])


def mdp_features(mdp: TabularMdp, state: int) -> np.ndarray:
    """Intercept followed by a one-hot encoding of the state."""
    features = np.zeros(mdp.n_states + 1)
    features[0] = 1.0
    features[state + 1] = 1.0
    return features


@dataclass
class MdpEnv:
    mdp: TabularMdp
    rng: np.random.Generator
    start_state: int | None = None
    state: int = field(default=-1, init=False)
    t: int = field(default=0, init=False)

    @property
    def n_actions(self) -> int:
        return self.mdp.n_actions

    @property
    def feature_dim(self) -> int:
        return self.mdp.n_states + 1

    @property
    def horizon(self) -> int:
        return self.mdp.horizon

    def reset(self) -> np.ndarray:
        self.state = mdp_reset(self.mdp, self.rng) if self.start_state is None else self.start_state
        self.t = 0
        return mdp_features(self.mdp, self.state)

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        self.state, reward = mdp_step(self.mdp, self.state, action)
        self.t += 1
        return mdp_features(self.mdp, self.state), reward, self.t >= self.mdp.horizon


def value_iteration(mdp: TabularMdp, gamma: float = 1.0, horizon: int | None = None):
    """Finite-horizon dynamic programming.

    Returns ``(values, policy)`` where ``values[s]`` is the optimal return from
    start state ``s`` and ``policy[k, s]`` is the optimal action with ``k`` steps
    already taken.
    """
    horizon = mdp.horizon if horizon is None else horizon
    values = np.zeros(mdp.n_states)
    policy = np.zeros((horizon, mdp.n_states), dtype=int)
    for k in reversed(range(horizon)):
        q = mdp.reward + gamma * values[mdp.transition]
        policy[k] = np.argmax(q, axis=1)
        values = q.max(axis=1)
    return values, policy


def stationary_optimal_policy(mdp: TabularMdp, gamma: float = 0.99, tol: float = 1e-10) -> np.ndarray:
    """Greedy policy of discounted infinite-horizon value iteration (what Q-learning targets)."""
    values = np.zeros(mdp.n_states)
    while True:
        q = mdp.reward + gamma * values[mdp.transition]
        new = q.max(axis=1)
        if np.max(np.abs(new - values)) < tol:
            return np.argmax(q, axis=1)
        values = new


def policy_return(mdp: TabularMdp, policy) -> float:
    """Horizon return of a stationary deterministic policy, averaged over the start distribution."""
    total = 0.0
    for s0 in np.flatnonzero(mdp.start):
        state, ret = int(s0), 0.0
        for _ in range(mdp.horizon):
            state, r = mdp_step(mdp, state, int(policy[state]))
            ret += r
        total += mdp.start[s0] * ret
    return float(total)


def optimal_expected_return(mdp: TabularMdp, stationary: bool = True) -> float:
    """Best achievable return from the start distribution.

    By default the best stationary policy.  With ``stationary=False`` the
    time-dependent finite-horizon optimum, which can exploit the last step
    (109 rather than 100 on MDP2 and MDP3).
    """
    if stationary:
        return policy_return(mdp, stationary_optimal_policy(mdp))
    values, _ = value_iteration(mdp)
    return float(mdp.start @ values)


# --------------------------------------------------------------------------- factories

ENVIRONMENTS = ("jitai", "mdp1", "mdp2", "mdp3")


def make_env_factory(name: str, jitai: JitaiConfig | None = None, feature_mode: str = "prob",
                     mdp: TabularMdp | None = None) -> EnvFactory:
    """Build ``factory(seed_sequence) -> env`` producing fresh, independently seeded envs."""
    if name == "jitai":
        cfg = jitai or JitaiConfig()
        if feature_mode not in FEATURE_MODES:
            raise ConfigError(f"unknown feature mode {feature_mode!r}")
        return lambda seed: JitaiEnv(cfg, np.random.default_rng(seed), feature_mode)
    if name in BUILTIN_MDPS or mdp is not None:
        table = mdp if mdp is not None else BUILTIN_MDPS[name]
        return lambda seed: MdpEnv(table, np.random.default_rng(seed))
    raise ConfigError(f"unknown environment {name!r}; expected one of {ENVIRONMENTS}")


def with_start(env: MdpEnv, start_state: int) -> MdpEnv:
    return replace(env, start_state=start_state)
