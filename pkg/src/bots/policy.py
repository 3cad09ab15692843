"""Extended Thompson sampling (xTS).

Actions are chosen by the utility ``u_a = theta_a^T s + beta_a`` where
``theta_a`` is a posterior draw of action ``a``'s reward weights and ``beta_a``
is a fixed per-action bias.  With ``beta = 0`` this is standard linear TS.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import IO, Callable

import numpy as np

from .errors import EpisodeError, InvalidInput
from .reward_model import BeliefSet, fit_belief_set, posterior_update, sample_weights


@dataclass(frozen=True, eq=False)
class XtsParams:
    beta: np.ndarray
    beliefs: BeliefSet
    update_within_episode: bool = True

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float).reshape(-1)
        if beta.size != len(self.beliefs):
            raise InvalidInput(f"{beta.size} biases for {len(self.beliefs)} actions")
        if beta[0] != 0.0:
            raise InvalidInput("the bias of action 0 is pinned to 0")
        if len({b.dim for b in self.beliefs}) != 1:
            raise InvalidInput("all beliefs must share one feature dimension")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "beliefs", tuple(self.beliefs))

    @property
    def n_actions(self) -> int:
        return len(self.beliefs)


@dataclass
class EpisodeTrace:
    steps: list[tuple[np.ndarray, int, float]] = field(default_factory=list)
    terminated_early: bool = False

    @property
    def total_return(self) -> float:
        return float(sum(r for _, _, r in self.steps))

    @property
    def length(self) -> int:
        return len(self.steps)

    @property
    def actions(self) -> list[int]:
        return [a for _, a, _ in self.steps]

    def write_jsonl(self, fh: IO[str]) -> None:
        for t, (features, action, reward) in enumerate(self.steps):
            fh.write(json.dumps({"t": t, "features": list(map(float, features)),
                                 "action": int(action), "reward": float(reward)}) + "\n")

    @classmethod
    def read_jsonl(cls, fh: IO[str], terminated_early: bool = False) -> "EpisodeTrace":
        steps = []
        for line in fh:
            if line.strip():
                row = json.loads(line)
                steps.append((np.asarray(row["features"]), row["action"], row["reward"]))
        return cls(steps, terminated_early)


def select_action(params: XtsParams, beliefs_now: BeliefSet, s: np.ndarray,
                  rng: np.random.Generator) -> int:
    """Sample weights for every action (in index order) and return the best utility.

    Ties go to the lowest action index.
    """
    utilities = np.empty(len(beliefs_now))
    for a, belief in enumerate(beliefs_now):
        utilities[a] = sample_weights(belief, rng) @ s + params.beta[a]
    return int(np.argmax(utilities))


def run_episode(env, params: XtsParams, rng: np.random.Generator) -> EpisodeTrace:
    """Run one xTS episode; ``params.beliefs`` is left untouched."""
    beliefs = list(params.beliefs)
    trace = EpisodeTrace()
    if env.horizon <= 0:
        return trace
    features = env.reset()
    for t in range(env.horizon):
        action = select_action(params, beliefs, features, rng)
        try:
            next_features, reward, done = env.step(action)
        except Exception as exc:
            raise EpisodeError(t, exc) from exc
        trace.steps.append((features, action, reward))
        if params.update_within_episode:
            beliefs[action] = posterior_update(beliefs[action], features, reward, True)
        if done:
            trace.terminated_early = t + 1 < env.horizon
            break
        features = next_features
    return trace


def run_random_episode(env, rng: np.random.Generator) -> EpisodeTrace:
    """Episode with actions drawn uniformly over all actions (one MRT participant)."""
    trace = EpisodeTrace()
    if env.horizon <= 0:
        return trace
    features = env.reset()
    for t in range(env.horizon):
        action = int(rng.integers(env.n_actions))
        try:
            next_features, reward, done = env.step(action)
        except Exception as exc:
            raise EpisodeError(t, exc) from exc
        trace.steps.append((features, action, reward))
        if done:
            trace.terminated_early = t + 1 < env.horizon
            break
        features = next_features
    return trace


def mrt_traces(env_factory: Callable, n_episodes: int, rng: np.random.Generator) -> list[EpisodeTrace]:
    seeds = np.random.SeedSequence(rng.integers(2**63)).spawn(n_episodes)
    traces = []
    for seed in seeds:
        env_seed, policy_seed = seed.spawn(2)
        traces.append(run_random_episode(env_factory(env_seed), np.random.default_rng(policy_seed)))
    return traces


def run_mrt(env_factory: Callable, n_episodes: int, base_prior: BeliefSet,
            rng: np.random.Generator) -> BeliefSet:
    """Micro-randomized trial: random-action episodes, then a per-action batch fit."""
    if n_episodes < 1:
        raise InvalidInput("an MRT needs at least one episode")
    return fit_belief_set(base_prior, mrt_traces(env_factory, n_episodes, rng))
