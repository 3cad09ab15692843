"""Reference learners: tabular Q-learning and standard Thompson sampling (xTS with beta = 0)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .driver import STAGE_EPISODE, STAGE_MRT, apply_prior_strategy, episode_seeds
from .envs import MdpEnv, TabularMdp, mdp_reset, mdp_step, policy_return
from .policy import EpisodeTrace, XtsParams, run_episode, run_random_episode
from .reward_model import BROAD_PRIOR_VAR, BROAD_SIGMA_Y2, BeliefSet, broad_prior, fit_belief_set


@dataclass(frozen=True)
class QLearningHyper:
    lr: float = 0.8
    gamma: float = 0.99
    eps_start: float = 1.0
    eps_end: float = 0.01
    eps_decay: float = 0.1

    def epsilon(self, episode: int) -> float:
        return max(self.eps_end, self.eps_start * (1.0 - self.eps_decay) ** episode)


@dataclass
class QLearningResult:
    returns: list[float]
    greedy_returns: list[float]
    epsilons: list[float]
    q: np.ndarray

    @property
    def policy(self) -> np.ndarray:
        return np.argmax(self.q, axis=1)

    @property
    def final_greedy_return(self) -> float:
        return self.greedy_returns[-1]


def greedy_expected_return(mdp: TabularMdp, q: np.ndarray) -> float:
    """Return of the greedy policy, averaged over the start distribution (deterministic tables)."""
    return policy_return(mdp, np.argmax(q, axis=1))


def q_learning_run(mdp: TabularMdp, hyper: QLearningHyper, n_episodes: int,
                   rng: np.random.Generator) -> QLearningResult:
    """One-step Q-learning with epsilon-greedy exploration decayed once per episode."""
    q = np.zeros((mdp.n_states, mdp.n_actions))
    returns, greedy, epsilons = [], [], []
    for k in range(n_episodes):
        eps = hyper.epsilon(k)
        state = mdp_reset(mdp, rng)
        ret = 0.0
        for _ in range(mdp.horizon):
            if rng.random() < eps:
                action = int(rng.integers(mdp.n_actions))
            else:
                action = int(np.argmax(q[state]))
            nxt, r = mdp_step(mdp, state, action)
            target = r + hyper.gamma * q[nxt].max()
            q[state, action] += hyper.lr * (target - q[state, action])
            ret += r
            state = nxt
        returns.append(ret)
        epsilons.append(eps)
        greedy.append(greedy_expected_return(mdp, q))
    return QLearningResult(returns, greedy, epsilons, q)


# --------------------------------------------------------------------------- Thompson sampling


@dataclass
class TsRun:
    mrt_returns: list[float]
    round_returns: list[list[float]]
    final_beliefs: BeliefSet
    traces: list[EpisodeTrace] = field(repr=False, default_factory=list)

    @property
    def returns(self) -> list[float]:
        return self.mrt_returns + [r for rnd in self.round_returns for r in rnd]


def run_ts(env_factory, batch_sizes: Sequence[int], base_seed: int, rep: int = 0,
           strategy: str = "fixed", prior: BeliefSet | None = None, mrt_episodes: int = 0) -> TsRun:
    """Standard TS over rounds of parallel episodes.

    The prior is ``prior`` (broad by default), refitted on ``mrt_episodes``
    random-action episodes when requested.  ``fixed`` keeps that prior for every
    round; ``update`` refits it from all completed episodes after each round,
    which with single-episode rounds is posterior chaining.  Episode seeds are
    those ``run_bots`` uses for the same schedule, so TS here is BOTS with every
    bias forced to zero.
    """
    if prior is None:
        probe = env_factory(np.random.SeedSequence(0))
        prior = broad_prior(probe.n_actions, probe.feature_dim, BROAD_PRIOR_VAR, BROAD_SIGMA_Y2)
    beta = np.zeros(len(prior))

    mrt = []
    for b in range(mrt_episodes):
        env_seed, policy_seed = episode_seeds(base_seed, rep, STAGE_MRT, 0, b)
        mrt.append(run_random_episode(env_factory(env_seed), np.random.default_rng(policy_seed)))
    mrt_beliefs = fit_belief_set(prior, mrt)
    beliefs = mrt_beliefs
    traces = list(mrt)
    rounds = []
    for i, size in enumerate(batch_sizes):
        batch = []
        for b in range(size):
            env_seed, policy_seed = episode_seeds(base_seed, rep, STAGE_EPISODE, i, b)
            batch.append(run_episode(env_factory(env_seed), XtsParams(beta, beliefs),
                                     np.random.default_rng(policy_seed)))
        traces.extend(batch)
        rounds.append([t.total_return for t in batch])
        beliefs = apply_prior_strategy(strategy, prior, mrt_beliefs, traces)
    return TsRun([t.total_return for t in mrt], rounds, beliefs, traces)


def ts_fixed_baseline(env_factory, n_episodes: int, rng: np.random.Generator,
                      prior: BeliefSet | None = None) -> list[float]:
    """TS with the same fixed prior for every episode, run one episode at a time."""
    seed = int(rng.integers(2**63))
    return run_ts(env_factory, [1] * n_episodes, seed, strategy="fixed", prior=prior).returns


def ts_update_baseline(env_factory, n_episodes: int, rng: np.random.Generator,
                       prior: BeliefSet | None = None) -> list[float]:
    """TS where each episode's final posterior is the next episode's prior."""
    seed = int(rng.integers(2**63))
    return run_ts(env_factory, [1] * n_episodes, seed, strategy="update", prior=prior).returns


def xts_expected_return(mdp: TabularMdp, params: XtsParams, n_eval: int, seed: int = 0) -> float:
    """Monte-Carlo return of an xTS policy, weighting each start state by its probability."""
    total = 0.0
    ss = np.random.SeedSequence(seed)
    for s0 in np.flatnonzero(mdp.start):
        rets = []
        for child in ss.spawn(n_eval):
            env = MdpEnv(mdp, np.random.default_rng(0), start_state=int(s0))
            rets.append(run_episode(env, params, np.random.default_rng(child)).total_return)
        total += mdp.start[s0] * float(np.mean(rets))
    return float(total)
