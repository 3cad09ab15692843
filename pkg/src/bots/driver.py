"""The outer BOTS loop: MRT prior fitting, a Sobol round, then batch BO rounds.

Every episode gets its own seed derived from ``(base seed, repetition, stage,
round, batch index)``, so a run is a pure function of its configuration and
base seed regardless of the order in which episodes execute.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import gp
from .acquisition import (
    CandidateBatch,
    TrustRegionState,
    optimize_qei,
    sobol_unit,
    turbo_box_unit,
    turbo_update,
)
from .errors import ConfigError, RunError
from .policy import EpisodeTrace, XtsParams, run_episode, run_random_episode
from .reward_model import (
    BROAD_PRIOR_VAR,
    BROAD_SIGMA_Y2,
    BeliefSet,
    belief_set_to_list,
    broad_prior,
    fit_belief_set,
    with_noise_levels,
)

SEARCH_SPACES = ("beta", "beta+shared_var", "beta+action_var")
BO_MODES = ("global", "turbo")
PRIOR_STRATEGIES = ("fixed", "update")

# Seed stream tags.
STAGE_MRT, STAGE_EPISODE, STAGE_SOBOL, STAGE_ACQ, STAGE_GP = range(5)


def episode_seeds(base_seed: int, rep: int, stage: int, round_index: int, b: int):
    """Independent (environment, policy) seed sequences for one episode."""
    key = (rep, stage, round_index, b)
    return (np.random.SeedSequence(base_seed, spawn_key=key + (0,)),
            np.random.SeedSequence(base_seed, spawn_key=key + (1,)))


def stream_seed(base_seed: int, rep: int, stage: int, round_index: int) -> int:
    ss = np.random.SeedSequence(base_seed, spawn_key=(rep, stage, round_index))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


# --------------------------------------------------------------------------- budget


@dataclass(frozen=True)
class BudgetSchedule:
    mrt_episodes: int
    batch_sizes: tuple[int, ...]

    @property
    def total(self) -> int:
        return self.mrt_episodes + sum(self.batch_sizes)

    @property
    def rounds(self) -> int:
        return len(self.batch_sizes) - 1


def make_schedule(total: int, mrt: int, sobol: int, rounds: int) -> BudgetSchedule:
    """Sobol round of ``sobol`` episodes followed by ``rounds`` equal BO batches."""
    if min(total, mrt, sobol, rounds) < 0 or sobol < 1 or rounds < 1:
        raise ConfigError("need sobol >= 1, rounds >= 1 and nonnegative counts")
    remaining = total - mrt - sobol
    if remaining < rounds:
        raise ConfigError(f"budget {total} leaves {remaining} episodes for {rounds} rounds")
    if remaining % rounds:
        raise ConfigError(f"{remaining} remaining episodes do not split evenly into {rounds} rounds")
    return BudgetSchedule(mrt, (sobol,) + (remaining // rounds,) * rounds)


# --------------------------------------------------------------------------- search space


def search_dimension(space: str, n_actions: int) -> int:
    n_bias = n_actions - 1
    if space == "beta":
        return n_bias
    if space == "beta+shared_var":
        return n_bias + 1
    if space == "beta+action_var":
        return n_bias + n_actions
    raise ConfigError(f"unknown search space {space!r}; expected one of {SEARCH_SPACES}")


def search_bounds(space: str, n_actions: int, beta_bounds=(-100.0, 0.0),
                  var_bounds=(0.1, 50.0**2)) -> gp.ParamBounds:
    dim = search_dimension(space, n_actions)
    n_bias = n_actions - 1
    lower = np.full(dim, float(var_bounds[0]))
    upper = np.full(dim, float(var_bounds[1]))
    lower[:n_bias], upper[:n_bias] = beta_bounds
    return gp.ParamBounds(lower, upper)


def decode(space: str, v: Sequence[float], n_actions: int) -> tuple[np.ndarray, np.ndarray | None]:
    """Candidate vector -> (beta with beta_0 = 0, per-action reward variances or None)."""
    v = np.asarray(v, dtype=float)
    if v.size != search_dimension(space, n_actions):
        raise ConfigError(f"candidate of length {v.size} does not fit search space {space!r}")
    n_bias = n_actions - 1
    beta = np.concatenate([[0.0], v[:n_bias]])
    if space == "beta":
        return beta, None
    if space == "beta+shared_var":
        return beta, np.full(n_actions, v[n_bias])
    return beta, v[n_bias:].copy()


# --------------------------------------------------------------------------- config / record


@dataclass(frozen=True)
class BotsConfig:
    search_space: str = "beta"
    bo_mode: str = "turbo"
    prior_strategy: str = "fixed"
    total: int = 140
    mrt_episodes: int = 10
    sobol_episodes: int = 10
    rounds: int = 6
    seed: int = 0
    prior_var: float = BROAD_PRIOR_VAR
    sigma_y2: float = BROAD_SIGMA_Y2
    beta_bounds: tuple[float, float] = (-100.0, 0.0)
    var_bounds: tuple[float, float] = (0.1, 50.0**2)
    n_mc: int = 512
    n_restarts: int = 8
    n_raw: int = 256
    gp_restarts: int = 5
    l_init: float = 0.8
    l_min: float = 2.0**-7
    l_max: float = 1.6
    succ_tol: int = 3
    fail_tol: int | None = None

    def __post_init__(self):
        if self.search_space not in SEARCH_SPACES:
            raise ConfigError(f"unknown search space {self.search_space!r}")
        if self.bo_mode not in BO_MODES:
            raise ConfigError(f"unknown BO mode {self.bo_mode!r}")
        if self.prior_strategy not in PRIOR_STRATEGIES:
            raise ConfigError(f"unknown prior strategy {self.prior_strategy!r}")
        self.schedule()

    def schedule(self) -> BudgetSchedule:
        return make_schedule(self.total, self.mrt_episodes, self.sobol_episodes, self.rounds)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class RoundRecord:
    round: int
    batch_size: int
    candidates: list[list[float]]
    returns: list[float]
    lengths: list[int]
    gp: dict | None = None
    trust_region: dict | None = None
    qei: float | None = None
    raw_qei: float | None = None
    n_restarts: int = 0


@dataclass
class RunRecord:
    rep: int
    config_hash: str
    base_seed: int
    mrt_returns: list[float]
    rounds: list[RoundRecord] = field(default_factory=list)
    recommended: list[float] | None = None
    final_beliefs: list[dict] | None = None
    final_return: float | None = None  # evaluated return of the final policy, when requested

    @property
    def episode_returns(self) -> list[float]:
        return self.mrt_returns + [r for rnd in self.rounds for r in rnd.returns]

    @property
    def n_episodes(self) -> int:
        return len(self.episode_returns)

    @property
    def average_return(self) -> float:
        return float(np.mean(self.episode_returns))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["average_return"] = self.average_return
        out["n_episodes"] = self.n_episodes
        return out


# --------------------------------------------------------------------------- loop


def apply_prior_strategy(strategy: str, base_beliefs: BeliefSet, mrt_beliefs: BeliefSet,
                         traces: Sequence[EpisodeTrace]) -> BeliefSet:
    """Priors for the next round: the MRT fit (fixed) or a pooled refit from the base prior (update)."""
    if strategy == "fixed":
        return mrt_beliefs
    if strategy == "update":
        return fit_belief_set(base_beliefs, traces)
    raise ConfigError(f"unknown prior strategy {strategy!r}")


def _env_shape(env_factory) -> tuple[int, int]:
    probe = env_factory(np.random.SeedSequence(0))
    return probe.n_actions, probe.feature_dim


def run_candidate(env_factory, space: str, candidate, beliefs: BeliefSet, seeds) -> EpisodeTrace:
    beta, sigma_y2 = decode(space, candidate, len(beliefs))
    if sigma_y2 is not None:
        beliefs = with_noise_levels(beliefs, sigma_y2)
    env_seed, policy_seed = seeds
    return run_episode(env_factory(env_seed), XtsParams(beta, beliefs), np.random.default_rng(policy_seed))


Proposer = Callable[[int, np.ndarray], np.ndarray]


def run_bots(cfg: BotsConfig, env_factory, rep: int = 0, propose: Proposer | None = None) -> RunRecord:
    """One repetition of BOTS.  ``propose(round, candidates)`` may override candidates (testing hook)."""
    schedule = cfg.schedule()
    n_actions, dim = _env_shape(env_factory)
    base = broad_prior(n_actions, dim, cfg.prior_var, cfg.sigma_y2)
    bounds = search_bounds(cfg.search_space, n_actions, cfg.beta_bounds, cfg.var_bounds)
    D = bounds.dim

    mrt_traces = []
    for b in range(schedule.mrt_episodes):
        env_seed, policy_seed = episode_seeds(cfg.seed, rep, STAGE_MRT, 0, b)
        mrt_traces.append(run_random_episode(env_factory(env_seed), np.random.default_rng(policy_seed)))
    mrt_beliefs = fit_belief_set(base, mrt_traces)
    beliefs = mrt_beliefs
    traces = list(mrt_traces)

    record = RunRecord(rep, cfg.digest(), cfg.seed, [t.total_return for t in mrt_traces])
    X = np.empty((0, D))
    Y = np.empty(0)
    tr: TrustRegionState | None = None

    for i, batch_size in enumerate(schedule.batch_sizes):
        batch: CandidateBatch | None = None
        model = None
        try:
            if i == 0:
                unit = sobol_unit(D, batch_size, stream_seed(cfg.seed, rep, STAGE_SOBOL, 0))
                candidates = bounds.from_unit(unit)
            else:
                model = gp.fit(X, Y, bounds, n_restarts=cfg.gp_restarts,
                               seed=stream_seed(cfg.seed, rep, STAGE_GP, i))
                box = gp.ParamBounds.unit(D) if cfg.bo_mode == "global" else turbo_box_unit(tr, model.lengthscale)
                batch = optimize_qei(model, box, batch_size, float(np.max(model.y)),
                                     np.random.default_rng(stream_seed(cfg.seed, rep, STAGE_ACQ, i)),
                                     n_restarts=cfg.n_restarts, n_raw=cfg.n_raw, n_mc=cfg.n_mc)
                candidates = batch.points
        except Exception as exc:
            raise RunError(i, None, exc) from exc
        if propose is not None:
            candidates = np.asarray(propose(i, candidates), dtype=float).reshape(batch_size, D)

        round_traces = []
        for b, candidate in enumerate(candidates):
            try:
                trace = run_candidate(env_factory, cfg.search_space, candidate, beliefs,
                                      episode_seeds(cfg.seed, rep, STAGE_EPISODE, i, b))
            except Exception as exc:
                raise RunError(i, b, exc) from exc
            round_traces.append(trace)
        returns = np.array([t.total_return for t in round_traces])

        incumbent = float(np.max(Y)) if Y.size else -np.inf
        X = np.vstack([X, candidates])
        Y = np.concatenate([Y, returns])
        best_unit = bounds.to_unit(X[int(np.argmax(Y))])
        if cfg.bo_mode == "turbo":
            if tr is None:
                tr = TrustRegionState.initial(
                    best_unit, D, length=cfg.l_init, l_init=cfg.l_init, l_min=cfg.l_min,
                    l_max=cfg.l_max, succ_tol=cfg.succ_tol,
                    **({"fail_tol": cfg.fail_tol} if cfg.fail_tol else {}))
            else:
                tr = turbo_update(tr, float(returns.max()), incumbent, center=best_unit)

        traces.extend(round_traces)
        beliefs = apply_prior_strategy(cfg.prior_strategy, base, mrt_beliefs, traces)

        record.rounds.append(RoundRecord(
            round=i,
            batch_size=batch_size,
            candidates=candidates.tolist(),
            returns=returns.tolist(),
            lengths=[t.length for t in round_traces],
            gp=model.hyperparameters() if model is not None else None,
            trust_region=tr.to_dict() if tr is not None else None,
            qei=batch.qei if batch is not None else None,
            raw_qei=batch.raw_qei if batch is not None else None,
            n_restarts=batch.n_restarts if batch is not None else 0,
        ))

    record.recommended = recommend(X, Y, bounds, cfg, rep).tolist()
    record.final_beliefs = belief_set_to_list(beliefs)
    return record


def recommend(X: np.ndarray, Y: np.ndarray, bounds: gp.ParamBounds, cfg: BotsConfig, rep: int) -> np.ndarray:
    """Evaluated candidate with the highest GP posterior mean (best observed if the GP cannot be fit)."""
    try:
        model = gp.fit(X, Y, bounds, n_restarts=cfg.gp_restarts,
                       seed=stream_seed(cfg.seed, rep, STAGE_GP, len(cfg.schedule().batch_sizes)))
    except Exception:
        return X[int(np.argmax(Y))]
    mean, _ = model.predict(bounds.to_unit(X))
    return X[int(np.argmax(mean))]
