"""Conjugate Bayesian linear-Gaussian reward model, one belief per action.

Each action keeps a Gaussian belief over the weights of a linear reward model
``r ~ N(theta^T s, sigma_y2)``.  Beliefs are immutable values; every operation
returns a new belief.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import linalg

from .errors import ConditioningError, InvalidInput

# Prior used whenever nothing better is known: mu = 0, Sigma = 100 I, sigma_y = 25.
BROAD_PRIOR_VAR = 100.0
BROAD_SIGMA_Y2 = 25.0**2


@dataclass(frozen=True, eq=False)
class GaussianLinearBelief:
    """Posterior N(mu, sigma) over one action's reward weights."""

    mu: np.ndarray
    sigma: np.ndarray
    sigma_y2: float
    _chol: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float).reshape(-1)
        sigma = np.asarray(self.sigma, dtype=float)
        if sigma.shape != (mu.size, mu.size):
            raise InvalidInput(f"sigma shape {sigma.shape} does not match mu of length {mu.size}")
        if not self.sigma_y2 > 0:
            raise InvalidInput(f"sigma_y2 must be positive, got {self.sigma_y2}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "sigma_y2", float(self.sigma_y2))

    @property
    def dim(self) -> int:
        return self.mu.size

    @property
    def chol(self) -> np.ndarray:
        """Lower Cholesky factor of ``sigma`` (computed once, then cached)."""
        if self._chol is None:
            object.__setattr__(self, "_chol", _cholesky(self.sigma))
        return self._chol

    def with_noise(self, sigma_y2: float) -> "GaussianLinearBelief":
        return GaussianLinearBelief(self.mu, self.sigma, sigma_y2, _chol=self._chol)

    def to_dict(self) -> dict:
        return {
            "mu": self.mu.tolist(),
            "sigma": self.sigma.reshape(-1).tolist(),
            "sigma_y2": self.sigma_y2,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GaussianLinearBelief":
        mu = np.asarray(data["mu"], dtype=float)
        sigma = np.asarray(data["sigma"], dtype=float).reshape(mu.size, mu.size)
        return cls(mu, sigma, data["sigma_y2"])


# One belief per action, indexed by action.
BeliefSet = tuple[GaussianLinearBelief, ...]


def _cholesky(a: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise ConditioningError("covariance is not positive definite; degenerate prior?") from exc


def _spd_inverse(a: np.ndarray) -> np.ndarray:
    """Inverse of an SPD matrix through Cholesky solves."""
    try:
        factor = linalg.cho_factor(a, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise ConditioningError("matrix is not positive definite") from exc
    inv = linalg.cho_solve(factor, np.eye(a.shape[0]), check_finite=False)
    return 0.5 * (inv + inv.T)


def _check_obs(belief: GaussianLinearBelief, s: np.ndarray, r: float) -> np.ndarray:
    s = np.asarray(s, dtype=float).reshape(-1)
    if s.size != belief.dim:
        raise InvalidInput(f"feature length {s.size} != belief dimension {belief.dim}")
    if not (np.all(np.isfinite(s)) and np.isfinite(r)):
        raise InvalidInput("features and reward must be finite")
    return s


def posterior_update(belief: GaussianLinearBelief, s, r: float, taken: bool) -> GaussianLinearBelief:
    """One-observation conjugate update, applied only when the action was taken.

    Sigma' = sigma_y2 (s s^T + sigma_y2 Sigma^-1)^-1
    mu'    = Sigma' (r s / sigma_y2 + Sigma^-1 mu)
    """
    s = _check_obs(belief, s, r)
    if not taken:
        return belief
    precision = _spd_inverse(belief.sigma)
    s2 = belief.sigma_y2
    new_sigma = s2 * _spd_inverse(np.outer(s, s) + s2 * precision)
    new_mu = new_sigma @ (r * s / s2 + precision @ belief.mu)
    return GaussianLinearBelief(new_mu, 0.5 * (new_sigma + new_sigma.T), s2)


def batch_fit(prior: GaussianLinearBelief, observations: Iterable[tuple[Sequence[float], float]]) -> GaussianLinearBelief:
    """Joint conjugate posterior of ``prior`` given all ``(s, r)`` pairs."""
    obs = list(observations)
    if not obs:
        return prior
    S = np.array([np.asarray(s, dtype=float).reshape(-1) for s, _ in obs])
    r = np.array([float(v) for _, v in obs])
    if S.shape[1] != prior.dim:
        raise InvalidInput(f"feature length {S.shape[1]} != belief dimension {prior.dim}")
    if not (np.all(np.isfinite(S)) and np.all(np.isfinite(r))):
        raise InvalidInput("features and rewards must be finite")
    s2 = prior.sigma_y2
    prior_prec = _spd_inverse(prior.sigma)
    post_prec = prior_prec + S.T @ S / s2
    new_sigma = _spd_inverse(post_prec)
    new_mu = new_sigma @ (prior_prec @ prior.mu + S.T @ r / s2)
    return GaussianLinearBelief(new_mu, new_sigma, s2)


def sample_weights(belief: GaussianLinearBelief, rng: np.random.Generator) -> np.ndarray:
    """Draw theta ~ N(mu, Sigma) as mu + L z."""
    z = rng.standard_normal(belief.dim)
    return belief.mu + belief.chol @ z


def broad_prior(n_actions: int, dim: int, prior_var: float = BROAD_PRIOR_VAR,
                sigma_y2: float = BROAD_SIGMA_Y2) -> BeliefSet:
    belief = GaussianLinearBelief(np.zeros(dim), prior_var * np.eye(dim), sigma_y2)
    return tuple(belief for _ in range(n_actions))


def fit_belief_set(prior: BeliefSet, traces) -> BeliefSet:
    """Per-action ``batch_fit`` over the pooled steps of ``traces``."""
    per_action: list[list] = [[] for _ in prior]
    for trace in traces:
        for features, action, reward in trace.steps:
            per_action[action].append((features, reward))
    return tuple(batch_fit(p, obs) for p, obs in zip(prior, per_action))


def with_noise_levels(beliefs: BeliefSet, sigma_y2) -> BeliefSet:
    """Replace each action's reward variance (scalar or one value per action)."""
    levels = np.broadcast_to(np.asarray(sigma_y2, dtype=float), (len(beliefs),))
    return tuple(b.with_noise(float(v)) for b, v in zip(beliefs, levels))


def belief_set_to_list(beliefs: BeliefSet) -> list[dict]:
    return [b.to_dict() for b in beliefs]


def belief_set_from_list(data: list[dict]) -> BeliefSet:
    return tuple(GaussianLinearBelief.from_dict(d) for d in data)
