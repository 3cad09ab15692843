"""Exact Gaussian-process regression with an ARD Matern-5/2 kernel.

Inputs are mapped to the unit cube through ``ParamBounds`` and targets are
standardized before fitting.  Hyperparameters (per-dimension lengthscales,
outputscale, noise standard deviation) are fitted by MAP under Gamma
hyperpriors on the lengthscales and the outputscale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize
from scipy.special import gammaln

from .errors import ConditioningError, InsufficientData, InvalidInput

SQRT5 = np.sqrt(5.0)

# Gamma(shape, rate) hyperpriors.
LENGTHSCALE_PRIOR = (3.0, 6.0)
OUTPUTSCALE_PRIOR = (2.0, 0.15)
NOISE_SD_INIT = 0.7

LENGTHSCALE_RANGE = (1e-3, 1e2)
OUTPUTSCALE_RANGE = (1e-4, 1e3)
NOISE_SD_RANGE = (1e-2, 1e1)  # noise variance >= 1e-4

JITTER_LADDER = (0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)


@dataclass(frozen=True, eq=False)
class ParamBounds:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=float).reshape(-1)
        upper = np.asarray(self.upper, dtype=float).reshape(-1)
        if lower.shape != upper.shape:
            raise InvalidInput("lower and upper bounds differ in length")
        if not np.all(lower <= upper):
            raise InvalidInput("lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def to_unit(self, X) -> np.ndarray:
        width = np.where(self.width > 0, self.width, 1.0)
        return (np.asarray(X, dtype=float) - self.lower) / width

    def from_unit(self, U) -> np.ndarray:
        return self.lower + np.asarray(U, dtype=float) * self.width

    def clip(self, X) -> np.ndarray:
        return np.clip(X, self.lower, self.upper)

    @classmethod
    def unit(cls, dim: int) -> "ParamBounds":
        return cls(np.zeros(dim), np.ones(dim))

    def to_dict(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}


# --------------------------------------------------------------------------- kernel


def _matern_from_dist(r: np.ndarray, outputscale: float) -> np.ndarray:
    return outputscale * (1.0 + SQRT5 * r + 5.0 / 3.0 * r**2) * np.exp(-SQRT5 * r)


def matern52(x1, x2, lengthscale, outputscale: float) -> float:
    """k(x1, x2) = outputscale (1 + sqrt5 r + 5 r^2 / 3) exp(-sqrt5 r), r the scaled distance."""
    diff = (np.asarray(x1, dtype=float) - np.asarray(x2, dtype=float)) / lengthscale
    return float(_matern_from_dist(np.sqrt(np.sum(diff**2)), outputscale))


def _scaled_sq_dist(X1: np.ndarray, X2: np.ndarray, lengthscale: np.ndarray) -> np.ndarray:
    A = X1 / lengthscale
    B = X2 / lengthscale
    d2 = np.sum(A**2, 1)[:, None] + np.sum(B**2, 1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d2, 0.0)


def matern52_matrix(X1, X2, lengthscale, outputscale: float) -> np.ndarray:
    X1 = np.atleast_2d(np.asarray(X1, dtype=float))
    X2 = np.atleast_2d(np.asarray(X2, dtype=float))
    lengthscale = np.broadcast_to(np.asarray(lengthscale, dtype=float), (X1.shape[1],))
    return _matern_from_dist(np.sqrt(_scaled_sq_dist(X1, X2, lengthscale)), outputscale)


def _stable_cholesky(K: np.ndarray) -> tuple[np.ndarray, float]:
    scale = max(float(np.mean(np.diag(K))), 1e-12)
    for jitter in JITTER_LADDER:
        try:
            return np.linalg.cholesky(K + jitter * scale * np.eye(K.shape[0])), jitter * scale
        except np.linalg.LinAlgError:
            continue
    raise ConditioningError("kernel matrix not positive definite after jitter escalation")


# --------------------------------------------------------------------------- evidence


def _unpack(log_params: np.ndarray, dim: int):
    p = np.exp(log_params)
    return p[:dim], p[dim], p[dim + 1]


def lml_and_grad(log_params: np.ndarray, X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Log marginal likelihood and its gradient w.r.t. log(lengthscales, outputscale, noise_sd)."""
    n, dim = X.shape
    lengthscale, outputscale, noise_sd = _unpack(log_params, dim)
    diff2 = ((X[:, None, :] - X[None, :, :]) / lengthscale) ** 2  # (n, n, D)
    r = np.sqrt(diff2.sum(-1))
    expo = np.exp(-SQRT5 * r)
    Kf = outputscale * (1.0 + SQRT5 * r + 5.0 / 3.0 * r**2) * expo
    K = Kf + noise_sd**2 * np.eye(n)
    L, _ = _stable_cholesky(K)
    alpha = linalg.cho_solve((L, True), y, check_finite=False)
    value = -0.5 * y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * n * np.log(2 * np.pi)

    W = np.outer(alpha, alpha) - linalg.cho_solve((L, True), np.eye(n), check_finite=False)
    grad = np.empty(dim + 2)
    dk_common = outputscale * 5.0 / 3.0 * (1.0 + SQRT5 * r) * expo
    for i in range(dim):
        grad[i] = 0.5 * np.sum(W * dk_common * diff2[:, :, i])
    grad[dim] = 0.5 * np.sum(W * Kf)
    grad[dim + 1] = 0.5 * np.trace(W) * 2.0 * noise_sd**2
    return float(value), grad


def _log_gamma_density(x, shape: float, rate: float):
    return shape * np.log(rate) - gammaln(shape) + (shape - 1.0) * np.log(x) - rate * x


def log_prior_and_grad(log_params: np.ndarray, dim: int) -> tuple[float, np.ndarray]:
    """Gamma hyperprior log-density (on the natural scale) and its gradient in log space."""
    lengthscale, outputscale, _ = _unpack(log_params, dim)
    a_l, b_l = LENGTHSCALE_PRIOR
    a_o, b_o = OUTPUTSCALE_PRIOR
    value = np.sum(_log_gamma_density(lengthscale, a_l, b_l)) + _log_gamma_density(outputscale, a_o, b_o)
    grad = np.zeros(dim + 2)
    grad[:dim] = (a_l - 1.0) - b_l * lengthscale
    grad[dim] = (a_o - 1.0) - b_o * outputscale
    return float(value), grad


# --------------------------------------------------------------------------- model


@dataclass(frozen=True, eq=False)
class GpSurrogate:
    """Fitted GP.  ``X`` lives in the unit cube; ``y`` is standardized."""

    X: np.ndarray
    y: np.ndarray
    lengthscale: np.ndarray
    outputscale: float
    noise_sd: float
    y_mean: float = 0.0
    y_scale: float = 1.0
    bounds: ParamBounds | None = None
    chol: np.ndarray = field(init=False, repr=False)
    alpha: np.ndarray = field(init=False, repr=False)
    jitter: float = field(init=False, repr=False)

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        y = np.asarray(self.y, dtype=float).reshape(-1)
        lengthscale = np.broadcast_to(np.asarray(self.lengthscale, dtype=float), (X.shape[1],)).copy()
        if not (np.all(lengthscale > 0) and self.outputscale > 0 and self.noise_sd > 0):
            raise InvalidInput("GP hyperparameters must be positive")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "lengthscale", lengthscale)
        K = self.kernel(X, X) + self.noise_sd**2 * np.eye(X.shape[0])
        L, jitter = _stable_cholesky(K)
        object.__setattr__(self, "chol", L)
        object.__setattr__(self, "jitter", jitter)
        object.__setattr__(self, "alpha", linalg.cho_solve((L, True), y, check_finite=False))

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def kernel(self, X1, X2) -> np.ndarray:
        return matern52_matrix(X1, X2, self.lengthscale, self.outputscale)

    def posterior(self, Xq) -> tuple[np.ndarray, np.ndarray]:
        """Joint predictive mean and covariance of the latent function (standardized units)."""
        Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
        Ks = self.kernel(self.X, Xq)
        mean = Ks.T @ self.alpha
        v = linalg.solve_triangular(self.chol, Ks, lower=True, check_finite=False)
        cov = self.kernel(Xq, Xq) - v.T @ v
        cov = 0.5 * (cov + cov.T)
        return mean, cov

    def posterior_batched(self, Xb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Mean ``(m, q)`` and per-batch covariance ``(m, q, q)`` for ``m`` batches of ``q`` points."""
        m, q, dim = Xb.shape
        flat = Xb.reshape(m * q, dim)
        Ks = self.kernel(self.X, flat)
        mean = (Ks.T @ self.alpha).reshape(m, q)
        v = linalg.solve_triangular(self.chol, Ks, lower=True, check_finite=False).reshape(-1, m, q)
        diff = (Xb[:, :, None, :] - Xb[:, None, :, :]) / self.lengthscale
        prior = _matern_from_dist(np.sqrt(np.sum(diff**2, -1)), self.outputscale)
        cov = prior - np.einsum("nmi,nmj->mij", v, v)
        return mean, 0.5 * (cov + np.swapaxes(cov, 1, 2))

    def predict(self, Xq) -> tuple[np.ndarray, np.ndarray]:
        """Predictive mean and latent variance in original target units."""
        mean, cov = self.posterior(Xq)
        var = np.maximum(np.diag(cov), 0.0)
        return self.y_mean + self.y_scale * mean, self.y_scale**2 * var

    def standardize(self, y_raw):
        return (np.asarray(y_raw, dtype=float) - self.y_mean) / self.y_scale

    @property
    def log_params(self) -> np.ndarray:
        return np.log(np.concatenate([self.lengthscale, [self.outputscale, self.noise_sd]]))

    def log_marginal_likelihood(self) -> float:
        n = self.y.size
        return float(-0.5 * self.y @ self.alpha - np.sum(np.log(np.diag(self.chol))) - 0.5 * n * np.log(2 * np.pi))

    def hyperparameters(self) -> dict:
        return {
            "lengthscale": self.lengthscale.tolist(),
            "outputscale": float(self.outputscale),
            "noise_sd": float(self.noise_sd),
        }

    def to_dict(self) -> dict:
        return {
            **self.hyperparameters(),
            "X": self.X.tolist(),
            "y": self.y.tolist(),
            "y_mean": self.y_mean,
            "y_scale": self.y_scale,
            "bounds": self.bounds.to_dict() if self.bounds is not None else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GpSurrogate":
        bounds = ParamBounds(**data["bounds"]) if data.get("bounds") else None
        return cls(np.asarray(data["X"]), np.asarray(data["y"]), np.asarray(data["lengthscale"]),
                   data["outputscale"], data["noise_sd"], data["y_mean"], data["y_scale"], bounds)


def _initial_points(dim: int, n_restarts: int, rng: np.random.Generator) -> list[np.ndarray]:
    a_l, b_l = LENGTHSCALE_PRIOR
    a_o, b_o = OUTPUTSCALE_PRIOR
    starts = [np.log(np.concatenate([np.full(dim, a_l / b_l), [1.0, NOISE_SD_INIT]]))]
    for _ in range(n_restarts):
        lengthscale = rng.gamma(a_l, 1.0 / b_l, size=dim)
        outputscale = rng.gamma(a_o, 1.0 / b_o)
        noise_sd = np.exp(rng.uniform(np.log(NOISE_SD_RANGE[0]), np.log(1.0)))
        starts.append(np.log(np.concatenate([lengthscale, [outputscale, noise_sd]])))
    return starts


def _log_bounds(dim: int) -> list[tuple[float, float]]:
    return ([tuple(np.log(LENGTHSCALE_RANGE))] * dim
            + [tuple(np.log(OUTPUTSCALE_RANGE)), tuple(np.log(NOISE_SD_RANGE))])


def fit(X_raw, y_raw, bounds: ParamBounds, n_restarts: int = 5, seed: int = 0) -> GpSurrogate:
    """MAP fit of a GP to ``(X_raw, y_raw)`` given in original parameter units."""
    X_raw = np.atleast_2d(np.asarray(X_raw, dtype=float))
    y_raw = np.asarray(y_raw, dtype=float).reshape(-1)
    n = y_raw.size
    if n < 2 or X_raw.shape[0] != n:
        raise InsufficientData(f"need at least 2 matching observations, got {n}")
    if X_raw.shape[1] != bounds.dim:
        raise InvalidInput(f"inputs have {X_raw.shape[1]} columns, bounds {bounds.dim}")
    X = np.clip(bounds.to_unit(X_raw), 0.0, 1.0)
    y_mean = float(np.mean(y_raw))
    y_sd = float(np.std(y_raw, ddof=1))
    if y_sd > 1e-12 * max(1.0, abs(y_mean)):
        y_scale, y = y_sd, (y_raw - y_mean) / y_sd
    else:
        # Constant targets: keep the mean, predict it everywhere.
        y_scale, y = 1.0, np.zeros(n)

    dim = X.shape[1]

    def negative_objective(theta):
        try:
            lml, g_lml = lml_and_grad(theta, X, y)
        except ConditioningError:
            return 1e10, np.zeros_like(theta)
        lp, g_lp = log_prior_and_grad(theta, dim)
        return -(lml + lp), -(g_lml + g_lp)

    rng = np.random.default_rng(seed)
    best = None
    for start in _initial_points(dim, n_restarts, rng):
        start = np.clip(start, *np.array(_log_bounds(dim)).T)
        res = optimize.minimize(negative_objective, start, jac=True, method="L-BFGS-B",
                                bounds=_log_bounds(dim), options={"maxiter": 200})
        if np.isfinite(res.fun) and (best is None or res.fun < best.fun):
            best = res
    if best is None or best.fun >= 1e10:
        raise ConditioningError("GP hyperparameter fit failed from every start")
    lengthscale, outputscale, noise_sd = _unpack(best.x, dim)
    return GpSurrogate(X, y, lengthscale, float(outputscale), float(noise_sd), y_mean, y_scale, bounds)
