"""Batch candidate generation: scrambled Sobol designs, Monte-Carlo qEI and TuRBO-1.

All optimization happens in the GP's unit-cube input space; candidates are
mapped back to original parameter units only at the end.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import qmc

from .gp import GpSurrogate, ParamBounds

# TuRBO-1 defaults.
L_INIT = 0.8
L_MIN = 2.0**-7
L_MAX = 1.6
SUCC_TOL = 3

N_MC = 512
N_RESTARTS = 8
N_RAW = 256


def sobol_unit(dim: int, n: int, seed) -> np.ndarray:
    """First ``n`` points of a scrambled Sobol sequence in ``[0, 1]^dim``."""
    sampler = qmc.Sobol(d=dim, scramble=True, seed=seed)
    with warnings.catch_warnings():
        # Non power-of-two sample sizes are fine here.
        warnings.simplefilter("ignore", UserWarning)
        return sampler.random(n)


def sobol_batch(bounds: ParamBounds, n: int, seed) -> np.ndarray:
    if n < 1:
        raise ValueError("need at least one Sobol point")
    return bounds.from_unit(sobol_unit(bounds.dim, n, seed))


# --------------------------------------------------------------------------- qEI


def base_samples(n_mc: int, q: int, seed) -> np.ndarray:
    """Standard-normal base samples of shape ``(n_mc, q)``.

    Drawn column by column so that the first ``q`` columns do not depend on how
    many columns are requested.
    """
    return np.random.default_rng(seed).standard_normal((q, n_mc)).T


def _batched_factor(cov: np.ndarray) -> np.ndarray:
    q = cov.shape[-1]
    eye = np.eye(q)
    scale = max(float(np.max(np.abs(cov))), 1e-12)
    for jitter in (0.0, 1e-10, 1e-8, 1e-6):
        try:
            return np.linalg.cholesky(cov + jitter * scale * eye)
        except np.linalg.LinAlgError:
            continue
    w, V = np.linalg.eigh(cov)
    return V * np.sqrt(np.maximum(w, 0.0))[..., None, :]


def improvement_samples(model: GpSurrogate, Xb: np.ndarray, best_f: float, z: np.ndarray) -> np.ndarray:
    """Per-sample improvement ``max(0, max_j f(x_j) - best_f)``, shape ``(m, n_mc)``."""
    mean, cov = model.posterior_batched(Xb)
    L = _batched_factor(cov)
    f = mean[:, None, :] + np.matmul(z, np.swapaxes(L, 1, 2))
    return np.maximum(f.max(-1) - best_f, 0.0)


def qei_values(model: GpSurrogate, Xb: np.ndarray, best_f: float, z: np.ndarray,
               chunk: int = 64) -> np.ndarray:
    """qEI for ``m`` batches ``Xb`` of shape ``(m, q, D)`` (unit cube, standardized ``best_f``)."""
    Xb = np.asarray(Xb, dtype=float)
    out = np.empty(Xb.shape[0])
    for start in range(0, Xb.shape[0], chunk):
        out[start:start + chunk] = improvement_samples(model, Xb[start:start + chunk], best_f, z).mean(-1)
    return out


def qei(model: GpSurrogate, batch, best_f: float, n_mc: int = N_MC, base_seed=0) -> float:
    """Monte-Carlo batch expected improvement of ``batch`` (q x D, unit cube)."""
    batch = np.atleast_2d(np.asarray(batch, dtype=float))
    z = base_samples(n_mc, batch.shape[0], base_seed)
    return float(qei_values(model, batch[None], best_f, z)[0])


def qei_with_error(model: GpSurrogate, batch, best_f: float, n_mc: int = N_MC,
                   base_seed=0) -> tuple[float, float]:
    """qEI estimate and its Monte-Carlo standard error."""
    batch = np.atleast_2d(np.asarray(batch, dtype=float))
    z = base_samples(n_mc, batch.shape[0], base_seed)
    samples = improvement_samples(model, batch[None], best_f, z)[0]
    return float(samples.mean()), float(samples.std(ddof=1) / np.sqrt(n_mc))


@dataclass
class CandidateBatch:
    points: np.ndarray          # (q, D), original units
    unit_points: np.ndarray     # (q, D), unit cube
    qei: float = float("nan")
    raw_qei: float = float("nan")
    n_restarts: int = 0


def _pattern_search(model, x0, value, box: ParamBounds, best_f, z, max_moves=8, min_step=0.0125):
    """Coordinate pattern search over all ``q * D`` batch coordinates.

    Each iteration scores every +/- step move.  The best move of each point is
    also tried jointly; the joint move is kept only if it beats the best single
    move, so the objective never decreases.
    """
    q, dim = x0.shape
    x = x0.copy()
    width = box.width
    n_coords = q * dim
    idx = np.arange(n_coords)
    rows, cols = idx // dim, idx % dim
    step = 0.1
    while step >= min_step:
        for _ in range(max_moves):
            deltas = np.zeros((2 * n_coords, q, dim))
            deltas[idx, rows, cols] = step * width[cols]
            deltas[n_coords + idx, rows, cols] = -step * width[cols]
            neighbours = np.clip(x[None] + deltas, box.lower, box.upper)
            values = qei_values(model, neighbours, best_f, z)
            k = int(np.argmax(values))
            if values[k] <= value + 1e-12:
                break
            per_point = values.reshape(2, q, dim).transpose(1, 0, 2).reshape(q, -1)
            joint = x.copy()
            for j in range(q):
                m = int(np.argmax(per_point[j]))
                if per_point[j, m] > value:
                    joint[j] = neighbours[(m // dim) * n_coords + j * dim + m % dim, j]
            joint_value = float(qei_values(model, joint[None], best_f, z)[0])
            if joint_value > values[k]:
                x, value = joint, joint_value
            else:
                x, value = neighbours[k], float(values[k])
        step /= 2.0
    return x, value


def optimize_qei(model: GpSurrogate, bounds_effective: ParamBounds, q: int, best_f: float,
                 rng: np.random.Generator, n_restarts: int = N_RESTARTS, n_raw: int = N_RAW,
                 n_mc: int = N_MC) -> CandidateBatch:
    """Maximize qEI over ``q``-point batches inside ``bounds_effective`` (unit cube).

    Raw Sobol batches are scored, the best ``n_restarts`` are refined by
    coordinate pattern search on the Monte-Carlo objective with common base
    samples, and the best batch found is returned.
    """
    dim = bounds_effective.dim
    z = base_samples(n_mc, q, int(rng.integers(2**63)))
    raw = bounds_effective.from_unit(sobol_unit(dim, n_raw * q, int(rng.integers(2**63))))
    raw = bounds_effective.clip(raw).reshape(n_raw, q, dim)
    raw_values = qei_values(model, raw, best_f, z)
    order = np.argsort(-raw_values, kind="stable")[:n_restarts]
    best_x, best_value = raw[order[0]], float(raw_values[order[0]])
    raw_best = best_value
    for i in order:
        x, value = _pattern_search(model, raw[i], float(raw_values[i]), bounds_effective, best_f, z)
        if value > best_value:
            best_x, best_value = x, value
    unit = np.clip(best_x, bounds_effective.lower, bounds_effective.upper)
    points = model.bounds.from_unit(unit) if model.bounds is not None else unit.copy()
    return CandidateBatch(points, unit, best_value, raw_best, len(order))


# --------------------------------------------------------------------------- TuRBO


@dataclass(frozen=True, eq=False)
class TrustRegionState:
    center: np.ndarray
    length: float = L_INIT
    succ_count: int = 0
    fail_count: int = 0
    succ_tol: int = SUCC_TOL
    fail_tol: int = 3
    l_min: float = L_MIN
    l_max: float = L_MAX
    l_init: float = L_INIT
    restarts: int = field(default=0)

    @classmethod
    def initial(cls, center, dim: int, **overrides) -> "TrustRegionState":
        overrides.setdefault("fail_tol", max(3, dim))
        return cls(center=np.asarray(center, dtype=float), **overrides)

    def to_dict(self) -> dict:
        return {
            "center": self.center.tolist(),
            "length": self.length,
            "succ_count": self.succ_count,
            "fail_count": self.fail_count,
            "restarts": self.restarts,
        }


def turbo_update(tr: TrustRegionState, batch_best_return: float, incumbent_return: float,
                 center=None) -> TrustRegionState:
    """Grow or shrink the trust region after a batch, restarting when it collapses."""
    if batch_best_return > incumbent_return:
        succ, fail = tr.succ_count + 1, 0
    else:
        succ, fail = 0, tr.fail_count + 1
    length = tr.length
    if succ == tr.succ_tol:
        length, succ = min(2.0 * length, tr.l_max), 0
    elif fail == tr.fail_tol:
        length, fail = length / 2.0, 0
    restarts = tr.restarts
    if length < tr.l_min:
        length, succ, fail, restarts = tr.l_init, 0, 0, restarts + 1
    new_center = tr.center if center is None else np.asarray(center, dtype=float)
    return replace(tr, center=new_center, length=length, succ_count=succ, fail_count=fail, restarts=restarts)


def turbo_box_unit(tr: TrustRegionState, lengthscale) -> ParamBounds:
    """Trust-region box in unit-cube coordinates, shaped by the GP lengthscales."""
    lengthscale = np.asarray(lengthscale, dtype=float)
    weights = lengthscale / np.exp(np.mean(np.log(lengthscale)))
    half = weights * tr.length / 2.0
    return ParamBounds(np.clip(tr.center - half, 0.0, 1.0), np.clip(tr.center + half, 0.0, 1.0))


def turbo_bounds(tr: TrustRegionState, lengthscale, global_bounds: ParamBounds) -> ParamBounds:
    box = turbo_box_unit(tr, lengthscale)
    return ParamBounds(global_bounds.from_unit(box.lower), global_bounds.from_unit(box.upper))
