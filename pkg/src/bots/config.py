"""Experiment configuration files.

A config is one YAML mapping whose keys mirror :class:`ExperimentConfig`.
Unknown keys are rejected so that typos in sweep definitions fail loudly.
"""

from __future__ import annotations

import itertools
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .acquisition import L_INIT, L_MAX, L_MIN, N_MC, N_RAW, N_RESTARTS, SUCC_TOL
from .baselines import QLearningHyper
from .driver import BotsConfig, make_schedule, search_dimension
from .envs import BUILTIN_MDPS, JITAI_ACTIONS, JitaiConfig
from .errors import ConfigError
from .reward_model import BROAD_PRIOR_VAR, BROAD_SIGMA_Y2

Method = Literal["bots-global", "bots-turbo", "ts-fixed", "ts-update", "q-learning"]
Environment = Literal["jitai", "mdp1", "mdp2", "mdp3"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class JitaiOverrides(_Strict):
    sigma: float | None = None
    delta_h: float | None = None
    eps_h: float | None = None
    delta_d: float | None = None
    eps_d: float | None = None
    mu_s: tuple[float, float] | None = None
    rho1: float | None = None
    rho2: float | None = None
    d_threshold: float | None = None
    horizon: int | None = None

    def build(self) -> JitaiConfig:
        return JitaiConfig(**self.model_dump(exclude_none=True))


class BoSettings(_Strict):
    n_mc: int = Field(N_MC, ge=1)
    n_restarts: int = Field(N_RESTARTS, ge=1)
    n_raw: int = Field(N_RAW, ge=1)
    gp_restarts: int = Field(5, ge=0)
    beta_bounds: tuple[float, float] = (-100.0, 0.0)
    var_bounds: tuple[float, float] = (0.1, 2500.0)
    l_init: float = L_INIT
    l_min: float = L_MIN
    l_max: float = L_MAX
    succ_tol: int = Field(SUCC_TOL, ge=1)
    fail_tol: int | None = Field(None, ge=1)

    @model_validator(mode="after")
    def _ordered(self):
        for name in ("beta_bounds", "var_bounds"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name} must be increasing, got {[lo, hi]}")
        if self.var_bounds[0] <= 0:
            raise ValueError("var_bounds must be positive")
        if not 0 < self.l_min <= self.l_init <= self.l_max:
            raise ValueError("need 0 < l_min <= l_init <= l_max")
        return self


class QLearningSettings(_Strict):
    lr: float = Field(0.8, gt=0, le=1)
    gamma: float = Field(0.99, gt=0, le=1)
    eps_start: float = Field(1.0, ge=0, le=1)
    eps_end: float = Field(0.01, ge=0, le=1)
    eps_decay: float = Field(0.1, gt=0, lt=1)

    def build(self) -> QLearningHyper:
        return QLearningHyper(**self.model_dump())


class ExperimentConfig(_Strict):
    name: str = Field(min_length=1, pattern=r"^[A-Za-z0-9_.+\-]+$")
    environment: Environment = "jitai"
    method: Method = "bots-turbo"
    search_space: Literal["beta", "beta+shared_var", "beta+action_var"] = "beta"
    prior_strategy: Literal["fixed", "update"] = "fixed"
    total_budget: int = Field(140, ge=1)
    mrt_episodes: int = Field(10, ge=0)
    sobol_episodes: int = Field(10, ge=1)
    rounds: int = Field(6, ge=1)
    repetitions: int = Field(10, ge=1)
    seed: int = Field(0, ge=0)
    feature_mode: Literal["prob", "onehot"] = "prob"
    prior_var: float = Field(BROAD_PRIOR_VAR, gt=0)
    sigma_y2: float = Field(BROAD_SIGMA_Y2, gt=0)
    eval_episodes: int = Field(0, ge=0)
    jitai: JitaiOverrides = JitaiOverrides()
    bo: BoSettings = BoSettings()
    q_learning: QLearningSettings = QLearningSettings()

    @model_validator(mode="after")
    def _consistent(self):
        if self.method == "q-learning" and self.environment == "jitai":
            raise ValueError("q-learning needs a tabular environment (mdp1, mdp2 or mdp3)")
        try:
            make_schedule(self.total_budget, self.mrt_episodes, self.sobol_episodes, self.rounds)
        except ConfigError as exc:
            raise ValueError(str(exc)) from None
        if self.environment == "jitai":
            self.jitai.build()
        return self

    # ------------------------------------------------------------------ derived

    @property
    def n_actions(self) -> int:
        if self.environment == "jitai":
            return JITAI_ACTIONS
        return BUILTIN_MDPS[self.environment].n_actions

    @property
    def search_dim(self) -> int:
        return search_dimension(self.search_space, self.n_actions)

    @property
    def batch_size(self) -> int:
        """Episodes per BO round after the Sobol round."""
        return self.schedule().batch_sizes[-1]

    def schedule(self):
        return make_schedule(self.total_budget, self.mrt_episodes, self.sobol_episodes, self.rounds)

    def bots_config(self) -> BotsConfig:
        return BotsConfig(
            search_space=self.search_space,
            bo_mode="global" if self.method == "bots-global" else "turbo",
            prior_strategy=self.prior_strategy,
            total=self.total_budget,
            mrt_episodes=self.mrt_episodes,
            sobol_episodes=self.sobol_episodes,
            rounds=self.rounds,
            seed=self.seed,
            prior_var=self.prior_var,
            sigma_y2=self.sigma_y2,
            **self.bo.model_dump(),
        )

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)


# Axes a sweep may vary: every scalar top-level field except the name.
GRID_AXES = tuple(
    k for k, f in ExperimentConfig.model_fields.items()
    if k != "name" and k not in ("jitai", "bo", "q_learning")
)


class SweepConfig(_Strict):
    base: ExperimentConfig
    grid: dict[str, list[Any]]

    @model_validator(mode="after")
    def _axes(self):
        for axis, values in self.grid.items():
            if axis not in GRID_AXES:
                raise ValueError(f"unknown grid axis {axis!r}; choose from {list(GRID_AXES)}")
            if not values:
                raise ValueError(f"grid axis {axis!r} is empty")
            if len(set(map(repr, values))) != len(values):
                raise ValueError(f"grid axis {axis!r} repeats a value")
        return self

    def cells(self) -> list[tuple[dict, ExperimentConfig]]:
        """Cartesian product of the grid, in axis order then value order."""
        axes = list(self.grid)
        base = self.base.model_dump()
        out = []
        for values in itertools.product(*(self.grid[a] for a in axes)):
            point = dict(zip(axes, values))
            label = "__".join(f"{a}-{v}" for a, v in point.items()) or "cell"
            cfg = ExperimentConfig.model_validate({**base, **point, "name": label})
            out.append((point, cfg))
        return out


# --------------------------------------------------------------------------- loading


def format_validation_error(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "\n".join(lines)


def _read_yaml(path: str | Path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"{path}: invalid YAML{where}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def _validate(model, data: dict, path):
    try:
        return model.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"{path}:\n{format_validation_error(exc)}") from None


def load_experiment(path: str | Path, seed: int | None = None) -> ExperimentConfig:
    data = _read_yaml(path)
    if "grid" in data:
        raise ConfigError(f"{path}: 'grid' belongs in a sweep config; use the sweep command")
    if seed is not None:
        data["seed"] = seed
    return _validate(ExperimentConfig, data, path)


def load_sweep(path: str | Path, seed: int | None = None) -> SweepConfig:
    data = _read_yaml(path)
    grid = data.pop("grid", None)
    if grid is None:
        grid = {}
    if not isinstance(grid, dict):
        raise ConfigError(f"{path}: 'grid' must map axis names to lists of values")
    if seed is not None:
        data["seed"] = seed
    sweep = _validate(SweepConfig, {"base": data, "grid": grid}, path)
    try:
        sweep.cells()
    except ValidationError as exc:
        raise ConfigError(f"{path}: grid cell invalid:\n{format_validation_error(exc)}") from None
    return sweep
