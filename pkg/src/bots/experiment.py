"""Running configured experiments and writing their artifacts.

Layout of one run directory::

    <out>/<name>/config.yaml        echo of the parsed config
    <out>/<name>/records/rep_XX.json
    <out>/<name>/record.json        all repetitions plus the aggregate
    <out>/<name>/summary.csv        one row per round per repetition, then an aggregate row
    <out>/<name>/candidates.csv     one row per episode

A sweep directory holds one run directory per grid cell plus ``sweep.csv`` and
``sweep.json``; ``plotdata`` turns that into a long-format CSV.
"""

from __future__ import annotations

import csv
import io
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .baselines import q_learning_run, run_ts, xts_expected_return
from .config import ExperimentConfig, SweepConfig
from .driver import RoundRecord, RunRecord, decode, run_bots, stream_seed
from .envs import BUILTIN_MDPS, make_env_factory
from .errors import ConfigError
from .policy import XtsParams, run_episode
from .reward_model import belief_set_from_list, belief_set_to_list, broad_prior, with_noise_levels

STAGE_EVAL = 6  # seed stream for final-policy evaluation, disjoint from the driver's stages

SUMMARY_COLUMNS = ["rep", "round", "batch_size", "episodes_cum", "candidate_id", "params", "return",
                   "mean_return", "best_so_far", "tr_length", "qei", "n_restarts", "avg_return",
                   "stderr", "final_return"]
PLOT_COLUMNS = ["method", "search_space", "rounds", "batch", "mean_avg_return", "stderr"]


def _fmt(x) -> str:
    """Deterministic text for CSV cells."""
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def stderr(values: Sequence[float]) -> float:
    """Sample standard deviation over sqrt(n); nan for fewer than two values."""
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return float("nan")
    return float(v.std(ddof=1) / math.sqrt(v.size))


# --------------------------------------------------------------------------- one repetition


def env_factory_for(cfg: ExperimentConfig):
    return make_env_factory(cfg.environment, cfg.jitai.build(), cfg.feature_mode)


def evaluate_policy(cfg: ExperimentConfig, params: XtsParams, rep: int) -> float:
    """Return of a frozen xTS policy: exact start weighting on MDPs, Monte Carlo on JITAI."""
    seed = stream_seed(cfg.seed, rep, STAGE_EVAL, 0)
    if cfg.environment in BUILTIN_MDPS:
        return xts_expected_return(BUILTIN_MDPS[cfg.environment], params, cfg.eval_episodes, seed)
    factory = env_factory_for(cfg)
    returns = []
    for child in np.random.SeedSequence(seed).spawn(cfg.eval_episodes):
        env_seed, policy_seed = child.spawn(2)
        returns.append(run_episode(factory(env_seed), params, np.random.default_rng(policy_seed)).total_return)
    return float(np.mean(returns))


def run_repetition(cfg: ExperimentConfig, rep: int) -> RunRecord:
    """One repetition of the configured method as a :class:`RunRecord`."""
    factory = env_factory_for(cfg)
    schedule = cfg.schedule()
    if cfg.method.startswith("bots"):
        record = run_bots(cfg.bots_config(), factory, rep=rep)
        if cfg.eval_episodes:
            beta, sigma_y2 = decode(cfg.search_space, record.recommended, cfg.n_actions)
            beliefs = belief_set_from_list(record.final_beliefs)
            if sigma_y2 is not None:
                beliefs = with_noise_levels(beliefs, sigma_y2)
            record.final_return = evaluate_policy(cfg, XtsParams(beta, beliefs), rep)
        return record

    record = RunRecord(rep, cfg.bots_config().digest(), cfg.seed, [])
    if cfg.method in ("ts-fixed", "ts-update"):
        strategy = cfg.method.split("-")[1]
        ts = run_ts(factory, schedule.batch_sizes, cfg.seed, rep=rep, strategy=strategy,
                    mrt_episodes=schedule.mrt_episodes, prior=_prior(cfg, factory))
        record.mrt_returns = ts.mrt_returns
        lengths = iter([t.length for t in ts.traces[schedule.mrt_episodes:]])
        for i, returns in enumerate(ts.round_returns):
            record.rounds.append(RoundRecord(i, len(returns), [], returns, [next(lengths) for _ in returns]))
        record.final_beliefs = belief_set_to_list(ts.final_beliefs)
        if cfg.eval_episodes:
            record.final_return = evaluate_policy(
                cfg, XtsParams(np.zeros(cfg.n_actions), ts.final_beliefs), rep)
        return record

    # Q-learning: the same episode count, grouped into the schedule's blocks for reporting.
    mdp = BUILTIN_MDPS[cfg.environment]
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(rep, STAGE_EVAL + 1)))
    result = q_learning_run(mdp, cfg.q_learning.build(), schedule.total, rng)
    returns = list(result.returns)
    record.mrt_returns = returns[:schedule.mrt_episodes]
    pos = schedule.mrt_episodes
    for i, size in enumerate(schedule.batch_sizes):
        block = returns[pos:pos + size]
        record.rounds.append(RoundRecord(i, size, [], block, [mdp.horizon] * size))
        pos += size
    record.final_return = result.final_greedy_return
    return record


def _prior(cfg: ExperimentConfig, factory):
    probe = factory(np.random.SeedSequence(0))
    return broad_prior(probe.n_actions, probe.feature_dim, cfg.prior_var, cfg.sigma_y2)


def _run_task(task):
    cfg, rep = task
    return run_repetition(cfg, rep)


def parallel_map(fn: Callable, tasks: Iterable, jobs: int = 1) -> list:
    """``map`` in task order, over a process pool when ``jobs > 1``."""
    tasks = list(tasks)
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


# --------------------------------------------------------------------------- artifacts


def summary_rows(cfg: ExperimentConfig, records: Sequence[RunRecord]) -> list[dict]:
    rows = []
    for rec in records:
        episodes = len(rec.mrt_returns)
        seen = list(rec.mrt_returns)
        best = -math.inf
        for rnd in rec.rounds:
            returns = np.asarray(rnd.returns, dtype=float)
            k = int(np.argmax(returns))
            episodes += rnd.batch_size
            seen.extend(rnd.returns)
            best = max(best, float(returns.max()))
            last = rnd is rec.rounds[-1]
            rows.append({
                "rep": rec.rep,
                "round": rnd.round,
                "batch_size": rnd.batch_size,
                "episodes_cum": episodes,
                "candidate_id": k,
                "params": " ".join(_fmt(float(v)) for v in rnd.candidates[k]) if rnd.candidates else None,
                "return": float(returns[k]),
                "mean_return": float(returns.mean()),
                "best_so_far": best,
                "tr_length": rnd.trust_region["length"] if rnd.trust_region else None,
                "qei": rnd.qei,
                "n_restarts": rnd.n_restarts,
                "avg_return": float(np.mean(seen)),
                "stderr": None,
                "final_return": rec.final_return if last else None,
            })
    avgs = [r.average_return for r in records]
    finals = [r.final_return for r in records if r.final_return is not None]
    rows.append({
        "rep": "all",
        "round": cfg.rounds,
        "batch_size": cfg.batch_size,
        "episodes_cum": cfg.total_budget,
        "avg_return": float(np.mean(avgs)),
        "stderr": stderr(avgs),
        "final_return": float(np.mean(finals)) if finals else None,
    })
    return rows


def _csv_text(columns: Sequence[str], rows: Iterable[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in columns])
    return buf.getvalue()


def candidate_rows(records: Sequence[RunRecord]) -> list[dict]:
    rows = []
    for rec in records:
        for rnd in rec.rounds:
            for b, ret in enumerate(rnd.returns):
                params = rnd.candidates[b] if rnd.candidates else []
                rows.append({"rep": rec.rep, "round": rnd.round, "candidate_id": b,
                             "params": " ".join(_fmt(float(v)) for v in params) or None,
                             "return": float(ret), "length": rnd.lengths[b]})
    return rows


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, allow_nan=True) + "\n")


def write_run(cfg: ExperimentConfig, records: Sequence[RunRecord], run_dir: Path) -> dict:
    """Write every artifact of a finished run and return the aggregate."""
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "records").mkdir(exist_ok=True)
    (run_dir / "config.yaml").write_text(cfg.to_yaml())
    for rec in records:
        _dump_json(rec.to_dict(), run_dir / "records" / f"rep_{rec.rep:02d}.json")
    avgs = [r.average_return for r in records]
    finals = [r.final_return for r in records if r.final_return is not None]
    aggregate = {
        "name": cfg.name,
        "method": cfg.method,
        "environment": cfg.environment,
        "search_space": cfg.search_space,
        "rounds": cfg.rounds,
        "batch": cfg.batch_size,
        "repetitions": len(records),
        "mean_avg_return": float(np.mean(avgs)),
        "stderr": stderr(avgs),
        "mean_final_return": float(np.mean(finals)) if finals else None,
        "final_stderr": stderr(finals) if finals else None,
    }
    _dump_json({"config": cfg.model_dump(mode="json"), "aggregate": aggregate,
                "repetitions": [r.to_dict() for r in records]}, run_dir / "record.json")
    (run_dir / "summary.csv").write_text(_csv_text(SUMMARY_COLUMNS, summary_rows(cfg, records)))
    cand_cols = ["rep", "round", "candidate_id", "params", "return", "length"]
    (run_dir / "candidates.csv").write_text(_csv_text(cand_cols, candidate_rows(records)))
    return aggregate


def run_experiment(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> dict:
    records = parallel_map(_run_task, [(cfg, rep) for rep in range(cfg.repetitions)], jobs)
    return write_run(cfg, records, Path(out) / cfg.name)


SWEEP_COLUMNS = ["cell", "method", "environment", "search_space", "prior_strategy", "rounds", "batch",
                 "repetitions", "mean_avg_return", "stderr", "mean_final_return", "final_stderr"]


def run_sweep(sweep: SweepConfig, out: Path, jobs: int = 1) -> list[dict]:
    """Run every grid cell; all repetitions of all cells share one worker pool."""
    root = Path(out) / sweep.base.name
    cells = sweep.cells()
    tasks = [(cfg, rep) for _, cfg in cells for rep in range(cfg.repetitions)]
    records = parallel_map(_run_task, tasks, jobs)
    rows, manifest, pos = [], [], 0
    for point, cfg in cells:
        recs = records[pos:pos + cfg.repetitions]
        pos += cfg.repetitions
        agg = write_run(cfg, recs, root / cfg.name)
        rows.append({"cell": cfg.name, "prior_strategy": cfg.prior_strategy, **agg})
        manifest.append({"cell": cfg.name, "dir": cfg.name, "axes": point})
    root.mkdir(parents=True, exist_ok=True)
    (root / "sweep.csv").write_text(_csv_text(SWEEP_COLUMNS, rows))
    _dump_json({"name": sweep.base.name, "grid": sweep.grid, "cells": manifest}, root / "sweep.json")
    return rows


def plot_rows(sweep_dir: Path, warn=None) -> list[dict]:
    """One row per completed cell of a sweep; missing cells are reported and skipped."""
    warn = warn or (lambda msg: print(msg, file=sys.stderr))
    manifest_path = Path(sweep_dir) / "sweep.json"
    if not manifest_path.exists():
        raise ConfigError(f"{sweep_dir} has no sweep.json; is it a sweep directory?")
    manifest = json.loads(manifest_path.read_text())
    rows = []
    for cell in manifest["cells"]:
        path = Path(sweep_dir) / cell["dir"] / "record.json"
        if not path.exists():
            warn(f"warning: cell {cell['cell']} has no record.json; skipped")
            continue
        agg = json.loads(path.read_text())["aggregate"]
        rows.append({k: agg[k] for k in ("method", "search_space", "rounds", "batch", "mean_avg_return", "stderr")})
    rows.sort(key=lambda r: (r["method"], r["rounds"], r["search_space"]))
    return rows


def write_plotdata(sweep_dir: Path, out: Path | None = None, warn=None) -> Path:
    rows = plot_rows(sweep_dir, warn)
    target = Path(out) if out is not None else Path(sweep_dir) / "plotdata.csv"
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(_csv_text(PLOT_COLUMNS, rows))
    return target
