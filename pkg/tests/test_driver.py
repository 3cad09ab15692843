import numpy as np
import pytest

import bots.driver as driver
from bots.baselines import run_ts
from bots.driver import (
    BotsConfig,
    apply_prior_strategy,
    decode,
    make_schedule,
    run_bots,
    search_bounds,
    search_dimension,
)
from bots.envs import JitaiConfig, TabularMdp, make_env_factory
from bots.errors import ConfigError, RunError
from bots.policy import EpisodeTrace
from bots.reward_model import broad_prior, fit_belief_set, posterior_update

SHORT_MDP = TabularMdp("short", [[0, 1], [1, 1]], [[1, 10], [0, 0]], [1.0, 0.0], horizon=5)
CHEAP = dict(n_raw=8, n_restarts=1, n_mc=32, gp_restarts=0)


def short_factory():
    return make_env_factory("short", mdp=SHORT_MDP)


def jitai_factory(horizon=10):
    return make_env_factory("jitai", JitaiConfig(horizon=horizon))


# --------------------------------------------------------------------------- schedule


def test_schedule_examples():
    s = make_schedule(140, 10, 10, 6)
    assert s.mrt_episodes == 10 and s.batch_sizes == (10, 20, 20, 20, 20, 20, 20)
    assert make_schedule(140, 10, 10, 120).batch_sizes == (10,) + (1,) * 120
    assert make_schedule(30, 10, 10, 2).batch_sizes == (10, 5, 5)


@pytest.mark.parametrize("rounds,batch", [(2, 60), (6, 20), (12, 10), (24, 5), (30, 4), (60, 2), (120, 1)])
def test_schedule_for_every_round_configuration(rounds, batch):
    s = make_schedule(140, 10, 10, rounds)
    assert s.total == 140 and s.rounds == rounds and set(s.batch_sizes[1:]) == {batch}


@pytest.mark.parametrize("args", [(140, 10, 10, 7), (20, 10, 10, 1), (140, 10, 0, 6), (140, -1, 10, 6)])
def test_schedule_rejects_bad_splits(args):
    with pytest.raises(ConfigError):
        make_schedule(*args)


@pytest.mark.parametrize("rounds", [2, 6, 12, 24, 30, 60, 120])
def test_run_consumes_exact_budget(rounds):
    rec = run_bots(BotsConfig(rounds=rounds, **CHEAP), short_factory())
    sizes = [len(r.returns) for r in rec.rounds]
    assert len(rec.mrt_returns) + sum(sizes) == 140
    assert sizes == list(make_schedule(140, 10, 10, rounds).batch_sizes)
    assert [r.batch_size for r in rec.rounds] == sizes


# --------------------------------------------------------------------------- search space


def test_search_dimensions_for_jitai():
    assert [search_dimension(s, 4) for s in driver.SEARCH_SPACES] == [3, 4, 7]
    with pytest.raises(ConfigError):
        search_dimension("beta+everything", 4)


def test_decode_beta_only():
    beta, var = decode("beta", [-5, -10, -2], 4)
    np.testing.assert_array_equal(beta, [0, -5, -10, -2])
    assert var is None


def test_decode_shared_and_per_action_variance():
    beta, var = decode("beta+shared_var", [-1, -2, -3, 9], 4)
    np.testing.assert_array_equal(beta, [0, -1, -2, -3])
    np.testing.assert_array_equal(var, [9, 9, 9, 9])
    beta, var = decode("beta+action_var", [-1, -2, -3, 4, 5, 6, 7], 4)
    np.testing.assert_array_equal(beta, [0, -1, -2, -3])
    np.testing.assert_array_equal(var, [4, 5, 6, 7])
    with pytest.raises(ConfigError):
        decode("beta", [1.0, 2.0], 4)


def test_search_bounds_layout():
    b = search_bounds("beta+action_var", 4)
    np.testing.assert_array_equal(b.lower, [-100] * 3 + [0.1] * 4)
    np.testing.assert_array_equal(b.upper, [0] * 3 + [2500] * 4)


def test_config_validation():
    with pytest.raises(ConfigError):
        BotsConfig(search_space="gamma")
    with pytest.raises(ConfigError):
        BotsConfig(bo_mode="random")
    with pytest.raises(ConfigError):
        BotsConfig(prior_strategy="sometimes")
    with pytest.raises(ConfigError):
        BotsConfig(rounds=7)
    assert BotsConfig().digest() == BotsConfig().digest() != BotsConfig(seed=1).digest()


# --------------------------------------------------------------------------- prior strategies


def trace(*steps):
    return EpisodeTrace([(np.asarray(s, float), a, r) for s, a, r in steps])


def test_fixed_strategy_returns_mrt_beliefs():
    base = broad_prior(2, 2)
    mrt = fit_belief_set(base, [trace(([1, 0.5], 0, 3.0))])
    later = [trace(([1, 1], 1, 7.0))]
    assert apply_prior_strategy("fixed", base, mrt, later) is mrt


def test_update_without_new_data_equals_mrt():
    base = broad_prior(2, 2)
    mrt_traces = [trace(([1, 0.5], 0, 3.0), ([1, 0.2], 1, 1.0))]
    mrt = fit_belief_set(base, mrt_traces)
    again = apply_prior_strategy("update", base, mrt, mrt_traces)
    for a, b in zip(again, mrt):
        np.testing.assert_allclose(a.mu, b.mu, rtol=1e-12)
        np.testing.assert_allclose(a.sigma, b.sigma, rtol=1e-12)


def test_update_with_one_more_observation_per_action():
    base = broad_prior(2, 2)
    mrt_traces = [trace(([1, 0.5], 0, 3.0), ([1, 0.2], 1, 1.0))]
    mrt = fit_belief_set(base, mrt_traces)
    extra = trace(([1, 0.9], 0, 5.0), ([1, 0.1], 1, -2.0))
    pooled = apply_prior_strategy("update", base, mrt, mrt_traces + [extra])
    for a, (s, _, r) in enumerate(extra.steps):
        expected = posterior_update(mrt[a], s, r, True)
        np.testing.assert_allclose(pooled[a].mu, expected.mu, rtol=1e-8)
        np.testing.assert_allclose(pooled[a].sigma, expected.sigma, rtol=1e-8)
    with pytest.raises(ConfigError):
        apply_prior_strategy("chain", base, mrt, [])


# --------------------------------------------------------------------------- the loop


def small_config(**kw):
    return BotsConfig(**{"total": 30, "mrt_episodes": 4, "sobol_episodes": 6, "rounds": 4, **CHEAP, **kw})


def test_zero_bias_candidates_replay_ts_fixed():
    cfg = small_config(seed=5)
    factory = jitai_factory()
    rec = run_bots(cfg, factory, rep=2, propose=lambda i, c: np.zeros_like(c))
    ts = run_ts(factory, cfg.schedule().batch_sizes, 5, rep=2, strategy="fixed", mrt_episodes=4)
    assert rec.mrt_returns == ts.mrt_returns
    assert [r.returns for r in rec.rounds] == ts.round_returns


def test_zero_bias_replay_under_update_strategy():
    cfg = small_config(seed=1, prior_strategy="update")
    factory = jitai_factory()
    rec = run_bots(cfg, factory, propose=lambda i, c: np.zeros_like(c))
    ts = run_ts(factory, cfg.schedule().batch_sizes, 1, strategy="update", mrt_episodes=4)
    assert [r.returns for r in rec.rounds] == ts.round_returns


@pytest.mark.parametrize("mode", ["global", "turbo"])
def test_replay_is_deterministic(mode):
    cfg = small_config(bo_mode=mode, seed=3)
    a = run_bots(cfg, jitai_factory(), rep=1).to_dict()
    b = run_bots(cfg, jitai_factory(), rep=1).to_dict()
    assert a == b


def test_repetitions_differ():
    cfg = small_config(seed=3)
    assert run_bots(cfg, jitai_factory(), rep=0).episode_returns != run_bots(cfg, jitai_factory(), rep=1).episode_returns


def test_gp_sees_only_completed_rounds(monkeypatch):
    sizes = []
    real = driver.gp.fit

    def spy(X, y, *args, **kw):
        sizes.append(len(y))
        return real(X, y, *args, **kw)

    monkeypatch.setattr(driver.gp, "fit", spy)
    cfg = small_config()
    run_bots(cfg, jitai_factory())
    batch = cfg.schedule().batch_sizes
    # one fit per BO round on all earlier rounds, then one for the recommendation
    assert sizes == list(np.cumsum(batch))[:-1] + [sum(batch)]


def test_candidates_respect_bounds_and_trust_region():
    cfg = small_config(search_space="beta+action_var", seed=2)
    rec = run_bots(cfg, jitai_factory())
    bounds = search_bounds(cfg.search_space, 4)
    for i, rnd in enumerate(rec.rounds):
        c = np.asarray(rnd.candidates)
        assert c.shape == (rnd.batch_size, 7)
        assert np.all(c >= bounds.lower - 1e-9) and np.all(c <= bounds.upper + 1e-9)
        if i > 0:
            assert rnd.gp is not None and rnd.qei is not None and rnd.qei >= rnd.raw_qei
    tr = rec.rounds[-1].trust_region
    assert 0 < tr["length"] <= cfg.l_max
    assert rec.recommended is not None and len(rec.recommended) == 7


def test_trust_region_replays_from_recorded_returns():
    from bots.acquisition import TrustRegionState, turbo_update

    cfg = small_config(seed=4, total=50, rounds=10)
    rec = run_bots(cfg, jitai_factory())
    bounds = search_bounds("beta", 4)
    tr = TrustRegionState.initial(np.zeros(3), 3)
    incumbent = max(rec.rounds[0].returns)
    X = list(rec.rounds[0].candidates)
    Y = list(rec.rounds[0].returns)
    for rnd in rec.rounds[1:]:
        tr = turbo_update(tr, max(rnd.returns), incumbent)
        incumbent = max(incumbent, max(rnd.returns))
        X += rnd.candidates
        Y += rnd.returns
        np.testing.assert_allclose(rnd.trust_region["center"], bounds.to_unit(X[int(np.argmax(Y))]))
        assert rnd.trust_region["length"] == tr.length
        assert (rnd.trust_region["succ_count"], rnd.trust_region["fail_count"]) == (tr.succ_count, tr.fail_count)


def test_environment_failure_reports_round_and_candidate():
    class Exploding:
        n_actions, feature_dim, horizon = 2, 1, 3

        def __init__(self, seed):
            self.calls = 0

        def reset(self):
            return np.ones(1)

        def step(self, action):
            if action == 1:
                raise RuntimeError("bad action")
            return np.ones(1), 0.0, False

    cfg = BotsConfig(total=6, mrt_episodes=0, sobol_episodes=2, rounds=2, **CHEAP)
    with pytest.raises(RunError) as info:
        run_bots(cfg, Exploding, propose=lambda i, c: np.full_like(c, 50.0 if i == 1 else -50.0))
    assert info.value.round_index == 1 and info.value.candidate == 0


def test_record_average_counts_mrt_episodes():
    rec = run_bots(small_config(), jitai_factory())
    assert rec.n_episodes == 30
    assert rec.average_return == pytest.approx(np.mean(rec.episode_returns))
    d = rec.to_dict()
    assert d["n_episodes"] == 30 and d["config_hash"] == small_config().digest()
