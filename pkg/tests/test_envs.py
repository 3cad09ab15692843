import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import expit

from bots.envs import (
    BUILTIN_MDPS,
    MDP1,
    MDP2,
    MDP3,
    JitaiConfig,
    JitaiEnv,
    JitaiState,
    MdpEnv,
    TabularMdp,
    jitai_reset,
    jitai_step,
    make_env_factory,
    mdp_features,
    mdp_reset,
    mdp_step,
    observe,
    optimal_expected_return,
    policy_return,
    stationary_optimal_policy,
    value_iteration,
)
from bots.errors import ConfigError, InvalidInput

# (state, action) -> (next state, reward), transcribed row by row from the appendix tables.
REFERENCE_TABLES = {
    "mdp1": {(0, 0): (0, 0), (0, 1): (1, 10), (1, 0): (0, 10), (1, 1): (1, 0)},
    "mdp2": {(0, 0): (0, 1), (0, 1): (1, 10), (1, 0): (1, 0), (1, 1): (1, 0)},
    "mdp3": {(0, 0): (0, 0), (0, 1): (0, 0), (1, 0): (0, 10), (1, 1): (1, 1),
             (2, 0): (2, 1), (2, 1): (3, 10), (3, 0): (3, 0), (3, 1): (3, 0)},
}


def state(c=0, h=0.0, d=0.0, p=(0.9, 0.1)):
    return JitaiState(c=c, x=float(c), p=p, l=int(p[1] > p[0]), h=h, d=d)


# --------------------------------------------------------------------------- JITAI dynamics


def test_generic_message_from_fresh_state():
    new, reward, done = jitai_step(state(h=0.0), 1, JitaiConfig(), np.random.default_rng(0))
    assert new.h == pytest.approx(0.05)
    assert reward == pytest.approx(47.6)
    assert not done


def test_tailored_message_reward_and_disengagement_decay():
    new, reward, _ = jitai_step(state(c=0, h=0.0, d=0.5), 2, JitaiConfig(), np.random.default_rng(0))
    assert reward == pytest.approx(190.1)
    assert new.d == pytest.approx(0.9 * 0.5)


def test_mistailored_message_can_end_the_study():
    new, reward, done = jitai_step(state(c=0, d=0.7), 3, JitaiConfig(), np.random.default_rng(0))
    assert new.d == pytest.approx(1.0)
    assert done
    assert reward == pytest.approx(0.1)


def test_no_message_branch():
    new, reward, done = jitai_step(state(c=1, h=0.6, d=0.3), 0, JitaiConfig(), np.random.default_rng(0))
    assert new.h == pytest.approx(0.9 * 0.6)
    assert new.d == 0.3
    assert reward == 0.1
    assert not done


def test_horizon_ends_episode():
    cfg = JitaiConfig(horizon=3)
    s = jitai_reset(cfg, np.random.default_rng(0))
    flags = []
    for _ in range(3):
        s, _, done = jitai_step(s, 0, cfg, np.random.default_rng(1))
        flags.append(done)
    assert flags == [False, False, True]


def test_invalid_action_rejected():
    with pytest.raises(InvalidInput):
        jitai_step(state(), 4, JitaiConfig(), np.random.default_rng(0))


def test_observe_modes():
    s = state(p=(0.9, 0.1))
    np.testing.assert_array_equal(observe(s, "prob"), [1.0, 0.1])
    np.testing.assert_array_equal(observe(state(c=1, p=(0.2, 0.8)), "onehot"), [1.0, 1.0])
    with pytest.raises(ConfigError):
        observe(s, "raw")


def test_features_hide_latent_state():
    a = state(c=0, h=0.0, d=0.0, p=(0.3, 0.7))
    b = state(c=1, h=0.9, d=0.8, p=(0.3, 0.7))
    for mode in ("prob", "onehot"):
        np.testing.assert_array_equal(observe(a, mode), observe(b, mode))


def test_reset_initial_latents_and_context_balance():
    cfg = JitaiConfig()
    rng = np.random.default_rng(0)
    states = [jitai_reset(cfg, rng) for _ in range(10_000)]
    assert all(s.h == 0.0 and s.d == 0.0 for s in states)
    assert 0.48 <= np.mean([s.c for s in states]) <= 0.52


def test_noiseless_context_is_inferred_exactly():
    cfg = JitaiConfig(sigma=1e-4)
    rng = np.random.default_rng(1)
    assert all(s.l == s.c for s in (jitai_reset(cfg, rng) for _ in range(500)))


def test_context_posterior_matches_bayes_rule():
    # p(c=1 | x) with a uniform prior and N(c, sigma^2) likelihoods, computed from densities.
    cfg = JitaiConfig(sigma=0.4)
    s = jitai_reset(cfg, np.random.default_rng(3))
    like0 = np.exp(-0.5 * (s.x / cfg.sigma) ** 2)
    like1 = np.exp(-0.5 * ((s.x - 1) / cfg.sigma) ** 2)
    assert s.p[1] == pytest.approx(like1 / (like0 + like1), rel=1e-10)
    assert s.p[1] == pytest.approx(expit((2 * s.x - 1) / (2 * cfg.sigma**2)), rel=1e-12)


@pytest.mark.parametrize("field,value", [("sigma", 0.0), ("delta_h", 1.0), ("eps_d", 0.0),
                                         ("rho1", -1.0), ("d_threshold", 1.5), ("horizon", 0)])
def test_config_validation(field, value):
    with pytest.raises(ConfigError):
        JitaiConfig(**{field: value})


@given(st.integers(0, 2**31), st.lists(st.integers(0, 3), min_size=1, max_size=60))
def test_state_invariants_hold_along_any_action_sequence(seed, actions):
    cfg = JitaiConfig()
    rng = np.random.default_rng(seed)
    s = jitai_reset(cfg, rng)
    for a in actions:
        s, reward, done = jitai_step(s, a, cfg, rng)
        assert abs(sum(s.p) - 1.0) <= 1e-12
        assert 0.0 <= s.h <= 1.0 and 0.0 <= s.d <= 1.0
        assert s.l == int(np.argmax(s.p))
        assert reward >= 0.0
        if done:
            break


def test_env_wrapper_runs_an_episode():
    env = JitaiEnv(JitaiConfig(horizon=10), np.random.default_rng(0))
    s = env.reset()
    assert s.shape == (2,)
    steps = 0
    done = False
    while not done:
        s, _, done = env.step(0)
        steps += 1
    assert steps == 10


# --------------------------------------------------------------------------- tabular MDPs


@pytest.mark.parametrize("name", sorted(REFERENCE_TABLES))
def test_tables_conform_exhaustively(name):
    mdp = BUILTIN_MDPS[name]
    table = REFERENCE_TABLES[name]
    assert set(table) == set(itertools.product(range(mdp.n_states), range(mdp.n_actions)))
    for (s, a), expected in table.items():
        assert mdp_step(mdp, s, a) == expected
    assert mdp.horizon == 100


def test_start_distributions():
    rng = np.random.default_rng(0)
    assert {mdp_reset(MDP1, rng) for _ in range(50)} == {0}
    assert {mdp_reset(MDP2, rng) for _ in range(50)} == {0}
    starts = [mdp_reset(MDP3, rng) for _ in range(4000)]
    assert set(starts) == {1, 2}
    assert abs(np.mean(np.array(starts) == 1) - 0.5) < 0.03


def test_out_of_range_rejected():
    with pytest.raises(InvalidInput):
        mdp_step(MDP1, 2, 0)
    with pytest.raises(InvalidInput):
        mdp_step(MDP1, 0, 2)


def test_features_are_intercept_plus_onehot():
    np.testing.assert_array_equal(mdp_features(MDP3, 2), [1, 0, 0, 1, 0])


def test_mdp_env_episode_length_and_fixed_start():
    env = MdpEnv(MDP3, np.random.default_rng(0), start_state=2)
    s = env.reset()
    np.testing.assert_array_equal(s, mdp_features(MDP3, 2))
    done, n = False, 0
    while not done:
        _, _, done = env.step(0)
        n += 1
    assert n == 100


def test_stationary_optima():
    assert optimal_expected_return(MDP1) == 1000
    assert optimal_expected_return(MDP2) == 100
    assert optimal_expected_return(MDP3) == 100
    np.testing.assert_array_equal(stationary_optimal_policy(MDP3)[1:3], [1, 0])


def test_finite_horizon_optimum_exploits_last_step():
    # Stay for 99 steps, then take the +10 exit on the final step.
    assert optimal_expected_return(MDP1, stationary=False) == 1000
    assert optimal_expected_return(MDP2, stationary=False) == 109
    assert optimal_expected_return(MDP3, stationary=False) == 109
    _, policy = value_iteration(MDP2)
    assert policy[0, 0] == 0 and policy[-1, 0] == 1


def test_policy_return_of_myopic_policies():
    assert policy_return(MDP2, [1, 0]) == 10
    assert policy_return(MDP3, [0, 0, 1, 0]) == 10


def brute_force_best(mdp):
    """Oracle: enumerate every stationary deterministic policy and simulate each start."""
    best = -np.inf
    for pi in itertools.product(range(mdp.n_actions), repeat=mdp.n_states):
        total = 0.0
        for s0 in np.flatnonzero(mdp.start):
            s, ret = int(s0), 0.0
            for _ in range(mdp.horizon):
                s, r = mdp_step(mdp, s, pi[s])
                ret += r
            total += mdp.start[s0] * ret
        best = max(best, total)
    return best


@pytest.mark.parametrize("mdp", [MDP1, MDP2, MDP3])
def test_stationary_optimum_matches_policy_enumeration(mdp):
    assert optimal_expected_return(mdp) == pytest.approx(brute_force_best(mdp))


def test_mdp_round_trip_and_validation():
    assert TabularMdp.from_dict(MDP3.to_dict()).to_dict() == MDP3.to_dict()
    with pytest.raises(ConfigError):
        TabularMdp("bad", [[0, 5]], [[0, 0]], [1.0])
    with pytest.raises(ConfigError):
        TabularMdp("bad", [[0, 0]], [[0, 0, 0]], [1.0])


def test_factory_seeds_independent_envs():
    f = make_env_factory("jitai")
    a, b = f(np.random.SeedSequence(1)), f(np.random.SeedSequence(1))
    np.testing.assert_array_equal(a.reset(), b.reset())
    with pytest.raises(ConfigError):
        make_env_factory("gridworld")
    with pytest.raises(ConfigError):
        make_env_factory("jitai", feature_mode="raw")
