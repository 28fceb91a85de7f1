import numpy as np
import pytest

from misret.infer import (History, Policy, SearchConfig, estimate_max_returns, expert_posterior,
                          rollout_eval, run_episodes, sample_expert_return, search_grid, select_history_length)
from misret.env import make_world, parallel_eval_envs
from misret.model import ModelConfig, init_model


def test_search_grid():
    assert search_grid(20, 2, 20) == [1, 3, 5, 7, 9, 11, 13, 15, 17, 19, 20]
    assert search_grid(20, 1, 20) == list(range(1, 21))
    assert search_grid(5, 2, 20) == [1, 3, 5]
    assert search_grid(30, 3, 20) == [1, 4, 7, 10, 13, 16, 19, 20]
    assert search_grid(0, 2, 20) == []


def test_forward_count_bound():
    assert len(search_grid(100, 2, 20)) + 1 <= 12
    assert len(search_grid(100, 1, 20)) + 1 <= 21


def test_tie_rule():
    est = [(1, 1.0), (3, 1.0), (5, 0.5)]
    assert select_history_length(est) == 3
    assert select_history_length(est, "shortest") == 1
    assert select_history_length([(1, 1.0), (3, 0.97)], tie_tol=0.05) == 3
    assert select_history_length([(1, 1.0), (3, 0.97)]) == 1
    with pytest.raises(ValueError):
        select_history_length([])


def test_search_config_validation():
    with pytest.raises(ValueError):
        SearchConfig(delta=0)
    with pytest.raises(ValueError):
        SearchConfig(delta=21, T_max=20)
    with pytest.raises(ValueError):
        SearchConfig(action_mode="beam")


def test_expert_posterior_closed_form():
    post = expert_posterior([0.5, 0.5], [0.0, 1.0], 10.0)
    assert post[1] == pytest.approx(np.exp(10) / (1 + np.exp(10)), rel=1e-12)
    assert np.allclose(expert_posterior([0.2, 0.8], [0.0, 1.0], 0.0), [0.2, 0.8])
    # large kappa must not overflow
    assert np.isfinite(expert_posterior([0.5, 0.5], [0.0, 100.0], 1e3)).all()


def test_sampler_draws_bin_centres():
    rng = np.random.default_rng(0)
    edges = np.array([-0.5, 0.5, 1.5])
    draws = {sample_expert_return([0.5, 0.5], edges, 10.0, rng) for _ in range(200)}
    assert draws <= {0.0, 1.0}


@pytest.fixture
def world_model():
    world = make_world(n_users=10, n_items=6, d_f=2, seed=0)
    cfg = ModelConfig(d_s=world.state_dim, n_items=6, n_bins=8, n_layers=1, d_model=16, d_ff=32, T_max=6,
                      dropout=0.0, lora_rank=0, freeze_mode="full")
    return world, init_model(cfg, seed=0), np.linspace(0, 20, 9)


def test_estimates_follow_grid(world_model):
    world, model, _ = world_model
    h = History(states=[np.zeros(world.state_dim, np.float32)] * 5, actions=[0] * 4, rewards=[1.0] * 4,
                rtg=[4.0, 3.0, 2.0, 1.0])
    est = estimate_max_returns(model, h, SearchConfig(delta=2, T_max=6))
    assert [T for T, _ in est] == [1, 3, 5]
    with pytest.raises(ValueError):
        estimate_max_returns(model, History(), SearchConfig())


def test_decision_counts_forwards(world_model):
    world, model, edges = world_model
    pol = Policy(model, edges, SearchConfig(delta=2, T_max=6))
    h = History(states=[np.zeros(world.state_dim, np.float32)] * 6, actions=[0] * 5, rewards=[1.0] * 5,
                rtg=[1.0] * 5)
    d = pol.act(h, np.random.default_rng(0))
    assert d.n_forward == len(search_grid(6, 2, 6)) + 1 == 5
    assert d.T_star in (1, 3, 5, 6)


def test_batched_rollout_matches_serial(world_model):
    world, model, edges = world_model
    pol = Policy(model, edges, SearchConfig(delta=2, T_max=6, action_mode="sample"))
    seeds = [np.random.SeedSequence(5).spawn(3)]
    envs = parallel_eval_envs(world, 3, seed=1)
    batched = run_episodes(pol, envs, [np.random.default_rng(s) for s in seeds[0]])
    serial = []
    for i, s in enumerate(np.random.SeedSequence(5).spawn(3)):
        env = parallel_eval_envs(world, 3, seed=1)[i]
        serial += run_episodes(pol, [env], [np.random.default_rng(s)])
    for a, b in zip(batched, serial):
        assert a["actions"] == b["actions"]
        assert a["R_cumu"] == pytest.approx(b["R_cumu"], abs=1e-9)


def test_rollout_eval_report(world_model):
    world, model, edges = world_model
    pol = Policy(model, edges, SearchConfig(delta=2, T_max=6))
    rep = rollout_eval(pol, parallel_eval_envs(world, 4, seed=2), episodes_per_env=2, seed=0)
    assert rep["episodes"] == 8
    for e in rep["per_episode"]:
        assert e["R_avg"] == pytest.approx(e["R_cumu"] / e["Length"])
    with pytest.raises(ValueError):
        rollout_eval(pol, [], 1)
    with pytest.raises(ValueError):
        rollout_eval(pol, parallel_eval_envs(world, 1, seed=2), 0)
