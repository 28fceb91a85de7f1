import numpy as np
import pytest
from scipy import sparse

from misret.env import (LatentWorld, RecEnv, StitchToyEnv, WorldSpec, build_stitch_toy, gen_behavior_data,
                        gen_mixed_data, make_world, mf_complete, oracle_action, parallel_eval_envs,
                        state_tracker_encode, toy_state_name, world_from_interactions)


def _world(**kw):
    return make_world(WorldSpec(n_users=20, n_items=8, d_f=4, **kw))


def test_state_tracker_single_interaction():
    u = np.array([1.0, 2.0])
    V = np.array([[0.5, -1.0], [3.0, 0.0]])
    np.testing.assert_allclose(state_tracker_encode([(0, 2.0)], u, V, 10), [1, 2, 1.0, -2.0])
    np.testing.assert_allclose(state_tracker_encode([], u, V, 10), [1, 2, 0, 0])


def test_state_tracker_window_keeps_last_k():
    u = np.zeros(1)
    V = np.array([[1.0], [10.0]])
    s = state_tracker_encode([(1, 1.0), (0, 1.0), (0, 3.0)], u, V, 2)
    assert s[1] == pytest.approx((1.0 + 3.0) / 2)


def test_world_is_read_only_and_seeded():
    w1, w2 = _world(seed=3), _world(seed=3)
    np.testing.assert_array_equal(w1.user_factors, w2.user_factors)
    with pytest.raises(ValueError):
        w1.item_factors[0, 0] = 1.0


def test_latent_world_validation():
    with pytest.raises(ValueError, match="same positive width"):
        LatentWorld(np.zeros((2, 3)), np.zeros((2, 4)))


def test_noise_free_reward_and_repeat_decay():
    w = _world(noise_sigma=0.0)
    env = RecEnv(w, 0)
    env.reset(0)
    exp = w.affinity(0)[3]
    _, r1, _ = env.step(3)
    assert r1 == pytest.approx(min(exp, w.r_max))
    _, r2, _ = env.step(3)
    assert r2 == pytest.approx(r1 * 0.5)


def test_quit_after_patience():
    w = LatentWorld(np.array([[-5.0]]), np.array([[5.0]]), noise_sigma=0.0, quit_threshold=1.0,
                    quit_patience=3, max_steps=30)
    env = RecEnv(w, 0)
    env.reset(0)
    dones = [env.step(0)[2] for _ in range(3)]
    assert dones == [False, False, True]
    with pytest.raises(RuntimeError):
        env.step(0)


def test_max_steps():
    w = LatentWorld(np.array([[5.0]]), np.array([[5.0], [5.0]]), noise_sigma=0.0, max_steps=4, repeat_decay=1.0)
    env = RecEnv(w, 0)
    env.reset(0)
    assert [env.step(0)[2] for _ in range(4)] == [False, False, False, True]


def test_step_errors():
    env = RecEnv(_world(), 0)
    with pytest.raises(RuntimeError):
        env.step(0)
    env.reset()
    with pytest.raises(ValueError, match="outside catalog"):
        env.step(99)
    with pytest.raises(ValueError):
        env.reset(999)


def test_oracle_accounts_for_repeats():
    w = _world(noise_sigma=0.0)
    env = RecEnv(w, 0)
    env.reset(1)
    first = oracle_action(env)
    assert first == int(np.argmax(w.affinity(1)))
    env.step(first)
    np.testing.assert_allclose(env.expected_rewards()[first], 0.5 * min(w.affinity(1)[first], w.r_max))


def test_behaviour_data_quality_orders_with_epsilon():
    w = _world(seed=1)
    good = gen_behavior_data(w, 0.0, 40, seed=0)
    bad = gen_behavior_data(w, 1.0, 40, seed=0)
    mean_ret = lambda ds: np.mean([t.rtg[0] for t in ds.trajectories])
    assert mean_ret(good) > mean_ret(bad)


def test_mixed_data_deterministic_and_split():
    w = _world()
    a = gen_mixed_data(w, [(0.1, 0.5), (0.8, 0.5)], 10, seed=4)
    b = gen_mixed_data(w, [(0.1, 0.5), (0.8, 0.5)], 10, seed=4)
    assert [t.source for t in a.trajectories].count("eps=0.1") == 5
    for x, y in zip(a.trajectories, b.trajectories):
        np.testing.assert_array_equal(x.actions, y.actions)


def test_mf_recovers_rank_one():
    u = np.array([1.0, 2.0, -1.0, 0.5])
    v = np.array([1.0, -0.5, 2.0])
    full = np.outer(u, v)
    r, c = np.nonzero(np.ones_like(full))
    m = sparse.coo_matrix((full[r, c], (r, c)), shape=full.shape)
    pred = mf_complete(m, rank=1, epochs=400, seed=0, lr=0.05, reg=0.0)
    np.testing.assert_allclose(pred, full, atol=1e-3)


def test_mf_cold_rows_get_global_mean():
    m = sparse.coo_matrix(([1.0, 3.0], ([0, 0], [0, 1])), shape=(2, 3))
    pred = mf_complete(m, rank=1, epochs=10, seed=0)
    np.testing.assert_allclose(pred[1], 2.0)
    np.testing.assert_allclose(pred[:, 2], 2.0)


def test_mf_empty_warns():
    with pytest.warns(RuntimeWarning):
        pred = mf_complete(sparse.coo_matrix((2, 2)), rank=1)
    assert np.all(pred == 0)


def test_world_from_interactions_builds():
    m = sparse.coo_matrix(([1.0, 4.0, 2.5], ([0, 1, 1], [0, 1, 2])), shape=(2, 3))
    w = world_from_interactions(m, rank=2, seed=0)
    assert (w.n_users, w.n_items) == (2, 3)


def test_parallel_envs_independent_streams():
    envs = parallel_eval_envs(_world(), 3, seed=0)
    users = [e.reset() for e in envs]
    again = [e.reset() for e in parallel_eval_envs(_world(), 3, seed=0)]
    for a, b in zip(users, again):
        np.testing.assert_array_equal(a, b)


def test_stitch_toy_dynamics():
    env = StitchToyEnv("s_b0")
    s = env.reset()
    assert toy_state_name(s) == "s_b0"
    _, r0, d0 = env.step(0)
    _, r1, d1 = env.step(0)
    assert (r0, r1, d0, d1) == (0.5, 1.0, False, True)
    assert env.visited == ["s_b0", "s_mid", "s_a1"]


def test_stitch_toy_dataset():
    ds, _ = build_stitch_toy()
    rets = sorted(float(t.rtg[0]) for t in ds.trajectories)
    assert rets == [0.5, 1.0]
    # the stitched path (0.5 then 1.0) is not in the data
    assert max(rets) < 1.5
