"""Synthetic recommendation environments.

A :class:`LatentWorld` scores user/item pairs through latent factors, a
windowed state tracker turns the recent interaction history into the RL
state, and sessions end when the user has seen too many poor items in a row
or the step budget is spent. The module also builds behaviour-policy data,
the two-trajectory stitching toy and a matrix-factorisation completer that
turns sparse interaction logs into a world.
"""
from __future__ import annotations

import json
import logging
import warnings
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import sparse

from . import kernels
from .data import Dataset, Trajectory, value_bins

logger = logging.getLogger(__name__)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class WorldSpec:
    """Everything needed to rebuild a world: dimensions, knobs and the seed."""

    n_users: int = 200
    n_items: int = 50
    d_f: int = 8
    k: int = 10
    max_steps: int = 30
    quit_patience: int = 3
    quit_frac: float = 0.2
    r_max: float = 5.0
    reward_scale: float = 5.0
    noise_sigma: float = 0.3
    repeat_decay: float = 0.5
    factor_scale: float = 1.0
    seed: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class LatentWorld:
    user_factors: np.ndarray
    item_factors: np.ndarray
    noise_sigma: float = 0.3
    reward_scale: float = 5.0
    r_max: float = 5.0
    k: int = 10
    max_steps: int = 30
    quit_patience: int = 3
    quit_threshold: float = 1.0
    repeat_decay: float = 0.5

    def __post_init__(self) -> None:
        self.user_factors = np.asarray(self.user_factors, dtype=np.float64)
        self.item_factors = np.asarray(self.item_factors, dtype=np.float64)
        if self.user_factors.ndim != 2 or self.item_factors.ndim != 2:
            raise ValueError("factor matrices must be 2-D")
        if self.user_factors.shape[1] != self.item_factors.shape[1] or self.user_factors.shape[1] < 1:
            raise ValueError("user and item factors need the same positive width")
        if not (np.all(np.isfinite(self.user_factors)) and np.all(np.isfinite(self.item_factors))):
            raise ValueError("factors must be finite")
        if self.noise_sigma < 0 or self.reward_scale <= 0:
            raise ValueError("noise_sigma must be >= 0 and reward_scale > 0")
        self.user_factors.setflags(write=False)
        self.item_factors.setflags(write=False)

    @property
    def n_users(self) -> int:
        return self.user_factors.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_factors.shape[0]

    @property
    def d_f(self) -> int:
        return self.user_factors.shape[1]

    @property
    def state_dim(self) -> int:
        return 2 * self.d_f

    def affinity(self, user: int) -> np.ndarray:
        """Noise-free base reward ``reward_scale * sigmoid(u . v)`` for every item."""
        return self.reward_scale * _sigmoid(self.item_factors @ self.user_factors[user])


def make_world(spec: WorldSpec | None = None, **overrides) -> LatentWorld:
    spec = spec or WorldSpec()
    if overrides:
        spec = WorldSpec(**{**asdict(spec), **overrides})
    rng = np.random.default_rng(spec.seed)
    # u . v has standard deviation factor_scale**2 whatever d_f is
    s = spec.factor_scale / spec.d_f ** 0.25
    users = rng.normal(0.0, s, size=(spec.n_users, spec.d_f))
    items = rng.normal(0.0, s, size=(spec.n_items, spec.d_f))
    return LatentWorld(
        users, items, noise_sigma=spec.noise_sigma, reward_scale=spec.reward_scale, r_max=spec.r_max,
        k=spec.k, max_steps=spec.max_steps, quit_patience=spec.quit_patience,
        quit_threshold=spec.quit_frac * spec.r_max, repeat_decay=spec.repeat_decay,
    )


def state_tracker_encode(history: Sequence[tuple[int, float]], user_vec: np.ndarray,
                         item_factors: np.ndarray, k: int) -> np.ndarray:
    """``[u || reward-weighted mean of the item factors of the last k interactions]``.

    The mean divides by the number of interactions in the window, so a single
    interaction (v, r) encodes as ``[u || r * v]``.
    """
    user_vec = np.asarray(user_vec, dtype=np.float64)
    block = np.zeros(item_factors.shape[1])
    recent = list(history)[-k:] if k > 0 else []
    if recent:
        items = np.array([i for i, _ in recent], dtype=np.int64)
        rewards = np.array([r for _, r in recent], dtype=np.float64)
        block = (rewards[:, None] * item_factors[items]).sum(axis=0) / len(recent)
    return np.concatenate([user_vec, block]).astype(np.float32)


@dataclass
class SessionState:
    user_id: int
    history: deque = field(default_factory=deque)
    step_count: int = 0
    done: bool = False
    quit_counter: int = 0


class RecEnv:
    """One simulated user session at a time over a shared, read-only world."""

    def __init__(self, world: LatentWorld, seed=None):
        self.world = world
        self.rng = np.random.default_rng(seed)
        self.session: SessionState | None = None

    def reset(self, user_id: int | None = None) -> np.ndarray:
        w = self.world
        if user_id is None:
            user_id = int(self.rng.integers(0, w.n_users))
        elif not 0 <= user_id < w.n_users:
            raise ValueError(f"unknown user_id {user_id}")
        self.session = SessionState(int(user_id), deque(maxlen=w.k))
        return self.state()

    def state(self) -> np.ndarray:
        s = self.session
        return state_tracker_encode(s.history, self.world.user_factors[s.user_id], self.world.item_factors, self.world.k)

    def expected_rewards(self) -> np.ndarray:
        """Noise-free reward of every item given the current history (repeat decay included)."""
        w = self.world
        base = w.affinity(self.session.user_id)
        counts = np.bincount([i for i, _ in self.session.history], minlength=w.n_items)
        return np.clip(base, 0.0, w.r_max) * w.repeat_decay ** counts

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        s = self.session
        w = self.world
        if s is None:
            raise RuntimeError("reset() must be called before step()")
        if s.done:
            raise RuntimeError("session is done; call reset()")
        action = int(action)
        if not 0 <= action < w.n_items:
            raise ValueError(f"action {action} outside catalog of {w.n_items}")
        raw = w.reward_scale * _sigmoid(float(w.user_factors[s.user_id] @ w.item_factors[action]))
        if w.noise_sigma > 0:
            raw += self.rng.normal(0.0, w.noise_sigma)
        repeats = sum(1 for i, _ in s.history if i == action)
        reward = float(np.clip(raw, 0.0, w.r_max) * w.repeat_decay ** repeats)
        s.history.append((action, reward))
        s.step_count += 1
        s.quit_counter = s.quit_counter + 1 if reward < w.quit_threshold else 0
        s.done = s.step_count >= w.max_steps or s.quit_counter >= w.quit_patience
        return self.state(), reward, s.done


def env_reset(world: LatentWorld, user_id: int | None = None, seed=None) -> tuple[RecEnv, np.ndarray]:
    env = RecEnv(world, seed)
    return env, env.reset(user_id)


def env_step(env: RecEnv, action: int):
    return env.step(action)


def oracle_action(env: RecEnv) -> int:
    return int(np.argmax(env.expected_rewards()))


def gen_behavior_data(world: LatentWorld, epsilon: float, episodes: int, seed=None,
                      n_bins: int = 32, prefix: str = "") -> Dataset:
    """Roll out an epsilon-noisy oracle and record the episodes.

    With probability ``1 - epsilon`` the behaviour policy takes the item with
    the highest noise-free expected reward (repeat decay included), otherwise
    a uniformly random item.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    return Dataset.from_trajectories(
        _rollout_behavior(world, epsilon, episodes, np.random.default_rng(seed), prefix),
        world.n_items, world.state_dim, n_bins,
    )


def _rollout_behavior(world, epsilon, episodes, rng, prefix=""):
    env = RecEnv(world, rng)
    out = []
    for ep in range(episodes):
        s = env.reset()
        states, actions, rewards = [], [], []
        done = False
        while not done:
            if rng.random() < epsilon:
                a = int(rng.integers(0, world.n_items))
            else:
                a = oracle_action(env)
            states.append(s)
            actions.append(a)
            s, r, done = env.step(a)
            rewards.append(r)
        out.append(Trajectory(np.array(states), actions, rewards, id=f"{prefix}{ep}", source=f"eps={epsilon:g}"))
    return out


def gen_mixed_data(world: LatentWorld, mix: Sequence[tuple[float, float]], episodes: int, seed=None,
                   n_bins: int = 32) -> Dataset:
    """Behaviour data from several epsilons; ``mix`` is a list of (epsilon, share)."""
    ss = np.random.SeedSequence(seed)
    children = ss.spawn(len(mix))
    trajs = []
    remaining = episodes
    for j, ((eps, share), child) in enumerate(zip(mix, children)):
        n = remaining if j == len(mix) - 1 else int(round(episodes * share))
        remaining -= n
        if n > 0:
            trajs.extend(_rollout_behavior(world, eps, n, np.random.default_rng(child), prefix=f"m{j}-"))
    return Dataset.from_trajectories(trajs, world.n_items, world.state_dim, n_bins)


def mf_complete(interactions, rank: int, epochs: int = 20, seed=None, lr: float = 0.05,
                reg: float = 0.1, shape: tuple[int, int] | None = None, return_factors: bool = False):
    """Fill a sparse user x item reward matrix by SGD matrix factorisation.

    Rows or columns with no observations predict the global mean of the
    observed values (0 when nothing is observed).
    """
    if rank <= 0:
        raise ValueError("rank must be positive")
    coo = sparse.coo_matrix(interactions)
    n_rows, n_cols = shape or coo.shape
    rows = coo.row.astype(np.int64)
    cols = coo.col.astype(np.int64)
    vals = coo.data.astype(np.float64)
    rng = np.random.default_rng(seed)
    P = rng.normal(0.0, 0.1, size=(n_rows, rank))
    Q = rng.normal(0.0, 0.1, size=(n_cols, rank))
    if vals.size == 0:
        warnings.warn("no observed interactions; predicting zeros", RuntimeWarning, stacklevel=2)
        pred = np.zeros((n_rows, n_cols))
        return (pred, P * 0, Q * 0) if return_factors else pred
    order = np.stack([rng.permutation(vals.size) for _ in range(epochs)]) if epochs > 0 else np.zeros((0, vals.size), np.int64)
    P, Q = kernels.mf_sgd(rows, cols, vals, P, Q, float(lr), float(reg), int(epochs), order.astype(np.int64))
    pred = P @ Q.T
    mean = float(vals.mean())
    seen_r = np.zeros(n_rows, bool)
    seen_r[rows] = True
    seen_c = np.zeros(n_cols, bool)
    seen_c[cols] = True
    pred[~seen_r, :] = mean
    pred[:, ~seen_c] = mean
    if not np.all(np.isfinite(pred)):
        raise FloatingPointError("matrix factorisation diverged; lower the learning rate")
    return (pred, P, Q) if return_factors else pred


def world_from_interactions(interactions, rank: int = 8, seed=None, **world_kw) -> LatentWorld:
    """Build a world whose noise-free rewards reproduce an MF completion of the logs.

    Observed rewards are mapped into (0, 1) by ``reward_scale`` and the logit
    of the completed matrix is factorised, so ``reward_scale * sigmoid(u.v)``
    approximates the completed reward.
    """
    scale = world_kw.get("reward_scale", 5.0)
    coo = sparse.coo_matrix(interactions)
    p = np.clip(coo.data / scale, 1e-3, 1 - 1e-3)
    logits = sparse.coo_matrix((np.log(p / (1 - p)), (coo.row, coo.col)), shape=coo.shape)
    _, P, Q = mf_complete(logits, rank, epochs=world_kw.pop("mf_epochs", 50), seed=seed, return_factors=True)
    return LatentWorld(P, Q, **world_kw)


def parallel_eval_envs(world: LatentWorld, n: int, seed=None) -> list[RecEnv]:
    """``n`` environments, each with its own child seed of ``seed``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return [RecEnv(world, np.random.default_rng(c)) for c in np.random.SeedSequence(seed).spawn(n)]


# --- stitching toy -------------------------------------------------------

TOY_STATES = ("s_a0", "s_b0", "s_mid", "s_a1", "s_b1")


def _onehot(name: str) -> np.ndarray:
    v = np.zeros(len(TOY_STATES), dtype=np.float32)
    v[TOY_STATES.index(name)] = 1.0
    return v


class StitchToyEnv:
    """Deterministic chain: start -> s_mid -> terminal.

    From a start state any action leads to ``s_mid``; action 0 earns the
    start's reward (0 from ``s_a0``, 0.5 from ``s_b0``) and action 1 earns 0.
    From ``s_mid`` action 0 reaches ``s_a1`` with reward 1 and action 1 reaches
    ``s_b1`` with reward 0.
    """

    n_items = 2
    state_dim = len(TOY_STATES)
    START_REWARD = {"s_a0": 0.0, "s_b0": 0.5}

    def __init__(self, start: str = "s_b0"):
        if start not in self.START_REWARD:
            raise ValueError(f"start must be one of {sorted(self.START_REWARD)}")
        self.start = start
        self.current: str | None = None
        self.visited: list[str] = []

    def reset(self, user_id=None) -> np.ndarray:
        self.current = self.start
        self.visited = [self.start]
        return _onehot(self.current)

    def step(self, action: int):
        if self.current is None or self.current in ("s_a1", "s_b1"):
            raise RuntimeError("episode finished; call reset()")
        if self.current == "s_mid":
            nxt, r = ("s_a1", 1.0) if action == 0 else ("s_b1", 0.0)
        else:
            nxt, r = "s_mid", (self.START_REWARD[self.current] if action == 0 else 0.0)
        self.current = nxt
        self.visited.append(nxt)
        return _onehot(nxt), r, nxt in ("s_a1", "s_b1")


def build_stitch_toy() -> tuple[Dataset, StitchToyEnv]:
    """The two logged trajectories A (return 1.0) and B (return 0.5)."""
    a = Trajectory(np.stack([_onehot("s_a0"), _onehot("s_mid")]), [0, 0], [0.0, 1.0], id="A", source="toy")
    b = Trajectory(np.stack([_onehot("s_b0"), _onehot("s_mid")]), [0, 1], [0.5, 0.0], id="B", source="toy")
    edges = value_bins(np.concatenate([a.rtg, b.rtg]))
    return Dataset([a, b], edges, StitchToyEnv.n_items, StitchToyEnv.state_dim), StitchToyEnv()


def toy_state_name(state: np.ndarray) -> str:
    return TOY_STATES[int(np.argmax(state))]
