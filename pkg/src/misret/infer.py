"""History-length search, expert-return sampling and rollout evaluation.

At every decision the policy evaluates the maximal-return head on suffixes of
the observed history of length ``1, 1 + delta, 1 + 2 delta, ...`` (plus the
full available length), keeps the suffix with the highest estimate, reweights
that suffix's return distribution by ``exp(kappa * R)``, samples a target
return from it and conditions the action on the truncated history.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .data import ContextWindow, bin_centers, clamp_return, collate, relabel_rtg
from .model import PolicyModel


@dataclass
class SearchConfig:
    delta: int = 2
    T_max: int = 20
    kappa: float = 10.0
    action_mode: str = "greedy"
    tie_break: str = "longest"
    tie_tol: float = 0.0
    use_search: bool = True

    def __post_init__(self) -> None:
        if not 1 <= self.delta <= self.T_max:
            raise ValueError("delta must satisfy 1 <= delta <= T_max")
        if self.action_mode not in ("greedy", "sample"):
            raise ValueError("action_mode must be 'greedy' or 'sample'")
        if self.tie_break not in ("longest", "shortest"):
            raise ValueError("tie_break must be 'longest' or 'shortest'")
        if self.tie_tol < 0:
            raise ValueError("tie_tol must be >= 0")


@dataclass
class History:
    """Observed steps of one episode.

    ``states`` has one more entry than ``actions``/``rewards``/``rtg`` once the
    episode has started: the newest state has not been acted on yet.
    """

    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    rtg: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.states)

    def query_window(self, length: int, target: float = 0.0) -> ContextWindow:
        """Window of the last ``length`` states ending at the current one.

        The current step's return token holds ``target`` and its action slot
        a placeholder.
        """
        n = len(self.states)
        if not 1 <= length <= n:
            raise ValueError(f"history of {n} steps cannot give a window of {length}")
        lo = n - length
        states = np.asarray(self.states[lo:], dtype=np.float32)
        rtg = np.asarray(self.rtg[lo:] + [target], dtype=np.float32)
        actions = np.asarray(self.actions[lo:] + [0], dtype=np.int64)
        rewards = np.asarray(self.rewards[lo:] + [0.0], dtype=np.float32)
        return ContextWindow(states, rtg, actions, rewards)


def search_grid(available: int, delta: int, T_max: int) -> list[int]:
    """``1, 1 + delta, ...`` up to ``min(T_max, available)``, always ending at that limit."""
    top = min(T_max, available)
    if top < 1:
        return []
    grid = list(range(1, top + 1, delta))
    if grid[-1] != top:
        grid.append(top)
    return grid


@torch.no_grad()
def _evaluate(model: PolicyModel, windows: list[ContextWindow]):
    out = model.forward_batch(collate(windows, model.cfg.T_max))
    r_hat = out["expectile"][:, -1].double().numpy() * model.cfg.return_scale
    probs = torch.softmax(out["return_logits"][:, -1].double(), dim=-1).numpy()
    return r_hat, probs, out["action_logits"][:, -1].double().numpy()


def estimate_max_returns(model: PolicyModel, history: History, cfg: SearchConfig, _with_probs=False):
    """``[(T_i, R_hat_i)]`` for every length on the search grid, ascending in ``T_i``."""
    if len(history) == 0:
        raise ValueError("empty context")
    grid = search_grid(len(history), cfg.delta, min(cfg.T_max, model.cfg.T_max))
    r_hat, probs, _ = _evaluate(model, [history.query_window(T) for T in grid])
    est = [(T, float(r)) for T, r in zip(grid, r_hat)]
    return (est, probs) if _with_probs else est


def select_history_length(estimates, tie_break: str = "longest", tie_tol: float = 0.0) -> int:
    """Length with the highest estimate; near-equal estimates resolve by ``tie_break``."""
    if not estimates:
        raise ValueError("no estimates")
    best = max(r for _, r in estimates)
    tied = [T for T, r in estimates if r >= best - tie_tol]
    return max(tied) if tie_break == "longest" else min(tied)


def expert_posterior(probs, centers, kappa: float) -> np.ndarray:
    """``P(R) * exp(kappa R)`` renormalised in log space."""
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore"):
        logits = np.log(p) + kappa * np.asarray(centers, dtype=np.float64)
    top = np.max(logits)
    if not np.isfinite(top):
        raise ValueError("posterior has no mass")
    w = np.exp(logits - top)
    return w / w.sum()


def sample_expert_return(probs, edges, kappa: float, rng: np.random.Generator) -> float:
    centers = bin_centers(edges)
    post = expert_posterior(probs, centers, kappa)
    return float(centers[rng.choice(len(post), p=post)])


def select_action(logits, cfg: SearchConfig, rng: np.random.Generator | None = None) -> int:
    logits = np.asarray(logits, dtype=np.float64)
    if cfg.action_mode == "greedy":
        return int(np.argmax(logits))
    p = np.exp(logits - logits.max())
    return int(rng.choice(len(p), p=p / p.sum()))


@dataclass
class Decision:
    action: int
    T_star: int
    estimates: list
    target: float
    posterior: np.ndarray
    n_forward: int


class Policy:
    """Holds a trained model, its return bins and the search settings."""

    def __init__(self, model: PolicyModel, edges, cfg: SearchConfig):
        self.model = model.eval()
        self.edges = np.asarray(edges, dtype=np.float64)
        self.centers = bin_centers(self.edges)
        self.cfg = cfg

    def act(self, history: History, rng: np.random.Generator) -> Decision:
        return self.act_many([history], [rng])[0]

    def act_many(self, histories: list[History], rngs: list) -> list[Decision]:
        """Decide for several independent histories with one batched pass per stage.

        Each history uses only its own generator, so results do not depend on
        which histories share a batch.
        """
        cfg = self.cfg
        t_cap = min(cfg.T_max, self.model.cfg.T_max)
        grids, windows = [], []
        for h in histories:
            if len(h) == 0:
                raise ValueError("empty context")
            g = search_grid(len(h), cfg.delta, t_cap) if cfg.use_search else [min(t_cap, len(h))]
            grids.append(g)
            windows.extend(h.query_window(T) for T in g)
        r_hat, probs, _ = _evaluate(self.model, windows)
        picks, k = [], 0
        for h, g, rng in zip(histories, grids, rngs):
            est = [(T, float(r)) for T, r in zip(g, r_hat[k:k + len(g)])]
            T_star = select_history_length(est, cfg.tie_break, cfg.tie_tol)
            p = probs[k + g.index(T_star)]
            k += len(g)
            post = expert_posterior(p, self.centers, cfg.kappa)
            target = float(self.centers[rng.choice(len(post), p=post)])
            picks.append((est, T_star, target, post))
        act_windows = [
            relabel_rtg(h.query_window(T_star), clamp_return(target, self.edges))
            for h, (_, T_star, target, _) in zip(histories, picks)
        ]
        _, _, logits = _evaluate(self.model, act_windows)
        out = []
        for (est, T_star, target, post), lg, rng, g in zip(picks, logits, rngs, grids):
            out.append(Decision(select_action(lg, cfg, rng), T_star, est, target, post, len(g) + 1))
        return out


def act(model: PolicyModel, history: History, cfg: SearchConfig, rng: np.random.Generator, edges) -> Decision:
    return Policy(model, edges, cfg).act(history, rng)


def run_episode(policy: Policy, env, rng: np.random.Generator, user_id=None) -> dict:
    return run_episodes(policy, [env], [rng], [user_id])[0]


def run_episodes(policy: Policy, envs: list, rngs: list, user_ids=None) -> list[dict]:
    """One episode per environment, stepped in lockstep and batched across environments."""
    user_ids = user_ids or [None] * len(envs)
    hists = [History() for _ in envs]
    logs = [{"rewards": [], "actions": [], "T_star": []} for _ in envs]
    for env, h, uid in zip(envs, hists, user_ids):
        h.states.append(env.reset(uid))
    active = list(range(len(envs)))
    while active:
        decisions = policy.act_many([hists[i] for i in active], [rngs[i] for i in active])
        still = []
        for i, d in zip(active, decisions):
            s, r, done = envs[i].step(d.action)
            h = hists[i]
            h.actions.append(d.action)
            h.rewards.append(float(r))
            h.rtg.append(d.target)
            logs[i]["rewards"].append(float(r))
            logs[i]["actions"].append(d.action)
            logs[i]["T_star"].append(d.T_star)
            if not done:
                h.states.append(s)
                still.append(i)
        active = still
    out = []
    for lg in logs:
        r_cumu = float(np.sum(lg["rewards"]))
        length = len(lg["rewards"])
        out.append({"R_cumu": r_cumu, "R_avg": r_cumu / length, "Length": length, **lg})
    return out


def rollout_eval(policy: Policy, envs: list, episodes_per_env: int = 1, seed=0) -> dict:
    """Evaluation report with R_cumu / R_avg (mean and std over episodes) and mean Length."""
    if not envs:
        raise ValueError("n_envs must be >= 1")
    if episodes_per_env < 1:
        raise ValueError("episodes_per_env must be >= 1")
    rngs = [np.random.default_rng(c) for c in np.random.SeedSequence([int(seed), 7]).spawn(len(envs))]
    episodes = []
    for _ in range(episodes_per_env):
        for j, rec in enumerate(run_episodes(policy, envs, rngs)):
            episodes.append({"env": j, **rec})
    cumu = np.array([e["R_cumu"] for e in episodes])
    avg = np.array([e["R_avg"] for e in episodes])
    lens = np.array([e["Length"] for e in episodes])
    return {
        "seed": seed,
        "n_envs": len(envs),
        "episodes": len(episodes),
        "R_cumu": {"mean": float(cumu.mean()), "std": float(cumu.std())},
        "R_avg": {"mean": float(avg.mean()), "std": float(avg.std())},
        "Length": {"mean": float(lens.mean())},
        "per_episode": [{k: e[k] for k in ("env", "R_cumu", "R_avg", "Length")} for e in episodes],
    }


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def search_config_dict(cfg: SearchConfig) -> dict:
    return asdict(cfg)
