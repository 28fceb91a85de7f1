"""Trajectories, returns-to-go, context windows and the JSON-lines dataset format."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels

logger = logging.getLogger(__name__)

DATASET_FORMAT = "misret-dataset"
DATASET_VERSION = 1
DEFAULT_BINS = 32


class DatasetFormatError(ValueError):
    """Raised when a dataset file cannot be parsed."""


@dataclass(frozen=True)
class Step:
    state: np.ndarray
    action: int
    reward: float


def compute_returns_to_go(rewards: Sequence[float], gamma: float = 1.0) -> np.ndarray:
    """``out[t] = sum_{k >= t} gamma**(k - t) * rewards[k]``."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size == 0:
        raise ValueError("empty trajectory")
    if not np.all(np.isfinite(r)):
        raise ValueError("non-finite reward in trajectory")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    return kernels.returns_to_go(r, float(gamma))


@dataclass
class Trajectory:
    states: np.ndarray  # (n, d_s) float32
    actions: np.ndarray  # (n,) int64
    rewards: np.ndarray  # (n,) float32
    id: str = ""
    source: str = ""
    gamma: float = 1.0
    rtg: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.states = np.asarray(self.states, dtype=np.float32)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        self.rewards = np.asarray(self.rewards, dtype=np.float32)
        if self.states.ndim != 2:
            raise ValueError("states must be a 2-D array")
        n = len(self.rewards)
        if not (len(self.states) == len(self.actions) == n):
            raise ValueError("states, actions and rewards must have equal length")
        if not np.all(np.isfinite(self.states)):
            raise ValueError("non-finite state value")
        self.rtg = compute_returns_to_go(self.rewards, self.gamma)

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def steps(self) -> list[Step]:
        return [Step(self.states[t], int(self.actions[t]), float(self.rewards[t])) for t in range(len(self))]


@dataclass
class ContextWindow:
    """The last ``T`` steps of a trajectory ending at the query step.

    ``rtg`` holds the returns-to-go tokens aligned with ``states``. At inference
    the newest action (and often the newest return) is not yet known and
    holds a placeholder; the causal mask keeps it from influencing the heads
    that are read.
    """

    states: np.ndarray
    rtg: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_target: float | None = None

    @property
    def T(self) -> int:
        return len(self.actions)

    def tokens(self) -> list[tuple[str, int]]:
        """Token linearisation ``(s_0, R_0, a_0, ..., s_t, R_t, a_t)`` as (kind, step) pairs."""
        out = []
        for i in range(self.T):
            out.extend([("s", i), ("R", i), ("a", i)])
        return out

    def truncate(self, length: int) -> "ContextWindow":
        if not 1 <= length <= self.T:
            raise ValueError(f"cannot truncate a window of {self.T} steps to {length}")
        return ContextWindow(
            self.states[-length:], self.rtg[-length:], self.actions[-length:], self.rewards[-length:]
        )


def make_window(traj: Trajectory, t: int, T: int) -> ContextWindow:
    if T < 1:
        raise ValueError("window length must be >= 1")
    if not 0 <= t < len(traj):
        raise IndexError(f"step {t} outside trajectory of length {len(traj)}")
    if T > t + 1:
        raise ValueError(f"window exceeds available history (T={T}, t={t})")
    lo = t - T + 1
    return ContextWindow(
        traj.states[lo : t + 1],
        traj.rtg[lo : t + 1],
        traj.actions[lo : t + 1],
        traj.rewards[lo : t + 1],
    )


def uniform_bins(lo: float, hi: float, n_bins: int = DEFAULT_BINS) -> np.ndarray:
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    return np.linspace(lo, hi, n_bins + 1)


def value_bins(values: Sequence[float]) -> np.ndarray:
    """Edges that put each distinct value at the centre of its own bin."""
    v = np.unique(np.asarray(values, dtype=np.float64))
    if v.size == 1:
        return np.array([v[0] - 0.5, v[0] + 0.5])
    mids = (v[1:] + v[:-1]) / 2
    return np.concatenate([[v[0] - (mids[0] - v[0])], mids, [v[-1] + (v[-1] - mids[-1])]])


def bin_centers(edges: np.ndarray) -> np.ndarray:
    edges = np.asarray(edges, dtype=np.float64)
    return (edges[1:] + edges[:-1]) / 2


@dataclass
class Dataset:
    trajectories: list[Trajectory]
    return_bins: np.ndarray
    catalog_size: int
    state_dim: int
    gamma: float = 1.0

    def __post_init__(self) -> None:
        self.return_bins = np.asarray(self.return_bins, dtype=np.float64)
        if self.return_bins.ndim != 1 or len(self.return_bins) < 2:
            raise ValueError("return_bins needs at least two edges")
        if not np.all(np.diff(self.return_bins) > 0):
            raise ValueError("bin edges must be strictly increasing")
        lo, hi = self.return_bins[0], self.return_bins[-1]
        for tr in self.trajectories:
            if tr.states.shape[1] != self.state_dim:
                raise ValueError(f"trajectory {tr.id!r} has state dim {tr.states.shape[1]}, expected {self.state_dim}")
            if len(tr) and (tr.actions.min() < 0 or tr.actions.max() >= self.catalog_size):
                raise ValueError(f"trajectory {tr.id!r} has an action outside [0, {self.catalog_size})")
            if tr.rtg.min() < lo - 1e-9 or tr.rtg.max() > hi + 1e-9:
                raise ValueError(f"trajectory {tr.id!r} has returns-to-go outside the bin range")

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def n_bins(self) -> int:
        return len(self.return_bins) - 1

    @classmethod
    def from_trajectories(cls, trajectories, catalog_size, state_dim, n_bins=DEFAULT_BINS, gamma=1.0):
        if trajectories:
            all_rtg = np.concatenate([t.rtg for t in trajectories])
            edges = uniform_bins(float(all_rtg.min()), float(all_rtg.max()), n_bins)
        else:
            edges = uniform_bins(0.0, 1.0, n_bins)
        return cls(list(trajectories), edges, catalog_size, state_dim, gamma)


def _f32_list(a) -> list:
    return [float(x) for x in np.asarray(a, dtype=np.float32).ravel()]


def save_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    header = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "catalog_size": int(ds.catalog_size),
        "state_dim": int(ds.state_dim),
        "gamma": float(ds.gamma),
        "return_bins": [float(x) for x in ds.return_bins],
    }
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for tr in ds.trajectories:
            rec = {
                "id": tr.id,
                "source": tr.source,
                "states": [_f32_list(s) for s in tr.states],
                "actions": [int(a) for a in tr.actions],
                "rewards": _f32_list(tr.rewards),
            }
            fh.write(json.dumps(rec, allow_nan=False) + "\n")


def _reject_constant(name):
    raise ValueError(f"non-finite number {name}")


def load_dataset(path) -> Dataset:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetFormatError(f"{path}: missing header")
    try:
        header = json.loads(lines[0], parse_constant=_reject_constant)
    except ValueError as exc:
        raise DatasetFormatError(f"{path}: malformed header: {exc}") from exc
    if header.get("format") != DATASET_FORMAT:
        raise DatasetFormatError(f"{path}: not a {DATASET_FORMAT} file")
    if header.get("version") != DATASET_VERSION:
        raise DatasetFormatError(f"{path}: unsupported dataset version {header.get('version')}")
    gamma = float(header.get("gamma", 1.0))
    state_dim = int(header["state_dim"])
    trajectories = []
    for idx, line in enumerate(lines[1:]):
        if not line.strip():
            continue
        try:
            rec = json.loads(line, parse_constant=_reject_constant)
            states = np.asarray(rec["states"], dtype=np.float32).reshape(-1, state_dim)
            tr = Trajectory(states, rec["actions"], rec["rewards"], id=str(rec["id"]),
                            source=str(rec["source"]), gamma=gamma)
        except (ValueError, KeyError, TypeError) as exc:
            raise DatasetFormatError(f"{path}: bad trajectory record {idx}: {exc}") from exc
        trajectories.append(tr)
    try:
        return Dataset(trajectories, header["return_bins"], int(header["catalog_size"]), state_dim, gamma)
    except ValueError as exc:
        raise DatasetFormatError(f"{path}: {exc}") from exc


def sample_batch(ds: Dataset, batch: int, T: int, rng_seed=None, random_length: bool = False,
                 rng: np.random.Generator | None = None) -> list[ContextWindow]:
    """Draw ``batch`` windows uniformly over (trajectory, step) pairs.

    By default the drawn step is the window's last step and windows that end
    before step ``T - 1`` come back shorter than ``T``; :func:`collate`
    left-pads them. With ``random_length`` the drawn step is the window's
    first step instead and the window runs up to ``T`` steps from there. Each
    prefix of a window trains a context of that length, so histories starting
    at any step of an episode appear in training.
    """
    if batch <= 0:
        raise ValueError("batch must be positive")
    if T < 1:
        raise ValueError("T must be >= 1")
    if len(ds) == 0:
        raise ValueError("cannot sample from an empty dataset")
    if rng is None:
        rng = np.random.default_rng(rng_seed)
    lengths = np.array([len(t) for t in ds.trajectories])
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    flat = rng.integers(0, offsets[-1], size=batch)
    out = []
    for f in flat:
        ti = int(np.searchsorted(offsets, f, side="right") - 1)
        t = int(f - offsets[ti])
        if random_length:
            end = min(t + T, int(lengths[ti])) - 1
            out.append(make_window(ds.trajectories[ti], end, end - t + 1))
        else:
            out.append(make_window(ds.trajectories[ti], t, min(T, t + 1)))
    return out


@dataclass
class WindowBatch:
    """Left-padded arrays for a list of windows; ``mask`` is True on real steps."""

    states: np.ndarray  # (B, T, d_s)
    rtg: np.ndarray  # (B, T)
    actions: np.ndarray  # (B, T)
    rewards: np.ndarray  # (B, T)
    mask: np.ndarray  # (B, T) bool

    def __len__(self) -> int:
        return len(self.actions)


def collate(windows: Sequence[ContextWindow], T: int | None = None) -> WindowBatch:
    if not windows:
        raise ValueError("no windows to collate")
    T = max(w.T for w in windows) if T is None else T
    d_s = windows[0].states.shape[1]
    n = len(windows)
    states = np.zeros((n, T, d_s), dtype=np.float32)
    rtg = np.zeros((n, T), dtype=np.float32)
    actions = np.zeros((n, T), dtype=np.int64)
    rewards = np.zeros((n, T), dtype=np.float32)
    mask = np.zeros((n, T), dtype=bool)
    for i, w in enumerate(windows):
        if w.T > T:
            raise ValueError(f"window of {w.T} steps exceeds context {T}")
        lo = T - w.T
        states[i, lo:] = w.states
        rtg[i, lo:] = w.rtg
        actions[i, lo:] = w.actions
        rewards[i, lo:] = w.rewards
        mask[i, lo:] = True
    return WindowBatch(states, rtg, actions, rewards, mask)


def clamp_return(value: float, edges: np.ndarray) -> float:
    lo, hi = float(edges[0]), float(edges[-1])
    if value < lo or value > hi:
        logger.warning("conditioning return %.4f outside [%.4f, %.4f]; clamped", value, lo, hi)
        return min(max(value, lo), hi)
    return float(value)


def relabel_rtg(window: ContextWindow, target_return: float, observed_reward: float | None = None,
                bins: np.ndarray | None = None) -> ContextWindow:
    """Place ``target_return`` at the newest return token.

    When ``observed_reward`` is given, ``next_target`` carries the remaining
    return ``target - reward`` to the following step.
    """
    if bins is not None:
        target_return = clamp_return(target_return, bins)
    rtg = np.array(window.rtg, dtype=np.float32, copy=True)
    rtg[-1] = target_return
    nxt = None if observed_reward is None else float(target_return - observed_reward)
    if nxt is not None and not math.isfinite(nxt):
        raise ValueError("non-finite carried target")
    return replace(window, rtg=rtg, next_target=nxt)
