"""Losses and the optimisation loop.

The total objective is ``L_Ne + L_Ng + lambda * L_language + L_max`` plus a
cross-entropy term that fits the return-bin distribution used at inference.
That last head reads detached features by default, so it does not shape the
shared backbone. Rewards and returns enter the losses divided by the model's
``reward_scale`` and ``return_scale``.
``L_max`` is expectile regression of the in-support maximal return, weighted
so that under-predicting a logged return costs ``alpha`` and over-predicting
it costs ``1 - alpha``.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import kernels
from .data import Dataset, collate, sample_batch
from .lm import TextCorpus, language_loss, make_language_batch
from .model import PolicyModel, batch_to_tensors, configure_trainable, save_model

logger = logging.getLogger(__name__)

LOSS_TERMS = ("L_Ne", "L_Ng", "L_lang", "L_max", "L_bin")


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, term: str):
        super().__init__(f"non-finite {term} at step {step}")
        self.step = step
        self.term = term


@dataclass
class TrainConfig:
    alpha: float = 0.99
    lam: float = 0.1
    lr: float = 3e-4
    batch: int = 64
    steps: int = 20000
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0
    aux_language: bool = True
    max_head: bool = True
    max_stop_grad: bool = False
    bin_stop_grad: bool = True
    random_history: bool = True
    lang_batch: int = 16
    lang_len: int = 64

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")


# -- expectile regression -----------------------------------------------------


def expectile_penalty(u, alpha: float):
    """``|alpha - 1(u < 0)| * u**2``; works on floats, arrays and tensors."""
    if isinstance(u, torch.Tensor):
        w = torch.where(u < 0, 1.0 - alpha, alpha)
        return w * u * u
    u = np.asarray(u, dtype=np.float64)
    out = np.where(u < 0, 1.0 - alpha, alpha) * u * u
    return float(out) if out.ndim == 0 else out


def expectile_loss(pred, target, alpha: float, weight=None):
    """Mean ``expectile_penalty(target - pred)``.

    Positive residuals (the logged return exceeds the prediction) carry weight
    ``alpha``, so for ``alpha -> 1`` the minimiser climbs to the largest
    logged return.
    """
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    pen = expectile_penalty(target - pred, alpha)
    if weight is None:
        return pen.mean()
    return (pen * weight).sum() / weight.sum().clamp(min=1)


def fit_scalar_expectile(values, alpha: float, max_iter: int = 200) -> float:
    """Minimise the empirical expectile loss over a scalar by Newton steps.

    The loss is piecewise quadratic, so each Newton step is exact on the
    current segment and the iteration terminates once the segment stops
    changing.
    """
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise ValueError("no values")
    m = float(x.mean())
    for _ in range(max_iter):
        u = x - m
        w = np.where(u < 0, 1.0 - alpha, alpha)
        grad = -2.0 * np.mean(w * u)
        hess = 2.0 * np.mean(w)
        m_new = m - grad / hess
        if m_new == m or abs(m_new - m) <= 1e-15 * max(1.0, abs(m)):
            return m_new
        m = m_new
    return m


def exact_expectile(values, alpha: float) -> float:
    """Closed-form segment sweep (compiled when available)."""
    return float(kernels.expectile_fit(np.asarray(values, dtype=np.float64), float(alpha)))


# -- DT losses -----------------------------------------------------------------


def _masked_mean(x, mask):
    if mask is None:
        return x.mean()
    m = mask.to(x.dtype)
    return (x * m).sum() / m.sum().clamp(min=1)


def reward_loss(r_hat, r, mask=None):
    """``mean_t (r_t - r_hat_t)**2``."""
    r_hat = torch.as_tensor(r_hat)
    r = torch.as_tensor(r, dtype=r_hat.dtype)
    if r_hat.shape != r.shape:
        raise ValueError(f"length mismatch: {tuple(r_hat.shape)} vs {tuple(r.shape)}")
    return _masked_mean((r - r_hat) ** 2, mask)


def action_loss(logits, actions, mask=None):
    """Mean negative log-likelihood of the logged actions."""
    logits = torch.as_tensor(logits)
    actions = torch.as_tensor(actions, dtype=torch.long)
    n = logits.shape[-1]
    if actions.numel() and (actions.min() < 0 or actions.max() >= n):
        raise ValueError(f"target action outside [0, {n})")
    nll = F.cross_entropy(logits.reshape(-1, n), actions.reshape(-1), reduction="none").view(actions.shape)
    return _masked_mean(nll, mask)


def bin_index(values, edges) -> torch.Tensor:
    """Bin of each value; values outside the edges land in the end bins."""
    edges_t = torch.as_tensor(np.asarray(edges), dtype=torch.float64)
    v = torch.as_tensor(values, dtype=torch.float64).clamp(edges_t[0], edges_t[-1])
    idx = torch.searchsorted(edges_t, v, right=True) - 1
    return idx.clamp(0, len(edges_t) - 2)


def return_bin_loss(logits, target_rtg, edges, mask=None):
    logits = torch.as_tensor(logits)
    idx = bin_index(target_rtg, edges)
    nll = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), idx.reshape(-1), reduction="none").view(idx.shape)
    return _masked_mean(nll, mask)


def total_loss(model: PolicyModel, rl_batch: dict, lang_batch, cfg: TrainConfig, edges):
    """Total objective and its per-term breakdown (floats)."""
    out = model(rl_batch["states"], rl_batch["rtg"], rl_batch["actions"], rl_batch["mask"],
                detach_expectile=cfg.max_stop_grad, detach_bins=cfg.bin_stop_grad)
    mask = rl_batch["mask"]
    terms = {
        "L_Ne": reward_loss(out["reward_pred"], rl_batch["rewards"] / model.cfg.reward_scale, mask),
        "L_Ng": action_loss(out["action_logits"], rl_batch["actions"], mask),
        "L_bin": return_bin_loss(out["return_logits"], rl_batch["rtg"], edges, mask),
    }
    zero = out["reward_pred"].sum() * 0.0
    if cfg.max_head:
        scale = model.cfg.return_scale
        target = rl_batch["rtg"].to(out["expectile"].dtype) / scale
        terms["L_max"] = expectile_loss(out["expectile"], target, cfg.alpha, weight=mask.to(target.dtype))
    else:
        terms["L_max"] = zero
    if cfg.aux_language and lang_batch is not None and cfg.lam > 0:
        terms["L_lang"] = language_loss(model, lang_batch)
    else:
        terms["L_lang"] = zero
    total = terms["L_Ne"] + terms["L_Ng"] + cfg.lam * terms["L_lang"] + terms["L_max"] + terms["L_bin"]
    return total, terms


def breakdown(total, terms, lam) -> dict:
    b = {k: float(v.detach()) for k, v in terms.items()}
    b["L_lang_weighted"] = lam * b["L_lang"]
    b["L_total"] = float(total.detach())
    return b


# -- training loop -------------------------------------------------------------


def train(model: PolicyModel, dataset: Dataset, corpus: TextCorpus | None, cfg: TrainConfig,
          log_path=None, checkpoint_dir=None, freeze_mode: str | None = None, meta: dict | None = None):
    """Adam with gradient-norm clipping; returns ``(model, log)``.

    One JSON line per step goes to ``log_path`` when given.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if cfg.aux_language and corpus is not None and not model.has_lm:
        raise ValueError("aux_language needs a model with LM projections")
    configure_trainable(model, freeze_mode, seed=cfg.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr, foreach=True)
    rng = np.random.default_rng(cfg.seed)
    lang_rng = np.random.default_rng([cfg.seed, 1])
    log = []
    fh = Path(log_path).open("w", encoding="utf-8") if log_path else None
    model.train()
    try:
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            for step in range(cfg.steps):
                windows = sample_batch(dataset, cfg.batch, model.cfg.T_max, rng=rng,
                                       random_length=cfg.random_history)
                rl = batch_to_tensors(collate(windows))
                lang = None
                if cfg.aux_language and corpus is not None:
                    lang = make_language_batch(corpus, cfg.lang_batch, min(cfg.lang_len, model.cfg.lm_ctx) + 1,
                                               rng=lang_rng)
                total, terms = total_loss(model, rl, lang, cfg, dataset.return_bins)
                for name, v in terms.items():
                    if not torch.isfinite(v):
                        raise TrainingDiverged(step, name)
                if not torch.isfinite(total):
                    raise TrainingDiverged(step, "L_total")
                opt.zero_grad()
                total.backward()
                gn = torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip) if cfg.grad_clip > 0 else \
                    torch.sqrt(sum((p.grad ** 2).sum() for p in params if p.grad is not None))
                opt.step()
                rec = {"step": step, **{k: round(v, 8) for k, v in breakdown(total, terms, cfg.lam).items()
                                        if k != "L_lang_weighted"}, "grad_norm": round(float(gn), 8)}
                log.append(rec)
                if fh:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
                if checkpoint_dir and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                    Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
                    save_model(model, Path(checkpoint_dir) / f"step{step + 1:06d}.ckpt",
                               meta={**(meta or {}), "step": step + 1})
    finally:
        if fh:
            fh.close()
    model.eval()
    return model, log


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
