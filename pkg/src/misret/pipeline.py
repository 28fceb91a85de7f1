"""End-to-end steps shared by the command line and the acceptance tests."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .data import Dataset
from .env import StitchToyEnv, build_stitch_toy, gen_mixed_data, make_world, parallel_eval_envs
from .infer import History, Policy, estimate_max_returns, rollout_eval, run_episode
from .lm import TextCorpus, pretrain_lm
from .model import PolicyModel, init_model, parameter_report, read_header
from .train import train

logger = logging.getLogger(__name__)


def generate_dataset(cfg: ExperimentConfig) -> tuple[Dataset, dict]:
    """Mixed-quality behaviour data from the configured world, plus its provenance."""
    world = make_world(cfg.world_spec())
    mix = [tuple(m) for m in cfg.world.mix]
    ds = gen_mixed_data(world, mix, cfg.world.episodes, seed=[cfg.seed, 11], n_bins=cfg.world.n_bins)
    provenance = {
        "world_spec": asdict(cfg.world_spec()),
        "data_seed": [cfg.seed, 11],
        "mix": [list(m) for m in mix],
        "episodes": cfg.world.episodes,
        "config": cfg.to_dict(),
        "config_digest": cfg.digest(),
    }
    return ds, provenance


def return_scale(ds: Dataset) -> float:
    top = float(np.max(np.abs(ds.return_bins)))
    return top if top > 0 else 1.0


def reward_scale(ds: Dataset) -> float:
    top = max((float(np.max(np.abs(t.rewards))) for t in ds.trajectories), default=0.0)
    return top if top > 0 else 1.0


def pretrain_prior(cfg: ExperimentConfig, corpus: TextCorpus, d_s: int, n_items: int, n_bins: int, path=None):
    mcfg = cfg.model_config(d_s, n_items, n_bins)
    return pretrain_lm(mcfg, corpus, cfg.train.lm_steps, lr=cfg.train.lm_lr, seed=cfg.seed,
                       batch=cfg.train.lm_batch, path=path)


def build_policy_model(cfg: ExperimentConfig, ds: Dataset, prior=None,
                       corpus: TextCorpus | None = None) -> PolicyModel:
    """Fresh policy network; the backbone comes from ``prior`` when the config asks for it."""
    use_prior = cfg.train.init_from_prior
    if use_prior and prior is None:
        raise ValueError("init_from_prior is set but no prior checkpoint was given")
    vocab = 0
    if use_prior:
        vocab = prior.cfg.vocab_size if isinstance(prior, PolicyModel) else read_header(prior)[0]["cfg"]["vocab_size"]
    elif cfg.train.aux_language and corpus is not None:
        vocab = corpus.n_tokens
    mcfg = cfg.model_config(ds.state_dim, ds.catalog_size, ds.n_bins, vocab_size=vocab,
                            return_scale=return_scale(ds), reward_scale=reward_scale(ds))
    return init_model(mcfg, prior_checkpoint=prior if use_prior else None, seed=cfg.seed)


def train_policy(cfg: ExperimentConfig, ds: Dataset, corpus: TextCorpus | None, prior=None,
                 log_path=None, meta: dict | None = None):
    """Build, train and return ``(model, loss_log, parameter_report)``."""
    model = build_policy_model(cfg, ds, prior, corpus)
    tcfg = cfg.train_config()
    use_corpus = corpus if tcfg.aux_language and model.has_lm else None
    if tcfg.aux_language and use_corpus is None:
        tcfg.aux_language = False
    model, log = train(model, ds, use_corpus, tcfg, log_path=log_path, freeze_mode=cfg.model.freeze_mode,
                       meta=meta)
    return model, log, parameter_report(model)


def evaluate_policy(cfg: ExperimentConfig, model: PolicyModel, edges, episodes_per_env: int | None = None,
                    n_envs: int | None = None) -> dict:
    """Roll the policy out in fresh copies of the configured world."""
    world = make_world(cfg.world_spec())
    n = cfg.search.n_envs if n_envs is None else n_envs
    per = cfg.search.episodes_per_env if episodes_per_env is None else episodes_per_env
    if n < 1 or per < 1:
        raise ValueError("evaluation needs at least one environment and one episode")
    envs = parallel_eval_envs(world, n, seed=[cfg.seed, 23])
    policy = Policy(model, edges, cfg.search_config())
    report = rollout_eval(policy, envs, per, seed=cfg.seed)
    report["config_digest"] = cfg.digest()
    report["variant"] = cfg.variant()
    return report


# -- stitching demo --------------------------------------------------------------


def _toy_history(start: str, action: int, reward: float, rtg: float) -> History:
    eye = np.eye(5, dtype=np.float32)
    names = ("s_a0", "s_b0", "s_mid")
    return History(states=[eye[names.index(start)], eye[2]], actions=[action], rewards=[reward], rtg=[rtg])


def stitch_demo(cfg: ExperimentConfig, seed: int) -> dict:
    """Train on the two-trajectory toy and check the stitched rollout.

    Passes when, from ``s_b0``, the search truncates to the current state at
    ``s_mid`` and collects 1.5; from ``s_a0`` it keeps the full history and
    collects 1.0; and the maximal-return estimates at ``s_mid`` sit near 1
    (length 1) and near 0 (length 2 after the ``s_b0`` prefix).
    """
    ds, _ = build_stitch_toy()
    run_cfg = cfg.override("seed", seed)
    model = build_policy_model(run_cfg, ds)
    model, _ = train(model, ds, None, run_cfg.train_config(), freeze_mode=run_cfg.model.freeze_mode)
    policy = Policy(model, ds.return_bins, run_cfg.search_config())
    scfg = run_cfg.search_config()
    out = {"seed": seed, "checks": {}}
    expected = {"s_b0": (1, 1.5), "s_a0": (2, 1.0)}
    for start, (want_T, want_R) in expected.items():
        env = StitchToyEnv(start)
        rec = run_episode(policy, env, np.random.default_rng([seed, 5]))
        t_mid = rec["T_star"][1] if len(rec["T_star"]) > 1 else None
        terminal = env.visited[-1]
        out[start] = {"T_star_at_mid": t_mid, "terminal": terminal, "return": rec["R_cumu"],
                      "path": list(env.visited)}
        out["checks"][f"{start}: T*={want_T} at s_mid"] = t_mid == want_T
        out["checks"][f"{start}: return {want_R}"] = abs(rec["R_cumu"] - want_R) < 1e-6
        out["checks"][f"{start}: terminal s_a1"] = terminal == "s_a1"
    est_b = dict(estimate_max_returns(model, _toy_history("s_b0", 0, 0.5, 0.5), scfg))
    est_a = dict(estimate_max_returns(model, _toy_history("s_a0", 0, 0.0, 1.0), scfg))
    out["R_hat"] = {"B_prefix": est_b, "A_prefix": est_a}
    out["checks"]["R_hat(T=1) in [0.9, 1.1]"] = 0.9 <= est_b[1] <= 1.1 and 0.9 <= est_a[1] <= 1.1
    out["checks"]["R_hat(T=2 | B-prefix) in [-0.1, 0.1]"] = -0.1 <= est_b[2] <= 0.1
    out["passed"] = all(out["checks"].values())
    return out


def write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")



# -- ablation study --------------------------------------------------------------

ABLATIONS = {
    "full": {},
    "no_max": {"train.max_head": False},
    "no_lm": {"train.init_from_prior": False, "train.aux_language": False, "model.freeze_mode": "full"},
    "linear_embed": {"model.embed_kind": "linear"},
}


def variant_config(cfg: ExperimentConfig, name: str) -> ExperimentConfig:
    for k, v in ABLATIONS[name].items():
        cfg = cfg.override(k, json.dumps(v))
    return cfg


def run_ablation(cfg: ExperimentConfig, seeds, variants=tuple(ABLATIONS), corpus: TextCorpus | None = None,
                 progress=None) -> dict:
    """Train and evaluate every variant on every seed; one dataset and one prior per seed.

    Each policy is also evaluated with the other action decoding mode; that
    number is recorded alongside but the configured mode is the headline.
    """
    from .lm import load_corpus

    corpus = corpus or load_corpus(cfg.paths.corpus)
    results: dict[str, list] = {v: [] for v in variants}
    for seed in seeds:
        base = cfg.override("seed", seed)
        ds, _ = generate_dataset(base)
        prior = None
        if any(variant_config(base, v).train.init_from_prior for v in variants):
            prior, _ = pretrain_prior(base, corpus, ds.state_dim, ds.catalog_size, ds.n_bins)
        for v in variants:
            vcfg = variant_config(base, v)
            model, log, _ = train_policy(vcfg, ds, corpus, prior if vcfg.train.init_from_prior else None)
            report = evaluate_policy(vcfg, model, ds.return_bins)
            other = "sample" if vcfg.search.action_mode == "greedy" else "greedy"
            alt = evaluate_policy(vcfg.override("search.action_mode", json.dumps(other)), model, ds.return_bins)
            row = {"seed": seed, "R_avg": report["R_avg"]["mean"], "R_cumu": report["R_cumu"]["mean"],
                   "Length": report["Length"]["mean"], f"R_avg_{other}": alt["R_avg"]["mean"],
                   "final_loss": log[-1]["L_total"]}
            results[v].append(row)
            if progress:
                progress(v, row)
    summary = {v: {m: float(np.mean([r[m] for r in rows])) for m in rows[0] if m.startswith(("R_", "Length"))}
               for v, rows in results.items() if rows}
    return {"runs": results, "mean": summary}
