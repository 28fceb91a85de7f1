"""``misret`` command line: gen-data, pretrain-lm, train, eval, stitch-demo.

Exit codes: 0 success, 1 usage error, 2 numerical failure, 3 failed check.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, stitch_demo_config
from .data import DatasetFormatError, load_dataset, save_dataset
from .env import build_stitch_toy
from .lm import load_corpus
from .model import CheckpointError, load_model, read_header, save_model
from .train import TrainingDiverged

logger = logging.getLogger("misret")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON experiment config")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("--seed", type=int, help="override the experiment seed")
    p.add_argument("--out-dir", help="override paths.out_dir")
    p.add_argument("-q", "--quiet", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="misret", description="Offline return-conditioned recommendation policies.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write the behaviour dataset and its provenance sidecar")
    _common(p)
    p.add_argument("--toy", action="store_true", help="write the two-trajectory stitching toy instead")
    p.add_argument("--force", action="store_true", help="overwrite existing files")

    p = sub.add_parser("pretrain-lm", help="pretrain the backbone on the text corpus")
    _common(p)
    p.add_argument("--corpus", help="text file (default: bundled corpus)")
    p.add_argument("--steps", type=int)
    p.add_argument("--check", action="store_true", help="exit 3 unless held-out NLL drops by 10%%")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("train", help="train a policy on the dataset")
    _common(p)
    p.add_argument("--ablate-lm", action="store_true", help="random init, no auxiliary language loss")
    p.add_argument("--ablate-max", action="store_true", help="no maximal-return head, no history search")
    p.add_argument("--embed", choices=["linear", "mlp"])
    p.add_argument("--freeze", choices=["lora", "frozen", "full"])
    p.add_argument("--steps", type=int)
    p.add_argument("--corpus", help="text file for the auxiliary language loss")
    p.add_argument("--sweep", metavar="SECTION.KEY=V1,V2,...", help="train and evaluate once per value")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("eval", help="roll a trained policy out in the simulated world")
    _common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--episodes", type=int, help="episodes per environment")
    p.add_argument("--n-envs", type=int)
    p.add_argument("--sweep", metavar="SECTION.KEY=V1,V2,...", help="evaluate once per value")

    p = sub.add_parser("stitch-demo", help="train on the stitching toy and check the stitched rollout")
    _common(p)
    p.add_argument("--seeds", type=int, default=1, help="independent runs (seeds 0..N-1 offset by --seed)")
    return ap


# -- config handling ----------------------------------------------------------


def resolve_config(args, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else (base or ExperimentConfig())
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        cfg = cfg.override(key.strip(), value)
    if args.seed is not None:
        cfg = cfg.override("seed", args.seed)
    if args.out_dir:
        cfg = cfg.override("paths.out_dir", json.dumps(args.out_dir))
    return cfg


def _apply_train_flags(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.ablate_lm and args.freeze in ("lora", "frozen"):
        raise UsageError(f"--ablate-lm trains a randomly initialised backbone; --freeze {args.freeze} would "
                         "leave it untrained")
    if args.freeze == "lora" and cfg.model.lora_rank < 1:
        raise UsageError("--freeze lora needs model.lora_rank >= 1")
    if args.ablate_lm:
        cfg = cfg.override("train.init_from_prior", False).override("train.aux_language", False)
        if args.freeze is None:
            cfg = cfg.override("model.freeze_mode", '"full"')
    if args.ablate_max:
        cfg = cfg.override("train.max_head", False)
    if args.embed:
        cfg = cfg.override("model.embed_kind", json.dumps(args.embed))
    if args.freeze:
        cfg = cfg.override("model.freeze_mode", json.dumps(args.freeze))
    if args.steps is not None:
        cfg = cfg.override("train.steps", args.steps)
    if args.corpus:
        cfg = cfg.override("paths.corpus", json.dumps(args.corpus))
    return cfg


def _parse_sweep(spec: str) -> tuple[str, list[str]]:
    key, sep, values = spec.partition("=")
    vals = [v for v in values.split(",") if v]
    if not sep or not vals:
        raise ConfigError(f"--sweep expects SECTION.KEY=V1,V2,..., got {spec!r}")
    return key.strip(), vals


def _emit(args, msg: str) -> None:
    if not args.quiet:
        print(msg, flush=True)


def _check_writable(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise UsageError(f"{path} exists; pass --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)


# -- commands -----------------------------------------------------------------


def cmd_gen_data(cfg: ExperimentConfig, args) -> int:
    from .pipeline import generate_dataset, write_json

    path = cfg.path("dataset")
    sidecar = path.with_name(path.name + ".provenance.json")
    _check_writable(path, args.force)
    _check_writable(sidecar, args.force)
    if args.toy:
        ds, _ = build_stitch_toy()
        prov = {"kind": "stitch_toy", "config": cfg.to_dict(), "config_digest": cfg.digest()}
    else:
        ds, prov = generate_dataset(cfg)
        prov["kind"] = "mixed_behaviour"
    save_dataset(ds, path)
    write_json(sidecar, prov)
    _emit(args, f"wrote {len(ds)} trajectories to {path}")
    _emit(args, f"wrote provenance to {sidecar}")
    return EXIT_OK


def _world_dims(cfg: ExperimentConfig) -> tuple[int, int]:
    return 2 * cfg.world.d_f, cfg.world.n_items


def cmd_pretrain_lm(cfg: ExperimentConfig, args) -> int:
    from .pipeline import pretrain_prior

    if args.corpus:
        cfg = cfg.override("paths.corpus", json.dumps(args.corpus))
    if args.steps is not None:
        cfg = cfg.override("train.lm_steps", args.steps)
    corpus = load_corpus(cfg.paths.corpus)
    path = cfg.path("prior")
    _check_writable(path, args.force)
    d_s, n_items = _world_dims(cfg)
    model, report = pretrain_prior(cfg, corpus, d_s, n_items, cfg.world.n_bins)
    save_model(model, path, meta={
        "kind": "lm_prior", "vocab": corpus.vocab, "corpus": corpus.source,
        "initial_nll": report.initial_nll, "final_nll": report.final_nll,
        "config": cfg.to_dict(), "config_digest": cfg.digest(),
    })
    _emit(args, f"held-out NLL before: {report.initial_nll:.4f}")
    _emit(args, f"held-out NLL after:  {report.final_nll:.4f} ({100 * report.reduction:.1f}% lower)")
    _emit(args, f"wrote prior to {path}")
    if args.check and not report.final_nll <= 0.9 * report.initial_nll:
        _emit(args, "CHECK FAILED: held-out NLL dropped by less than 10%")
        return EXIT_CHECK
    return EXIT_OK


def _load_training_inputs(cfg: ExperimentConfig):
    ds_path = cfg.path("dataset")
    if not ds_path.exists():
        raise UsageError(f"dataset {ds_path} not found; run `misret gen-data` first")
    ds = load_dataset(ds_path)
    prior = None
    if cfg.train.init_from_prior:
        prior = cfg.path("prior")
        if not prior.exists():
            raise UsageError(f"prior checkpoint {prior} not found; run `misret pretrain-lm` or pass --ablate-lm")
    corpus = load_corpus(cfg.paths.corpus) if cfg.train.aux_language else None
    return ds, prior, corpus


def _train_one(cfg: ExperimentConfig, args) -> Path:
    from .pipeline import train_policy, write_json

    ds, prior, corpus = _load_training_inputs(cfg)
    ckpt = cfg.path("checkpoint")
    _check_writable(ckpt, args.force)
    meta = {"variant": cfg.variant(), "config": cfg.to_dict(), "config_digest": cfg.digest(),
            "return_bins": [float(x) for x in ds.return_bins], "dataset": str(cfg.path("dataset"))}
    model, log, params = train_policy(cfg, ds, corpus, prior, log_path=cfg.path("train_log"), meta=meta)
    meta["parameters"] = params
    meta["final_loss"] = log[-1] if log else None
    save_model(model, ckpt, meta=meta)
    write_json(ckpt.with_name(ckpt.name + ".params.json"), params)
    _emit(args, f"variant {cfg.variant()}: trainable {params['trainable']}/{params['total']} parameters "
                f"({100 * params['trainable_fraction']:.1f}%; backbone "
                f"{100 * params['backbone_trainable_fraction']:.1f}%) groups={params['trainable_groups']}")
    if log:
        _emit(args, "final losses: " + json.dumps({k: v for k, v in log[-1].items() if k != "step"}, sort_keys=True))
    _emit(args, f"wrote checkpoint to {ckpt}")
    return ckpt


def cmd_train(cfg: ExperimentConfig, args) -> int:
    cfg = _apply_train_flags(cfg, args)
    if not args.sweep:
        _print_config(cfg, args)
        _train_one(cfg, args)
        return EXIT_OK
    key, values = _parse_sweep(args.sweep)
    summary = []
    for v in values:
        run = _sweep_run(cfg, key, v)
        _print_config(run, args)
        ckpt = _train_one(run, args)
        report = _eval_one(run, args, ckpt)
        summary.append({"key": key, "value": v, "R_avg": report["R_avg"], "R_cumu": report["R_cumu"],
                        "Length": report["Length"], "config_digest": run.digest()})
    _write_sweep(cfg, key, summary, args)
    return EXIT_OK


def _sweep_run(cfg: ExperimentConfig, key: str, value: str) -> ExperimentConfig:
    run = cfg.override(key, value)
    return run.override("paths.out_dir", json.dumps(str(Path(cfg.paths.out_dir) / f"sweep-{key}={value}")))


def _write_sweep(cfg, key, summary, args) -> None:
    from .pipeline import write_json

    path = Path(cfg.paths.out_dir) / f"sweep-{key}.json"
    write_json(path, {"key": key, "runs": summary, "config": cfg.to_dict(), "config_digest": cfg.digest()})
    for s in summary:
        _emit(args, f"{key}={s['value']}: R_avg {s['R_avg']['mean']:.4f} R_cumu {s['R_cumu']['mean']:.3f} "
                    f"Length {s['Length']['mean']:.2f}")
    _emit(args, f"wrote sweep summary to {path}")


def _eval_one(cfg: ExperimentConfig, args, ckpt: Path | None = None) -> dict:
    from .pipeline import evaluate_policy, write_json

    ckpt = ckpt or getattr(args, "checkpoint", None) or cfg.path("checkpoint")
    if not Path(ckpt).exists():
        raise UsageError(f"checkpoint {ckpt} not found")
    header, _ = read_header(ckpt)
    mcfg = header["cfg"]
    d_s, n_items = _world_dims(cfg)
    if mcfg["d_s"] != d_s or mcfg["n_items"] != n_items:
        raise CheckpointError(f"checkpoint expects state_dim={mcfg['d_s']}, n_items={mcfg['n_items']} but the "
                              f"configured world has state_dim={d_s}, n_items={n_items}")
    edges = header.get("meta", {}).get("return_bins")
    if not edges:
        raise CheckpointError(f"{ckpt}: no return bins recorded in the checkpoint")
    if mcfg["T_max"] != cfg.model.T_max:
        cfg = cfg.override("model.T_max", mcfg["T_max"])
    model = load_model(ckpt)
    episodes = getattr(args, "episodes", None)
    n_envs = getattr(args, "n_envs", None)
    report = evaluate_policy(cfg, model, edges, episodes_per_env=episodes, n_envs=n_envs)
    report["checkpoint_variant"] = header.get("meta", {}).get("variant")
    report["train_config_digest"] = header.get("meta", {}).get("config_digest")
    report["config"] = cfg.to_dict()
    out = cfg.path("report")
    write_json(out, report)
    _emit(args, f"R_cumu {report['R_cumu']['mean']:.4f} +- {report['R_cumu']['std']:.4f}  "
                f"R_avg {report['R_avg']['mean']:.4f} +- {report['R_avg']['std']:.4f}  "
                f"Length {report['Length']['mean']:.2f}")
    _emit(args, f"wrote report to {out}")
    return report


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    if args.episodes is not None and args.episodes < 1:
        raise UsageError("--episodes must be >= 1")
    if args.n_envs is not None and args.n_envs < 1:
        raise UsageError("--n-envs must be >= 1")
    if not args.sweep:
        _print_config(cfg, args)
        _eval_one(cfg, args)
        return EXIT_OK
    key, values = _parse_sweep(args.sweep)
    ckpt = args.checkpoint or cfg.path("checkpoint")
    summary = []
    for v in values:
        run = _sweep_run(cfg, key, v)
        _print_config(run, args)
        report = _eval_one(run, args, ckpt)
        summary.append({"key": key, "value": v, "R_avg": report["R_avg"], "R_cumu": report["R_cumu"],
                        "Length": report["Length"], "config_digest": run.digest()})
    _write_sweep(cfg, key, summary, args)
    return EXIT_OK


def cmd_stitch_demo(cfg: ExperimentConfig, args) -> int:
    from .pipeline import stitch_demo, write_json

    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    results = []
    for i in range(args.seeds):
        seed = cfg.seed + i
        r = stitch_demo(cfg, seed)
        results.append(r)
        for start in ("s_b0", "s_a0"):
            s = r[start]
            _emit(args, f"seed {seed} from {start}: T* at s_mid = {s['T_star_at_mid']}, terminal {s['terminal']}, "
                        f"return {s['return']:g}, path {' -> '.join(s['path'])}")
        est = {k: {T: round(v, 4) for T, v in d.items()} for k, d in r["R_hat"].items()}
        _emit(args, f"seed {seed} R_hat at s_mid: {est}")
        for name, ok in r["checks"].items():
            _emit(args, f"  [{'pass' if ok else 'FAIL'}] {name}")
    passed = sum(r["passed"] for r in results)
    _emit(args, f"stitch demo: {passed}/{len(results)} seeds passed")
    write_json(Path(cfg.paths.out_dir) / "stitch_demo.json",
               {"runs": results, "passed": passed, "config": cfg.to_dict(), "config_digest": cfg.digest()})
    return EXIT_OK if passed == len(results) else EXIT_CHECK


def _print_config(cfg: ExperimentConfig, args) -> None:
    _emit(args, f"config {cfg.digest()}: {json.dumps(cfg.to_dict(), sort_keys=True)}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-lm": cmd_pretrain_lm,
    "train": cmd_train,
    "eval": cmd_eval,
    "stitch-demo": cmd_stitch_demo,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        base = stitch_demo_config() if args.command == "stitch-demo" else None
        cfg = resolve_config(args, base)
        if args.command not in ("train", "eval"):
            _print_config(cfg, args)
        return COMMANDS[args.command](cfg, args)
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"misret: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, CheckpointError, DatasetFormatError, FileNotFoundError, ValueError) as exc:
        print(f"misret: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
