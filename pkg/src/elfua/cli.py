"""Command-line entry points: train, adapt, eval, ablate, gen-synth.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import torch

from .adaptation import MODES, MissingLabelsError, adapt, evaluate_protocol
from .config import ConfigError, TrainConfig, build_run_config, load_config, tiny_model_config
from .data import SchemaError, load_manifest
from .experiments import run_sweep, sweep_csv, sweep_table
from .meta import train
from .network import init_model, load_checkpoint, save_checkpoint
from .synthworld import SynthWorldConfig, generate_world

log = logging.getLogger("elfua")

TRAIN_FLAGS = {
    # flag: (section, key, type)
    "steps": ("train", "total_outer_steps", int),
    "alpha": ("train", "alpha", float),
    "beta": ("train", "beta", float),
    "gamma": ("train", "gamma", float),
    "inner_steps": ("train", "inner_steps", int),
    "shots": ("train", "shots", int),
    "query_size": ("train", "query_size", int),
    "n_tasks": ("train", "n_tasks", int),
    "source_batch": ("train", "source_batch", int),
    "checkpoint_every": ("train", "checkpoint_every", int),
    "seed": ("train", "seed", int),
    "backbone": ("model", "backbone_depth", str),
    "image_size": ("model", "image_size", int),
}


def _add_train_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("hyperparameters (override the config file)")
    g.add_argument("--steps", type=int, help="total outer steps")
    g.add_argument("--alpha", type=float, help="inner learning rate")
    g.add_argument("--beta", type=float, help="meta learning rate")
    g.add_argument("--gamma", type=float, help="joint MMD weight")
    g.add_argument("--inner-steps", type=int, help="inner gradient steps G")
    g.add_argument("--shots", type=int, help="support size K")
    g.add_argument("--query-size", type=int, help="query size t")
    g.add_argument("--n-tasks", type=int, help="meta-batch size n")
    g.add_argument("--source-batch", type=int, help="source mini-batch per task")
    g.add_argument("--checkpoint-every", type=int, help="checkpoint period in outer steps")
    g.add_argument("--seed", type=int, help="run seed (ELFUA_SEED overrides the config file)")
    g.add_argument("--second-order", action="store_true", default=None, help="backpropagate through the inner loop")
    g.add_argument("--backbone", choices=("full", "tiny"), help="backbone variant")
    g.add_argument("--image-size", type=int, help="input resolution")


def _overrides(args) -> dict:
    out: dict[str, dict] = {"model": {}, "train": {}}
    for flag, (section, key, _) in TRAIN_FLAGS.items():
        val = getattr(args, flag, None)
        if val is not None:
            out[section][key] = val
    if getattr(args, "second_order", None):
        out["train"]["second_order"] = True
    return out


def _run_config(args):
    if getattr(args, "config", None):
        cfg = load_config(args.config, _overrides(args))
    else:
        cfg = build_run_config(None, _overrides(args))
    if args.seed is not None:
        # Explicit flag beats the environment variable.
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
    return cfg


def _write_run_manifest(out: Path, command: str, config: dict, seed: int, artifacts: Sequence, started: float,
                        name: str = "run_manifest.json"):
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": config,
        "seed": seed,
        "artifacts": [str(a) for a in artifacts],
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (out / name).write_text(json.dumps(manifest, indent=1, sort_keys=True))


def cmd_train(args) -> int:
    started = time.time()
    cfg = _run_config(args)
    if cfg.train.total_outer_steps < 1:
        raise ConfigError("set --steps or [train] total_outer_steps to a positive step count")
    source = load_manifest(args.source, "source", image_size=cfg.model.image_size)
    persons = load_manifest(
        args.persons, "person-specific", image_size=cfg.model.image_size,
        min_per_person=cfg.train.shots + cfg.train.query_size, min_samples_filter=args.min_samples,
    )
    out = Path(args.out)
    state = init_model(cfg.model, cfg.train.seed, pretrained=args.pretrained)
    train(source, persons, cfg.train, out, kernel=cfg.kernel, state=state, jobs=args.jobs)
    arts = [out / "final.ckpt", out / "train_log.jsonl", out / "metrics.csv"]
    _write_run_manifest(out, "train", {**cfg.to_dict(), "source": str(args.source), "persons": str(args.persons)},
                        cfg.train.seed, arts, started)
    print(f"checkpoint written to {out / 'final.ckpt'}")
    return 0


def _train_config_from(meta: dict, args) -> TrainConfig:
    saved = dict(meta.get("extra", {}).get("train_config") or {"total_outer_steps": 0})
    for flag in ("alpha", "inner_steps"):
        val = getattr(args, flag, None)
        if val is not None:
            saved[flag] = val
    return TrainConfig(**saved).validate()


def cmd_adapt(args) -> int:
    started = time.time()
    state, meta = load_checkpoint(args.ckpt)
    cfg = _train_config_from(meta, args)
    persons = load_manifest(args.persons, "person-specific", image_size=state.config.image_size,
                            oracle_mode=args.oracle_mode, min_per_person=1)
    if args.person_id not in persons.persons:
        raise SchemaError(f"person {args.person_id!r} not in {args.persons}")
    samples = persons.persons[args.person_id][: args.support_size]
    adapted = adapt(state, samples, cfg, seed=args.seed, person_id=args.person_id)
    with torch.no_grad():
        for name, p in state.adaptable_params.items():
            p.copy_(adapted.params[name])
    out = Path(args.out)
    save_checkpoint(out, state, seed=args.seed, extra={**meta.get("extra", {}), "adapted_to": args.person_id,
                                                      "inner_losses": adapted.inner_losses})
    _write_run_manifest(out.parent, "adapt", {"train": dataclasses.asdict(cfg), "ckpt": str(args.ckpt),
                                              "person_id": args.person_id, "support_size": args.support_size},
                        args.seed, [out], started, name=out.name + ".run_manifest.json")
    print(f"adapted checkpoint for {args.person_id} written to {out}")
    return 0


def cmd_eval(args) -> int:
    started = time.time()
    state, meta = load_checkpoint(args.ckpt)
    cfg = _train_config_from(meta, args)
    modes = args.mode or ["ours"]
    try:
        persons = load_manifest(args.persons, "person-specific", image_size=state.config.image_size,
                                oracle_mode=True, min_per_person=args.support_size + 1)
    except SchemaError as exc:
        raise MissingLabelsError(f"evaluation needs yaw and pitch on every row of {args.persons}: {exc}") from None
    out = Path(args.out) if args.out else Path(args.ckpt).parent / "eval"
    reports = {}
    for mode in modes:
        rep = evaluate_protocol(state, persons, cfg, mode, support_size=args.support_size, seed=args.seed,
                                support_draws=args.support_draws, jobs=args.jobs)
        reports[mode] = rep
        print(f"== {mode} ==")
        print(rep.to_table())
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps({m: r.to_dict() for m, r in reports.items()}, indent=1, sort_keys=True))
    (out / "report.txt").write_text("\n\n".join(r.to_table() for r in reports.values()) + "\n")
    _write_run_manifest(out, "eval", {"train": dataclasses.asdict(cfg), "modes": modes, "ckpt": str(args.ckpt),
                                      "support_size": args.support_size, "support_draws": args.support_draws},
                        args.seed, [out / "report.json", out / "report.txt"], started)
    return 0


def cmd_ablate(args) -> int:
    started = time.time()
    cfg = _run_config(args)
    grid = {k: v for k, v in (("inner_steps", args.G), ("shots", args.K), ("gamma", args.gammas),
                              ("n_tasks", args.n_tasks_sweep)) if v}
    # Sweeps run on the synthetic world with the tiny backbone unless told otherwise.
    size = args.image_size or 32
    world = SynthWorldConfig(
        n_train_persons=args.train_persons, n_test_persons=args.test_persons,
        samples_per_person=args.samples_per_person, bias_scale=args.bias_scale, image_size=size,
    )
    model_cfg = dataclasses.replace(cfg.model, image_size=size) if args.backbone else tiny_model_config(image_size=size)
    out = Path(args.out)
    rows = run_sweep(out, cfg.train, grid, args.seeds or [cfg.train.seed], world, model_cfg, cfg.kernel)
    (out / "sweep.csv").write_text(sweep_csv(rows))
    (out / "sweep.txt").write_text(sweep_table(rows) + "\n")
    print(sweep_table(rows))
    _write_run_manifest(out, "ablate", {**cfg.to_dict(), "grid": grid, "world": dataclasses.asdict(world)},
                        cfg.train.seed, [out / "sweep.csv", out / "sweep.txt"], started)
    return 0


def cmd_gensynth(args) -> int:
    started = time.time()
    seed = args.seed if args.seed is not None else int(os.environ.get("ELFUA_SEED", 0))
    cfg = SynthWorldConfig(
        n_train_persons=args.train_persons, n_test_persons=args.test_persons,
        samples_per_person=args.samples_per_person, n_source_persons=args.source_persons,
        source_samples_per_person=args.source_samples_per_person, image_size=args.image_size,
        bias_scale=args.bias_scale, appearance_shift=args.appearance_shift, seed=seed,
    )
    paths = generate_world(cfg, args.out)
    _write_run_manifest(Path(args.out), "gen-synth", dataclasses.asdict(cfg), seed, paths, started)
    for p in paths:
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="elfua", description="Label-free user adaptation for gaze estimation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="meta-train on labeled source + unlabeled person data")
    p.add_argument("--config", help="TOML config with [model], [train], [kernel] sections")
    p.add_argument("--source", required=True, help="labeled source manifest (JSON lines)")
    p.add_argument("--persons", required=True, help="unlabeled person-specific manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--pretrained", help="checkpoint to copy backbone weights from")
    p.add_argument("--min-samples", type=int, default=0, help="drop persons with fewer samples (0 keeps all)")
    p.add_argument("--jobs", type=int, default=1, help="per-task threads (non-deterministic summation order)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="adapt a checkpoint to one person from unlabeled images")
    p.add_argument("--ckpt", required=True, help="meta-trained checkpoint")
    p.add_argument("--persons", required=True, help="person manifest holding the support images")
    p.add_argument("--person-id", required=True, help="person to adapt to")
    p.add_argument("--support-size", type=int, default=5, help="number of support images (first N rows)")
    p.add_argument("--oracle-mode", action="store_true", help="accept labeled rows (labels are ignored)")
    p.add_argument("--alpha", type=float, help="override the training alpha")
    p.add_argument("--inner-steps", type=int, help="override the training G")
    p.add_argument("--seed", type=int, default=0, help="pretext sampling seed")
    p.add_argument("--out", required=True, help="adapted checkpoint path")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a labeled person manifest")
    p.add_argument("--ckpt", required=True, help="checkpoint to evaluate")
    p.add_argument("--persons", required=True, help="labeled person-specific manifest")
    p.add_argument("--mode", action="append", choices=MODES, help="repeatable; default: ours")
    p.add_argument("--support-size", type=int, default=5, help="unlabeled support images per person")
    p.add_argument("--support-draws", type=int, default=1, help="average over this many support draws")
    p.add_argument("--alpha", type=float, help="override the training alpha")
    p.add_argument("--inner-steps", type=int, help="override the training G")
    p.add_argument("--seed", type=int, default=0, help="support selection seed")
    p.add_argument("--jobs", type=int, default=1, help="per-person threads")
    p.add_argument("--out", help="directory for report.json / report.txt (default: <ckpt dir>/eval)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep G, K, gamma, n on a synthetic world")
    p.add_argument("--config", help="base TOML config")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--G", type=int, nargs="+", help="inner step counts")
    p.add_argument("--K", type=int, nargs="+", help="support sizes")
    p.add_argument("--gammas", type=float, nargs="+", help="joint MMD weights")
    p.add_argument("--n-tasks-sweep", type=int, nargs="+", help="meta-batch sizes")
    p.add_argument("--seeds", type=int, nargs="+", help="world/training seeds")
    p.add_argument("--train-persons", type=int, default=40, help="unlabeled meta-training persons")
    p.add_argument("--test-persons", type=int, default=20, help="held-out labeled persons")
    p.add_argument("--samples-per-person", type=int, default=40, help="images per person")
    p.add_argument("--bias-scale", type=float, default=0.25, help="per-person gaze offset range (rad)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gen-synth", help="write a synthetic world (PNG images + manifests)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--train-persons", type=int, default=40, help="unlabeled meta-training persons")
    p.add_argument("--test-persons", type=int, default=20, help="held-out labeled persons")
    p.add_argument("--samples-per-person", type=int, default=40, help="images per person")
    p.add_argument("--source-persons", type=int, default=100, help="persons behind the labeled source set")
    p.add_argument("--source-samples-per-person", type=int, default=20, help="source images per source person")
    p.add_argument("--image-size", type=int, default=32, help="rendered resolution")
    p.add_argument("--bias-scale", type=float, default=0.25, help="per-person gaze offset range (rad)")
    p.add_argument("--appearance-shift", type=float, default=1.0,
                   help="0 = persons look like the source population, 1 = fully shifted")
    p.add_argument("--seed", type=int, help="world seed (default: ELFUA_SEED or 0)")
    p.set_defaults(func=cmd_gensynth)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, SchemaError, MissingLabelsError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"elfua {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any module failure maps to exit 1
        print(f"elfua {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
