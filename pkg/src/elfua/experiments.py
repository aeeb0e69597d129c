"""End-to-end synthetic pipelines shared by the CLI, scripts and acceptance tests."""
from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .adaptation import RunReport, evaluate_protocol
from .config import KernelSpec, ModelConfig, TrainConfig, tiny_model_config
from .data import load_manifest
from .meta import train, train_supervised
from .synthworld import SynthWorldConfig, generate_world

log = logging.getLogger(__name__)

# Default hyperparameters with beta raised for the tiny backbone and a few hundred steps.
SYNTH_TRAIN = dict(alpha=1e-2, beta=3e-3, gamma=0.1, inner_steps=3, shots=5, query_size=5,
                   n_tasks=10, source_batch=32, total_outer_steps=1000, second_order=True)


@dataclass
class Table1Result:
    seed: int
    baseline: RunReport
    no_adapt: RunReport
    ours: RunReport
    oracle: RunReport
    artifacts: dict = field(default_factory=dict)

    def means(self) -> dict[str, float]:
        return {
            "Baseline": self.baseline.mean_post,
            "Ours (w/o adaptation)": self.no_adapt.mean_post,
            "Ours": self.ours.mean_post,
            "Oracle": self.oracle.mean_post,
        }

    def fraction_improved(self) -> float:
        pairs = zip(self.ours.records, self.no_adapt.records)
        return float(np.mean([o.error_post_deg < n.error_post_deg for o, n in pairs]))

    def ordering_holds(self) -> bool:
        m = self.means()
        return (
            m["Oracle"] <= m["Ours"] <= m["Ours (w/o adaptation)"] <= m["Baseline"]
            and m["Ours"] < m["Ours (w/o adaptation)"]
            and self.fraction_improved() >= 0.6
        )

    def table(self) -> str:
        rows = [f"{'Method':<24}{'Error (deg)':>12}"]
        rows += [f"{k:<24}{v:>12.2f}" for k, v in self.means().items()]
        return "\n".join(rows)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "means": self.means(),
            "fraction_improved": self.fraction_improved(),
            "ordering_holds": self.ordering_holds(),
            "reports": {k: r.to_dict() for k, r in
                        (("baseline", self.baseline), ("no-adapt", self.no_adapt),
                         ("ours", self.ours), ("oracle", self.oracle))},
        }


def load_world(world_dir: Path, image_size: int, min_per_person: int = 10):
    source = load_manifest(world_dir / "source.jsonl", "source", image_size=image_size)
    persons = load_manifest(world_dir / "persons_train.jsonl", "person-specific",
                            image_size=image_size, min_per_person=min_per_person)
    test = load_manifest(world_dir / "persons_test.jsonl", "person-specific", image_size=image_size,
                         oracle_mode=True, min_per_person=min_per_person)
    return source, persons, test


def run_table1(
    work_dir: str | Path,
    seed: int,
    world: Optional[SynthWorldConfig] = None,
    train_cfg: Optional[TrainConfig] = None,
    model_cfg: Optional[ModelConfig] = None,
    kernel: KernelSpec = KernelSpec(),
    eval_support: Optional[int] = None,
) -> Table1Result:
    """Generate a world, train the baseline and the meta-learner, evaluate all four rows."""
    work = Path(work_dir)
    world = world or SynthWorldConfig(seed=seed)
    train_cfg = train_cfg or TrainConfig(seed=seed, **SYNTH_TRAIN)
    model_cfg = model_cfg or tiny_model_config(image_size=world.image_size)
    world_dir = work / "world"
    generate_world(world, world_dir)
    source, persons, test = load_world(world_dir, model_cfg.image_size,
                                       min_per_person=train_cfg.shots + train_cfg.query_size)
    baseline = train_supervised(source, train_cfg, model_cfg, work / "baseline")
    ours = train(source, persons, train_cfg, work / "meta", model_cfg, kernel)
    k = eval_support or train_cfg.shots
    ev = lambda st, mode: evaluate_protocol(st, test, train_cfg, mode, support_size=k, seed=seed)
    result = Table1Result(seed, ev(baseline, "no-adapt"), ev(ours, "no-adapt"), ev(ours, "ours"), ev(ours, "oracle"))
    result.artifacts = {
        "world": str(world_dir),
        "baseline_ckpt": str(work / "baseline" / "baseline.ckpt"),
        "meta_ckpt": str(work / "meta" / "final.ckpt"),
        "train_config": dataclasses.asdict(train_cfg),
        "world_config": dataclasses.asdict(world),
    }
    (work / "table1.json").write_text(json.dumps(result.to_dict(), indent=1, sort_keys=True))
    (work / "table1.txt").write_text(result.table() + "\n")
    return result


SWEEP_KEYS = ("inner_steps", "shots", "gamma", "n_tasks")
SWEEP_LABELS = {"inner_steps": "G", "shots": "K", "gamma": "gamma", "n_tasks": "n"}


@dataclass
class SweepRow:
    settings: dict
    errors: dict  # seed -> mean post-adaptation error on test persons

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.errors.values())))


def run_sweep(
    work_dir: str | Path,
    base: TrainConfig,
    grid: dict[str, list],
    seeds: list[int],
    world: Optional[SynthWorldConfig] = None,
    model_cfg: Optional[ModelConfig] = None,
    kernel: KernelSpec = KernelSpec(),
) -> list[SweepRow]:
    """Meta-train and evaluate ``ours`` for every point of the cross-product of ``grid``.

    Evaluation uses the swept K as the support size. One world per seed is
    shared by all grid points.
    """
    unknown = set(grid) - set(SWEEP_KEYS)
    if unknown:
        raise ValueError(f"cannot sweep {sorted(unknown)}; choose from {SWEEP_KEYS}")
    work = Path(work_dir)
    world = world or SynthWorldConfig()
    model_cfg = model_cfg or tiny_model_config(image_size=world.image_size)
    keys = [k for k in SWEEP_KEYS if k in grid]
    points = [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))] or [{}]
    need = max([p.get("shots", base.shots) + p.get("query_size", base.query_size) for p in points])
    rows = [SweepRow(p, {}) for p in points]
    for seed in seeds:
        wdir = work / "worlds" / f"seed{seed}"
        generate_world(dataclasses.replace(world, seed=seed), wdir)
        source, persons, test = load_world(wdir, model_cfg.image_size, min_per_person=need)
        for row in rows:
            cfg = dataclasses.replace(base, seed=seed, **row.settings).validate()
            tag = "_".join(f"{SWEEP_LABELS[k]}{v}" for k, v in row.settings.items()) or "base"
            state = train(source, persons, cfg, work / "runs" / tag / f"seed{seed}", model_cfg, kernel)
            rep = evaluate_protocol(state, test, cfg, "ours", support_size=cfg.shots, seed=seed)
            row.errors[seed] = rep.mean_post
            log.info("sweep %s seed %d: %.3f deg", tag, seed, rep.mean_post)
    return rows


def sweep_csv(rows: list[SweepRow]) -> str:
    keys = [k for k in SWEEP_KEYS if rows and k in rows[0].settings]
    seeds = sorted(rows[0].errors) if rows else []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([SWEEP_LABELS[k] for k in keys] + ["mean_error_deg"] + [f"seed{s}" for s in seeds])
    for r in rows:
        w.writerow([r.settings[k] for k in keys] + [f"{r.mean:.6f}"] + [f"{r.errors[s]:.6f}" for s in seeds])
    return buf.getvalue()


def sweep_table(rows: list[SweepRow]) -> str:
    keys = [k for k in SWEEP_KEYS if rows and k in rows[0].settings]
    heads = [SWEEP_LABELS[k] for k in keys] + ["Error (deg)"]
    lines = ["".join(h.rjust(12) for h in heads)]
    for r in rows:
        lines.append("".join(str(r.settings[k]).rjust(12) for k in keys) + f"{r.mean:12.2f}")
    return "\n".join(lines)
