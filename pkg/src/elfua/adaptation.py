"""Meta-testing: label-free adaptation to an unseen person and angular-error evaluation."""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .config import TrainConfig
from .data import GazeLabel, GazeSample, PersonTaskset, stack_images, stack_labels
from .losses import gaze_loss
from .meta import AdaptedParams, gradient_steps, inner_adapt
from .network import ModelState, clone_params, functional_forward, replicate
from .seeding import derive_seed

MODES = ("ours", "no-adapt", "oracle")


class MissingLabelsError(ValueError):
    pass


def gaze_vectors(angles: np.ndarray) -> np.ndarray:
    """(yaw, pitch) rows -> unit vectors (cos p sin y, sin p, cos p cos y)."""
    a = np.asarray(angles, dtype=np.float64).reshape(-1, 2)
    yaw, pitch = a[:, 0], a[:, 1]
    return np.stack([np.cos(pitch) * np.sin(yaw), np.sin(pitch), np.cos(pitch) * np.cos(yaw)], axis=1)


def angular_errors(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Row-wise angle in degrees between predicted and true gaze directions."""
    dot = np.sum(gaze_vectors(pred) * gaze_vectors(target), axis=1)
    return np.degrees(np.arccos(np.clip(dot, -1.0, 1.0)))


def angular_error(pred: GazeLabel, target: GazeLabel) -> float:
    return float(angular_errors(pred.as_array(), target.as_array())[0])


@dataclass
class EvalRecord:
    person_id: str
    n_support: int
    error_pre_deg: float
    error_post_deg: float
    per_image_errors: list[float]
    support_idx: list[int] = field(default_factory=list)


@dataclass
class RunReport:
    mode: str
    records: list[EvalRecord]
    seed: int = 0
    support_size: int = 5

    @property
    def mean_pre(self) -> float:
        return float(np.mean([r.error_pre_deg for r in self.records]))

    @property
    def mean_post(self) -> float:
        return float(np.mean([r.error_post_deg for r in self.records]))

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "seed": self.seed,
            "support_size": self.support_size,
            "mean_error_pre_deg": self.mean_pre,
            "mean_error_post_deg": self.mean_post,
            "records": [asdict(r) for r in self.records],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_table(self) -> str:
        """Per-person columns plus the average, one row for this mode."""
        heads = [r.person_id for r in self.records] + ["Avg."]
        vals = [f"{r.error_post_deg:.2f}" for r in self.records] + [f"{self.mean_post:.2f}"]
        width = max(len(h) for h in heads + vals + [self.mode]) + 1
        line = lambda cells: "".join(c.rjust(width) for c in cells)
        return "\n".join([line(["Method"] + heads), line([self.mode] + vals)])


def adapt(state: ModelState, support: Sequence[GazeSample], cfg: TrainConfig, seed: int = 0, person_id: str = "") -> AdaptedParams:
    """Unlabeled adaptation with the training-time alpha and G; ``state`` is left untouched."""
    if len(support) < 1:
        raise ValueError("adaptation needs at least one support image")
    adapted = inner_adapt(
        state, support, cfg.alpha, cfg.inner_steps, seed=seed,
        include_original=cfg.pretext_include_original, person_id=person_id,
    )
    adapted.params = clone_params(adapted.params)
    return adapted


def oracle_adapt(state: ModelState, support: Sequence[GazeSample], cfg: TrainConfig, person_id: str = "") -> AdaptedParams:
    """Supervised fine-tuning on labeled support images, same alpha and G."""
    if any(s.label is None for s in support):
        raise MissingLabelsError("oracle mode requires yaw and pitch labels on every support image")
    x, y = stack_images(support), stack_labels(support)
    loss_at = lambda g, cur: gaze_loss(functional_forward(state, cur, x).gaze, y)
    params, losses = gradient_steps(state, state.adaptable_params, loss_at, cfg.alpha, cfg.inner_steps)
    return AdaptedParams(person_id, clone_params(params), losses)


def predict(state: ModelState, images, params=None) -> np.ndarray:
    with torch.no_grad():
        p = params if params is not None else state.adaptable_params
        return functional_forward(state, p, images).gaze.double().numpy()


def evaluate_person(
    state: ModelState,
    adapted: Optional[AdaptedParams],
    eval_samples: Sequence[GazeSample],
    person_id: str = "",
    n_support: int = 0,
) -> EvalRecord:
    if not eval_samples:
        raise ValueError("evaluation set is empty")
    x, y = stack_images(eval_samples), stack_labels(eval_samples)
    pre = angular_errors(predict(state, x), y)
    post = pre if adapted is None else angular_errors(predict(state, x, adapted.params), y)
    return EvalRecord(person_id, n_support, float(pre.mean()), float(post.mean()), [float(e) for e in post])


def _evaluate_one(state, pid, samples, cfg, mode, support_size, seed, draws):
    recs = []
    for r in range(draws):
        order = np.random.default_rng(derive_seed(seed, "support", pid, r)).permutation(len(samples))
        s_idx = sorted(int(i) for i in order[:support_size])
        e_idx = sorted(int(i) for i in order[support_size:])
        support = [samples[i] for i in s_idx]
        held_out = [samples[i] for i in e_idx]
        if mode == "ours":
            adapted = adapt(state, support, cfg, seed=derive_seed(seed, "adapt", pid, r), person_id=pid)
        elif mode == "oracle":
            adapted = oracle_adapt(state, support, cfg, person_id=pid)
        else:
            adapted = None
        rec = evaluate_person(state, adapted, held_out, pid, len(support))
        rec.support_idx = s_idx
        recs.append(rec)
    if draws == 1:
        return recs[0]
    return EvalRecord(
        pid, support_size,
        float(np.mean([r.error_pre_deg for r in recs])),
        float(np.mean([r.error_post_deg for r in recs])),
        [e for r in recs for e in r.per_image_errors],
        recs[0].support_idx,
    )


def evaluate_protocol(
    state: ModelState,
    taskset: PersonTaskset,
    cfg: TrainConfig,
    mode: str,
    *,
    support_size: Optional[int] = None,
    seed: int = 0,
    support_draws: int = 1,
    jobs: int = 1,
) -> RunReport:
    """Evaluate every person: adapt on a seeded support draw, score the rest.

    ``ours`` adapts with the pretext loss, ``no-adapt`` scores psi directly and
    ``oracle`` fine-tunes on the labeled support images.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if not taskset.labeled:
        raise MissingLabelsError(
            "evaluation needs gaze labels (yaw, pitch) on the person manifest; load it with oracle_mode"
        )
    k = cfg.shots if support_size is None else support_size
    for pid, samples in taskset.persons.items():
        if len(samples) <= k:
            raise ValueError(f"person {pid!r} has {len(samples)} samples; needs more than support size {k}")
    run = lambda st, item: _evaluate_one(st, item[0], item[1], cfg, mode, k, seed, support_draws)
    items = list(taskset.persons.items())
    if jobs > 1:
        groups = [items[w::jobs] for w in range(min(jobs, len(items)))]
        replicas = [replicate(state) for _ in groups]
        with ThreadPoolExecutor(len(groups)) as pool:
            parts = list(pool.map(lambda g: [run(replicas[g], it) for it in groups[g]], range(len(groups))))
        by_pid = {r.person_id: r for part in parts for r in part}
        records = [by_pid[pid] for pid, _ in items]
    else:
        records = [run(state, it) for it in items]
    return RunReport(mode, records, seed, k)
