"""Bi-level meta-training: self-supervised inner loop, domain-adaptation outer loop."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import torch

from .config import ConfigError, KernelSpec, ModelConfig, TrainConfig
from .data import PersonTaskset, SourceDataset, Task, sample_task_batch, stack_images
from .jigsaw import PermutationSet, pretext_arrays
from .losses import LossReport, gaze_loss, meta_loss, self_supervised_loss
from .network import ModelState, clone_params, functional_forward, init_model, replicate, save_checkpoint
from .seeding import derive_seed, source_batch_indices

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class AdaptedParams:
    person_id: str
    params: "OrderedDict[str, torch.Tensor]"
    inner_losses: list[float] = field(default_factory=list)


@dataclass
class OuterReport:
    step: int
    tasks: list[tuple[str, LossReport]]
    objective: float  # summed meta loss over the task batch

    def mean(self, name: str) -> float:
        return float(np.mean([getattr(r, name) for _, r in self.tasks]))


def gradient_steps(
    state: ModelState,
    params: Mapping[str, torch.Tensor],
    loss_at: Callable[[int, Mapping[str, torch.Tensor]], torch.Tensor],
    alpha: float,
    steps: int,
    second_order: bool = False,
) -> tuple["OrderedDict[str, torch.Tensor]", list[float]]:
    """Plain gradient descent on ``loss_at(step, params)`` over the adaptable parameters.

    Parameters the loss does not depend on are returned unchanged. In
    first-order mode the result is a fresh set of leaf tensors; otherwise it
    stays attached to the graph of ``params``.
    """
    if steps < 1:
        raise ConfigError(f"inner steps (G) must be >= 1, got {steps}")
    cur = OrderedDict(params) if second_order else clone_params(params, requires_grad=True)
    losses = []
    for g in range(steps):
        loss = loss_at(g, cur)
        if not torch.isfinite(loss):
            raise NonFiniteLossError(f"non-finite inner loss {float(loss.detach())} at step {g}")
        losses.append(float(loss.detach()))
        grads = torch.autograd.grad(loss, list(cur.values()), create_graph=second_order, allow_unused=True)
        nxt = OrderedDict()
        for (name, p), gr in zip(cur.items(), grads):
            if gr is None:
                nxt[name] = p
            elif second_order:
                nxt[name] = p - alpha * gr
            else:
                nxt[name] = (p.detach() - alpha * gr).requires_grad_(True)
        cur = nxt
    return cur, losses


def inner_adapt(
    state: ModelState,
    support,
    alpha: float,
    steps: int,
    pset: Optional[PermutationSet] = None,
    seed: int = 0,
    *,
    second_order: bool = False,
    include_original: bool = True,
    params: Optional[Mapping[str, torch.Tensor]] = None,
    person_id: str = "",
) -> AdaptedParams:
    """Adapt the adaptable parameters to one person from unlabeled support images.

    Each step draws fresh permutation indices over the same support images.
    """
    images = stack_images(support) if len(support) and hasattr(support[0], "image") else np.asarray(support)
    if len(images) == 0:
        raise ValueError("support set is empty")
    pset = pset or state.perm_set
    start = params if params is not None else state.adaptable_params

    def loss_at(g, cur):
        x, y = pretext_arrays(list(images), pset, derive_seed(seed, g), include_original)
        return self_supervised_loss(functional_forward(state, cur, x).perm_logits, y)

    try:
        out, losses = gradient_steps(state, start, loss_at, alpha, steps, second_order)
    except NonFiniteLossError as exc:
        raise NonFiniteLossError(f"person {person_id!r}: {exc}") from None
    return AdaptedParams(person_id, out, losses)


def _task_gradient(state, task, idx, source, cfg, kernel, seed, psi=None):
    images, labels = source.images[idx], source.labels[idx]
    psi = psi if psi is not None else state.adaptable_params
    adapted = inner_adapt(
        state,
        task.support,
        cfg.alpha,
        cfg.inner_steps,
        seed=seed,
        second_order=cfg.second_order,
        include_original=cfg.pretext_include_original,
        params=psi,
        person_id=task.person_id,
    )
    rep = meta_loss(
        state, adapted.params, images, labels, stack_images(task.query), kernel, cfg.gamma,
        self_loss=adapted.inner_losses[-1],
    )
    if not math.isfinite(rep.meta_loss):
        raise NonFiniteLossError(f"non-finite meta loss for task {task.person_id!r}")
    # First-order: the gradient at psi' stands in for the gradient at psi.
    wrt = list(psi.values()) if cfg.second_order else list(adapted.params.values())
    grads = torch.autograd.grad(rep.objective, wrt, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(wrt, grads)]
    rep.objective = None
    return rep, grads


def sgd_update(state: ModelState, grads: Sequence[torch.Tensor], lr: float):
    with torch.no_grad():
        for p, g in zip(state.adaptable_params.values(), grads):
            p.sub_(lr * g)


def outer_step(
    state: ModelState,
    tasks: Sequence[Task],
    source: SourceDataset,
    cfg: TrainConfig,
    kernel: KernelSpec = KernelSpec(),
    step: int = 0,
    jobs: int = 1,
) -> OuterReport:
    """One meta update: inner-adapt every task, sum the meta losses, SGD on psi."""
    if not tasks:
        raise ValueError("outer_step needs at least one task")
    seeds = [derive_seed(cfg.seed, "task", step, i) for i in range(len(tasks))]
    idxs = [source_batch_indices(len(source), cfg.source_batch, derive_seed(cfg.seed, "source", step, i))
            for i in range(len(tasks))]
    psi = state.adaptable_params
    work = lambda st, i: _task_gradient(st, tasks[i], idxs[i], source, cfg, kernel, seeds[i], psi)
    if jobs > 1:
        # One module replica per worker; tasks are dealt round-robin.
        groups = [list(range(w, len(tasks), jobs)) for w in range(min(jobs, len(tasks)))]
        replicas = [replicate(state) for _ in groups]
        with ThreadPoolExecutor(len(groups)) as pool:
            parts = list(pool.map(lambda g: [(i, work(replicas[g], i)) for i in groups[g]], range(len(groups))))
        results = [r for _, r in sorted((x for part in parts for x in part), key=lambda x: x[0])]
    else:
        results = [work(state, i) for i in range(len(tasks))]
    total = [torch.zeros_like(p) for p in state.adaptable_params.values()]
    for _, grads in results:
        for acc, g in zip(total, grads):
            acc.add_(g)
    sgd_update(state, total, cfg.beta)
    reports = [(t.person_id, r) for t, (r, _) in zip(tasks, results)]
    return OuterReport(step, reports, float(sum(r.meta_loss for _, r in reports)))


def supervised_step(state: ModelState, source: SourceDataset, cfg: TrainConfig, step: int) -> float:
    """Source-only counterpart of :func:`outer_step` (same source batches, no adaptation)."""
    psi = state.adaptable_params
    total = [torch.zeros_like(p) for p in psi.values()]
    losses = []
    for i in range(cfg.n_tasks):
        idx = source_batch_indices(len(source), cfg.source_batch, derive_seed(cfg.seed, "source", step, i))
        loss = gaze_loss(functional_forward(state, psi, source.images[idx]).gaze, source.labels[idx])
        if not torch.isfinite(loss):
            raise NonFiniteLossError(f"non-finite supervised loss at step {step}")
        grads = torch.autograd.grad(loss, list(psi.values()), allow_unused=True)
        for acc, g in zip(total, grads):
            if g is not None:
                acc.add_(g)
        losses.append(float(loss.detach()))
    sgd_update(state, total, cfg.beta)
    return float(np.mean(losses))


class _RunLog:
    def __init__(self, directory: Optional[Path]):
        self.dir = directory
        self.jsonl = self.csv = self.writer = None
        if directory is not None:
            directory.mkdir(parents=True, exist_ok=True)
            self.jsonl = open(directory / "train_log.jsonl", "w")
            self.csv = open(directory / "metrics.csv", "w", newline="")
            self.writer = csv.writer(self.csv)
            self.writer.writerow(["step", "objective", "gaze_loss", "self_loss", "jmmd", "meta_loss"])

    def record(self, rep: OuterReport):
        if self.dir is None:
            return
        for pid, r in rep.tasks:
            self.jsonl.write(json.dumps(r.row(step=rep.step, task=pid)) + "\n")
        self.writer.writerow(
            [rep.step, rep.objective] + [rep.mean(k) for k in ("gaze_loss", "self_loss", "jmmd", "meta_loss")]
        )

    def close(self):
        if self.dir is not None:
            self.jsonl.close()
            self.csv.close()


def train(
    source: SourceDataset,
    taskset: PersonTaskset,
    cfg: TrainConfig,
    checkpoint_dir: Optional[str | Path],
    model_config: Optional[ModelConfig] = None,
    kernel: KernelSpec = KernelSpec(),
    *,
    state: Optional[ModelState] = None,
    jobs: int = 1,
    progress: Optional[Callable[[OuterReport], None]] = None,
) -> ModelState:
    """Meta-train for ``cfg.total_outer_steps`` outer steps.

    Checkpoints land in ``checkpoint_dir`` every ``cfg.checkpoint_every`` steps
    and as ``final.ckpt`` at the end; pass ``None`` to skip all file output.
    """
    cfg.validate()
    state = state or init_model(model_config or ModelConfig(), cfg.seed)
    out_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    runlog = _RunLog(out_dir)
    opt_state = lambda k: {"type": "sgd", "lr": cfg.beta, "momentum": 0.0, "step": k}
    extra = {"train_config": dataclasses.asdict(cfg), "kernel": dataclasses.asdict(kernel)}
    try:
        for step in range(cfg.total_outer_steps):
            tasks = sample_task_batch(taskset, cfg.n_tasks, cfg.shots, cfg.query_size, derive_seed(cfg.seed, "tasks", step))
            rep = outer_step(state, tasks, source, cfg, kernel, step, jobs)
            runlog.record(rep)
            if progress is not None:
                progress(rep)
            if out_dir is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(out_dir / f"step_{step + 1:06d}.ckpt", state, seed=cfg.seed,
                                optimizer_state=opt_state(step + 1), extra=extra)
    finally:
        runlog.close()
    if out_dir is not None:
        save_checkpoint(out_dir / "final.ckpt", state, seed=cfg.seed,
                        optimizer_state=opt_state(cfg.total_outer_steps), extra=extra)
    return state


def train_supervised(
    source: SourceDataset,
    cfg: TrainConfig,
    model_config: Optional[ModelConfig] = None,
    checkpoint_dir: Optional[str | Path] = None,
    *,
    state: Optional[ModelState] = None,
) -> ModelState:
    """Source-only baseline with the same initialization, parameter scope and step budget."""
    cfg.validate()
    state = state or init_model(model_config or ModelConfig(), cfg.seed)
    for step in range(cfg.total_outer_steps):
        supervised_step(state, source, cfg, step)
    if checkpoint_dir is not None:
        save_checkpoint(Path(checkpoint_dir) / "baseline.ckpt", state, seed=cfg.seed,
                        extra={"train_config": dataclasses.asdict(cfg), "kind": "supervised-baseline"})
    return state
