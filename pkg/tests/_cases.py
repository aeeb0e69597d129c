"""Shared scenarios for the unit and acceptance suites."""
import numpy as np
import torch

from elfua.config import KernelSpec, TrainConfig
from elfua.data import GazeLabel, GazeSample, SourceDataset, Task, stack_images
from elfua.losses import meta_loss
from elfua.meta import _task_gradient, inner_adapt

from _fd import analytic_directional, numeric_directional, random_dirs, rel_err


def toy_source(n=12, size=32, seed=0):
    rng = np.random.default_rng(seed)
    return SourceDataset([
        GazeSample(rng.random((size, size, 3)).astype(np.float32),
                   GazeLabel(*np.clip(rng.normal(0, 0.2, 2), -0.5, 0.5)))
        for _ in range(n)
    ])


def toy_task(K=3, t=3, size=32, seed=1, pid="p"):
    rng = np.random.default_rng(seed)
    img = lambda: rng.random((size, size, 3)).astype(np.float32)
    return Task(pid, [GazeSample(img(), None, pid) for _ in range(K)], [GazeSample(img(), None, pid) for _ in range(t)],
                tuple(range(K)), tuple(range(K, K + t)))


def bilevel_gradient_error(state, cfg: TrainConfig, kernel: KernelSpec, n_dirs=2, eps=1e-7, seed=3):
    """Worst relative error of the engine's per-task meta-gradient against
    central differences of the composed objective F(psi) = meta_loss(inner_adapt(psi))."""
    source, task = toy_source(8), toy_task()
    idx = np.arange(6)
    rep, grads = _task_gradient(state, task, idx, source, cfg, kernel, seed)
    src_x, src_y, query = source.images[idx], source.labels[idx], stack_images(task.query)

    def composed(params):
        adapted = inner_adapt(state, task.support, cfg.alpha, cfg.inner_steps, seed=seed, second_order=True,
                              include_original=cfg.pretext_include_original, params=params)
        return meta_loss(state, adapted.params, src_x, src_y, query, kernel, cfg.gamma).objective

    psi = state.adaptable_params
    worst = 0.0
    for i in range(n_dirs):
        dirs = random_dirs(psi, seed=100 + i)
        worst = max(worst, rel_err(analytic_directional(grads, dirs), numeric_directional(composed, psi, dirs, eps)))
    return worst, rep, grads
