"""Scalar objectives: pretext cross-entropy, L1 gaze loss, joint MMD, meta loss."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .config import KernelSpec
from .network import ModelState, functional_forward


@dataclass
class LossReport:
    gaze_loss: float
    self_loss: float
    jmmd: float
    meta_loss: float
    gamma: float
    # Differentiable meta loss; kept off the serialized row.
    objective: Optional[torch.Tensor] = field(default=None, repr=False, compare=False)

    def row(self, **extra) -> dict:
        out = dict(extra)
        out.update(gaze_loss=self.gaze_loss, self_loss=self.self_loss, jmmd=self.jmmd, meta_loss=self.meta_loss)
        return out


def self_supervised_loss(perm_logits: torch.Tensor, class_indices) -> torch.Tensor:
    """Mean cross-entropy of the permutation head over the pretext batch."""
    target = torch.as_tensor(class_indices, dtype=torch.long)
    if perm_logits.ndim != 2 or len(perm_logits) == 0:
        raise ValueError("perm_logits must be a non-empty N x M batch")
    if len(target) != len(perm_logits):
        raise ValueError(f"{len(perm_logits)} logits vs {len(target)} class indices")
    M = perm_logits.shape[1]
    if target.min() < 0 or target.max() >= M:
        raise IndexError(f"class index outside [0, {M})")
    return F.cross_entropy(perm_logits, target)


def gaze_loss(pred: torch.Tensor, target) -> torch.Tensor:
    """Mean over the batch of |d yaw| + |d pitch|."""
    target = torch.as_tensor(np.asarray(target), dtype=pred.dtype) if not isinstance(target, torch.Tensor) else target
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {tuple(pred.shape)} vs target shape {tuple(target.shape)}")
    return (pred - target).abs().sum(dim=1).mean()


def _sq_dists(z: torch.Tensor) -> torch.Tensor:
    diff = z[:, None, :] - z[None, :, :]
    return (diff * diff).sum(-1)


def _tap_kernel(z: torch.Tensor, kernel: KernelSpec) -> torch.Tensor:
    d2 = _sq_dists(z)
    if kernel.bandwidths is not None:
        sigmas2 = [b * b for b in kernel.bandwidths]
    else:
        n = len(z)
        off = d2.detach()[~torch.eye(n, dtype=torch.bool)]
        base = float(off.median()) if off.numel() else 1.0
        if not base > 0:
            base = 1.0
        sigmas2 = [base * m * m for m in kernel.multipliers]
    return torch.stack([torch.exp(-d2 / (2.0 * s2)) for s2 in sigmas2]).mean(0)


def jmmd_raw(
    source_features: Mapping[str, torch.Tensor],
    target_features: Mapping[str, torch.Tensor],
    kernel: KernelSpec = KernelSpec(),
) -> torch.Tensor:
    """Biased V-statistic of the joint MMD before clamping.

    The joint kernel between two samples is the product of the per-tap kernels.
    """
    if set(source_features) != set(target_features):
        raise KeyError(f"tap mismatch: {sorted(source_features)} vs {sorted(target_features)}")
    if not source_features:
        raise ValueError("no feature taps given")
    taps = sorted(source_features)
    ns = len(source_features[taps[0]])
    nt = len(target_features[taps[0]])
    for tap in taps:
        if len(source_features[tap]) != ns or len(target_features[tap]) != nt:
            raise ValueError(f"tap {tap!r} has inconsistent batch sizes")
    if ns < 2 or nt < 2:
        raise ValueError(f"joint MMD needs batches of at least 2 (got {ns} and {nt})")
    joint = None
    for tap in taps:
        z = torch.cat([source_features[tap].flatten(1), target_features[tap].flatten(1)])
        k = _tap_kernel(z, kernel)
        joint = k if joint is None else joint * k
    k_ss = joint[:ns, :ns].mean()
    k_tt = joint[ns:, ns:].mean()
    k_st = joint[:ns, ns:].mean()
    return k_ss + k_tt - 2.0 * k_st


def jmmd(
    source_features: Mapping[str, torch.Tensor],
    target_features: Mapping[str, torch.Tensor],
    kernel: KernelSpec = KernelSpec(),
) -> torch.Tensor:
    return jmmd_raw(source_features, target_features, kernel).clamp_min(0.0)


def meta_loss(
    state: ModelState,
    params: Mapping[str, torch.Tensor],
    source_images,
    source_labels,
    query_images,
    kernel: KernelSpec = KernelSpec(),
    gamma: float = 0.1,
    self_loss: float = 0.0,
    taps: Optional[Sequence[str]] = None,
) -> LossReport:
    """Source gaze loss plus ``gamma`` times the joint MMD between source and query taps.

    Both terms are evaluated at the adapted parameters ``params``.
    """
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    taps = tuple(taps or state.config.taps)
    n_src = len(source_images)
    batch = np.concatenate([np.asarray(source_images), np.asarray(query_images)])
    out = functional_forward(state, params, batch)
    l_gaze = gaze_loss(out.gaze[:n_src], source_labels)
    src_feats = {t: out.features[t][:n_src] for t in taps}
    tgt_feats = {t: out.features[t][n_src:] for t in taps}
    d = jmmd(src_feats, tgt_feats, kernel)
    total = l_gaze + gamma * d
    return LossReport(
        gaze_loss=float(l_gaze.detach()),
        self_loss=float(self_loss),
        jmmd=float(d.detach()),
        meta_loss=float(l_gaze.detach()) + gamma * float(d.detach()),
        gamma=float(gamma),
        objective=total,
    )
