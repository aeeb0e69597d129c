"""Gaze network with a permutation head, feature taps and a frozen/adaptable split.

Parameters are stored once (``psi``); the adapted parameters of a task are a
dict of override tensors evaluated through :func:`functional_forward`, so the
meta-parameters are never overwritten during the inner loop.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import io
import json
import zipfile
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
import torch
from torch import nn
from torch.func import functional_call

from .config import ModelConfig
from .jigsaw import PermutationSet, build_permutation_set

CKPT_FORMAT = "elfua-ckpt-v1"


class UnknownParameterError(KeyError):
    pass


def _conv(cin: int, cout: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1)


class TinyStage(nn.Sequential):
    # Per-sample GroupNorm; plain SGD stalls on this net without it.
    def __init__(self, cin: int, cout: int):
        super().__init__(
            _conv(cin, cout, 2), nn.GroupNorm(4, cout), nn.ReLU(),
            _conv(cout, cout), nn.GroupNorm(4, cout), nn.ReLU(),
        )


class BasicBlock(nn.Module):
    # GroupNorm rather than BatchNorm keeps every sample independent of its batch.
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.norm1 = nn.GroupNorm(8, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.norm2 = nn.GroupNorm(8, cout)
        self.down = None
        if stride != 1 or cin != cout:
            self.down = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.GroupNorm(8, cout))

    def forward(self, x):
        out = torch.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        skip = x if self.down is None else self.down(x)
        return torch.relu(out + skip)


class Backbone(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        c = config.in_channels
        if config.backbone_depth == "tiny":
            self.stem = nn.Identity()
            widths = (16, 32, 32)
            self.stages = nn.ModuleList(
                [TinyStage(cin, cout) for cin, cout in zip((c,) + widths[:-1], widths)]
            )
            side = config.image_size // 8
            self.pool = nn.Flatten()
            self.out_dim = widths[-1] * side * side
        else:
            self.stem = nn.Sequential(
                nn.Conv2d(c, 64, 7, 2, 3, bias=False), nn.GroupNorm(8, 64), nn.ReLU(), nn.MaxPool2d(3, 2, 1)
            )
            widths = (64, 128, 256, 512)
            stages = []
            cin = 64
            for i, w in enumerate(widths):
                stride = 1 if i == 0 else 2
                stages.append(nn.Sequential(BasicBlock(cin, w, stride), BasicBlock(w, w)))
                cin = w
            self.stages = nn.ModuleList(stages)
            self.pool = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten())
            self.out_dim = widths[-1]

    def forward(self, x):
        x = self.stem(x)
        for stage in self.stages:
            x = stage(x)
        return self.pool(x)


class GazeNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.backbone = Backbone(config)
        self.embed = nn.Sequential(
            nn.Linear(self.backbone.out_dim, config.embed_hidden),
            nn.ReLU(),
            nn.Linear(config.embed_hidden, config.embed_out),
        )
        self.gaze_head = nn.Linear(config.embed_out, 2)
        self.perm_head = nn.Linear(config.embed_out, config.M)

    def forward(self, x):
        x = (x - 0.5) / 0.25
        h = self.backbone(x)
        emb = self.embed(h)
        gaze = self.gaze_head(emb)
        perm_in = emb.detach() if self.config.detach_pretext_head else emb
        logits = self.perm_head(perm_in)
        feats = {"backbone": h, "embedding": emb, "gaze_output": gaze}
        return gaze, logits, feats


@dataclass
class ForwardOutput:
    gaze: torch.Tensor  # N x 2 (yaw, pitch)
    perm_logits: torch.Tensor  # N x M
    features: dict[str, torch.Tensor]


@dataclass
class ModelState:
    module: GazeNet
    perm_set: PermutationSet
    config: ModelConfig
    adaptable_names: tuple[str, ...]

    @property
    def dtype(self) -> torch.dtype:
        return getattr(torch, self.config.dtype)

    @property
    def adaptable_params(self) -> "OrderedDict[str, nn.Parameter]":
        named = dict(self.module.named_parameters())
        return OrderedDict((n, named[n]) for n in self.adaptable_names)

    @property
    def frozen_params(self) -> "OrderedDict[str, nn.Parameter]":
        keep = set(self.adaptable_names)
        return OrderedDict((n, p) for n, p in self.module.named_parameters() if n not in keep)


def default_scope(config: ModelConfig) -> tuple[str, ...]:
    n_stages = 3 if config.backbone_depth == "tiny" else 4
    return (f"backbone.stages.{n_stages - 1}.", "embed.", "gaze_head.", "perm_head.")


def _partition(module: GazeNet, scope: tuple[str, ...]) -> tuple[str, ...]:
    names = tuple(n for n, _ in module.named_parameters() if any(n.startswith(s) for s in scope))
    if not names:
        raise ValueError(f"adaptable scope {scope} matches no parameters")
    return names


def init_model(config: ModelConfig, seed: int = 0, pretrained: Optional[str | Path] = None) -> ModelState:
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        module = GazeNet(config).to(getattr(torch, config.dtype))
    pset = build_permutation_set(config.M, config.grid, seed)
    scope = config.adaptable_scope or default_scope(config)
    state = ModelState(module, pset, config, _partition(module, scope))
    if pretrained is not None:
        src, _ = load_checkpoint(pretrained)
        theirs = dict(src.module.named_parameters())
        with torch.no_grad():
            for name, p in state.module.named_parameters():
                if name.startswith("backbone.") and name in theirs and theirs[name].shape == p.shape:
                    p.copy_(theirs[name].to(p.dtype))
    for p in state.frozen_params.values():
        p.requires_grad_(False)
    return state


def as_batch(state: ModelState, images) -> torch.Tensor:
    """Numpy N x H x W x C (or a single image) or torch N x C x H x W -> model dtype tensor."""
    if isinstance(images, torch.Tensor):
        x = images.to(state.dtype)
    else:
        arr = np.asarray(images)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4:
            raise ValueError(f"expected a batch of images, got shape {arr.shape}")
        x = torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(state.dtype)
    size, c = state.config.image_size, state.config.in_channels
    if x.ndim != 4 or tuple(x.shape[1:]) != (c, size, size):
        raise ValueError(f"image batch shape {tuple(x.shape)} does not match ({c}, {size}, {size})")
    return x


def _wrap(out) -> ForwardOutput:
    gaze, logits, feats = out
    return ForwardOutput(gaze, logits, feats)


def forward(state: ModelState, images) -> ForwardOutput:
    return _wrap(state.module(as_batch(state, images)))


def functional_forward(state: ModelState, override_params: Mapping[str, torch.Tensor], images) -> ForwardOutput:
    """Evaluate the model with the adaptable parameters replaced by ``override_params``.

    Overrides must name exactly the adaptable parameters; gradients flow back
    into whatever produced them.
    """
    names = set(state.adaptable_names)
    extra = set(override_params) - names
    missing = names - set(override_params)
    if extra or missing:
        raise UnknownParameterError(
            f"override keys must equal the adaptable set (unknown: {sorted(extra)}, missing: {sorted(missing)})"
        )
    return _wrap(functional_call(state.module, dict(override_params), (as_batch(state, images),)))


def replicate(state: ModelState) -> ModelState:
    """Independent copy for worker threads; functional_call swaps parameters in place."""
    module = copy.deepcopy(state.module)
    return ModelState(module, state.perm_set, state.config, state.adaptable_names)


def clone_params(params: Mapping[str, torch.Tensor], requires_grad: bool = False) -> "OrderedDict[str, torch.Tensor]":
    return OrderedDict((n, p.detach().clone().requires_grad_(requires_grad)) for n, p in params.items())


def param_checksum(params: Mapping[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(params[name].detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _zip_write(zf: zipfile.ZipFile, name: str, data: bytes):
    # Fixed timestamp keeps archives byte-identical across runs.
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_STORED
    zf.writestr(info, data)


def save_checkpoint(
    path: str | Path,
    state: ModelState,
    *,
    seed: int,
    optimizer_state: Optional[dict] = None,
    extra: Optional[dict] = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": CKPT_FORMAT,
        "config": dataclasses.asdict(state.config),
        "adaptable_names": list(state.adaptable_names),
        "perm_set": json.loads(state.perm_set.to_json()),
        "optimizer_state": optimizer_state or {"type": "sgd"},
        "seed": seed,
        "extra": extra or {},
    }
    with zipfile.ZipFile(path, "w") as zf:
        _zip_write(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=1).encode())
        for name, p in state.module.state_dict().items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, p.detach().cpu().numpy(), allow_pickle=False)
            _zip_write(zf, f"params/{name}.npy", buf.getvalue())
    return path


def load_checkpoint(path: str | Path) -> tuple[ModelState, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != CKPT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
        cfg = dict(meta["config"])
        for key in ("adaptable_scope", "taps"):
            if cfg.get(key) is not None:
                cfg[key] = tuple(cfg[key])
        config = ModelConfig(**cfg)
        with torch.random.fork_rng(devices=[]):
            module = GazeNet(config).to(getattr(torch, config.dtype))
        sd = {}
        for name in module.state_dict():
            arr = np.lib.format.read_array(io.BytesIO(zf.read(f"params/{name}.npy")))
            sd[name] = torch.from_numpy(arr.copy())
        module.load_state_dict(sd)
    pset = PermutationSet.from_json(json.dumps(meta["perm_set"]))
    state = ModelState(module, pset, config, tuple(meta["adaptable_names"]))
    for p in state.frozen_params.values():
        p.requires_grad_(False)
    return state, meta
