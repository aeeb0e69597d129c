"""Procedural synthetic gaze world with per-person gaze offsets.

Each person renders the pupils at ``true gaze + gaze_bias``; labels always
hold the true gaze, so a model fitted to the zero-bias source population is
off by the person's bias until it adapts. Person-specific appearance is drawn
from ranges displaced from the source population by ``appearance_shift``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .data import GazeLabel, write_manifest
from .seeding import derive_seed

MAX_BIAS = 0.35
GAZE_STD = 0.2
GAZE_LIMIT = 0.5


@dataclass(frozen=True)
class SynthPersonSpec:
    person_id: str
    gaze_bias: tuple[float, float]  # (d yaw, d pitch) radians
    iris_radius: float  # pixels at 32 px
    eye_spacing: float  # pixels at 32 px
    skin_tone: float  # gray level
    noise_sigma: float

    def __post_init__(self):
        if any(abs(b) > MAX_BIAS for b in self.gaze_bias):
            raise ValueError(f"gaze bias {self.gaze_bias} exceeds {MAX_BIAS} rad")
        if not (0.8 <= self.iris_radius <= 2.5 and 10 <= self.eye_spacing <= 20):
            raise ValueError("eye geometry outside renderable range")
        if not (0.2 <= self.skin_tone <= 0.85 and 0 <= self.noise_sigma <= 0.1):
            raise ValueError("appearance outside renderable range")


@dataclass(frozen=True)
class SynthWorldConfig:
    n_train_persons: int = 40
    n_test_persons: int = 20
    samples_per_person: int = 40
    n_source_persons: int = 100
    source_samples_per_person: int = 20
    image_size: int = 32
    bias_scale: float = 0.25
    appearance_shift: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_train_persons", "n_test_persons", "samples_per_person",
                     "n_source_persons", "source_samples_per_person", "image_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.bias_scale < 0:
            raise ValueError("bias_scale must be >= 0")
        if not 0 <= self.appearance_shift <= 1:
            raise ValueError("appearance_shift must lie in [0, 1]")


EYE_HEIGHT = 0.40  # fraction of image height
EYE_RADIUS = 5.0  # pixels at 32 px


def pupil_offset(spec: SynthPersonSpec, gaze: GazeLabel, size: int = 32) -> tuple[float, float]:
    """Pixel displacement (dx, dy) of both pupils from their eye centers."""
    s = size / 32.0
    reach = (EYE_RADIUS - spec.iris_radius) * s
    yaw = gaze.yaw + spec.gaze_bias[0]
    pitch = gaze.pitch + spec.gaze_bias[1]
    return reach * math.cos(pitch) * math.sin(yaw), -reach * math.sin(pitch)


def eye_centers(spec: SynthPersonSpec, size: int = 32) -> list[tuple[float, float]]:
    s = size / 32.0
    cx, cy = (size - 1) / 2.0, EYE_HEIGHT * size
    half = spec.eye_spacing * s / 2.0
    return [(cx - half, cy), (cx + half, cy)]


def _disk(xx, yy, cx, cy, r):
    # Anti-aliased coverage so sub-pixel pupil motion changes intensities.
    return np.clip(r - np.hypot(xx - cx, yy - cy) + 0.5, 0.0, 1.0)


def render_face(spec: SynthPersonSpec, true_gaze: GazeLabel, size: int = 32, seed: int = 0) -> np.ndarray:
    s = size / 32.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    tone = spec.skin_tone
    img = np.empty((size, size, 3))
    img[...] = (tone, tone * 0.85, tone * 0.7)
    hair = yy < 0.15 * size
    img[hair] = (0.15, 0.1, 0.08)
    mouth = _disk(xx, yy, (size - 1) / 2.0, 0.78 * size, 3.0 * s) * (np.abs(yy - 0.78 * size) < 1.0 * s)
    img = img * (1 - mouth[..., None]) + mouth[..., None] * np.array([0.55, 0.2, 0.2])
    nose = _disk(xx, yy, (size - 1) / 2.0, 0.6 * size, 1.5 * s)
    img = img * (1 - 0.3 * nose[..., None])
    dx, dy = pupil_offset(spec, true_gaze, size)
    for cx, cy in eye_centers(spec, size):
        sclera = _disk(xx, yy, cx, cy, EYE_RADIUS * s)[..., None]
        img = img * (1 - sclera) + sclera * 0.95
        pupil = _disk(xx, yy, cx + dx, cy + dy, spec.iris_radius * s)[..., None]
        img = img * (1 - pupil) + pupil * 0.08
    rng = np.random.default_rng(seed)
    img = img + rng.normal(0.0, spec.noise_sigma, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# (low, high) at shift 0 and the displacement applied at shift 1.
APPEARANCE_RANGES = {
    "iris_radius": ((1.2, 1.7), 0.5),
    "eye_spacing": ((13.0, 15.5), 1.5),
    "skin_tone": ((0.5, 0.75), -0.25),
    "noise_sigma": ((0.01, 0.02), 0.01),
}


def sample_person(
    person_id: str, bias_scale: float, rng: np.random.Generator, appearance_shift: float = 0.0
) -> SynthPersonSpec:
    # Always drawn so persons keep their appearance across bias scales.
    bias = np.clip(bias_scale * rng.uniform(-1.0, 1.0, 2), -MAX_BIAS, MAX_BIAS) + 0.0
    look = {
        name: float(rng.uniform(lo + appearance_shift * d, hi + appearance_shift * d))
        for name, ((lo, hi), d) in APPEARANCE_RANGES.items()
    }
    return SynthPersonSpec(person_id, (float(bias[0]), float(bias[1])), **look)


def sample_gaze(rng: np.random.Generator) -> GazeLabel:
    yaw, pitch = np.clip(rng.normal(0.0, GAZE_STD, 2), -GAZE_LIMIT, GAZE_LIMIT)
    return GazeLabel(float(yaw), float(pitch))


def _save_png(img: np.ndarray, path: Path):
    Image.fromarray(np.round(img * 255).astype(np.uint8), "RGB").save(path, format="PNG")


def generate_world(cfg: SynthWorldConfig, out_dir: str | Path) -> tuple[Path, Path, Path]:
    """Write the labeled source, unlabeled train-person and labeled test-person manifests."""
    out = Path(out_dir)
    specs: dict[str, list[SynthPersonSpec]] = {}
    groups = {
        "source": (cfg.n_source_persons, cfg.source_samples_per_person, 0.0, 0.0),
        "train": (cfg.n_train_persons, cfg.samples_per_person, cfg.bias_scale, cfg.appearance_shift),
        "test": (cfg.n_test_persons, cfg.samples_per_person, cfg.bias_scale, cfg.appearance_shift),
    }
    rows: dict[str, list[dict]] = {}
    for split, (n_persons, n_samples, bias_scale, shift) in groups.items():
        (out / "images" / split).mkdir(parents=True, exist_ok=True)
        rows[split] = []
        specs[split] = []
        for p in range(n_persons):
            prng = np.random.default_rng(derive_seed(cfg.seed, "person", split, p))
            spec = sample_person(f"{split}{p:03d}", bias_scale, prng, shift)
            specs[split].append(spec)
            for j in range(n_samples):
                grng = np.random.default_rng(derive_seed(cfg.seed, "gaze", split, p, j))
                gaze = sample_gaze(grng)
                img = render_face(spec, gaze, cfg.image_size, derive_seed(cfg.seed, "noise", split, p, j))
                rel = f"images/{split}/{spec.person_id}_{j:03d}.png"
                _save_png(img, out / rel)
                row = {"path": rel}
                if split != "source":
                    row["person_id"] = spec.person_id
                if split != "train":
                    row.update(yaw=gaze.yaw, pitch=gaze.pitch)
                rows[split].append(row)
    paths = (
        write_manifest(rows["source"], out / "source.jsonl"),
        write_manifest(rows["train"], out / "persons_train.jsonl"),
        write_manifest(rows["test"], out / "persons_test.jsonl"),
    )
    with open(out / "world.json", "w") as fh:
        json.dump({"config": asdict(cfg), "persons": {k: [asdict(s) for s in v] for k, v in specs.items()}},
                  fh, indent=1, sort_keys=True)
    return paths
