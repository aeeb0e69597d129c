"""Dataset abstractions, JSON-lines manifests and seeded task construction.

Source data is labeled and anonymous; person-specific data is grouped by
person ID and unlabeled (labels are tolerated only in oracle mode, which is
reserved for evaluation).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image


class SchemaError(ValueError):
    pass


class InsufficientSamplesError(ValueError):
    def __init__(self, person_id: str, available: int, required: int):
        super().__init__(f"person {person_id!r} has {available} samples, needs {required}")
        self.person_id = person_id
        self.available = available
        self.required = required


@dataclass(frozen=True)
class GazeLabel:
    yaw: float
    pitch: float

    def __post_init__(self):
        if not (math.isfinite(self.yaw) and math.isfinite(self.pitch)):
            raise ValueError(f"non-finite gaze label ({self.yaw}, {self.pitch})")
        if abs(self.yaw) > math.pi:
            raise ValueError(f"yaw {self.yaw} outside [-pi, pi]")
        if abs(self.pitch) > math.pi / 2:
            raise ValueError(f"pitch {self.pitch} outside [-pi/2, pi/2]")

    def as_array(self) -> np.ndarray:
        return np.array([self.yaw, self.pitch])


@dataclass(frozen=True, eq=False)
class GazeSample:
    image: np.ndarray  # H x W x C, float32 in [0, 1]
    label: Optional[GazeLabel] = None
    person_id: Optional[str] = None
    path: Optional[str] = None  # as written in the manifest


def stack_images(samples: Sequence[GazeSample]) -> np.ndarray:
    return np.stack([s.image for s in samples])


def stack_labels(samples: Sequence[GazeSample]) -> np.ndarray:
    if any(s.label is None for s in samples):
        raise ValueError("all samples must carry gaze labels")
    return np.stack([s.label.as_array() for s in samples])


@dataclass(eq=False)
class SourceDataset:
    samples: list[GazeSample]
    name: str = "source"

    def __post_init__(self):
        if not self.samples:
            raise SchemaError("source dataset is empty")
        for i, s in enumerate(self.samples):
            if s.label is None:
                raise SchemaError(f"source sample {i} has no gaze label")
            if s.person_id is not None:
                raise SchemaError(f"source sample {i} carries a person_id")

    def __len__(self) -> int:
        return len(self.samples)

    @cached_property
    def images(self) -> np.ndarray:
        return stack_images(self.samples)

    @cached_property
    def labels(self) -> np.ndarray:
        return stack_labels(self.samples)


@dataclass(eq=False)
class PersonTaskset:
    persons: dict[str, list[GazeSample]]
    labeled: bool = False  # oracle mode
    min_per_person: int = 10

    def __post_init__(self):
        for pid, samples in self.persons.items():
            if len(samples) < self.min_per_person:
                raise InsufficientSamplesError(pid, len(samples), self.min_per_person)
            for s in samples:
                if s.label is not None and not self.labeled:
                    raise SchemaError(f"person {pid!r} sample carries a gaze label outside oracle mode")
                if self.labeled and s.label is None:
                    raise SchemaError(f"person {pid!r} sample lacks a label in oracle mode")

    @property
    def person_ids(self) -> list[str]:
        return list(self.persons)

    def __len__(self) -> int:
        return len(self.persons)


@dataclass(eq=False)
class Task:
    person_id: str
    support: list[GazeSample]
    query: list[GazeSample]
    support_idx: tuple[int, ...] = field(default=())
    query_idx: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if set(self.support_idx) & set(self.query_idx):
            raise ValueError("support and query overlap")
        if not self.query:
            raise ValueError("query set must be non-empty")


def _load_image(path: Path, size: int) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        w, h = im.size
        if w != h:
            side = min(w, h)
            left, top = (w - side) // 2, (h - side) // 2
            im = im.crop((left, top, left + side, top + side))
        if im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0


def _read_rows(path: Path) -> list[tuple[int, dict]]:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(row, dict) or not isinstance(row.get("path"), str):
                raise SchemaError(f"{path}:{lineno}: row must be an object with a string 'path'")
            rows.append((lineno, row))
    return rows


def _label_from(row: dict, where: str) -> GazeLabel:
    try:
        return GazeLabel(float(row["yaw"]), float(row["pitch"]))
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{where}: bad gaze label ({exc})") from None


def load_manifest(
    path: str | Path,
    kind: str,
    *,
    image_size: int = 224,
    oracle_mode: bool = False,
    min_per_person: int = 10,
    min_samples_filter: int = 0,
):
    """Load a source or person-specific manifest.

    ``min_samples_filter`` drops persons with fewer samples before the
    ``min_per_person`` invariant is checked; 0 disables filtering.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    if kind not in ("source", "person-specific"):
        raise ValueError(f"kind must be 'source' or 'person-specific', got {kind!r}")
    root = path.parent
    rows = _read_rows(path)

    if kind == "source":
        samples = []
        for lineno, row in rows:
            where = f"{path}:{lineno}"
            if "person_id" in row:
                raise SchemaError(f"{where}: source rows must not carry person_id")
            if "yaw" not in row or "pitch" not in row:
                raise SchemaError(f"{where}: source rows require yaw and pitch")
            samples.append(GazeSample(_load_image(root / row["path"], image_size), _label_from(row, where), None, row["path"]))
        if not samples:
            raise SchemaError(f"{path}: source manifest is empty")
        return SourceDataset(samples, name=path.stem)

    persons: dict[str, list[GazeSample]] = {}
    for lineno, row in rows:
        where = f"{path}:{lineno}"
        if not isinstance(row.get("person_id"), str):
            raise SchemaError(f"{where}: person rows require a string person_id")
        has_label = "yaw" in row or "pitch" in row
        if has_label and not oracle_mode:
            raise SchemaError(f"{where}: gaze label on person-specific data (oracle_mode is off)")
        if oracle_mode and not ("yaw" in row and "pitch" in row):
            raise SchemaError(f"{where}: oracle mode requires yaw and pitch on every row")
        label = _label_from(row, where) if oracle_mode else None
        img = _load_image(root / row["path"], image_size)
        persons.setdefault(row["person_id"], []).append(GazeSample(img, label, row["person_id"], row["path"]))
    if min_samples_filter:
        persons = {k: v for k, v in persons.items() if len(v) >= min_samples_filter}
    return PersonTaskset(persons, labeled=oracle_mode, min_per_person=min_per_person)


def manifest_rows(dataset: SourceDataset | PersonTaskset) -> list[dict]:
    rows = []
    if isinstance(dataset, SourceDataset):
        for s in dataset.samples:
            rows.append({"path": s.path, "yaw": s.label.yaw, "pitch": s.label.pitch})
    else:
        for pid, samples in dataset.persons.items():
            for s in samples:
                row = {"path": s.path, "person_id": pid}
                if s.label is not None:
                    row.update(yaw=s.label.yaw, pitch=s.label.pitch)
                rows.append(row)
    return rows


def write_manifest(rows: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    return path


def make_task(taskset: PersonTaskset, person_id: str, K: int, t: int, seed: int) -> Task:
    samples = taskset.persons[person_id]
    if len(samples) < K + t:
        raise InsufficientSamplesError(person_id, len(samples), K + t)
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(samples))[: K + t]
    s_idx, q_idx = tuple(int(i) for i in idx[:K]), tuple(int(i) for i in idx[K:])
    return Task(
        person_id,
        [samples[i] for i in s_idx],
        [samples[i] for i in q_idx],
        s_idx,
        q_idx,
    )


def sample_task_batch(taskset: PersonTaskset, n_tasks: int, K: int, t: int, seed: int) -> list[Task]:
    ids = taskset.person_ids
    if not ids:
        raise ValueError("empty taskset")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(ids), size=n_tasks, replace=n_tasks > len(ids))
    task_seeds = rng.integers(0, 2**31 - 1, size=n_tasks)
    return [make_task(taskset, ids[p], K, t, int(s)) for p, s in zip(picks, task_seeds)]
