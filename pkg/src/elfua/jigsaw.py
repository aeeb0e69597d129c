"""Jigsaw pretext task: permutation vocabulary, patch shuffling, pretext labels."""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

N_CANDIDATES = 10_000


@dataclass(frozen=True)
class PermutationSet:
    grid: int
    perms: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        n = self.grid * self.grid
        if not self.perms:
            raise ValueError("permutation set is empty")
        if tuple(self.perms[0]) != tuple(range(n)):
            raise ValueError("perms[0] must be the identity")
        for p in self.perms:
            if sorted(p) != list(range(n)):
                raise ValueError(f"not a permutation of 0..{n - 1}: {p}")
        if len(set(self.perms)) != len(self.perms):
            raise ValueError("permutations must be pairwise distinct")

    @property
    def M(self) -> int:
        return len(self.perms)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.perms, dtype=np.int64)

    def to_json(self) -> str:
        return json.dumps({"grid": self.grid, "perms": [list(p) for p in self.perms]})

    @classmethod
    def from_json(cls, text: str) -> "PermutationSet":
        d = json.loads(text)
        return cls(int(d["grid"]), tuple(tuple(int(i) for i in p) for p in d["perms"]))


@dataclass(frozen=True, eq=False)
class PretextExample:
    shuffled_image: np.ndarray
    class_index: int


def build_permutation_set(M: int, grid: int = 4, seed: int = 0, n_candidates: int = N_CANDIDATES) -> PermutationSet:
    """Identity first, then greedy max-min Hamming picks from random candidates.

    When the whole permutation space is no larger than the candidate pool it is
    enumerated instead of sampled.
    """
    n = grid * grid
    space = math.factorial(n)
    if M < 1:
        raise ValueError(f"M must be >= 1, got {M}")
    if M > space:
        raise ValueError(f"M={M} exceeds the {space} permutations of a {grid}x{grid} grid")
    rng = np.random.default_rng(seed)
    chosen = np.arange(n)[None, :]
    enumerate_all = space <= n_candidates
    if enumerate_all:
        pool = np.array(list(itertools.permutations(range(n))), dtype=np.int64)
    while len(chosen) < M:
        if not enumerate_all:
            pool = np.argsort(rng.random((n_candidates, n)), axis=1)
        dist = (pool[:, None, :] != chosen[None, :, :]).sum(-1).min(1)
        best = int(np.argmax(dist))
        if dist[best] == 0:
            raise RuntimeError("candidate pool exhausted without a new permutation")
        chosen = np.vstack([chosen, pool[best]])
    return PermutationSet(grid, tuple(tuple(int(i) for i in p) for p in chosen))


def _patches(image: np.ndarray, grid: int) -> np.ndarray:
    h, w = image.shape[:2]
    if h % grid or w % grid:
        raise ValueError(f"image size {h}x{w} not divisible by grid {grid}")
    ph, pw = h // grid, w // grid
    rest = image.shape[2:]
    return image.reshape(grid, ph, grid, pw, *rest).swapaxes(1, 2).reshape(grid * grid, ph, pw, *rest)


def _compose(patches: np.ndarray, grid: int) -> np.ndarray:
    _, ph, pw = patches.shape[:3]
    rest = patches.shape[3:]
    return patches.reshape(grid, grid, ph, pw, *rest).swapaxes(1, 2).reshape(grid * ph, grid * pw, *rest)


def _check_index(perm_index: int, pset: PermutationSet):
    if not 0 <= perm_index < pset.M:
        raise IndexError(f"perm_index {perm_index} outside [0, {pset.M})")


def shuffle_image(image: np.ndarray, perm_index: int, pset: PermutationSet) -> PretextExample:
    """Output patch p is input patch ``perms[perm_index][p]`` (raster order)."""
    _check_index(perm_index, pset)
    perm = np.asarray(pset.perms[perm_index])
    out = _compose(_patches(image, pset.grid)[perm], pset.grid)
    return PretextExample(out, int(perm_index))


def unshuffle_image(image: np.ndarray, perm_index: int, pset: PermutationSet) -> np.ndarray:
    _check_index(perm_index, pset)
    inverse = np.argsort(pset.perms[perm_index])
    return _compose(_patches(image, pset.grid)[inverse], pset.grid)


def make_pretext_batch(images: Sequence[np.ndarray], pset: PermutationSet, seed: int) -> list[PretextExample]:
    if len(images) == 0:
        raise ValueError("make_pretext_batch needs at least one image")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, pset.M, size=len(images))
    return [shuffle_image(img, int(i), pset) for img, i in zip(images, idx)]


def pretext_arrays(
    images: Sequence[np.ndarray], pset: PermutationSet, seed: int, include_original: bool = True
) -> tuple[np.ndarray, np.ndarray]:
    """Stacked pretext inputs and class indices for one inner step.

    With ``include_original`` each unshuffled image is appended as class 0.
    """
    examples = make_pretext_batch(images, pset, seed)
    xs = [e.shuffled_image for e in examples]
    ys = [e.class_index for e in examples]
    if include_original:
        xs.extend(images)
        ys.extend([0] * len(images))
    return np.stack(xs), np.asarray(ys, dtype=np.int64)
