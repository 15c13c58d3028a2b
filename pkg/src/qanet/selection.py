"""Choosing which T images of a scene enter the network."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

OBJECTIVES = ("maximize_min_coverage", "literal_argmin")


@dataclass(frozen=True)
class SelectionConfig:
    T: int = 9
    p: int = 50
    iterations: int = 1000
    objective: str = "maximize_min_coverage"
    seed: int = 0

    def __post_init__(self):
        if self.T < 1 or self.p < 1 or self.iterations < 1:
            raise ValueError(f"selection needs T>=1, p>=1, iterations>=1; got {self}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")


def _as_stack(qms) -> np.ndarray:
    arrs = [np.asarray(q) for q in qms]
    if not arrs:
        raise ValueError("no quality maps given")
    shape = arrs[0].shape
    for i, a in enumerate(arrs):
        if a.shape != shape:
            raise ValueError(f"QM {i} has shape {a.shape}, expected {shape}")
    return (np.stack(arrs) != 0).astype(np.int64).reshape(len(arrs), -1)


def coverage_score(stack: np.ndarray, subset, p: int) -> int:
    """Sum of the p smallest entries of the coverage map of ``subset``."""
    cover = stack[list(subset)].sum(axis=0)
    if p >= cover.size:
        return int(cover.sum())
    return int(np.partition(cover, p - 1)[:p].sum())


def select_test_subset(qms, cfg: SelectionConfig) -> list:
    """Pick T image indices whose clear pixels cover the scene most evenly.

    Random T-subsets are scored by the sum of the p smallest entries of their
    summed QMs. The default objective keeps the highest score (the subset
    whose worst-covered pixels are best covered); ``literal_argmin`` keeps the
    lowest. When there are no more subsets than iterations, all of them are
    enumerated. Ties go to the lexicographically smallest index set.
    """
    stack = _as_stack(qms)
    n, npix = stack.shape
    T = cfg.T
    if n < T:
        raise ValueError(f"need at least T={T} images, scene has {n}")
    if cfg.p > npix:
        raise ValueError(f"p={cfg.p} exceeds the {npix} pixels of a QM")
    if n == T:
        return list(range(n))
    if math.comb(n, T) <= cfg.iterations:
        candidates = itertools.combinations(range(n), T)
    else:
        rng = np.random.default_rng(cfg.seed)
        candidates = (tuple(sorted(int(i) for i in rng.choice(n, T, replace=False)))
                      for _ in range(cfg.iterations))
    sign = 1 if cfg.objective == "maximize_min_coverage" else -1
    best_key, best = None, None
    for d in candidates:
        key = (-sign * coverage_score(stack, d, cfg.p), d)
        if best_key is None or key < best_key:
            best_key, best = key, d
    return list(best)


def brute_force_best(qms, T: int, p: int, objective: str = "maximize_min_coverage") -> tuple:
    """Optimal score and the tie-broken subset over every T-subset."""
    stack = _as_stack(qms)
    scores = {d: coverage_score(stack, d, p) for d in itertools.combinations(range(len(stack)), T)}
    target = max(scores.values()) if objective == "maximize_min_coverage" else min(scores.values())
    return target, min(d for d, s in scores.items() if s == target)


def sample_train_subset(qms, T: int, seed=None) -> list:
    """Draw T distinct indices, each draw proportional to clear-pixel count.

    Falls back to uniform weights when fewer than T maps have any clear pixel.
    ``seed`` may be an int or a ``numpy.random.Generator``. Indices are
    returned in draw order.
    """
    stack = _as_stack(qms)
    n = len(stack)
    if n < T:
        raise ValueError(f"need at least T={T} images, scene has {n}")
    if n == T:
        return list(range(n))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    weights = stack.sum(axis=1).astype(np.float64)
    if np.count_nonzero(weights) < T:
        weights = np.ones(n)
    chosen = []
    for _ in range(T):
        i = int(rng.choice(n, p=weights / weights.sum()))
        chosen.append(i)
        weights[i] = 0.0
    return chosen
