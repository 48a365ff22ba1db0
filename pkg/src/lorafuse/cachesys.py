"""Cache plans, cached-feature similarity statistics and window derivation.

Steps are indexed forward from 0 (the first denoising step) to T - 1.

The dynamic plan reads each window as "offset plus stride":

    I1 = {0, c1, 2*c1, ...}              below floor(0.4 T)
    I2 = {floor(0.4 T) + k*c2}           below floor(0.9 T)
    I3 = {floor(0.9 T) + k*c1}           below T
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .numerics import ParameterError

SIMILARITY_LEVEL = 0.9


class StateError(RuntimeError):
    """An operation ran before the data it needs was recorded."""


@dataclass(frozen=True)
class CachePlan:
    T: int
    full_steps: tuple[int, ...]
    strategy: str
    windows: tuple[tuple[int, ...], ...] = ()

    def __post_init__(self):
        steps = tuple(sorted(set(int(s) for s in self.full_steps)))
        object.__setattr__(self, "full_steps", steps)
        if self.T < 1:
            raise ParameterError("T must be at least 1")
        if not steps or steps[0] != 0:
            raise ParameterError("step 0 must perform full inference")
        if steps[-1] >= self.T:
            raise ParameterError("plan steps must lie in [0, T)")

    def is_full(self, step: int) -> bool:
        return step in self._lookup

    @property
    def _lookup(self) -> frozenset:
        cached = self.__dict__.get("_set")
        if cached is None:
            cached = frozenset(self.full_steps)
            object.__setattr__(self, "_set", cached)
        return cached

    def __len__(self) -> int:
        return len(self.full_steps)

    def to_json(self) -> dict:
        return {"T": self.T, "strategy": self.strategy, "indexing": "forward-from-0",
                "full_steps": list(self.full_steps)}


def no_cache_plan(T: int) -> CachePlan:
    return CachePlan(T, tuple(range(T)), "none")


def _check_stride(name: str, c) -> int:
    if isinstance(c, bool) or int(c) != c or c < 1:
        raise ParameterError(f"{name} must be a positive integer, got {c!r}")
    return int(c)


def uniform_plan(T: int, c: int) -> CachePlan:
    c = _check_stride("c", c)
    if T < 1:
        raise ParameterError("T must be at least 1")
    return CachePlan(T, tuple(range(0, T, c)), f"uniform({c})")


def dynamic_bounds(T: int) -> tuple[int, int]:
    """``(floor(0.4 T), floor(0.9 T))`` in exact integer arithmetic."""
    return (4 * T) // 10, (9 * T) // 10


def dynamic_plan(T: int, c1: int = 2, c2: int = 3) -> CachePlan:
    c1 = _check_stride("c1", c1)
    c2 = _check_stride("c2", c2)
    if T < 10:
        raise ParameterError("the dynamic plan needs T >= 10")
    a, b = dynamic_bounds(T)
    i1 = tuple(range(0, a, c1))
    i2 = tuple(range(a, b, c2))
    i3 = tuple(range(b, T, c1))
    return CachePlan(T, i1 + i2 + i3, f"dynamic({c1},{c2})", windows=(i1, i2, i3))


def plan_from_strategy(T: int, strategy: str) -> CachePlan:
    """Parse ``none``, ``uniform(c)`` / ``uniform:c`` or ``dynamic(c1,c2)`` / ``dynamic:c1,c2``."""
    s = strategy.strip().lower().replace(" ", "")
    if s in ("none", "off", "full"):
        return no_cache_plan(T)
    for prefix, build in (("uniform", uniform_plan), ("dynamic", dynamic_plan)):
        if s.startswith(prefix):
            body = s[len(prefix):].strip("():")
            args = [int(x) for x in body.split(",") if x] if body else []
            if prefix == "dynamic" and not args:
                args = [2, 3]
            try:
                return build(T, *args)
            except TypeError as exc:
                raise ParameterError(f"bad arguments for {prefix}: {strategy!r}") from exc
    raise ParameterError(f"unknown cache strategy {strategy!r}")


# -- similarity --------------------------------------------------------------

def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.ravel(a)
    b = np.ravel(b)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 1.0 if na == nb else 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


@dataclass(frozen=True)
class FeatureRecord:
    """Fresh up-block feature at a step next to the cached one available then."""

    t: int
    fresh: np.ndarray
    cached: np.ndarray
    used_cache: bool


@dataclass(frozen=True)
class SimilaritySeries:
    steps: tuple[int, ...]
    similarity: tuple[float, ...]
    used_cache: tuple[bool, ...]
    branch: str = ""
    level: float = SIMILARITY_LEVEL
    extra: dict = field(default_factory=dict)

    @property
    def fraction_above(self) -> float:
        """Share of recorded steps whose similarity exceeds ``level``."""
        if not self.similarity:
            return 0.0
        return sum(s > self.level for s in self.similarity) / len(self.similarity)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["t", "s_t", "used_cache"])
            for t, s, u in zip(self.steps, self.similarity, self.used_cache):
                out.writerow([t, repr(float(s)), str(bool(u)).lower()])


def similarity_series(records, plan: CachePlan | None = None, branch: str = "") -> SimilaritySeries:
    """Cosine similarity between fresh and cached features at every recorded step.

    ``records`` come from a measurement-mode run; steps without a cache
    entry are never recorded. With a plan, ``used_cache`` is taken from it.
    """
    records = sorted(records, key=lambda r: r.t)
    if not records:
        raise StateError("no recorded features; run in measurement mode first")
    steps, sims, used = [], [], []
    for r in records:
        steps.append(r.t)
        sims.append(cosine_similarity(r.fresh, r.cached))
        used.append((not plan.is_full(r.t)) if plan is not None else r.used_cache)
    return SimilaritySeries(tuple(steps), tuple(sims), tuple(used), branch)


def containment_probability(replicates, threshold: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    """Per-step share of replicates r with ``threshold`` in ``[s_r - std, s_r + std]``.

    ``std`` is the population standard deviation of s_t across replicates.
    Returns ``(steps, probability)``.
    """
    replicates = list(replicates)
    if len(replicates) < 2:
        raise ParameterError("window derivation needs at least two replicate runs")
    steps = replicates[0].steps
    for r in replicates[1:]:
        if r.steps != steps:
            raise ParameterError("replicate series must share their steps")
    s = np.array([r.similarity for r in replicates], dtype=np.float64)
    std = s.std(axis=0)
    inside = (s - std <= threshold) & (threshold <= s + std)
    return np.array(steps), inside.mean(axis=0)


def derive_window(replicates, threshold: float = 0.2, confidence: float = 0.9,
                  stride: int = 5) -> tuple[int, int] | None:
    """Largest stride-aligned step range whose mean containment probability meets ``confidence``.

    Only steps that are multiples of ``stride`` enter the average. Ties in
    length go to the earliest range. Returns ``None`` if no range qualifies.
    """
    stride = _check_stride("stride", stride)
    steps, prob = containment_probability(replicates, threshold)
    aligned = [(int(t), float(p)) for t, p in zip(steps, prob) if t % stride == 0]
    if not aligned:
        return None
    prefix = np.concatenate([[0.0], np.cumsum([p for _, p in aligned])])
    best = None
    n = len(aligned)
    for i in range(n):
        for j in range(i, n):
            mean = (prefix[j + 1] - prefix[i]) / (j - i + 1)
            if mean >= confidence - 1e-12:
                span = aligned[j][0] - aligned[i][0]
                if best is None or span > best[0]:
                    best = (span, aligned[i][0], aligned[j][0])
    return None if best is None else (best[1], best[2])


def write_plan_json(path, plan: CachePlan) -> None:
    with open(path, "w") as fh:
        json.dump(plan.to_json(), fh)
        fh.write("\n")
