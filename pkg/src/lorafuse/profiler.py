"""Frequency profiling of adapters, category ordering and H/L partition.

The profiled tensor is the evolving latent. Latent ``k`` is the state after
``k`` denoising steps (``k = 0`` is the initial noise, diffusion time
``T - k``); a series point at ``k`` compares latent ``k`` with latent
``k - z``, so the first point sits at ``k = z`` (diffusion time ``T - z``).
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .adapters import LoraAdapter
from .denoiser import (Branch, DenoiserNet, forward_full, initial_latent, null_embedding,
                       scheduler_step, text_embedding)
from .guidance import DEFAULT_GUIDANCE_SCALE, cfg_single
from .numerics import ParameterError, channel_mean, delta_high_freq

DEFAULT_H = 0.2
EARLY_FRACTION = 0.25
DEFAULT_PROMPT = "a toy prompt"


class AlignmentError(ValueError):
    """Series being averaged do not share (h, z, timesteps)."""


def default_lag(T: int) -> int:
    """20 at T = 200, ``floor(T / 10)`` otherwise (at least 1)."""
    return max(1, T // 10)


@dataclass(frozen=True)
class FrequencySeries:
    adapter_id: str
    category: str
    h: float
    z: int
    T: int
    points: tuple[tuple[int, float], ...]

    def __post_init__(self):
        ts = [t for t, _ in self.points]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("series timesteps must be strictly increasing")
        if any(v < 0 for _, v in self.points):
            raise ValueError("high-frequency totals are non-negative")

    @property
    def steps(self) -> tuple[int, ...]:
        return tuple(t for t, _ in self.points)

    @property
    def values(self) -> np.ndarray:
        return np.array([v for _, v in self.points])


@dataclass(frozen=True)
class CategoryProfile:
    category: str
    h: float
    z: int
    steps: tuple[int, ...]
    mean: tuple[float, ...]
    members: tuple[str, ...]

    def early_mean(self, window: tuple[int, int] | None = None) -> float:
        """Mean over ``window`` (inclusive step range) or the first quarter of the points."""
        vals = np.array(self.mean)
        if window is None:
            k = max(1, math.ceil(EARLY_FRACTION * len(vals)))
            return float(vals[:k].mean())
        lo, hi = window
        sel = [v for t, v in zip(self.steps, vals) if lo <= t <= hi]
        if not sel:
            raise ParameterError(f"early window {window} holds no recorded steps")
        return float(np.mean(sel))

    @property
    def statistic(self) -> float:
        return self.early_mean()


@dataclass(frozen=True)
class OrderingO:
    labels: tuple[str, ...]
    statistics: tuple[float, ...]


@dataclass(frozen=True)
class Partition:
    H: tuple[str, ...]
    L: tuple[str, ...]
    ordering: tuple[str, ...]

    def to_json(self) -> dict:
        return {"H": list(self.H), "L": list(self.L), "ordering": list(self.ordering)}


def denoise_trajectory(branch: Branch, T: int, seed: int, s: float = DEFAULT_GUIDANCE_SCALE,
                       prompt: str = DEFAULT_PROMPT) -> list:
    """Single-branch CFG denoising; returns the T + 1 latents, initial noise first."""
    spec = branch.net.spec
    cond = text_embedding(prompt, spec.embed_dim)
    uncond = null_embedding(spec.embed_dim)
    x = initial_latent(spec, seed)
    out = [x]
    for k in range(T):
        t = T - k
        pu, _ = forward_full(branch, x, uncond, t)
        pc, _ = forward_full(branch, x, cond, t)
        x = scheduler_step(x, cfg_single(pu.grid.values, pc.grid.values, s), t, T)
        out.append(x)
    return out


def series_from_latents(latents, h: float, z: int, adapter_id: str = "", category: str = "") -> FrequencySeries:
    T = len(latents) - 1
    if z < 1:
        raise ParameterError("lag z must be at least 1")
    if T <= z:
        raise ParameterError(f"run length T={T} must exceed the lag z={z}")
    planes = [channel_mean(x) for x in latents]
    points = tuple((k, delta_high_freq(planes[k], planes[k - z], h).total) for k in range(z, T + 1))
    return FrequencySeries(adapter_id, category, float(h), int(z), T, points)


def profile_adapter(net: DenoiserNet, adapter: LoraAdapter | None, T: int, seed: int,
                    h: float = DEFAULT_H, z: int | None = None, s: float = DEFAULT_GUIDANCE_SCALE,
                    prompt: str = DEFAULT_PROMPT, weight: float = 1.0) -> FrequencySeries:
    """Run a single-adapter trajectory and record the lagged high-frequency change."""
    z = default_lag(T) if z is None else z
    if z < 1:
        raise ParameterError("lag z must be at least 1")
    if T <= z:
        raise ParameterError(f"run length T={T} must exceed the lag z={z}")
    branch = Branch.with_adapter(net, adapter, weight)
    latents = denoise_trajectory(branch, T, seed, s, prompt)
    aid = adapter.id if adapter is not None else "base"
    cat = adapter.category if adapter is not None else ""
    return series_from_latents(latents, h, z, aid, cat)


def average_category(series_list, category: str | None = None) -> CategoryProfile:
    series_list = list(series_list)
    if not series_list:
        raise ParameterError("need at least one series to average")
    ref = series_list[0]
    for s in series_list[1:]:
        if (s.h, s.z, s.steps) != (ref.h, ref.z, ref.steps):
            raise AlignmentError(f"series {s.adapter_id} is not aligned with {ref.adapter_id}")
    acc = ref.values.copy()
    for s in series_list[1:]:
        acc = acc + s.values
    mean = acc / len(series_list)
    return CategoryProfile(category if category is not None else ref.category, ref.h, ref.z,
                           ref.steps, tuple(float(v) for v in mean),
                           tuple(s.adapter_id for s in series_list))


def rank_categories(profiles, early_window: tuple[int, int] | None = None) -> OrderingO:
    """Order profiles by descending early-window mean; ties go to the smaller label."""
    profiles = list(profiles)
    if not profiles:
        raise ParameterError("need at least one profile to rank")
    scored = sorted(((-p.early_mean(early_window), p.category) for p in profiles))
    return OrderingO(tuple(lbl for _, lbl in scored), tuple(-v for v, _ in scored))


def partition(ordering: OrderingO) -> Partition:
    """Last-ranked label goes to L, the rest to H; a single label goes to H."""
    labels = ordering.labels
    if not labels:
        raise ParameterError("cannot partition an empty ordering")
    if len(labels) == 1:
        return Partition(labels, (), labels)
    return Partition(labels[:-1], labels[-1:], labels)


def order_adapters(series_by_id: dict, early_window=None) -> OrderingO:
    """Adapter-level ordering: category rank first, then each adapter's own statistic, then id."""
    by_cat: dict[str, list] = {}
    for aid in sorted(series_by_id):
        s = series_by_id[aid]
        by_cat.setdefault(s.category, []).append(s)
    profiles = [average_category(v, c) for c, v in sorted(by_cat.items())]
    cat_order = rank_categories(profiles, early_window)
    rank = {c: i for i, c in enumerate(cat_order.labels)}
    own = {aid: average_category([s]).early_mean(early_window) for aid, s in series_by_id.items()}
    ids = sorted(series_by_id, key=lambda a: (rank[series_by_id[a].category], -own[a], a))
    return OrderingO(tuple(ids), tuple(own[a] for a in ids))


def write_series_csv(path, series_list) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["adapter_id", "category", "t", "delta_h_total"])
        for s in series_list:
            for t, v in s.points:
                out.writerow([s.adapter_id, s.category, t, repr(float(v))])


def write_partition_json(path, part: Partition) -> None:
    with open(path, "w") as fh:
        json.dump(part.to_json(), fh, indent=2)
        fh.write("\n")
