"""Per-adapter classifier-free guidance and weighted collective guidance."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .numerics import DimensionError, ParameterError

DEFAULT_GUIDANCE_SCALE = 10.0


@dataclass(frozen=True)
class GuidanceWeights:
    weights: tuple[float, ...]
    scale: float = DEFAULT_GUIDANCE_SCALE
    dominant: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if not all(np.isfinite(self.weights)):
            raise ValueError("guidance weights must be finite")


def cfg_single(uncond: np.ndarray, cond: np.ndarray, s: float) -> np.ndarray:
    """``(1 - s) * uncond + s * cond``."""
    uncond = np.asarray(uncond)
    cond = np.asarray(cond)
    if uncond.shape != cond.shape:
        raise DimensionError(f"prediction shapes differ: {uncond.shape} vs {cond.shape}")
    return (1.0 - s) * uncond + s * cond


def collective_guidance(grids, weights) -> np.ndarray:
    """``(1/N) * sum_i w_i * grid_i``, reduced in input order."""
    grids = list(grids)
    if not grids:
        raise ParameterError("collective guidance needs at least one grid")
    w = weights.weights if isinstance(weights, GuidanceWeights) else tuple(float(x) for x in weights)
    if len(w) != len(grids):
        raise ParameterError(f"{len(w)} weights for {len(grids)} grids")
    shape = np.shape(grids[0])
    acc = None
    for wi, g in zip(w, grids):
        if np.shape(g) != shape:
            raise DimensionError(f"grid shapes differ: {np.shape(g)} vs {shape}")
        term = wi * np.asarray(g)
        acc = term if acc is None else acc + term
    return acc / len(grids)


def _w_dom_exact(n: int, turn: int, alpha: Fraction) -> Fraction:
    w = Fraction(n) - alpha
    for k in range(1, turn + 1):
        w -= Fraction(1, 2 ** k)
    return w


def non_dominant_weight(n: int, w_dom):
    """Weight shared by every non-dominant adapter: ``N / (w_dom + N - 1)``."""
    if isinstance(w_dom, Fraction):
        return Fraction(n) / (w_dom + n - 1)
    return n / (w_dom + n - 1)


def dominant_weight_schedule(n: int, turn: int, *, alpha: float = 0.5, exact: bool = False,
                             w_init: float | None = None, decay: bool = True):
    """Dominant and non-dominant weights at a given dominance turn.

    ``w_dom`` starts at ``N - alpha`` (or ``w_init``) and loses ``0.5**i`` at
    turn i. With ``exact=True`` the pair is returned as ``Fraction``s.
    """
    if n < 1 or turn < 0:
        raise ParameterError("need N >= 1 and turn >= 0")
    start = Fraction(w_init) if w_init is not None else Fraction(n) - Fraction(alpha)
    w = _w_dom_exact(n, turn if decay else 0, Fraction(n) - start)
    w_non = non_dominant_weight(n, w)
    if exact:
        return w, w_non
    w_f = float(w)
    return w_f, non_dominant_weight(n, w_f)
