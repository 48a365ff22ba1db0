"""Dense latent grids, the 2D FFT, and high-frequency amplitude metrics."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import _kernels


class DimensionError(ValueError):
    """Array dimensions are invalid or incompatible."""


class ParameterError(ValueError):
    """A scalar parameter is outside its admissible range."""


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LatentGrid:
    """A C x H x W real tensor with power-of-two spatial sides."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise DimensionError(f"expected a C x H x W array, got shape {v.shape}")
        c, h, w = v.shape
        if c < 1:
            raise DimensionError("a grid needs at least one channel")
        if not (is_power_of_two(h) and is_power_of_two(w)):
            raise DimensionError(f"spatial dims must be powers of two, got {h}x{w}")
        if not np.all(np.isfinite(v)):
            raise ValueError("grid values must be finite")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape


@dataclass(frozen=True, eq=False)
class Spectrum:
    """2D DFT coefficients plus the radial frequency magnitude of every bin.

    ``freq_mag[k, l]`` is the Euclidean norm of the signed frequencies
    (cycles/sample) in numpy's standard ``fftfreq`` layout.
    """

    coeffs: np.ndarray
    freq_mag: np.ndarray


@dataclass(frozen=True, eq=False)
class HighFreqAmplitude:
    masked_amps: np.ndarray
    total: float
    h: float


def channel_mean(grid: LatentGrid) -> np.ndarray:
    """Average the grid over its channel axis."""
    v = grid.values
    acc = v[0].copy()
    for c in range(1, v.shape[0]):
        acc += v[c]
    return acc / v.shape[0]


def frequency_magnitude(h: int, w: int) -> np.ndarray:
    fy = np.fft.fftfreq(h)
    fx = np.fft.fftfreq(w)
    return np.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)


def fft2d(plane: np.ndarray) -> Spectrum:
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim != 2:
        raise DimensionError(f"expected a 2D plane, got shape {plane.shape}")
    h, w = plane.shape
    if not (is_power_of_two(h) and is_power_of_two(w)):
        raise DimensionError(f"FFT needs power-of-two sides, got {h}x{w}")
    re, im = _kernels.fft2(plane)
    return Spectrum(coeffs=re + 1j * im, freq_mag=frequency_magnitude(h, w))


def _check_h(h: float) -> float:
    h = float(h)
    if not 0.0 <= h < 1.0:
        raise ParameterError(f"h must lie in [0, 1), got {h}")
    return h


def high_freq_amplitude(spec: Spectrum, h: float) -> HighFreqAmplitude:
    """Amplitudes of bins whose frequency magnitude exceeds ``h`` times the maximum.

    The comparison is strict, so the DC bin never passes.
    """
    h = _check_h(h)
    mask = spec.freq_mag > h * spec.freq_mag.max()
    amps = np.where(mask, np.abs(spec.coeffs), 0.0)
    return HighFreqAmplitude(masked_amps=amps, total=float(amps.sum()), h=h)


def delta_high_freq(plane_t: np.ndarray, plane_prev: np.ndarray, h: float) -> HighFreqAmplitude:
    """High-frequency amplitude of the spectral change between two planes."""
    plane_t = np.asarray(plane_t, dtype=np.float64)
    plane_prev = np.asarray(plane_prev, dtype=np.float64)
    if plane_t.shape != plane_prev.shape:
        raise DimensionError(f"plane shapes differ: {plane_t.shape} vs {plane_prev.shape}")
    h = _check_h(h)
    a = fft2d(plane_t)
    b = fft2d(plane_prev)
    return high_freq_amplitude(Spectrum(coeffs=a.coeffs - b.coeffs, freq_mag=a.freq_mag), h)


def radial_profile(spec: Spectrum, bins: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Mean amplitude per radial frequency bin, for reporting only."""
    if bins is None:
        bins = max(spec.coeffs.shape) // 2 + 1
    r = spec.freq_mag.ravel()
    amp = np.abs(spec.coeffs).ravel()
    edges = np.linspace(0.0, r.max(), bins + 1)
    idx = np.clip(np.searchsorted(edges, r, side="right") - 1, 0, bins - 1)
    sums = np.bincount(idx, weights=amp, minlength=bins)
    counts = np.bincount(idx, minlength=bins)
    centers = 0.5 * (edges[:-1] + edges[1:])
    with np.errstate(invalid="ignore"):
        return centers, np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)


def write_spectrum_csv(path, spec: Spectrum) -> None:
    """Write (freq_mag, amplitude) pairs, one row per bin in row-major order."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["freq_mag", "amplitude"])
        for f, a in zip(spec.freq_mag.ravel(), np.abs(spec.coeffs).ravel()):
            out.writerow([repr(float(f)), repr(float(a))])
