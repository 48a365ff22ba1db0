"""Hot kernels with a compiled backend and a numpy fallback.

The compiled extension is used when it imports; set ``LORAFUSE_KERNELS=python``
to force the fallback. Both backends return bit-identical results.
"""
import os

import numpy as np

from . import _pykernels

_BACKENDS = {"python": _pykernels}
try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None
else:
    _BACKENDS["cython"] = _ckernels


def available_backends():
    return sorted(_BACKENDS)


def _select():
    wanted = os.environ.get("LORAFUSE_KERNELS", "").strip().lower()
    if wanted:
        if wanted not in _BACKENDS:
            raise ImportError(f"LORAFUSE_KERNELS={wanted!r} is not available; have {available_backends()}")
        return wanted
    return "cython" if "cython" in _BACKENDS else "python"


BACKEND = _select()


def _get(backend):
    if not backend:
        return _impl
    try:
        return _BACKENDS[backend]
    except KeyError:
        raise ValueError(f"unknown kernel backend {backend!r}; have {available_backends()}") from None
_impl = _BACKENDS[BACKEND]

_TWIDDLES = {}


def twiddles(n):
    """exp(-2*pi*i*k/n) for k < n/2, as (cos, -sin) arrays shared by both backends."""
    tw = _TWIDDLES.get(n)
    if tw is None:
        ang = 2.0 * np.pi * np.arange(n // 2) / n
        tw = (np.ascontiguousarray(np.cos(ang)), np.ascontiguousarray(-np.sin(ang)))
        _TWIDDLES[n] = tw
    return tw


def conv2d_same(x, w, backend=None):
    """3x3-style 'same' convolution (zero padding) of (Cin, H, W) by (Cout, Cin, k, k)."""
    impl = _get(backend)
    k = w.shape[2]
    pad = k // 2
    xp = np.ascontiguousarray(np.pad(x, ((0, 0), (pad, pad), (pad, pad))), dtype=np.float64)
    return impl.conv2d_padded(xp, np.ascontiguousarray(w, dtype=np.float64))


def fft2(plane, backend=None):
    """Forward 2D DFT of a real (H, W) plane with power-of-two sides; returns (re, im)."""
    impl = _get(backend)
    plane = np.asarray(plane, dtype=np.float64)
    h, w = plane.shape
    re = np.ascontiguousarray(plane)
    im = np.zeros_like(re)
    tr, ti = twiddles(w)
    re, im = impl.fft_rows(re, im, tr, ti)
    tr, ti = twiddles(h)
    re, im = impl.fft_rows(np.ascontiguousarray(re.T), np.ascontiguousarray(im.T), tr, ti)
    return np.ascontiguousarray(re.T), np.ascontiguousarray(im.T)
