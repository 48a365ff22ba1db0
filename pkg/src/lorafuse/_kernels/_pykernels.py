"""Pure-numpy reference kernels.

Every kernel here fixes its per-element operation order so the compiled
twin in ``_ckernels.pyx`` reproduces it bit for bit.
"""
import numpy as np


def conv2d_padded(xp, w):
    """Convolve a zero-padded input with a square kernel bank.

    ``xp`` has shape (Cin, H + k - 1, W + k - 1), ``w`` has shape
    (Cout, Cin, k, k). Each output pixel accumulates ``w * x`` in
    (ci, ky, kx) order starting from 0.0.
    """
    cout, cin, k, _ = w.shape
    h = xp.shape[1] - k + 1
    wd = xp.shape[2] - k + 1
    out = np.zeros((cout, h, wd))
    for ci in range(cin):
        for ky in range(k):
            for kx in range(k):
                out += w[:, ci, ky, kx, None, None] * xp[ci, ky:ky + h, kx:kx + wd]
    return out


def _bit_reverse(n):
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft_rows(re, im, tw_re, tw_im):
    """In-order radix-2 DIT FFT along the last axis of 2D (rows, n) arrays.

    ``tw_re``/``tw_im`` hold exp(-2*pi*i*k/n) for k < n/2.
    """
    rows, n = re.shape
    rev = _bit_reverse(n)
    ar = re[:, rev].copy()
    ai = im[:, rev].copy()
    size = 2
    while size <= n:
        half = size // 2
        step = n // size
        wr = tw_re[0:half * step:step]
        wi = tw_im[0:half * step:step]
        br = ar.reshape(rows, n // size, size)
        bi = ai.reshape(rows, n // size, size)
        ur = br[:, :, :half].copy()
        ui = bi[:, :, :half].copy()
        xr = br[:, :, half:]
        xi = bi[:, :, half:]
        vr = xr * wr - xi * wi
        vi = xr * wi + xi * wr
        br[:, :, :half] = ur + vr
        bi[:, :, :half] = ui + vi
        br[:, :, half:] = ur - vr
        bi[:, :, half:] = ui - vi
        size *= 2
    return ar, ai
