import numpy as np
import pytest

from lorafuse import _kernels

BACKENDS = _kernels.available_backends()


def direct_conv(x, w):
    cout, cin, k, _ = w.shape
    _, h, wd = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    out = np.zeros((cout, h, wd))
    for o in range(cout):
        for i in range(h):
            for j in range(wd):
                out[o, i, j] = np.sum(w[o] * xp[:, i:i + k, j:j + k])
    return out


def test_python_backend_always_available():
    assert "python" in BACKENDS


@pytest.mark.parametrize("backend", BACKENDS)
def test_conv_matches_direct_loop(backend):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 8, 8))
    w = rng.standard_normal((5, 3, 3, 3))
    np.testing.assert_allclose(_kernels.conv2d_same(x, w, backend=backend), direct_conv(x, w), atol=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
def test_fft_matches_numpy(backend):
    rng = np.random.default_rng(1)
    plane = rng.standard_normal((16, 8))
    re, im = _kernels.fft2(plane, backend=backend)
    ref = np.fft.fft2(plane)
    np.testing.assert_allclose(re, ref.real, atol=1e-12)
    np.testing.assert_allclose(im, ref.imag, atol=1e-12)


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled backend not built")
def test_backends_bit_identical():
    rng = np.random.default_rng(2)
    for _ in range(5):
        x = rng.standard_normal((4, 16, 16))
        w = rng.standard_normal((6, 4, 3, 3))
        a = _kernels.conv2d_same(x, w, backend="python")
        b = _kernels.conv2d_same(x, w, backend="cython")
        assert a.tobytes() == b.tobytes()
        p = rng.standard_normal((32, 16))
        for u, v in zip(_kernels.fft2(p, backend="python"), _kernels.fft2(p, backend="cython")):
            assert u.tobytes() == v.tobytes()


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        _kernels.conv2d_same(np.zeros((1, 4, 4)), np.zeros((1, 1, 3, 3)), backend="fortran")


@pytest.mark.parametrize("backend", BACKENDS)
def test_seeded_run_identical_under_each_backend(backend):
    import json
    import os
    import subprocess
    import sys

    here = os.path.dirname(__file__)
    expected = json.load(open(os.path.join(here, "fixtures", "checksums.json")))["naive_T20_seed0"]
    code = ("from lorafuse.composer import RunConfig, run_compose\n"
            "from lorafuse.denoiser import latent_checksum\n"
            "from lorafuse import _kernels\n"
            "r = run_compose(RunConfig('naive', T=20, seed=0))\n"
            "print(_kernels.BACKEND, latent_checksum(r.latent))\n")
    env = dict(os.environ, LORAFUSE_KERNELS=backend)
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == [backend, expected]
