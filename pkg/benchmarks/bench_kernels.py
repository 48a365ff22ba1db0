"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeat N]

Times the convolution and FFT kernels on the shapes the toy denoiser uses,
checks the two backends agree bit for bit, and times one full denoiser
forward pass under each backend (in a subprocess, since the backend is
chosen at import).
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from lorafuse import _kernels

FORWARD_SNIPPET = """
import timeit
from lorafuse import _kernels
from lorafuse.denoiser import Branch, DenoiserSpec, forward_full, init_net, initial_latent, text_embedding
spec = DenoiserSpec()
net = init_net(spec)
b, x, c = Branch.base(net), initial_latent(spec, 0), text_embedding("p", spec.embed_dim)
n = {repeat}
t = min(timeit.repeat(lambda: forward_full(b, x, c, 10), number=n, repeat=3)) / n
print(_kernels.BACKEND, t)
"""

CASES = [
    ("conv 4->8 @16x16", lambda rng: (rng.standard_normal((4, 16, 16)), rng.standard_normal((8, 4, 3, 3)))),
    ("conv 16->8 @16x16", lambda rng: (rng.standard_normal((16, 16, 16)), rng.standard_normal((8, 16, 3, 3)))),
    ("conv 32->16 @8x8", lambda rng: (rng.standard_normal((32, 8, 8)), rng.standard_normal((16, 32, 3, 3)))),
]


def bench(fn, repeat):
    return min(timeit.repeat(fn, number=repeat, repeat=3)) / repeat


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args(argv)
    backends = _kernels.available_backends()
    print(f"backends: {', '.join(backends)} (default {_kernels.BACKEND})")
    rng = np.random.default_rng(0)
    rows = []
    for name, make in CASES:
        x, w = make(rng)
        outs = {b: _kernels.conv2d_same(x, w, backend=b) for b in backends}
        same = len({o.tobytes() for o in outs.values()}) == 1
        times = {b: bench(lambda b=b: _kernels.conv2d_same(x, w, backend=b), args.repeat) for b in backends}
        rows.append((name, times, same))
    for size in (16, 64):
        p = rng.standard_normal((size, size))
        outs = {b: _kernels.fft2(p, backend=b) for b in backends}
        same = len({o[0].tobytes() + o[1].tobytes() for o in outs.values()}) == 1
        times = {b: bench(lambda b=b: _kernels.fft2(p, backend=b), args.repeat) for b in backends}
        rows.append((f"fft2 {size}x{size}", times, same))

    header = f"{'kernel':<20}" + "".join(f"{b + ' (us)':>16}" for b in backends) + f"{'speedup':>10}{'bit-equal':>11}"
    print(header)
    for name, times, same in rows:
        line = f"{name:<20}" + "".join(f"{times[b] * 1e6:>16.1f}" for b in backends)
        speed = times["python"] / times["cython"] if "cython" in times else float("nan")
        print(line + f"{speed:>10.2f}{str(same):>11}")

    print("\nfull forward pass (default DenoiserSpec):")
    for b in backends:
        env = dict(os.environ, LORAFUSE_KERNELS=b)
        out = subprocess.run([sys.executable, "-c", FORWARD_SNIPPET.format(repeat=max(1, args.repeat // 10))],
                             env=env, capture_output=True, text=True, check=True).stdout.split()
        print(f"  {out[0]:<8} {float(out[1]) * 1e3:8.2f} ms")


if __name__ == "__main__":
    main()
