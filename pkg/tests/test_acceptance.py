"""Acceptance criteria, one test each; a pass/fail line per criterion is printed.

Run with ``pytest tests/test_acceptance.py`` (the lines appear in the
terminal summary) or directly with ``python tests/test_acceptance.py``.
"""
import hashlib
import math
import os
import sys
import time
from fractions import Fraction

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from lorafuse.accounting import count_macs
from lorafuse.adapters import (AdapterStack, apply_delta, fuse_least_squares, fusion_objective,
                               merge_componentwise, merge_elementwise, merge_gradient_fusion, synth_adapter)
from lorafuse.cachesys import dynamic_plan, plan_from_strategy, uniform_plan
from lorafuse.cli import main as cli_main
from lorafuse.composer import METHODS, RunConfig, build_trace, run_compose, switch_schedule
from lorafuse.denoiser import (Branch, DenoiserSpec, FeatureCache, forward_full, forward_partial, init_net,
                               initial_latent, null_embedding, text_embedding)
from lorafuse.guidance import dominant_weight_schedule, non_dominant_weight
from lorafuse.numerics import fft2d
from lorafuse.profiler import average_category, profile_adapter, rank_categories
from oracles import enumerate_dynamic, iterative_fusion, simulate_switch

RESULTS = {}


def record(number, ok, detail, started, budget):
    elapsed = time.perf_counter() - started
    ok = bool(ok) and elapsed < budget
    RESULTS[number] = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {detail}  ({elapsed:.1f} s, budget {budget:g} s)"
    print(RESULTS[number])
    return ok


def naive_dft(plane):
    """Textbook double sum per output bin: O(N^4) work."""
    h, w = plane.shape
    y, x = np.mgrid[0:h, 0:w]
    out = np.empty((h, w), dtype=complex)
    for k in range(h):
        for l in range(w):
            out[k, l] = np.sum(plane * np.exp(-2j * np.pi * (k * y / h + l * x / w)))
    return out


def test_criterion_01_cache_plan_exactness():
    t0 = time.perf_counter()
    p = dynamic_plan(200, 2, 3)
    oracle = enumerate_dynamic(200, 2, 3)
    sizes = tuple(len(w) for w in p.windows)
    ok = sizes == (40, 34, 10) and len(p) == 84 and p.windows == tuple(tuple(w) for w in oracle)
    grid = [(T, c) for T in range(1, 41) for c in range(1, 6)]
    bad = [(T, c) for T, c in grid if len(uniform_plan(T, c)) != math.ceil(T / c)]
    ok &= len(grid) == 200 and not bad
    assert record(1, ok, f"dynamic(200,2,3) windows {sizes} total {len(p)}; uniform sizes exact on "
                         f"{len(grid) - len(bad)}/{len(grid)} cases", t0, 1)


def test_criterion_02_fft_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_abs, worst_rel, n = 0.0, 0.0, 0
    for size in (8, 16):
        for _ in range(100):
            p = rng.standard_normal((size, size))
            c = fft2d(p).coeffs
            worst_abs = max(worst_abs, float(np.max(np.abs(c - naive_dft(p)))))
            e = float(np.sum(np.abs(c) ** 2))
            ref = size * size * float(np.sum(p * p))
            worst_rel = max(worst_rel, abs(e - ref) / ref)
            n += 1
    ok = worst_abs <= 1e-9 and worst_rel <= 1e-9
    assert record(2, ok, f"{n} planes: max |fft - dft| {worst_abs:.2e}, max Parseval rel err {worst_rel:.2e}",
                  t0, 10)


CATEGORIES = ("style", "character", "clothing", "object", "background")
BIASES = (0.9, 0.7, 0.5, 0.3, 0.1)


def test_criterion_03_profiler_recovery():
    t0 = time.perf_counter()
    hits = 0
    for trial in range(100):
        spec = DenoiserSpec(seed=trial)
        net = init_net(spec)
        profiles = []
        for i, (cat, bias) in enumerate(zip(CATEGORIES, BIASES)):
            a = synth_adapter(cat, bias, 1000 * trial + i, spec.attention_layers())
            profiles.append(average_category([profile_adapter(net, a, 64, trial)]))
        hits += rank_categories(profiles).labels == CATEGORIES
    assert record(3, hits >= 95, f"planted order recovered in {hits}/100 trials (T=64)", t0, 300)


def test_criterion_04_fresh_cache_bit_exact():
    t0 = time.perf_counter()
    spec = DenoiserSpec()
    net = init_net(spec)
    checked, mismatches = 0, 0
    for seed in range(20):
        a = synth_adapter("style", 0.5, seed, spec.attention_layers())
        branch = Branch.with_adapter(net, a)
        x = initial_latent(spec, seed)
        for emb in (text_embedding("p", spec.embed_dim), null_embedding(spec.embed_dim)):
            full, feats = forward_full(branch, x, emb, 1 + seed)
            for m in range(1, spec.depth + 1):
                cache = FeatureCache()
                cache.write(branch.key, m, feats[m], 0)
                part = forward_partial(branch, x, emb, 1 + seed, cache, m)
                mismatches += part.grid.values.tobytes() != full.grid.values.tobytes()
                checked += 1
    adapters = tuple(synth_adapter(c, b, i, spec.attention_layers()) for i, (c, b) in
                     enumerate(zip(CATEGORIES[:3], BIASES[:3])))
    order = tuple(a.id for a in adapters)
    full_plan = run_compose(RunConfig("cmlora", adapters, T=50, cache="uniform(1)", ordering=order), net)
    no_cache = run_compose(RunConfig("cmlora", adapters, T=50, cache="none", ordering=order), net)
    e2e = full_plan.latent.values.tobytes() == no_cache.latent.values.tobytes()
    ok = mismatches == 0 and e2e
    assert record(4, ok, f"{checked - mismatches}/{checked} partial passes bit-identical; "
                         f"full-plan CMLoRA end-to-end identical: {e2e}", t0, 120)


def test_criterion_05_algebraic_reductions():
    t0 = time.perf_counter()
    spec = DenoiserSpec()
    net = init_net(spec)
    layers = spec.attention_layers()
    adapters = tuple(synth_adapter(c, b, i, layers) for i, (c, b) in enumerate(zip(CATEGORIES[:3], BIASES[:3])))
    order = tuple(a.id for a in adapters)
    T = 30
    comp = run_compose(RunConfig("composite", adapters, T=T), net)
    cm = run_compose(RunConfig("cmlora", adapters, T=T, ordering=order, w_init=1.0, decay=False), net)
    r1 = comp.latent.values.tobytes() == cm.latent.values.tobytes()
    one = adapters[:1]
    comp1 = run_compose(RunConfig("composite", one, T=T), net)
    branch = Branch.with_adapter(net, one[0])
    cond, unc = text_embedding(RunConfig("naive").prompt, spec.embed_dim), null_embedding(spec.embed_dim)
    x = initial_latent(spec, 0)
    from lorafuse.denoiser import scheduler_step
    from lorafuse.guidance import cfg_single
    for k in range(T):
        t = T - k
        pu, _ = forward_full(branch, x, unc, t)
        pc, _ = forward_full(branch, x, cond, t)
        x = scheduler_step(x, cfg_single(pu.grid.values, pc.grid.values, 10.0), t, T)
    r2 = comp1.latent.values.tobytes() == x.values.tobytes()
    a = one[0]
    stack = AdapterStack(one, (1.0,))
    r3 = True
    rng = np.random.default_rng(5)
    cw, ew = merge_componentwise(stack), merge_elementwise(stack)
    for lid, (h, w) in layers:
        W0 = net.attention_weight(lid)
        target = apply_delta(W0, a, lid, 1.0)
        r3 &= (W0 + cw[lid]).tobytes() == target.tobytes()
        r3 &= (W0 + ew[lid]).tobytes() == target.tobytes()
        X = rng.standard_normal((h * w, h * w + 2))
        r3 &= merge_gradient_fusion([a], [X], W0, lid).tobytes() == target.tobytes()
    ok = r1 and r2 and r3
    assert record(5, ok, f"cmlora(w_dom=1)==composite: {r1}; composite N=1 == single CFG: {r2}; "
                         f"merge N=1 collapses: {r3}", t0, 60)


def test_criterion_06_weight_schedule():
    t0 = time.perf_counter()
    seq = [dominant_weight_schedule(5, i, exact=True)[0] for i in range(8)]
    ref = [Fraction(9, 2)]
    for i in range(1, 8):
        ref.append(ref[-1] - Fraction(1, 2 ** i))
    head = [float(w) for w in seq[:4]]
    w_non = non_dominant_weight(5, Fraction(9, 2))
    ok = seq == ref and head == [4.5, 4.0, 3.75, 3.625] and w_non == Fraction(10, 17)
    ok &= dominant_weight_schedule(5, 0, exact=True)[1] == Fraction(10, 17)
    assert record(6, ok, f"w_dom {head}...; w_non(5, 4.5) = {w_non}", t0, 1)


def test_criterion_07_switch_formula():
    t0 = time.perf_counter()
    cases = [(n, tau, T) for n in range(1, 11) for tau in range(1, 11) for T in (1, 7, 23, 50, 101)]
    bad = [c for c in cases if switch_schedule(*c) != simulate_switch(*c)]
    assert record(7, len(cases) == 500 and not bad, f"{len(cases) - len(bad)}/{len(cases)} cases match", t0, 1)


def test_criterion_08_gradient_fusion():
    t0 = time.perf_counter()
    worst, not_better = 0.0, 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        m, n = int(rng.integers(3, 8)), int(rng.integers(3, 8))
        k = int(rng.integers(2, 5))
        layer = [("l", (1, n))]
        adapters = []
        for i in range(k):
            B = rng.standard_normal((m, 2))
            A = rng.standard_normal((2, n))
            from lorafuse.adapters import LoraAdapter, LoraLayer
            adapters.append(LoraAdapter(f"a{i}", "c", (LoraLayer("l", B, A),)))
        W0 = rng.standard_normal((m, n))
        inputs = [rng.standard_normal((n, int(rng.integers(n, n + 6)))) for _ in adapters]
        targets = [apply_delta(W0, a, "l", 1.0) for a in adapters]
        fused = fuse_least_squares(targets, inputs, W0)
        worst = max(worst, float(np.linalg.norm(fused - iterative_fusion(targets, inputs, W0))))
        merged = W0 + merge_componentwise(AdapterStack(tuple(adapters)))["l"]
        not_better += fusion_objective(fused, targets, inputs) > fusion_objective(merged, targets, inputs)
    ok = worst <= 1e-6 and not_better == 0
    assert record(8, ok, f"50 instances: max ||closed - iterative||_F {worst:.2e}; "
                         f"objective above componentwise on {not_better}", t0, 30)


def test_criterion_09_mac_structure():
    t0 = time.perf_counter()
    spec = DenoiserSpec()
    T = 200
    plans = ["none", "uniform(2)", "uniform(3)", "uniform(5)", "dynamic(2,3)"]

    def total(method, n, strategy):
        ids = tuple(f"a{i}" for i in range(n)) if method != "naive" else ()
        plan = plan_from_strategy(T, strategy)
        return count_macs(spec, build_trace(method, ids, T, plan, ordering=ids), plan).total

    fails = []
    for s in plans:
        for n in range(1, 6):
            if total("composite", n, s) != n * total("composite", 1, s):
                fails.append(f"composite ratio N={n} {s}")
            if total("switch", n, s) != total("switch", 1, s):
                fails.append(f"switch N={n} {s}")
    for method in METHODS:
        for n in range(2, 6):
            full = total(method, n, "none")
            for s in plans[1:]:
                if not total(method, n, s) < full:
                    fails.append(f"{method} N={n} {s} not cheaper")
            c5, c3, c2 = (total(method, n, f"uniform({c})") for c in (5, 3, 2))
            if not c5 < c3 < c2 < full:
                fails.append(f"{method} N={n} stride ordering")
    for n in range(2, 6):
        comp = total("composite", n, "none")
        for s in plans[1:]:
            if not total("cmlora", n, s) < comp:
                fails.append(f"cmlora N={n} {s} vs composite")
    assert record(9, not fails, "composite ratio N, switch constant, cached < full, stride order, "
                                f"cached cmlora < composite: {len(fails)} violations", t0, 60), fails


CLI_CONFIG = """
output = "out"

[run]
T = 50

[[adapters]]
category = "style"
spectral_bias = 0.9
seed = 11

[[adapters]]
category = "object"
spectral_bias = 0.4
seed = 12

[[adapters]]
category = "background"
spectral_bias = 0.1
seed = 13

[matrix]
methods = ["cmlora", "composite", "switch-a"]
n = [3]
cache = ["dynamic"]
seeds = [0]
"""


def _tree_digest(root):
    h = hashlib.sha256()
    for d, dirs, files in sorted(os.walk(root)):
        dirs.sort()
        for f in sorted(files):
            p = os.path.join(d, f)
            h.update(os.path.relpath(p, root).encode())
            with open(p, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()


def test_criterion_10_determinism(tmp_path):
    t0 = time.perf_counter()
    digests = []
    for i in range(10):
        d = tmp_path / f"rep{i}"
        d.mkdir()
        (d / "exp.toml").write_text(CLI_CONFIG)
        rc = cli_main(["compose", "--config", str(d / "exp.toml")])
        assert rc == 0
        digests.append(_tree_digest(d / "out"))
    ok = len(set(digests)) == 1
    assert record(10, ok, f"10 CLI re-runs of a 3-method x N=3 matrix: {len(set(digests))} distinct artifact "
                          f"digest(s)", t0, 600)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
