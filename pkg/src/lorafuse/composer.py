"""Composition pipelines over a shared toy denoiser.

Every method reduces to a per-step schedule (:class:`ScheduleTrace`) that
says which branches run, at what guidance weight, and whether each one does
a full or a cached partial pass. :func:`build_trace` produces that schedule
without touching a network; :func:`run_compose` executes it.

Branches are evaluated twice per step (unconditional and conditional) and
each evaluation owns its own cache slot. Single-branch methods (naive, the
merges, switch, switch-a) share one slot pair called ``main``.
"""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .accounting import MacReport, count_macs
from .adapters import (AdapterStack, LoraAdapter, merge_componentwise, merge_elementwise,
                       merge_gradient_fusion)
from .cachesys import CachePlan, FeatureRecord, SimilaritySeries, plan_from_strategy, similarity_series
from .denoiser import (Branch, DenoiserNet, DenoiserSpec, FeatureCache, forward_full, forward_partial,
                       init_net, initial_latent, null_embedding, scheduler_step, text_embedding)
from .guidance import DEFAULT_GUIDANCE_SCALE, cfg_single, collective_guidance, dominant_weight_schedule
from .numerics import LatentGrid, ParameterError
from .profiler import DEFAULT_H, DEFAULT_PROMPT, OrderingO, Partition, order_adapters, partition, profile_adapter

METHODS = ("naive", "merge", "merge-elementwise", "merge-gradient", "switch", "switch-a",
           "composite", "cmlora")
SINGLE_BRANCH = ("naive", "merge", "merge-elementwise", "merge-gradient", "switch", "switch-a")
NEEDS_ORDERING = ("switch-a", "cmlora")
DEFAULT_T = 200
DEFAULT_TAU = 5
DEFAULT_RIDGE = 1e-8
MAIN = "main"


class StateError(RuntimeError):
    """A method needs profiler output that is neither supplied nor computable."""


@dataclass(frozen=True)
class RunConfig:
    method: str
    adapters: tuple[LoraAdapter, ...] = ()
    T: int = DEFAULT_T
    s: float = DEFAULT_GUIDANCE_SCALE
    cache: str = "none"
    seed: int = 0
    net: DenoiserSpec = field(default_factory=DenoiserSpec)
    prompt: str = DEFAULT_PROMPT
    h: float = DEFAULT_H
    z: int | None = None
    profile_T: int | None = None
    ordering: tuple[str, ...] | None = None  # adapter ids, highest frequency first
    alpha: float = 0.5
    w_init: float | None = None
    decay: bool = True
    tau: int = DEFAULT_TAU
    skip: int = 1
    composite_weights: tuple[float, ...] | None = None
    ridge: float = DEFAULT_RIDGE
    measure: bool = False
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "adapters", tuple(self.adapters))
        if self.method not in METHODS:
            raise ParameterError(f"unknown method {self.method!r}; expected one of {', '.join(METHODS)}")
        if self.T < 1:
            raise ParameterError("T must be at least 1")
        if self.method != "naive" and not self.adapters:
            raise ParameterError(f"method {self.method} needs at least one adapter")
        ids = [a.id for a in self.adapters]
        if len(set(ids)) != len(ids):
            raise ParameterError("adapter ids must be unique")
        if self.ordering is not None:
            object.__setattr__(self, "ordering", tuple(self.ordering))
            if sorted(self.ordering) != sorted(ids):
                raise ParameterError("ordering must list every adapter id exactly once")
        if self.composite_weights is not None:
            object.__setattr__(self, "composite_weights", tuple(float(w) for w in self.composite_weights))
            if len(self.composite_weights) != len(ids):
                raise ParameterError("one composite weight per adapter")
        if self.tau < 1:
            raise ParameterError("tau must be at least 1")
        self.net.check_skip(self.skip)

    @property
    def n(self) -> int:
        return 0 if self.method == "naive" else len(self.adapters)


@dataclass(frozen=True)
class StepEntry:
    step: int
    dominant: str
    weights: tuple[float, ...]
    active: tuple[bool, ...]
    full: tuple[bool, ...]
    turn: int


@dataclass(frozen=True)
class ScheduleTrace:
    method: str
    branches: tuple[str, ...]
    T: int
    steps: tuple[StepEntry, ...]
    skip: int = 1
    dominant_full: bool = False  # dominant branch ignores the plan

    def __post_init__(self):
        if len(self.steps) != self.T:
            raise ParameterError(f"trace holds {len(self.steps)} steps for T={self.T}")

    def rows(self):
        """CSV rows ``(step, method, dominant_id, adapter_id, weight, full_inference, turn)``."""
        for e in self.steps:
            for b, w, a, f in zip(self.branches, e.weights, e.active, e.full):
                if a:
                    yield (e.step, self.method, e.dominant, b, repr(float(w)), str(f).lower(), e.turn)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["step", "method", "dominant_id", "adapter_id", "weight", "full_inference", "turn"])
            out.writerows(self.rows())

    def dominant_steps(self) -> dict[str, int]:
        counts = {b: 0 for b in self.branches}
        for e in self.steps:
            counts[e.dominant] = counts.get(e.dominant, 0) + 1
        return counts


# -- schedules ---------------------------------------------------------------

def switch_schedule(n: int, tau: int, T: int) -> list[int]:
    """Active adapter index (1-based) for t = 1..T: ``((t - 1) mod (N tau)) // tau + 1``."""
    for name, v in (("N", n), ("tau", tau), ("T", T)):
        if isinstance(v, bool) or int(v) != v or v < 1:
            raise ParameterError(f"{name} must be a positive integer, got {v!r}")
    return [((t - 1) % (n * tau)) // tau + 1 for t in range(1, T + 1)]


def dominant_sequence(part: Partition, T: int) -> list[str]:
    """Dominant adapter per step: H rotates every step for |H| D steps, then L to the end."""
    H, L = tuple(part.H), tuple(part.L)
    n = len(H) + len(L)
    if n == 0:
        raise ParameterError("cannot schedule an empty partition")
    if n == 1:
        return [(H + L)[0]] * T
    if T <= n:
        raise ParameterError(f"need T > N, got T={T} with N={n}")
    D = (T - 1) // n
    seq = [H[k % len(H)] for k in range(len(H) * D)] if H else []
    tail = T - len(seq)
    if not L:
        seq += [H[(len(seq) + k) % len(H)] for k in range(tail)]
    else:
        # every L member but the last gets D steps; the last takes the remainder too
        for member in L[:-1]:
            seq += [member] * D
        seq += [L[-1]] * (T - len(seq))
    return seq


def _step_turns(dominants) -> list[int]:
    turns, turn = [], 0
    for k, d in enumerate(dominants):
        if k and d != dominants[k - 1]:
            turn += 1
        turns.append(turn)
    return turns


def cmlora_schedule(part: Partition, T: int, N: int | None = None, plan: CachePlan | None = None, *,
                    alpha: float = 0.5, w_init: float | None = None, decay: bool = True,
                    skip: int = 1, branch_ids=None) -> ScheduleTrace:
    """CMLoRA schedule. Branches are reduced in ``branch_ids`` order (roster order)."""
    members = tuple(part.H) + tuple(part.L)
    ids = tuple(branch_ids) if branch_ids is not None else members
    if sorted(ids) != sorted(members):
        raise ParameterError("branch ids must match the partition members")
    if N is not None and N != len(ids):
        raise ParameterError(f"partition covers {len(ids)} adapters, expected {N}")
    plan = plan or plan_from_strategy(T, "none")
    dominants = dominant_sequence(part, T)
    turns = _step_turns(dominants)
    n = len(ids)
    steps = []
    for k, (d, turn) in enumerate(zip(dominants, turns)):
        w_dom, w_non = dominant_weight_schedule(n, turn, alpha=alpha, w_init=w_init, decay=decay)
        weights = tuple(w_dom if b == d else w_non for b in ids)
        full = tuple(b == d or plan.is_full(k) for b in ids)
        steps.append(StepEntry(k, d, weights, (True,) * n, full, turn))
    return ScheduleTrace("cmlora", ids, T, tuple(steps), skip, dominant_full=True)


def build_trace(method: str, adapter_ids, T: int, plan: CachePlan, *, ordering=None, tau: int = DEFAULT_TAU,
                alpha: float = 0.5, w_init: float | None = None, decay: bool = True, skip: int = 1,
                composite_weights=None) -> ScheduleTrace:
    """Schedule for any method; needs no network."""
    if plan.T != T:
        raise ParameterError(f"plan covers T={plan.T}, run has T={T}")
    ids = tuple(adapter_ids)
    if method in NEEDS_ORDERING and ordering is None:
        raise StateError(f"method {method} needs an adapter ordering")
    if method == "cmlora":
        return cmlora_schedule(partition(OrderingO(tuple(ordering), ())), T, len(ids), plan,
                               alpha=alpha, w_init=w_init, decay=decay, skip=skip, branch_ids=ids)
    steps = []
    if method in ("switch", "switch-a"):
        order = tuple(ordering) if method == "switch-a" else ids
        lam = switch_schedule(len(order), tau, T)
        turns = _step_turns([order[i - 1] for i in lam])
        for k, i in enumerate(lam):
            act = order[i - 1]
            mask = tuple(b == act for b in ids)
            steps.append(StepEntry(k, act, tuple(1.0 if m else 0.0 for m in mask), mask,
                                   tuple(m and plan.is_full(k) for m in mask), turns[k]))
        return ScheduleTrace(method, ids, T, tuple(steps), skip)
    if method == "composite":
        w = tuple(composite_weights) if composite_weights is not None else (1.0,) * len(ids)
        for k in range(T):
            f = plan.is_full(k)
            steps.append(StepEntry(k, "", w, (True,) * len(ids), (f,) * len(ids), 0))
        return ScheduleTrace(method, ids, T, tuple(steps), skip)
    if method in SINGLE_BRANCH:
        name = "base" if method == "naive" else "merged"
        for k in range(T):
            steps.append(StepEntry(k, name, (1.0,), (True,), (plan.is_full(k),), 0))
        return ScheduleTrace(method, (name,), T, tuple(steps), skip)
    raise ParameterError(f"unknown method {method!r}")


# -- execution ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ComposeResult:
    latent: LatentGrid
    trace: ScheduleTrace
    macs: MacReport
    plan: CachePlan
    similarity: dict | None = None  # branch -> SimilaritySeries
    ordering: tuple[str, ...] | None = None


def profile_ordering(net: DenoiserNet, adapters, T: int, seed: int, h: float = DEFAULT_H,
                     z: int | None = None, s: float = DEFAULT_GUIDANCE_SCALE,
                     prompt: str = DEFAULT_PROMPT) -> OrderingO:
    """Adapter ordering from single-adapter profiling runs."""
    series = {a.id: profile_adapter(net, a, T, seed, h, z, s, prompt) for a in adapters}
    return order_adapters(series)


def _merged_branch(config: RunConfig, net: DenoiserNet, latent: LatentGrid, cond, uncond) -> Branch:
    stack = AdapterStack(config.adapters)
    if config.method == "merge":
        return Branch.with_deltas(net, merge_componentwise(stack), MAIN)
    if config.method == "merge-elementwise":
        return Branch.with_deltas(net, merge_elementwise(stack), MAIN)
    # gradient fusion: each adapter's own attention inputs at the first step
    inputs = {lid: [] for lid, _ in net.spec.attention_layers()}
    for a in config.adapters:
        branch = Branch.with_adapter(net, a)
        cap_u, cap_c = {}, {}
        forward_full(branch, latent, uncond, config.T, capture=cap_u)
        forward_full(branch, latent, cond, config.T, capture=cap_c)
        for lid in inputs:
            inputs[lid].append(np.concatenate([cap_u[lid].T, cap_c[lid].T], axis=1))
    fused = {}
    for lid in inputs:
        fused[lid] = merge_gradient_fusion(config.adapters, inputs[lid], net.attention_weight(lid), lid,
                                           ridge=config.ridge)
    return Branch.with_weights(net, fused, MAIN)


def run_compose(config: RunConfig, net: DenoiserNet | None = None) -> ComposeResult:
    net = net or init_net(config.net)
    spec = net.spec
    T = config.T
    plan = plan_from_strategy(T, config.cache)
    cond = text_embedding(config.prompt, spec.embed_dim)
    uncond = null_embedding(spec.embed_dim)
    latent = initial_latent(spec, config.seed)
    ids = tuple(a.id for a in config.adapters)

    ordering = config.ordering
    if config.method in NEEDS_ORDERING and ordering is None:
        ordering = profile_ordering(net, config.adapters, config.profile_T or T, config.seed,
                                    config.h, config.z, config.s, config.prompt).labels
    trace = build_trace(config.method, ids, T, plan, ordering=ordering, tau=config.tau,
                        alpha=config.alpha, w_init=config.w_init, decay=config.decay,
                        skip=config.skip, composite_weights=config.composite_weights)

    if config.method == "naive":
        branches = {"base": Branch.base(net, MAIN)}
    elif config.method.startswith("merge"):
        branches = {"merged": _merged_branch(config, net, latent, cond, uncond)}
    else:
        branches = {a.id: Branch.with_adapter(net, a, 1.0, key=a.id) for a in config.adapters}
    single = config.method in SINGLE_BRANCH
    cache = FeatureCache()
    records = {b: [] for b in trace.branches} if config.measure else None
    m = config.skip

    def evaluate(k, bid, full):
        branch = branches[bid]
        slot = MAIN if single else bid
        t = T - k
        out = []
        for tag, emb in (("uncond", uncond), ("cond", cond)):
            key = f"{slot}/{tag}"
            if full or (config.measure and tag == "cond"):
                pred, feats = forward_full(branch, latent, emb, t)
            if config.measure and tag == "cond" and (key, m) in cache:
                records[bid].append(FeatureRecord(k, feats[m], cache.read(key, m)[0], not full))
            if full:
                cache.write(key, m, feats[m], k)
            else:
                pred = forward_partial(branch, latent, emb, t, cache, m, cache_key=key)
            out.append(pred.grid.values)
        return cfg_single(out[0], out[1], config.s)

    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 and not single else None
    try:
        for e in trace.steps:
            jobs = [(b, f) for b, a, f in zip(trace.branches, e.active, e.full) if a]
            if pool is not None:
                guided = list(pool.map(lambda j: evaluate(e.step, *j), jobs))
            else:
                guided = [evaluate(e.step, b, f) for b, f in jobs]
            if single:
                g = guided[0]
            else:
                g = collective_guidance(guided, e.weights)
            latent = scheduler_step(latent, g, T - e.step, T)
    finally:
        if pool is not None:
            pool.shutdown()

    macs = count_macs(spec, trace, plan)
    sim = None
    if config.measure:
        sim = {b: similarity_series(r, branch=b) for b, r in records.items() if r}
    return ComposeResult(latent, trace, macs, plan, sim, tuple(ordering) if ordering else None)
