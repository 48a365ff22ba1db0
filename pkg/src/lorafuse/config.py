"""Experiment configuration read from TOML.

Schema (every key optional unless noted)::

    [net]        depth, base_channels, latent = [C, H, W], embed_dim, seed
    [run]        T, guidance, h, z, c1, c2, scale, alpha, w_init, decay, tau,
                 skip, prompt, profile_T, profile_seed, ridge
    [[adapters]] category (required), spectral_bias, seed, id, rank, boost, jitter
                 or: file = "path/to/adapter.lfad" (relative to the config file)
    [matrix]     methods, n, cache, seeds
    output       run directory root (top level, relative to the config file)

``z`` left unset means ``max(1, T // 10)``, which is 20 at T = 200.
"""
from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .adapters import DEFAULT_SCALE, LoraAdapter, load_adapter, synth_adapter
from .composer import DEFAULT_RIDGE, DEFAULT_T, DEFAULT_TAU, METHODS
from .denoiser import DenoiserSpec
from .guidance import DEFAULT_GUIDANCE_SCALE
from .profiler import DEFAULT_H, DEFAULT_PROMPT


class ConfigError(ValueError):
    """The configuration file is missing, malformed or inconsistent."""


@dataclass(frozen=True)
class RunDefaults:
    T: int = DEFAULT_T
    guidance: float = DEFAULT_GUIDANCE_SCALE
    h: float = DEFAULT_H
    z: int | None = None
    c1: int = 2
    c2: int = 3
    scale: float = DEFAULT_SCALE
    alpha: float = 0.5
    w_init: float | None = None
    decay: bool = True
    tau: int = DEFAULT_TAU
    skip: int = 1
    prompt: str = DEFAULT_PROMPT
    profile_T: int | None = None
    profile_seed: int = 0
    ridge: float = DEFAULT_RIDGE


@dataclass(frozen=True)
class Matrix:
    methods: tuple[str, ...] = ("cmlora",)
    n: tuple[int, ...] = (3,)
    cache: tuple[str, ...] = ("none",)
    seeds: tuple[int, ...] = (0,)

    def runs(self):
        for method in self.methods:
            for n in self.n:
                for cache in self.cache:
                    for seed in self.seeds:
                        yield method, n, cache, seed


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    net: DenoiserSpec
    run: RunDefaults
    adapters: tuple[LoraAdapter, ...]
    matrix: Matrix
    output: str
    source: str | None = None
    raw: dict = field(default_factory=dict)

    def strategy(self, cache: str) -> str:
        """Expand the bare ``dynamic`` tag with the configured strides."""
        c = cache.strip().lower()
        return f"dynamic({self.run.c1},{self.run.c2})" if c == "dynamic" else c


_RUN_KEYS = set(RunDefaults.__dataclass_fields__)
_NET_KEYS = {"depth", "base_channels", "latent", "embed_dim", "seed", "attention"}
_ADAPTER_KEYS = {"category", "spectral_bias", "seed", "id", "rank", "boost", "jitter", "file"}


def _unknown(section: str, got, allowed) -> None:
    extra = sorted(set(got) - set(allowed))
    if extra:
        raise ConfigError(f"unknown keys in [{section}]: {', '.join(extra)}")


def _tuple(value, name):
    if isinstance(value, (list, tuple)):
        return tuple(value)
    if value is None:
        raise ConfigError(f"{name} must not be empty")
    return (value,)


def load_config(path) -> ExperimentConfig:
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(data, base_dir=os.path.dirname(os.path.abspath(path)), source=path)


def config_from_dict(data: dict, base_dir: str = ".", source: str | None = None) -> ExperimentConfig:
    _unknown("top level", data, {"net", "run", "adapters", "matrix", "output"})
    net_d = dict(data.get("net", {}))
    _unknown("net", net_d, _NET_KEYS)
    try:
        net = DenoiserSpec(**net_d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[net]: {exc}") from None

    run_d = dict(data.get("run", {}))
    _unknown("run", run_d, _RUN_KEYS)
    run = RunDefaults(**run_d)
    if run.T < 1:
        raise ConfigError("[run] T must be at least 1")

    roster = []
    for i, entry in enumerate(data.get("adapters", [])):
        _unknown(f"adapters #{i}", entry, _ADAPTER_KEYS)
        if "file" in entry:
            fpath = os.path.join(base_dir, entry["file"])
            if not os.path.exists(fpath):
                raise ConfigError(f"adapter file not found: {fpath}")
            try:
                roster.append(load_adapter(fpath))
            except (OSError, ValueError) as exc:
                raise ConfigError(f"{fpath}: {exc}") from None
            continue
        if "category" not in entry:
            raise ConfigError(f"adapters #{i}: 'category' is required")
        if "seed" not in entry:
            raise ConfigError(f"adapters #{i}: an explicit 'seed' is required")
        try:
            roster.append(synth_adapter(
                entry["category"], entry.get("spectral_bias", 0.5), int(entry["seed"]),
                net.attention_layers(), rank=entry.get("rank", 3), scale=run.scale,
                boost=entry.get("boost", 7.0), jitter=entry.get("jitter", 0.05),
                adapter_id=entry.get("id")))
        except ValueError as exc:
            raise ConfigError(f"adapters #{i}: {exc}") from None
    ids = [a.id for a in roster]
    if len(set(ids)) != len(ids):
        raise ConfigError("adapter ids must be unique")

    mat_d = dict(data.get("matrix", {}))
    _unknown("matrix", mat_d, {"methods", "n", "cache", "seeds"})
    matrix = Matrix(
        methods=_tuple(mat_d.get("methods", Matrix.methods), "methods"),
        n=tuple(int(x) for x in _tuple(mat_d.get("n", Matrix.n), "n")),
        cache=_tuple(mat_d.get("cache", Matrix.cache), "cache"),
        seeds=tuple(int(x) for x in _tuple(mat_d.get("seeds", Matrix.seeds), "seeds")),
    )
    if not (matrix.methods and matrix.n and matrix.cache and matrix.seeds):
        raise ConfigError("the run matrix is empty")
    for m in matrix.methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; expected one of {', '.join(METHODS)}")
    for n in matrix.n:
        if n < 1 or n > len(roster):
            raise ConfigError(f"N={n} needs at least {n} adapters, roster has {len(roster)}")
    if any(s < 0 for s in matrix.seeds):
        raise ConfigError("seeds must be non-negative")

    output = os.path.join(base_dir, data.get("output", "runs"))
    return ExperimentConfig(net, run, tuple(roster), matrix, output, source, data)
