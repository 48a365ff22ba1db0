"""A small deterministic U-Net with LoRA targets, skip branches and feature caching.

Block layout for depth M, latent C x H x W::

    conv_in -> down1 .. downM -> mid -> upM .. up1 -> conv_out

``down_m`` works at H / 2**(m-1) and feeds the next block through a 2x2
average pool; ``up_m`` consumes ``concat(upsample(u_{m+1}), d_m)`` where
``u_{M+1}`` is the mid block output. Each block is a 3x3 convolution, tanh,
then an attention-like layer: a token-mixing projection ``W`` over the
flattened spatial grid with a residual and an additive conditioning term.
The token-mixing projections are the LoRA targets.

Caching at skip index m stores ``u_{m+1}``; a partial pass recomputes only
conv_in, down1..down_m, up_m..up1 and conv_out.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .adapters import LoraAdapter
from .numerics import DimensionError, LatentGrid, ParameterError
from .rng import generator

GAMMA_START = 0.02
GAMMA_END = 0.002
ATTN_GAIN = 0.25  # base token mixing stays a mild perturbation of the residual


class CacheMissError(LookupError):
    """A partial pass asked for a cached feature that was never written."""


class LayerLookupError(LookupError):
    """An adapter targets a layer the network does not have."""


@dataclass(frozen=True)
class DenoiserSpec:
    depth: int = 3
    base_channels: int = 8
    latent: tuple[int, int, int] = (4, 16, 16)
    embed_dim: int = 16
    seed: int = 0
    attention: tuple[str, ...] | None = None  # block names with attention; None = all

    def __post_init__(self):
        object.__setattr__(self, "latent", tuple(int(x) for x in self.latent))
        if self.depth < 2:
            raise ParameterError("depth must be at least 2")
        c, h, w = self.latent
        div = 2 ** self.depth
        if h % div or w % div:
            raise DimensionError(f"latent {h}x{w} is not divisible by 2^{self.depth}")
        if c < 1 or self.base_channels < 1 or self.embed_dim < 2 or self.embed_dim % 2:
            raise ParameterError("channels must be positive and embed_dim even")
        if self.attention is not None:
            object.__setattr__(self, "attention", tuple(self.attention))
            unknown = set(self.attention) - set(self.block_names())
            if unknown:
                raise ParameterError(f"unknown attention blocks: {sorted(unknown)}")

    def block_names(self) -> list[str]:
        m = self.depth
        return [f"down{i}" for i in range(1, m + 1)] + ["mid"] + [f"up{i}" for i in range(m, 0, -1)]

    def has_attention(self, block: str) -> bool:
        return self.attention is None or block in self.attention

    def channels(self, m: int) -> int:
        return self.base_channels * 2 ** (m - 1)

    def resolution(self, block: str) -> tuple[int, int]:
        _, h, w = self.latent
        if block == "mid":
            k = self.depth
        else:
            k = int(block.lstrip("downup")) - 1
        return h // 2 ** k, w // 2 ** k

    def block_channels(self, block: str) -> tuple[int, int]:
        """(input, output) channels of a block's convolution."""
        m = self.depth
        if block == "mid":
            return self.channels(m), self.channels(m)
        i = int(block.lstrip("downup"))
        if block.startswith("down"):
            return (self.base_channels if i == 1 else self.channels(i - 1)), self.channels(i)
        below = self.channels(m) if i == m else self.channels(i + 1)
        return below + self.channels(i), self.channels(i)

    def attention_layers(self) -> list[tuple[str, tuple[int, int]]]:
        """LoRA target layers as ``(layer_id, (h, w))`` token grids."""
        return [(f"{b}.attn", self.resolution(b)) for b in self.block_names() if self.has_attention(b)]

    def block_macs(self) -> dict[str, int]:
        """Analytic multiply-accumulates per block for one forward pass."""
        c_lat, h, w = self.latent
        macs = {"conv_in": c_lat * self.base_channels * 9 * h * w}
        for b in self.block_names():
            cin, cout = self.block_channels(b)
            bh, bw = self.resolution(b)
            n = bh * bw
            total = cin * cout * 9 * n
            if self.has_attention(b):
                total += cout * n * n + cout * self.embed_dim
            macs[b] = total
        macs["conv_out"] = self.channels(1) * c_lat * 9 * h * w
        return macs

    def forward_macs(self, skip: int | None = None) -> int:
        """MACs of a full pass, or of a partial pass at skip index ``skip``."""
        macs = self.block_macs()
        if skip is None:
            return sum(macs.values())
        self.check_skip(skip)
        keep = ["conv_in", "conv_out"]
        keep += [f"down{i}" for i in range(1, skip + 1)] + [f"up{i}" for i in range(1, skip + 1)]
        return sum(macs[k] for k in keep)

    def check_skip(self, m: int) -> None:
        if not 1 <= m <= self.depth:
            raise ParameterError(f"skip index must lie in [1, {self.depth}], got {m}")


@dataclass(frozen=True, eq=False)
class DenoiserNet:
    spec: DenoiserSpec
    weights: dict  # name -> read-only array

    def attention_weight(self, layer_id: str) -> np.ndarray:
        return self.weights[f"{layer_id}.W"]

    def checksum(self) -> str:
        """SHA-256 over (name, little-endian f64 bytes) of every weight in sorted order."""
        h = hashlib.sha256()
        for name in sorted(self.weights):
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(self.weights[name], dtype="<f8").tobytes())
        return h.hexdigest()


def init_net(spec: DenoiserSpec) -> DenoiserNet:
    """Seeded weights; identical (spec, seed) always give identical arrays."""
    c_lat, _, _ = spec.latent
    e = spec.embed_dim
    weights = {}

    def conv(name, cin, cout):
        rng = generator(spec.seed, "net", name)
        weights[f"{name}.w"] = rng.standard_normal((cout, cin, 3, 3)) / np.sqrt(cin * 9)
        weights[f"{name}.b"] = 0.1 * rng.standard_normal(cout)

    conv("conv_in", c_lat, spec.base_channels)
    for b in spec.block_names():
        cin, cout = spec.block_channels(b)
        conv(b, cin, cout)
        if spec.has_attention(b):
            bh, bw = spec.resolution(b)
            n = bh * bw
            rng = generator(spec.seed, "net", b, "attn")
            weights[f"{b}.attn.W"] = ATTN_GAIN * rng.standard_normal((n, n)) / np.sqrt(n)
            weights[f"{b}.attn.P"] = rng.standard_normal((cout, e)) / np.sqrt(e)
    conv("conv_out", spec.channels(1), c_lat)
    for a in weights.values():
        a.setflags(write=False)
    return DenoiserNet(spec=spec, weights=weights)


@dataclass(frozen=True, eq=False)
class Branch:
    """A network view with resolved token-mixing weights for one adapter setting."""

    net: DenoiserNet
    attn: dict  # layer_id -> effective W
    key: str = "base"

    @classmethod
    def base(cls, net: DenoiserNet, key: str = "base") -> "Branch":
        return cls(net, {lid: net.attention_weight(lid) for lid, _ in net.spec.attention_layers()}, key)

    @classmethod
    def with_adapter(cls, net: DenoiserNet, adapter: LoraAdapter | None, weight: float = 1.0,
                     key: str | None = None) -> "Branch":
        branch = cls.base(net, key or (adapter.id if adapter is not None else "base"))
        if adapter is None:
            return branch
        attn = dict(branch.attn)
        for layer in adapter.layers:
            if layer.layer_id not in attn:
                raise LayerLookupError(f"net has no layer {layer.layer_id!r} for adapter {adapter.id}")
            W = attn[layer.layer_id]
            if W.shape != layer.dims:
                raise DimensionError(f"{layer.layer_id}: net {W.shape} vs adapter {layer.dims}")
            attn[layer.layer_id] = W + (weight * adapter.scale) * layer.product()
        return cls(net, attn, branch.key)

    @classmethod
    def with_deltas(cls, net: DenoiserNet, deltas: dict, key: str = "merged") -> "Branch":
        branch = cls.base(net, key)
        attn = dict(branch.attn)
        for lid, delta in deltas.items():
            if lid not in attn:
                raise LayerLookupError(f"net has no layer {lid!r}")
            attn[lid] = attn[lid] + delta
        return cls(net, attn, key)

    @classmethod
    def with_weights(cls, net: DenoiserNet, replaced: dict, key: str = "fused") -> "Branch":
        branch = cls.base(net, key)
        attn = dict(branch.attn)
        for lid, W in replaced.items():
            if lid not in attn:
                raise LayerLookupError(f"net has no layer {lid!r}")
            attn[lid] = np.asarray(W, dtype=np.float64)
        return cls(net, attn, key)


@dataclass(frozen=True, eq=False)
class NoisePrediction:
    grid: LatentGrid
    provenance: str  # "full" | "partial"
    macs_used: int


@dataclass
class FeatureCache:
    """Cached up-block features keyed by (branch key, skip index)."""

    entries: dict = field(default_factory=dict)

    def write(self, key: str, m: int, feature: np.ndarray, t: int) -> None:
        self.entries[(key, m)] = (feature, t)

    def read(self, key: str, m: int) -> tuple[np.ndarray, int]:
        try:
            return self.entries[(key, m)]
        except KeyError:
            raise CacheMissError(f"no cached feature for branch {key!r} at skip index {m}") from None

    def __contains__(self, item) -> bool:
        return item in self.entries


def text_embedding(prompt: str, dim: int) -> np.ndarray:
    """Seeded stand-in for a text encoder: a fixed vector per prompt string."""
    return generator(0, "text", prompt).standard_normal(dim)


def null_embedding(dim: int) -> np.ndarray:
    return np.zeros(dim)


def time_embedding(t: int, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(1000.0) * np.arange(half) / half)
    return 0.5 * np.concatenate([np.sin(t * freqs), np.cos(t * freqs)])


def _block(branch: Branch, name: str, x: np.ndarray, emb: np.ndarray, capture: dict | None) -> np.ndarray:
    w = branch.net.weights
    h = np.tanh(_kernels.conv2d_same(x, w[f"{name}.w"]) + w[f"{name}.b"][:, None, None])
    if not branch.net.spec.has_attention(name):
        return h
    c, bh, bw = h.shape
    tokens = h.reshape(c, bh * bw)
    lid = f"{name}.attn"
    if capture is not None:
        capture[lid] = tokens.copy()
    mixed = tokens + tokens @ branch.attn[lid].T + (w[f"{lid}.P"] @ emb)[:, None]
    return mixed.reshape(c, bh, bw)


def _pool(x: np.ndarray) -> np.ndarray:
    return 0.25 * (x[:, 0::2, 0::2] + x[:, 1::2, 0::2] + x[:, 0::2, 1::2] + x[:, 1::2, 1::2])


def _upsample(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def _check_latent(net: DenoiserNet, latent: LatentGrid) -> None:
    if tuple(latent.shape) != net.spec.latent:
        raise DimensionError(f"latent {latent.shape} does not match net {net.spec.latent}")


def _conv_in(net, latent):
    w = net.weights
    return _kernels.conv2d_same(latent.values, w["conv_in.w"]) + w["conv_in.b"][:, None, None]


def _conv_out(net, u):
    w = net.weights
    return _kernels.conv2d_same(u, w["conv_out.w"]) + w["conv_out.b"][:, None, None]


def _up_path(branch, u, downs, start, emb, capture):
    for i in range(start, 0, -1):
        u = _block(branch, f"up{i}", np.concatenate([_upsample(u), downs[i - 1]], axis=0), emb, capture)
    return u


def forward_full(branch: Branch, latent: LatentGrid, cond: np.ndarray, t: int,
                 capture: dict | None = None) -> tuple[NoisePrediction, dict[int, np.ndarray]]:
    """Run every block; return the prediction and ``u_{m+1}`` for each skip index m."""
    net = branch.net
    spec = net.spec
    _check_latent(net, latent)
    emb = cond + time_embedding(t, spec.embed_dim)
    cur = _conv_in(net, latent)
    downs = []
    for i in range(1, spec.depth + 1):
        d = _block(branch, f"down{i}", cur, emb, capture)
        downs.append(d)
        cur = _pool(d)
    u = _block(branch, "mid", cur, emb, capture)
    features = {}
    for i in range(spec.depth, 0, -1):
        features[i] = u
        u = _block(branch, f"up{i}", np.concatenate([_upsample(u), downs[i - 1]], axis=0), emb, capture)
    pred = NoisePrediction(LatentGrid(_conv_out(net, u)), "full", spec.forward_macs())
    return pred, features


def forward_partial(branch: Branch, latent: LatentGrid, cond: np.ndarray, t: int,
                    cache: FeatureCache, m: int, cache_key: str | None = None) -> NoisePrediction:
    """Recompute the shallow path at skip index ``m`` around a cached ``u_{m+1}``."""
    net = branch.net
    spec = net.spec
    spec.check_skip(m)
    _check_latent(net, latent)
    feature, _ = cache.read(cache_key or branch.key, m)
    emb = cond + time_embedding(t, spec.embed_dim)
    cur = _conv_in(net, latent)
    downs = []
    for i in range(1, m + 1):
        d = _block(branch, f"down{i}", cur, emb, None)
        downs.append(d)
        cur = _pool(d)
    u = _up_path(branch, feature, downs, m, emb, None)
    return NoisePrediction(LatentGrid(_conv_out(net, u)), "partial", spec.forward_macs(m))


def gamma(t: int, T: int) -> float:
    """Step size at diffusion time t: linear from 0.02 at t=0 to 0.002 at t=T."""
    return GAMMA_START + (GAMMA_END - GAMMA_START) * t / T


def scheduler_step(latent: LatentGrid, pred: NoisePrediction | np.ndarray, t: int, T: int) -> LatentGrid:
    """First-order update ``latent - gamma(t) * pred`` taking diffusion time t to t - 1."""
    if not 1 <= t <= T:
        raise ParameterError(f"t must lie in [1, {T}], got {t}")
    g = pred.grid.values if isinstance(pred, NoisePrediction) else np.asarray(pred)
    return LatentGrid(latent.values - gamma(t, T) * g)


def initial_latent(spec: DenoiserSpec, seed: int) -> LatentGrid:
    return LatentGrid(generator(seed, "latent").standard_normal(spec.latent))


def latent_checksum(latent: LatentGrid) -> str:
    return hashlib.sha256(np.ascontiguousarray(latent.values, dtype="<f8").tobytes()).hexdigest()
