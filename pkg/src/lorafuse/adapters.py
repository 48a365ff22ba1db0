"""Low-rank adapters, weight-space fusion, and planted-spectrum synthetic adapters."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .numerics import DimensionError
from .rng import generator

DEFAULT_SCALE = 1.4
CONTAINER_MAGIC = b"LFAD1"
TARGET_NOTE = "token-mixing projection of every attention-like block"


class ConstraintError(ValueError):
    """Merge weights violate the convex-combination constraint."""


class ShapeError(ValueError):
    """Adapters in a stack do not share layer ids or layer dimensions."""


class RankError(ValueError):
    """Adapters in a stack do not share a rank."""


class SingularityError(np.linalg.LinAlgError):
    """The normal matrix of a least-squares fusion is singular."""


@dataclass(frozen=True, eq=False)
class LoraLayer:
    layer_id: str
    B: np.ndarray  # m x r
    A: np.ndarray  # r x n

    def __post_init__(self):
        B = np.array(self.B, dtype=np.float64)
        A = np.array(self.A, dtype=np.float64)
        if B.ndim != 2 or A.ndim != 2 or B.shape[1] != A.shape[0]:
            raise DimensionError(f"{self.layer_id}: B {B.shape} and A {A.shape} do not share a rank")
        if B.shape[1] > min(B.shape[0], A.shape[1]):
            raise RankError(f"{self.layer_id}: rank {B.shape[1]} exceeds min(m, n)")
        if not (np.all(np.isfinite(B)) and np.all(np.isfinite(A))):
            raise ValueError(f"{self.layer_id}: non-finite factors")
        B.setflags(write=False)
        A.setflags(write=False)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "A", A)

    @property
    def rank(self) -> int:
        return self.B.shape[1]

    @property
    def dims(self) -> tuple[int, int]:
        return self.B.shape[0], self.A.shape[1]

    def product(self) -> np.ndarray:
        return self.B @ self.A


@dataclass(frozen=True, eq=False)
class LoraAdapter:
    id: str
    category: str
    layers: tuple[LoraLayer, ...]
    scale: float = DEFAULT_SCALE
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError("an adapter needs at least one layer")
        ids = [layer.layer_id for layer in self.layers]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate layer ids in adapter {self.id}")
        ranks = {layer.rank for layer in self.layers}
        if len(ranks) != 1:
            raise RankError(f"adapter {self.id} mixes ranks {sorted(ranks)}")

    @property
    def rank(self) -> int:
        return self.layers[0].rank

    @property
    def layer_ids(self) -> tuple[str, ...]:
        return tuple(layer.layer_id for layer in self.layers)

    def layer(self, layer_id: str) -> LoraLayer:
        for layer in self.layers:
            if layer.layer_id == layer_id:
                return layer
        raise KeyError(f"adapter {self.id} has no layer {layer_id!r}")


@dataclass(frozen=True, eq=False)
class AdapterStack:
    adapters: tuple[LoraAdapter, ...]
    weights: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "adapters", tuple(self.adapters))
        if not self.adapters:
            raise ValueError("an adapter stack cannot be empty")
        n = len(self.adapters)
        w = tuple(float(x) for x in self.weights) if self.weights is not None else (1.0 / n,) * n
        if len(w) != n:
            raise ValueError(f"{len(w)} weights for {n} adapters")
        if not all(np.isfinite(w)):
            raise ValueError("stack weights must be finite")
        object.__setattr__(self, "weights", w)


def apply_delta(W: np.ndarray, adapter: LoraAdapter, layer_id: str, weight: float) -> np.ndarray:
    """Return ``W + weight * scale * B @ A`` for one adapter layer."""
    layer = adapter.layer(layer_id)
    if W.shape != layer.dims:
        raise DimensionError(f"{layer_id}: base weight {W.shape} vs adapter dims {layer.dims}")
    return W + (weight * adapter.scale) * layer.product()


def _check_layers(adapters) -> tuple[str, ...]:
    ref = adapters[0]
    for a in adapters[1:]:
        if set(a.layer_ids) != set(ref.layer_ids):
            raise ShapeError(f"adapters {ref.id} and {a.id} target different layers")
        for lid in ref.layer_ids:
            if a.layer(lid).dims != ref.layer(lid).dims:
                raise ShapeError(f"layer {lid}: dims differ between {ref.id} and {a.id}")
    return ref.layer_ids


def merge_componentwise(stack: AdapterStack) -> dict[str, np.ndarray]:
    """Per-layer ``sum_i w_i * scale_i * B_i @ A_i`` with weights summing to one."""
    if abs(sum(stack.weights) - 1.0) > 1e-9:
        raise ConstraintError(f"merge weights must sum to 1, got {sum(stack.weights)!r}")
    layer_ids = _check_layers(stack.adapters)
    out = {}
    for lid in layer_ids:
        delta = None
        for a, w in zip(stack.adapters, stack.weights):
            term = (w * a.scale) * a.layer(lid).product()
            delta = term if delta is None else delta + term
        out[lid] = delta
    return out


def merge_elementwise(stack: AdapterStack) -> dict[str, np.ndarray]:
    """Per-layer ``(sum_i w_i B_i) @ (sum_i w_i A_i)``; all adapters must share a rank.

    Adapter scales multiply the up-projections. When every adapter has the
    same scale it is factored out of the product.
    """
    ranks = {a.rank for a in stack.adapters}
    if len(ranks) != 1:
        raise RankError(f"element-wise merge needs one shared rank, got {sorted(ranks)}")
    layer_ids = _check_layers(stack.adapters)
    scales = {a.scale for a in stack.adapters}
    common = scales.pop() if len(scales) == 1 else None
    out = {}
    for lid in layer_ids:
        b_sum = a_sum = None
        for a, w in zip(stack.adapters, stack.weights):
            layer = a.layer(lid)
            b_term = (w * layer.B) if common is not None else (w * a.scale) * layer.B
            a_term = w * layer.A
            b_sum = b_term if b_sum is None else b_sum + b_term
            a_sum = a_term if a_sum is None else a_sum + a_term
        prod = b_sum @ a_sum
        out[lid] = common * prod if common is not None else prod
    return out


def fusion_objective(W, targets, inputs) -> float:
    """``sum_i ||T_i X_i - W X_i||_F^2``."""
    return float(sum(np.sum((T @ X - W @ X) ** 2) for T, X in zip(targets, inputs)))


def fuse_least_squares(targets, inputs, W0, ridge: float | None = None) -> np.ndarray:
    """Closed-form minimiser of ``sum_i ||T_i X_i - W X_i||_F^2``.

    With ``ridge`` set, ``ridge * ||W - W0||_F^2`` is added, which keeps the
    problem solvable when the inputs do not span the input space.
    """
    if not targets or len(targets) != len(inputs):
        raise ValueError("need one input matrix per target")
    m, n = W0.shape
    for T, X in zip(targets, inputs):
        if T.shape != (m, n):
            raise DimensionError(f"target {T.shape} vs base {W0.shape}")
        if X.ndim != 2 or X.shape[0] != n:
            raise DimensionError(f"inputs must have {n} rows, got {X.shape}")
    gram = np.zeros((n, n))
    rhs = np.zeros((m, n))
    for T, X in zip(targets, inputs):
        xx = X @ X.T
        gram += xx
        rhs += T @ xx
    if ridge is None:
        if np.linalg.matrix_rank(gram) < n:
            raise SingularityError("sum of X_i X_i^T is singular; enable a ridge term")
        first = targets[0]
        if all(np.array_equal(first, T) for T in targets[1:]):
            # every residual can vanish at once
            return np.array(first, dtype=np.float64)
    else:
        if ridge <= 0:
            raise ValueError("ridge must be positive")
        gram = gram + ridge * np.eye(n)
        rhs = rhs + ridge * W0
    return np.linalg.solve(gram, rhs.T).T


def merge_gradient_fusion(adapters, inputs, W0, layer_id: str, ridge: float | None = None) -> np.ndarray:
    """Fuse adapters on one layer by matching each adapter's outputs on its own inputs."""
    targets = [apply_delta(W0, a, layer_id, 1.0) for a in adapters]
    return fuse_least_squares(targets, inputs, W0, ridge=ridge)


# -- planted-spectrum synthetic adapters ------------------------------------

def fourier_basis(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Real orthonormal Fourier basis of an h x w grid, sorted by radial frequency.

    Returns ``(vectors, radii)`` with ``vectors`` of shape (h*w, h*w), one
    flattened basis image per row.
    """
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    fy = np.fft.fftfreq(h)
    fx = np.fft.fftfreq(w)
    vecs, radii, keys = [], [], []
    for ky in range(h):
        for kx in range(w):
            cy, cx = (-ky) % h, (-kx) % w
            if (cy, cx) < (ky, kx):
                continue
            phase = 2.0 * np.pi * (ky * yy / h + kx * xx / w)
            r = float(np.hypot(fy[ky], fx[kx]))
            c = np.cos(phase).ravel()
            vecs.append(c / np.linalg.norm(c))
            radii.append(r)
            keys.append((r, ky, kx, 0))
            if (cy, cx) != (ky, kx):
                s = np.sin(phase).ravel()
                vecs.append(s / np.linalg.norm(s))
                radii.append(r)
                keys.append((r, ky, kx, 1))
    order = sorted(range(len(keys)), key=keys.__getitem__)
    return np.array([vecs[i] for i in order]), np.array([radii[i] for i in order])


def synth_adapter(
    category: str,
    spectral_bias: float,
    seed: int,
    targets,
    rank: int = 3,
    scale: float = DEFAULT_SCALE,
    boost: float = 7.0,
    jitter: float = 0.05,
    adapter_id: str | None = None,
) -> LoraAdapter:
    """Build an adapter whose token-mixing update rescales a fixed high-frequency band.

    ``targets`` lists ``(layer_id, (h, w))`` token grids. On each layer the
    ``rank`` highest-frequency real Fourier modes are multiplied by
    ``spectral_bias * (1 + boost)`` once the adapter is applied at its scale:
    bias 0 removes the band (a smoothing kernel), bias 1 amplifies it (an
    edge-enhancing kernel), and the response is linear in between. The seed
    only drives a small perturbation of ``B``.
    """
    b = float(spectral_bias)
    if not 0.0 <= b <= 1.0:
        raise ValueError(f"spectral_bias must lie in [0, 1], got {b}")
    if rank < 1:
        raise ValueError("rank must be at least 1")
    coeff = (b * (1.0 + boost) - 1.0) / scale
    layers = []
    for layer_id, (h, w) in targets:
        n = h * w
        if rank > n:
            raise RankError(f"rank {rank} exceeds the {n} tokens of {layer_id}")
        rng = generator(seed, "synth_adapter", category, layer_id)
        basis, _ = fourier_basis(h, w)
        band = basis[n - rank:]
        B = coeff * band.T + (jitter / scale) * rng.standard_normal((n, rank)) / np.sqrt(n)
        layers.append(LoraLayer(layer_id, B, band))
    return LoraAdapter(
        id=adapter_id or f"{category}-{seed}",
        category=category,
        layers=tuple(layers),
        scale=scale,
        seed=seed,
        meta={"spectral_bias": b, "boost": boost, "jitter": jitter, "targets": TARGET_NOTE},
    )


# -- container files ---------------------------------------------------------

def save_adapter(path, adapter: LoraAdapter) -> None:
    """Write ``LFAD1`` + u64 header length + JSON header + little-endian f64 payload."""
    header = {
        "id": adapter.id,
        "category": adapter.category,
        "rank": adapter.rank,
        "scale": adapter.scale,
        "seed": adapter.seed,
        "targets": adapter.meta.get("targets", TARGET_NOTE),
        "meta": adapter.meta,
        "layers": [{"id": l.layer_id, "m": l.dims[0], "n": l.dims[1]} for l in adapter.layers],
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CONTAINER_MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for layer in adapter.layers:
            fh.write(np.ascontiguousarray(layer.B, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(layer.A, dtype="<f8").tobytes())


def load_adapter(path) -> LoraAdapter:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:5] != CONTAINER_MAGIC:
        raise ValueError(f"{path}: not an LFAD1 adapter container")
    (hlen,) = struct.unpack("<Q", data[5:13])
    header = json.loads(data[13:13 + hlen].decode("utf-8"))
    offset = 13 + hlen
    r = header["rank"]
    layers = []
    for spec in header["layers"]:
        m, n = spec["m"], spec["n"]
        B = np.frombuffer(data, dtype="<f8", count=m * r, offset=offset).reshape(m, r)
        offset += 8 * m * r
        A = np.frombuffer(data, dtype="<f8", count=r * n, offset=offset).reshape(r, n)
        offset += 8 * r * n
        layers.append(LoraLayer(spec["id"], B, A))
    if offset != len(data):
        raise ValueError(f"{path}: payload size does not match header")
    return LoraAdapter(
        id=header["id"],
        category=header["category"],
        layers=tuple(layers),
        scale=header["scale"],
        seed=header["seed"],
        meta=header.get("meta", {}),
    )
