import numpy as np
import pytest
from hypothesis import given, strategies as st

from lorafuse.adapters import (AdapterStack, ConstraintError, LoraAdapter, LoraLayer, RankError, ShapeError,
                               SingularityError, apply_delta, fourier_basis, fuse_least_squares,
                               fusion_objective, load_adapter, merge_componentwise, merge_elementwise,
                               merge_gradient_fusion, save_adapter, synth_adapter)
from lorafuse.numerics import DimensionError
from oracles import iterative_fusion


def rand_adapter(seed, m=6, n=5, r=2, scale=1.0, layers=("l0", "l1"), aid=None):
    rng = np.random.default_rng(seed)
    return LoraAdapter(aid or f"a{seed}", "style",
                       tuple(LoraLayer(lid, rng.standard_normal((m, r)), rng.standard_normal((r, n)))
                             for lid in layers), scale=scale)


def loop_matmul(B, A):
    m, r = B.shape
    n = A.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for k in range(r):
                out[i, j] += B[i, k] * A[k, j]
    return out


def test_layer_validation():
    with pytest.raises(DimensionError):
        LoraLayer("x", np.zeros((3, 2)), np.zeros((3, 4)))
    with pytest.raises(RankError):
        LoraLayer("x", np.zeros((2, 3)), np.zeros((3, 4)))
    with pytest.raises(ValueError):
        LoraLayer("x", np.full((2, 1), np.inf), np.zeros((1, 2)))


def test_adapter_rejects_mixed_ranks_and_duplicates():
    l1 = LoraLayer("a", np.zeros((4, 1)), np.zeros((1, 4)))
    l2 = LoraLayer("b", np.zeros((4, 2)), np.zeros((2, 4)))
    with pytest.raises(RankError):
        LoraAdapter("x", "c", (l1, l2))
    with pytest.raises(ValueError):
        LoraAdapter("x", "c", (l1, l1))


def test_apply_delta_examples():
    a = LoraAdapter("t", "c", (LoraLayer("l", [[1.0], [0.0]], [[0.0, 1.0]]),), scale=1.0)
    W = np.zeros((2, 2))
    np.testing.assert_array_equal(apply_delta(W, a, "l", 1.0), [[0.0, 1.0], [0.0, 0.0]])
    W2 = np.random.default_rng(0).standard_normal((2, 2))
    assert apply_delta(W2, a, "l", 0.0).tobytes() == W2.tobytes()
    with pytest.raises(KeyError):
        apply_delta(W, a, "missing", 1.0)
    with pytest.raises(DimensionError):
        apply_delta(np.zeros((3, 3)), a, "l", 1.0)


def test_apply_delta_matches_loop_oracle():
    a = rand_adapter(1, m=16, n=16, r=4, scale=1.4, layers=("l",))
    W = np.random.default_rng(2).standard_normal((16, 16))
    L = a.layer("l")
    ref = W + 0.7 * 1.4 * loop_matmul(L.B, L.A)
    np.testing.assert_allclose(apply_delta(W, a, "l", 0.7), ref, atol=1e-12)


@given(st.integers(0, 2**32 - 1), st.integers(-6, 6),
       st.floats(-3, 3, allow_nan=False).filter(lambda x: x == 0 or abs(x) > 1e-100))
def test_apply_delta_linear_in_weight(seed, k, w):
    a = rand_adapter(seed, scale=1.4)
    alpha = 2.0 ** k
    zero = np.zeros((6, 5))
    # power-of-two rescaling is exact for normal numbers
    assert (apply_delta(zero, a, "l0", alpha * w)).tobytes() == (alpha * apply_delta(zero, a, "l0", w)).tobytes()
    W = np.random.default_rng(seed).standard_normal((6, 5))
    lhs = apply_delta(W, a, "l0", 3.0 * w) - W
    rhs = 3.0 * (apply_delta(W, a, "l0", w) - W)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12 * (1 + np.abs(rhs).max()))


def test_componentwise_examples():
    a = rand_adapter(3)
    W = np.random.default_rng(4).standard_normal((6, 5))
    delta = merge_componentwise(AdapterStack((a,), (1.0,)))
    assert (W + delta["l0"]).tobytes() == apply_delta(W, a, "l0", 1.0).tobytes()
    twin = rand_adapter(3, aid="twin")
    both = merge_componentwise(AdapterStack((a, twin), (0.5, 0.5)))
    np.testing.assert_allclose(both["l1"], delta["l1"], atol=1e-14)
    with pytest.raises(ConstraintError):
        merge_componentwise(AdapterStack((a, twin), (0.6, 0.6)))


def test_componentwise_weights_default_uniform():
    adapters = tuple(rand_adapter(s) for s in range(3))
    stack = AdapterStack(adapters)
    assert stack.weights == (1 / 3,) * 3
    merge_componentwise(stack)


def test_componentwise_shape_errors():
    a = rand_adapter(1)
    with pytest.raises(ShapeError):
        merge_componentwise(AdapterStack((a, rand_adapter(2, layers=("l0", "other")))))
    with pytest.raises(ShapeError):
        merge_componentwise(AdapterStack((a, rand_adapter(2, m=7))))


def test_componentwise_all_weight_on_one():
    a, b = rand_adapter(5), rand_adapter(6)
    d = merge_componentwise(AdapterStack((a, b), (0.0, 1.0)))
    np.testing.assert_array_equal(d["l0"], 1.0 * b.scale * b.layer("l0").product())


def test_elementwise_examples():
    a = rand_adapter(7, scale=1.4)
    d = merge_elementwise(AdapterStack((a,), (1.0,)))
    assert d["l0"].tobytes() == (1.4 * a.layer("l0").product()).tobytes()
    with pytest.raises(RankError):
        merge_elementwise(AdapterStack((rand_adapter(1, r=2), rand_adapter(2, r=3))))
    b = rand_adapter(8, scale=1.4)
    d2 = merge_elementwise(AdapterStack((a, b), (0.3, 0.7)))
    ref = 1.4 * loop_matmul(0.3 * a.layer("l1").B + 0.7 * b.layer("l1").B,
                            0.3 * a.layer("l1").A + 0.7 * b.layer("l1").A)
    np.testing.assert_allclose(d2["l1"], ref, atol=1e-12)


def test_elementwise_differs_from_componentwise():
    stack = AdapterStack((rand_adapter(11), rand_adapter(12)), (0.5, 0.5))
    gap = np.linalg.norm(merge_elementwise(stack)["l0"] - merge_componentwise(stack)["l0"])
    assert gap > 1e-6


def test_gradient_fusion_examples():
    rng = np.random.default_rng(9)
    a = rand_adapter(13)
    W0 = rng.standard_normal((6, 5))
    X = rng.standard_normal((5, 8))
    fused = merge_gradient_fusion([a], [X], W0, "l0")
    assert fused.tobytes() == apply_delta(W0, a, "l0", 1.0).tobytes()
    zero = np.zeros((5, 3))
    with pytest.raises(SingularityError):
        merge_gradient_fusion([a, rand_adapter(14)], [zero, zero], W0, "l0")
    np.testing.assert_allclose(merge_gradient_fusion([a], [zero], W0, "l0", ridge=1e-8), W0, atol=1e-12)


def test_gradient_fusion_matches_iterative_oracle():
    rng = np.random.default_rng(10)
    adapters = [rand_adapter(20), rand_adapter(21)]
    W0 = rng.standard_normal((6, 5))
    inputs = [rng.standard_normal((5, 7)), rng.standard_normal((5, 4))]
    fused = merge_gradient_fusion(adapters, inputs, W0, "l1")
    targets = [apply_delta(W0, a, "l1", 1.0) for a in adapters]
    assert np.linalg.norm(fused - iterative_fusion(targets, inputs, W0)) < 1e-6


@given(st.integers(0, 2**32 - 1))
def test_gradient_fusion_beats_componentwise(seed):
    rng = np.random.default_rng(seed)
    adapters = [rand_adapter(seed % 1000 + i, aid=f"x{i}") for i in range(3)]
    W0 = rng.standard_normal((6, 5))
    inputs = [rng.standard_normal((5, 6)) for _ in adapters]
    targets = [apply_delta(W0, a, "l0", 1.0) for a in adapters]
    fused = fuse_least_squares(targets, inputs, W0)
    merged = W0 + merge_componentwise(AdapterStack(tuple(adapters)))["l0"]
    assert fusion_objective(fused, targets, inputs) <= fusion_objective(merged, targets, inputs) + 1e-9


def test_fourier_basis_orthonormal():
    vecs, radii = fourier_basis(4, 8)
    np.testing.assert_allclose(vecs @ vecs.T, np.eye(32), atol=1e-12)
    assert radii[0] == 0.0 and np.all(np.diff(radii) >= 0)


def test_synth_adapter_deterministic_and_seeded():
    targets = [("l", (4, 4)), ("m", (2, 2))]
    a = synth_adapter("style", 0.7, 3, targets)
    b = synth_adapter("style", 0.7, 3, targets)
    c = synth_adapter("style", 0.7, 4, targets)
    assert all(x.B.tobytes() == y.B.tobytes() and x.A.tobytes() == y.A.tobytes()
               for x, y in zip(a.layers, b.layers))
    assert a.layers[0].B.tobytes() != c.layers[0].B.tobytes()
    with pytest.raises(ValueError):
        synth_adapter("style", 1.5, 0, targets)


def test_synth_adapter_band_gain():
    # without jitter, the applied update scales the top modes by bias * (1 + boost)
    targets = [("l", (4, 4))]
    a = synth_adapter("x", 0.25, 0, targets, jitter=0.0, boost=3.0)
    basis, _ = fourier_basis(4, 4)
    mode = basis[-1]
    mixed = mode + a.scale * a.layer("l").product() @ mode
    np.testing.assert_allclose(mixed, 0.25 * 4.0 * mode, atol=1e-12)
    low = basis[1]
    np.testing.assert_allclose(a.scale * a.layer("l").product() @ low, 0.0, atol=1e-12)


def test_container_round_trip(tmp_path):
    a = synth_adapter("object", 0.3, 5, [("down1.attn", (4, 4)), ("mid.attn", (2, 2))], rank=2)
    path = tmp_path / "a.lfad"
    save_adapter(path, a)
    raw = path.read_bytes()
    assert raw[:5] == b"LFAD1"
    b = load_adapter(path)
    assert (b.id, b.category, b.scale, b.seed, b.rank) == (a.id, a.category, a.scale, a.seed, a.rank)
    for x, y in zip(a.layers, b.layers):
        assert x.layer_id == y.layer_id
        assert x.B.tobytes() == y.B.tobytes() and x.A.tobytes() == y.A.tobytes()
    assert "targets" in b.meta
    path.write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        load_adapter(path)
    path.write_bytes(b"XXXXX" + raw[5:])
    with pytest.raises(ValueError):
        load_adapter(path)
