"""Network block contracts: attention, CSP bottleneck, module plumbing."""

import numpy as np
import pytest

from microdet import tensor as T
from microdet.blocks import C3, ConvBNAct, DualAttention, SPPLite
from microdet.tensor import Tensor

from oracles import dual_attention_reference, grads_close, numeric_grad


def projection(out: Tensor, seed: int) -> Tensor:
    w = np.random.default_rng(seed ^ 0xB10C).standard_normal(out.shape).astype(np.float32)
    return (out * Tensor(w)).sum()


def module_gradcheck(module, x_arr: np.ndarray, seed: int):
    """Finite-difference check of input and all parameter gradients."""
    module.train(True)
    x = Tensor(x_arr, requires_grad=True)
    loss = projection(module(x), seed)
    loss.backward()
    targets = {"__input__": x, **module.named_parameters()}
    analytic = {name: t.grad.copy() for name, t in targets.items()}

    saved = {name: t.data for name, t in module.named_tensors().items()}
    for name, t in module.named_tensors().items():
        t.data = t.data.astype(np.float64)
    x64 = x_arr.astype(np.float64)
    try:
        def f():
            with T.no_grad(), T.float64_precision():
                return projection(module(Tensor(x64)), seed).item()

        for name, t in targets.items():
            arr = x64 if name == "__input__" else module.named_tensors()[name].data
            num = numeric_grad(f, arr)
            assert grads_close(analytic[name], num), f"{name} gradient mismatch"
    finally:
        for name, t in module.named_tensors().items():
            t.data = saved[name]


# ---------------------------------------------------------------------------
# dual attention
# ---------------------------------------------------------------------------


def make_attention(channels: int, seed: int = 0) -> DualAttention:
    return DualAttention(np.random.default_rng(seed), channels)


def test_zero_weights_give_quarter_gate():
    att = make_attention(4)
    att.channel_weights.data[:] = 0.0
    att.spatial_kernel.data[:] = 0.0
    x = np.random.default_rng(1).standard_normal((2, 4, 8, 8)).astype(np.float32)
    out = att(Tensor(x))
    np.testing.assert_allclose(out.data, 0.25 * x, atol=1e-6)


def test_zero_input_gives_zero_output():
    att = make_attention(6, seed=3)
    out = att(Tensor(np.zeros((1, 6, 9, 9), dtype=np.float32)))
    np.testing.assert_array_equal(out.data, 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_matches_straight_line_reference(seed):
    rng = np.random.default_rng(seed)
    att = make_attention(5, seed=seed + 100)
    x = rng.standard_normal((2, 5, 10, 10)).astype(np.float32)
    out = att(Tensor(x))
    ref = dual_attention_reference(x, att.channel_weights.data, att.spatial_kernel.data)
    np.testing.assert_allclose(out.data, ref, atol=1e-5)


@pytest.mark.parametrize("seed", range(10))
def test_attention_is_elementwise_contraction(seed):
    rng = np.random.default_rng(seed)
    att = make_attention(4, seed=seed)
    x = rng.standard_normal((1, 4, 8, 8)).astype(np.float32) * 3.0
    out = att(Tensor(x))
    assert np.all(np.abs(out.data) <= np.abs(x) + 1e-7)


@pytest.mark.parametrize("seed", range(10))
def test_attention_map_in_open_unit_interval(seed):
    rng = np.random.default_rng(seed)
    att = make_attention(4, seed=seed + 50)
    x = rng.standard_normal((1, 4, 8, 8)).astype(np.float32)
    a = att.attention_map(Tensor(x))
    assert np.all(a.data > 0.0) and np.all(a.data < 1.0)


def test_attention_preserves_shape():
    att = make_attention(8)
    x = Tensor(np.random.default_rng(0).random((2, 8, 12, 16)).astype(np.float32))
    assert att(x).shape == x.shape


def test_attention_channel_mismatch():
    att = make_attention(4)
    with pytest.raises(T.ShapeError, match="channels"):
        att(Tensor(np.zeros((1, 5, 8, 8), dtype=np.float32)))


@pytest.mark.parametrize("seed", range(3))
def test_attention_gradients(seed):
    att = make_attention(3, seed=seed)
    x = np.random.default_rng(seed).standard_normal((2, 3, 7, 7)).astype(np.float32)
    module_gradcheck(att, x, seed)


# ---------------------------------------------------------------------------
# C3 / SPP / ConvBNAct
# ---------------------------------------------------------------------------


def test_c3_preserves_shape():
    rng = np.random.default_rng(0)
    block = C3(rng, 8, 8, n=2)
    x = Tensor(rng.standard_normal((1, 8, 16, 16)).astype(np.float32))
    assert block(x).shape == (1, 8, 16, 16)


def test_c3_rejects_odd_channels():
    with pytest.raises(ValueError, match="even"):
        C3(np.random.default_rng(0), 8, 7)


def test_c3_zeroed_bottlenecks_reduce_to_residual_path():
    rng = np.random.default_rng(2)
    block = C3(rng, 6, 6, n=2)
    block.eval()
    for b in block.blocks:
        for t in b.named_parameters().values():
            t.data[:] = 0.0
    x = Tensor(rng.standard_normal((1, 6, 8, 8)).astype(np.float32))
    got = block(x)
    bypass = block.cv3(T.concat([block.cv1(x), block.cv2(x)], axis=1))
    np.testing.assert_allclose(got.data, bypass.data, atol=1e-6)


@pytest.mark.parametrize("seed", range(3))
def test_c3_gradients(seed):
    block = C3(np.random.default_rng(seed), 4, 4, n=1)
    x = np.random.default_rng(seed + 7).standard_normal((2, 4, 6, 6)).astype(np.float32)
    module_gradcheck(block, x, seed)


def test_spp_preserves_spatial_dims():
    rng = np.random.default_rng(0)
    spp = SPPLite(rng, 8, 8)
    x = Tensor(rng.standard_normal((1, 8, 8, 8)).astype(np.float32))
    assert spp(x).shape == (1, 8, 8, 8)


def test_convbnact_stride_halves():
    rng = np.random.default_rng(0)
    conv = ConvBNAct(rng, 3, 8, k=3, stride=2)
    x = Tensor(rng.standard_normal((2, 3, 16, 16)).astype(np.float32))
    assert conv(x).shape == (2, 8, 8, 8)


# ---------------------------------------------------------------------------
# module plumbing
# ---------------------------------------------------------------------------


def test_named_tensors_are_deterministic_and_disjoint():
    rng = np.random.default_rng(0)
    block = C3(rng, 4, 4, n=2)
    names = list(block.named_tensors())
    assert names == list(C3(np.random.default_rng(0), 4, 4, n=2).named_tensors())
    assert len(names) == len(set(names))
    assert set(block.named_parameters()) < set(block.named_tensors())


def test_state_round_trip():
    rng = np.random.default_rng(1)
    a = C3(rng, 4, 4, n=1)
    b = C3(np.random.default_rng(99), 4, 4, n=1)
    b.load_state(a.state())
    a.eval(), b.eval()
    x = Tensor(np.random.default_rng(2).standard_normal((1, 4, 6, 6)).astype(np.float32))
    np.testing.assert_array_equal(a(x).data, b(x).data)


def test_load_state_rejects_mismatched_keys():
    block = C3(np.random.default_rng(0), 4, 4, n=1)
    state = block.state()
    state.pop(next(iter(state)))
    with pytest.raises(KeyError, match="missing"):
        block.load_state(state)
