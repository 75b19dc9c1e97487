import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from gfemamba.mamba import (
    ClassifierConfig,
    MambaBlock,
    MambaClassifier,
    MambaInner,
    rms_norm,
    selective_scan,
)


def scan_inputs(L, di=8, S=4, nb=1, dtype=torch.float64, seed=0):
    g = torch.Generator().manual_seed(seed)
    u = torch.randn(nb, L, di, generator=g, dtype=dtype)
    delta = F.softplus(torch.randn(nb, L, di, generator=g, dtype=dtype) - 2)
    A = -torch.arange(1, S + 1, dtype=dtype).repeat(di, 1)
    B = torch.randn(nb, L, S, generator=g, dtype=dtype)
    C = torch.randn(nb, L, S, generator=g, dtype=dtype)
    D = torch.ones(di, dtype=dtype)
    return u, delta, A, B, C, D


def test_rms_norm_worked_example():
    out = rms_norm(torch.tensor([[3.0, 4.0]], dtype=torch.float64), torch.ones(2, dtype=torch.float64))
    rms = np.sqrt((9 + 16) / 2 + 1e-6)
    assert np.allclose(out.numpy(), [[3 / rms, 4 / rms]], atol=1e-12)
    assert np.allclose(out.numpy(), [[0.8485, 1.1314]], atol=1e-4)


@given(st.floats(0.01, 100.0))
def test_rms_norm_scale_invariance(c):
    x = torch.randn(5, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    g = torch.ones(16, dtype=torch.float64)
    # eps breaks exact invariance, so check it with eps switched off
    assert torch.allclose(rms_norm(c * x, g, eps=0.0), rms_norm(x, g, eps=0.0), atol=1e-12)


def test_rms_norm_zero_row():
    assert torch.equal(rms_norm(torch.zeros(2, 4), torch.ones(4)), torch.zeros(2, 4))


@pytest.mark.parametrize("mode", ["sequential", "parallel"])
def test_scan_identity_recurrence_is_cumsum(mode):
    L, di = 12, 3
    u = torch.randn(L, di, dtype=torch.float64)
    ones = torch.ones(L, 1, dtype=torch.float64)
    y = selective_scan(u, torch.ones(L, di, dtype=torch.float64), torch.zeros(di, 1, dtype=torch.float64),
                       ones, ones, torch.zeros(di, dtype=torch.float64), mode=mode)
    assert torch.allclose(y, torch.cumsum(u, 0), atol=1e-12)


@pytest.mark.parametrize("mode", ["sequential", "parallel"])
def test_scan_memoryless_when_state_decays_fully(mode):
    L, di, S = 6, 2, 3
    u, delta, _, B, C, _ = scan_inputs(L, di, S)
    A = torch.full((di, S), -torch.inf, dtype=torch.float64)
    y = selective_scan(u, delta, A, B, C, torch.zeros(di, dtype=torch.float64), mode=mode)
    expected = (C * B).sum(-1, keepdim=True) * delta * u
    assert torch.allclose(y, expected, atol=1e-12)


@pytest.mark.parametrize("L", [1, 2, 3, 7, 64, 129, 256])
def test_parallel_matches_sequential(L):
    args = scan_inputs(L, di=16, S=8, nb=2, seed=L)
    y_seq = selective_scan(*args, mode="sequential")
    y_par = selective_scan(*args, mode="parallel")
    assert (y_seq - y_par).abs().max().item() < 1e-10
    args32 = [a.float() for a in args]
    d32 = (selective_scan(*args32, mode="sequential") - selective_scan(*args32, mode="parallel")).abs().max()
    assert d32.item() < 1e-5


@pytest.mark.parametrize("mode", ["sequential", "parallel"])
def test_scan_gradcheck(mode):
    args = [a.clone().requires_grad_() for a in scan_inputs(5, di=3, S=2, nb=2)]
    assert torch.autograd.gradcheck(lambda *a: selective_scan(*a, mode=mode), args)


def test_scan_reports_nonfinite_position():
    u, delta, A, B, C, D = scan_inputs(6)
    u[0, 3, 0] = float("nan")
    with pytest.raises(FloatingPointError, match="t=3"):
        selective_scan(u, delta, A, B, C, D)


def _cfg(**kw):
    return ClassifierConfig(**{"d": 16, "depth": 2, "state_dim": 4, "attn_dim": 8, **kw})


def test_inner_zero_output_projection_gives_zero():
    inner = MambaInner(_cfg())
    with torch.no_grad():
        inner.out_proj.weight.zero_()
        inner.out_proj.bias.zero_()
    assert torch.equal(inner(torch.randn(2, 7, 16)), torch.zeros(2, 7, 16))


@pytest.mark.parametrize("L", [1, 7, 64])
def test_inner_shape(L):
    assert MambaInner(_cfg())(torch.randn(1, L, 16)).shape == (1, L, 16)


@pytest.mark.parametrize("mode", ["sequential", "parallel"])
def test_inner_is_causal(mode):
    torch.manual_seed(0)
    inner = MambaInner(_cfg(scan_mode=mode)).double()
    x = torch.randn(1, 20, 16, dtype=torch.float64)
    base = inner(x)
    for t in np.random.default_rng(0).integers(0, 20, 8):
        x2 = x.clone()
        x2[0, t] += torch.randn(16, dtype=torch.float64)
        out = inner(x2)
        assert torch.equal(out[0, :t], base[0, :t])
        if t < 19:
            assert not torch.equal(out[0, t:], base[0, t:])


def test_block_identity_when_inner_zero():
    block = MambaBlock(_cfg())
    with torch.no_grad():
        block.mixer.out_proj.weight.zero_()
        block.mixer.out_proj.bias.zero_()
    x = torch.randn(3, 5, 16)
    assert torch.equal(block(x), x)


def test_stack_preserves_shape():
    clf = MambaClassifier(_cfg(depth=6))
    x = torch.randn(2, 11, 16)
    h = x
    for b in clf.blocks:
        h = b(h)
    assert h.shape == x.shape
    assert clf.pool(x).shape == (2, 16)


def test_pool_single_position_equals_stack_output():
    clf = MambaClassifier(_cfg())
    x = torch.randn(1, 1, 16)
    h = x
    for b in clf.blocks:
        h = b(h)
    assert torch.equal(clf.pool(x), h[:, 0])


def test_pool_is_input_mean_with_identity_blocks():
    clf = MambaClassifier(_cfg())
    with torch.no_grad():
        for b in clf.blocks:
            b.mixer.out_proj.weight.zero_()
            b.mixer.out_proj.bias.zero_()
    x = torch.randn(2, 9, 16)
    assert torch.allclose(clf.pool(x), x.mean(1))


def test_constant_head_and_softmax():
    clf = MambaClassifier(_cfg())
    with torch.no_grad():
        clf.head.weight.zero_()
        clf.head.bias.copy_(torch.tensor([0.3, -1.2]))
    pooled = torch.randn(4, 16)
    out = clf.classify(pooled, torch.rand(4, 1, 8, 8, 8), torch.rand(4, 1, 8, 8, 8))
    assert torch.equal(out, torch.tensor([[0.3, -1.2]]).expand(4, 2))
    probs = torch.softmax(clf(torch.randn(4, 6, 16), torch.rand(4, 1, 8, 8, 8), torch.rand(4, 1, 8, 8, 8)), -1)
    assert torch.allclose(probs.sum(-1), torch.ones(4), atol=1e-7)


@pytest.mark.parametrize("fill", [0.0, 1.0, 1e3])
def test_classifier_finite_on_extreme_inputs(fill):
    clf = MambaClassifier(_cfg())
    x = torch.full((2, 10, 16), fill)
    vol = torch.full((2, 1, 8, 8, 8), min(fill, 1.0))
    assert torch.isfinite(clf(x, vol, vol)).all()


def test_config_validation():
    with pytest.raises(ValueError):
        ClassifierConfig(depth=0)
    with pytest.raises(ValueError):
        ClassifierConfig(scan_mode="fft")
