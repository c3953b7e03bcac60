import numpy as np
import pytest
import torch

from hoigen import gradsuite
from hoigen.denoiser import HOIDenoiser, StageDenoiser
from hoigen.layers import MixedAttention, global_templates, mixed_attention
from hoigen.substrate import ParameterStore


def _dense_mixed(q, k, v):
    """Loop-based reference: softmax of K over tokens, of Q over features."""
    b, nq, d = q.shape
    nk = k.shape[1]
    out = np.zeros((b, nq, d))
    for bi in range(b):
        ek = np.exp(k[bi] - k[bi].max(0))
        ks = ek / ek.sum(0)
        g = np.zeros((d, d))
        for i in range(d):
            for j in range(d):
                g[i, j] = sum(ks[t, i] * v[bi, t, j] for t in range(nk))
        for r in range(nq):
            eq = np.exp(q[bi, r] - q[bi, r].max())
            qs = eq / eq.sum()
            out[bi, r] = qs @ g
    return out


def test_mixed_attention_matches_dense_oracle():
    rng = np.random.default_rng(0)
    for _ in range(10):
        nq, nk, d = rng.integers(1, 5), rng.integers(1, 5), rng.integers(1, 9)
        q, k, v = (rng.normal(size=(2, n, d)) for n in (nq, nk, nk))
        got = mixed_attention(*(torch.tensor(a) for a in (q, k, v))).numpy()
        assert np.abs(got - _dense_mixed(q, k, v)).max() < 1e-6
        g = global_templates(torch.tensor(k), torch.tensor(v))[:, 0].numpy()
        assert np.all(got >= g.min(axis=1)[:, None, :] - 1e-9)
        assert np.all(got <= g.max(axis=1)[:, None, :] + 1e-9)


def test_single_context_token():
    v = torch.randn(1, 1, 4)
    y = mixed_attention(torch.randn(1, 3, 4), torch.randn(1, 1, 4), v)
    assert torch.allclose(y, v.expand(1, 3, 4), atol=1e-6)


def test_two_token_three_feature_hand_case():
    q = torch.tensor([[[0.0, 0.0, 0.0]]], dtype=torch.float64)
    k = torch.tensor([[[0.0, 0.0, 0.0], [np.log(3.0), 0.0, 0.0]]], dtype=torch.float64)
    v = torch.tensor([[[1.0, 0.0, 0.0], [0.0, 1.0, 2.0]]], dtype=torch.float64)
    # K softmax columns: (1/4, 3/4), (1/2, 1/2), (1/2, 1/2); uniform query averages template rows
    g = np.array([[0.25, 0.75, 1.5], [0.5, 0.5, 1.0], [0.5, 0.5, 1.0]])
    assert np.allclose(mixed_attention(q, k, v).numpy()[0, 0], g.mean(0))


def test_softmax_axes_normalised():
    k = torch.randn(2, 5, 6)
    g_rows = torch.softmax(k, dim=1).sum(1)
    assert torch.allclose(g_rows, torch.ones(2, 6), atol=1e-6)


def test_key_mask_removes_tokens():
    q, k, v = torch.randn(1, 2, 4), torch.randn(1, 3, 4), torch.randn(1, 3, 4)
    mask = torch.tensor([[True, True, False]])
    assert torch.allclose(mixed_attention(q, k, v, key_mask=mask), mixed_attention(q, k[:, :2], v[:, :2]), atol=1e-6)


def test_context_order_independent():
    m = MixedAttention(8, ["a", "b"], heads=2)
    ParameterStore(m, 0).initialize()
    swapped = MixedAttention(8, ["b", "a"], heads=2)
    swapped.load_state_dict(m.state_dict())
    x, ca, cb = torch.randn(1, 3, 8), torch.randn(1, 2, 8), torch.randn(1, 4, 8)
    assert torch.allclose(m(x, {"a": ca, "b": cb}), swapped(x, {"a": ca, "b": cb}), atol=1e-6)


def test_mixed_attention_errors():
    with pytest.raises(ValueError):
        MixedAttention(8, [])
    m = MixedAttention(8, ["a"])
    with pytest.raises(ValueError):
        m(torch.randn(1, 2, 8), {})
    with pytest.raises(ValueError):
        mixed_attention(torch.randn(1, 2, 4), torch.randn(1, 3, 4), torch.randn(1, 2, 4))


def _stage(motion_dim=20, cond=6):
    m = StageDenoiser(motion_dim, cond, dim=16, layers=1, heads=2, num_experts=4, top_k=2, route_dim=8, max_frames=8)
    ParameterStore(m, 0).initialize()
    return m


def test_stage_shape_and_determinism():
    m = _stage()
    x, t = torch.randn(2, 4, 20), torch.tensor([1, 500])
    text, tm, cond = torch.randn(2, 3, 16), torch.ones(2, 3, dtype=torch.bool), torch.randn(2, 6)
    a, moe_a = m(x, t, text, tm, cond)
    b, _ = m(x, t, text, tm, cond)
    assert a.shape == x.shape and torch.equal(a, b)
    assert moe_a.routing.indices.shape == (8, 2)
    with pytest.raises(ValueError):
        m(torch.randn(2, 4, 21), t, text, tm, cond)


def _hoi(cascade=True):
    m = HOIDenoiser(20, 12, dim=16, layers=2, heads=2, max_frames=8, cascade=cascade)
    ParameterStore(m, 1).initialize()
    return m


def test_hoi_shapes_and_missing_stage1():
    m = _hoi()
    xh, xo, t = torch.randn(2, 4, 20), torch.randn(2, 4, 12), torch.tensor([3, 9])
    text, tm = torch.randn(2, 3, 16), torch.ones(2, 3, dtype=torch.bool)
    ph, po = m(xh, xo, t, text, tm, torch.randn(2, 4, 20), torch.randn(2, 4, 12))
    assert ph.shape == xh.shape and po.shape == xo.shape
    with pytest.raises(ValueError, match="stage-1"):
        m(xh, xo, t, text, tm)
    ph2, _ = _hoi(cascade=False)(xh, xo, t, text, tm)
    assert ph2.shape == xh.shape


def test_zeroed_cross_stream_projection_removes_influence():
    m = _hoi()
    with torch.no_grad():
        for blk in m.blocks:
            blk.mixed["human"].k["other"].weight.zero_()
            blk.mixed["human"].v["other"].weight.zero_()
    xh, t = torch.randn(1, 4, 20), torch.tensor([7])
    text, tm = torch.randn(1, 2, 16), torch.ones(1, 2, dtype=torch.bool)
    h0, o0 = torch.randn(1, 4, 20), torch.randn(1, 4, 12)
    a, _ = m(xh, torch.randn(1, 4, 12), t, text, tm, h0, o0)
    b, _ = m(xh, torch.randn(1, 4, 12) * 5, t, text, tm, h0, o0)
    assert torch.allclose(a, b, atol=1e-6)


@pytest.mark.parametrize("name", [n for n in gradsuite.CHECKS])
def test_gradsuite_check(name):
    rep = gradsuite.CHECKS[name]()
    assert rep.passed, f"{name}: {rep}"


def test_gradsuite_groups():
    assert set(gradsuite.run("attention")) == {"mixed_attention", "mixed_attention_module"}
    with pytest.raises(KeyError):
        gradsuite.run("nope")
