import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hoigen import objectives as obj
from hoigen.substrate import gradcheck


def _r(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


# losses ---------------------------------------------------------------------

def test_l2_cases():
    x = _r(2, 3, 4)
    assert float(obj.l2_loss(x, x)) == 0.0
    assert float(obj.l2_loss(x + 1, x)) == pytest.approx(1.0)
    y = _r(2, 3, 4, seed=1)
    assert float(obj.l2_loss(x, y)) == pytest.approx(float(((x - y) ** 2).sum() / x.numel()))
    with pytest.raises(ValueError):
        obj.l2_loss(x, y[:1])


def test_velocity_closed_form():
    s, j = 5, 52
    v = torch.tensor([0.1, -0.2, 0.05], dtype=torch.float64)
    gt = torch.arange(s, dtype=torch.float64)[:, None, None] * v + torch.zeros(s, j, 3, dtype=torch.float64)
    static = gt[:1].expand(s, j, 3)
    per_coord = (v ** 2).mean()
    # body term averages over every joint; hands term over the two wrists
    assert float(obj.velocity_loss(static, gt)) == pytest.approx(float(per_coord + 2 * per_coord))
    assert float(obj.velocity_loss(gt, gt)) == 0.0


def test_velocity_time_reversal():
    gt = _r(6, 52, 3)
    pred = _r(6, 52, 3, seed=1)
    rev = torch.flip(gt, dims=[0])
    # reversed motion has negated frame differences (in reverse order)
    a = obj.velocity_loss(pred, rev)
    dv_pred = torch.diff(pred, dim=0)
    dv_neg = -torch.flip(torch.diff(gt, dim=0), dims=[0])
    d = dv_pred - dv_neg
    b = (d ** 2).mean() + 2 * (d[:, [20, 21]] ** 2).mean()
    assert float(a) == pytest.approx(float(b))


def test_velocity_needs_two_frames():
    with pytest.raises(ValueError):
        obj.velocity_loss(_r(1, 52, 3), _r(1, 52, 3))


def test_distance_loss_cases():
    c = _r(2, 4, 1, 3)
    assert float(obj.distance_loss(c, c + 1)) == 0.0
    g = torch.zeros(1, 3, 2, 3, dtype=torch.float64)
    g[..., 1, 0] = 1.0
    p = g.clone()
    p[..., 1, 0] = 1.1
    assert float(obj.distance_loss(p, g)) == pytest.approx(0.01)
    assert float(obj.distance_loss(g, g)) == 0.0
    three = torch.cat([g, torch.full((1, 3, 1, 3), 50.0, dtype=torch.float64)], dim=2)
    three_p = torch.cat([p, torch.zeros(1, 3, 1, 3, dtype=torch.float64)], dim=2)
    mask = torch.tensor([[True, True, False]])
    assert float(obj.distance_loss(three_p, three, mask)) == pytest.approx(0.01)


def test_interaction_loss_cases():
    hands, cents = _r(1, 4, 2, 3), _r(1, 4, 3, 3, seed=1)
    assert float(obj.interaction_loss(hands, cents, hands, cents)) == 0.0
    p_hands = hands + 0.1
    a = obj.interaction_loss(p_hands, cents, hands, cents)
    b = obj.interaction_loss(p_hands.flip(-2), cents, hands.flip(-2), cents)
    assert float(a) == pytest.approx(float(b))


def test_interaction_single_channel_error():
    # one object: moving the left hand radially changes exactly one of the 2 N_o channels
    gt_c = torch.tensor([[[[0.0, 0.0, 1.0]]]], dtype=torch.float64)  # B, S, N_o, 3
    gt_h = torch.tensor([[[[0.0, 0.0, 0.0], [5.0, 0.0, 1.0]]]], dtype=torch.float64)
    p_h = gt_h.clone()
    p_h[..., 0, 2] = -0.05
    n_o = 1
    assert float(obj.interaction_loss(p_h, gt_c, gt_h, gt_c)) == pytest.approx(0.0025 / (2 * n_o))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 31))
def test_losses_nonnegative_and_zero_at_gt(seed):
    p, g = _r(2, 3, 52, 3, seed=seed), _r(2, 3, 52, 3, seed=seed + 1)
    c1, c2 = _r(2, 3, 3, 3, seed=seed + 2), _r(2, 3, 3, 3, seed=seed + 3)
    for loss, args in ((obj.velocity_loss, (p, g)), (obj.distance_loss, (c1, c2)),
                       (obj.interaction_loss, (p[..., :2, :], c1, g[..., :2, :], c2)),
                       (obj.l2_loss, (p, g))):
        assert float(loss(*args)) >= 0
    assert float(obj.velocity_loss(g, g)) == 0
    assert float(obj.distance_loss(c2, c2)) == 0
    assert float(obj.interaction_loss(g[..., :2, :], c2, g[..., :2, :], c2)) == 0


def test_total_loss_examples():
    w = obj.LossWeights()
    assert float(obj.total_loss({}, w)) == 0.0
    ones = {k: torch.tensor(1.0, dtype=torch.float64) for k in obj.LOSS_KEYS}
    assert float(obj.total_loss(ones, w)) == pytest.approx(25.31, abs=1e-12)
    x = torch.tensor(1.0, requires_grad=True)
    comps = dict(ones, inter=x)
    obj.total_loss(comps, obj.LossWeights(inter=0.0)).backward()
    assert float(x.grad) == 0.0
    with pytest.raises(ValueError):
        obj.LossWeights(vel=-1)


def test_total_loss_gradient_is_weighted_sum():
    w = obj.LossWeights()
    coef = torch.tensor([1, 10, 1, 10, 1, 2, 0.3, 0.01], dtype=torch.float64)

    def f(v):
        return obj.total_loss({k: v[i] ** 2 for i, k in enumerate(obj.LOSS_KEYS)}, w)

    v = _r(8)
    rep = gradcheck(f, v)
    assert rep.passed
    assert np.allclose(rep.analytic, (2 * v * coef).numpy())


# metrics --------------------------------------------------------------------

def test_contact_examples():
    gt = np.array([[1, 0], [1, 0], [0, 1], [0, 0]], dtype=bool)
    assert obj.contact_metrics(gt, gt)[:3] == (1.0, 1.0, 1.0)
    p, r, f1, _ = obj.contact_metrics(np.ones((4, 2), bool), np.array([[1, 0]] * 4, bool))
    assert (p, r) == (0.5, 1.0) and f1 == pytest.approx(2 / 3)
    assert obj.contact_metrics(np.zeros((4, 2), bool), gt) == (0.0, 0.0, 0.0, 0.0)
    assert obj.contact_metrics(gt, gt)[3] == 0.75


def test_contact_matches_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 12))
        pred, gt = rng.random((n, 2)) < 0.5, rng.random((n, 2)) < 0.5
        tp = fp = fn = 0
        for a, b in zip(pred.ravel(), gt.ravel()):
            tp += a and b
            fp += a and not b
            fn += (not a) and b
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * p * r / (p + r) if p + r else 0.0
        got = obj.contact_metrics(pred, gt)
        assert got[:3] == pytest.approx((p, r, f1))
        if p + r > 0:
            assert got[2] == pytest.approx(2 * got[0] * got[1] / (got[0] + got[1]))
        assert 0 <= got[3] <= 1


def test_interaction_distance():
    rng = np.random.default_rng(1)
    d = rng.random(50)
    assert obj.interaction_distance(d, d) == 0.0
    assert obj.interaction_distance(d + 0.3, d) == pytest.approx(0.3)
    e = rng.random(40)
    assert obj.interaction_distance(d, e) == pytest.approx(abs(sum(d) / len(d) - sum(e) / len(e)))


def test_diversity():
    assert obj.diversity(np.ones((10, 4))) == 0.0
    assert obj.diversity(np.array([[0.0, 0], [3, 4]])) == pytest.approx(5.0)
    x = np.random.default_rng(2).normal(size=(50, 6))
    full = np.mean([np.linalg.norm(x[i] - x[j]) for i, j in itertools.permutations(range(50), 2)])
    est = obj.diversity(x, n_pairs=300, seed=0)
    assert abs(est - full) / full < 0.05
    assert obj.diversity(x, seed=3) == obj.diversity(x, seed=3)


def _spd(rng, n):
    a = rng.normal(size=(n, n))
    return a @ a.T + 0.1 * np.eye(n)


def test_frechet_cases():
    rng = np.random.default_rng(3)
    mu, s = rng.normal(size=5), _spd(rng, 5)
    assert abs(obj.frechet_distance(mu, s, mu, s)) < 1e-8
    d = rng.normal(size=5)
    assert obj.frechet_distance(mu, s, mu + d, s) == pytest.approx(float(d @ d), abs=1e-8)
    mu2, s2 = rng.normal(size=5), _spd(rng, 5)
    # oracle: sqrt via eigen of S1 S2 (similar to a PSD matrix, real nonnegative spectrum)
    ev = np.linalg.eigvals(s @ s2)
    tr = np.sum(np.sqrt(np.clip(ev.real, 0, None)))
    expected = np.sum((mu - mu2) ** 2) + np.trace(s) + np.trace(s2) - 2 * tr
    assert obj.frechet_distance(mu, s, mu2, s2) == pytest.approx(expected, abs=1e-6)
    assert obj.frechet_distance(mu, s, mu2, s2) == pytest.approx(obj.frechet_distance(mu2, s2, mu, s), abs=1e-8)
    with pytest.raises(ValueError):
        obj.frechet_distance(mu, s, mu2[:3], s2)


def test_metric_report_json():
    r = obj.MetricReport(1, 1, 1, 0.5, 0.0, 2.0, {"frechet": 0.1})
    d = r.to_json()
    assert set(d) == {"C_prec", "C_rec", "C_F1", "C_pct", "D_I", "diversity", "frechet"}
