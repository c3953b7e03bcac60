"""Finite-difference gradient checks of every differentiable component at toy sizes.

All checks run in float64 with central differences (step 1e-3, tol 1e-4).
Expert selection is pinned wherever an MoE is involved, since top-k
selection is piecewise constant and has no derivative at a switch.
"""

from __future__ import annotations

from typing import Callable

import torch

from . import objectives as obj
from .denoiser import HOIDenoiser, StageDenoiser
from .layers import MixedAttention, mixed_attention
from .moe import FilmExpert, MoEFusion, balance_loss, route_from_logits
from .representation import HUMAN_DIM, OBJECT_DIM
from .substrate import GradcheckReport, ParameterStore, gradcheck, param_gradcheck

S = 4  # frames
D = 16  # model width
STEP = 1e-3
TOL = 1e-4


def _init(module: torch.nn.Module, seed: int) -> torch.nn.Module:
    ParameterStore(module, seed).initialize()
    # zero-initialised tensors (positional tables, biases) make some paths vanish
    gen = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(0.05 * torch.randn(p.shape, generator=gen))
    return module.double()


def _rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def _weights(shape, seed):
    # fixed random projection turning an output into a scalar
    return _rand(*shape, seed=seed + 100)


def check_film_expert() -> GradcheckReport:
    e = _init(FilmExpert(D, 8), 0)
    x, c = _rand(S, D, seed=1), _rand(S, 8, seed=2)
    w = _weights((S, D), 0)
    xc = torch.cat([x.reshape(-1), c.reshape(-1)])

    def f(v):
        return (e(v[: S * D].reshape(S, D), v[S * D:].reshape(S, 8)) * w).sum()

    return gradcheck(f, xc, STEP, TOL)


def _pinned(b, n, experts, k, seed):
    gen = torch.Generator().manual_seed(seed)
    return torch.stack([torch.randperm(experts, generator=gen)[:k] for _ in range(b * n)])


def check_moe_fixed_routing() -> GradcheckReport:
    m = _init(MoEFusion(D, 8, num_experts=4, k=2, route_dim=8), 3)
    b = 2
    tokens, cond = _rand(b, S, D, seed=4), _rand(b, 8, seed=5)
    idx = _pinned(b, S, 4, 2, 6)
    w = _weights((b, S, D), 3)
    n_tok = tokens.numel()

    def f(v):
        out = m(v[:n_tok].reshape(b, S, D), v[n_tok:].reshape(b, 8), indices=idx)
        return (out.fused * w).sum() + out.balance_loss

    return gradcheck(f, torch.cat([tokens.reshape(-1), cond.reshape(-1)]), STEP, TOL)


def check_balance_loss() -> GradcheckReport:
    logits = _rand(S * 2, 4, seed=7)

    def f(v):
        r = route_from_logits(v.reshape(S * 2, 4), 2)
        return balance_loss(r.f, r.P)

    return gradcheck(f, logits.reshape(-1), STEP, TOL)


def check_mixed_attention() -> GradcheckReport:
    q, k, v = _rand(2, S, D, seed=8), _rand(2, 5, D, seed=9), _rand(2, 5, D, seed=10)
    w = _weights((2, S, D), 8)
    sizes = [q.numel(), k.numel(), v.numel()]

    def f(x):
        a, b_, c = torch.split(x, sizes)
        return (mixed_attention(a.reshape(q.shape), b_.reshape(k.shape), c.reshape(v.shape), heads=2) * w).sum()

    return gradcheck(f, torch.cat([q.reshape(-1), k.reshape(-1), v.reshape(-1)]), STEP, TOL)


def check_mixed_attention_module() -> GradcheckReport:
    m = _init(MixedAttention(D, ["text", "other"], heads=2), 11)
    x, text, other = _rand(2, S, D, seed=12), _rand(2, 3, D, seed=13), _rand(2, S, D, seed=14)
    mask = torch.tensor([[True, True, False], [True, True, True]])
    w = _weights((2, S, D), 11)

    def f(v):
        return (m(v.reshape(x.shape), {"text": text, "other": other}, {"text": mask}) * w).sum()

    return gradcheck(f, x.reshape(-1), STEP, TOL)


def _human(seed):
    return _rand(2, S, HUMAN_DIM, seed=seed)


def check_l2_loss() -> GradcheckReport:
    gt = _human(20)
    mask = torch.rand(1, 1, HUMAN_DIM, generator=torch.Generator().manual_seed(0)) < 0.5
    return gradcheck(lambda v: obj.l2_loss(v.reshape(gt.shape), gt, mask), _human(21).reshape(-1), STEP, TOL)


def check_velocity_loss() -> GradcheckReport:
    gt = obj.joints_of(_human(22))
    x = obj.joints_of(_human(23))
    return gradcheck(lambda v: obj.velocity_loss(v.reshape(x.shape), gt), x.reshape(-1), STEP, TOL)


def check_distance_loss() -> GradcheckReport:
    gt, x = _rand(2, S, 3, 3, seed=24), _rand(2, S, 3, 3, seed=25)
    mask = torch.tensor([[True, True, False], [True, True, True]])
    return gradcheck(lambda v: obj.distance_loss(v.reshape(x.shape), gt, mask), x.reshape(-1), STEP, TOL)


def check_interaction_loss() -> GradcheckReport:
    gh, gc = _rand(2, S, 2, 3, seed=26), _rand(2, S, 3, 3, seed=27)
    ph, pc = _rand(2, S, 2, 3, seed=28), _rand(2, S, 3, 3, seed=29)
    mask = torch.tensor([[True, False, False], [True, True, True]])
    n = ph.numel()

    def f(v):
        return obj.interaction_loss(v[:n].reshape(ph.shape), v[n:].reshape(pc.shape), gh, gc, mask)

    return gradcheck(f, torch.cat([ph.reshape(-1), pc.reshape(-1)]), STEP, TOL)


def _stage_check(motion_dim: int, seed: int, wrt: str) -> GradcheckReport:
    m = _init(StageDenoiser(motion_dim, 8, dim=D, layers=1, heads=2, num_experts=4, top_k=2, route_dim=8,
                            max_frames=S), seed)
    b = 2
    x, cond = _rand(b, S, motion_dim, seed=seed + 1), _rand(b, 8, seed=seed + 2)
    text, tmask = _rand(b, 3, D, seed=seed + 3), torch.tensor([[True, True, False], [True, True, True]])
    t = torch.tensor([3, 17])
    idx = _pinned(b, S, 4, 2, seed + 4)
    w = _weights((b, S, motion_dim), seed)

    def loss(mod, xx):
        out, moe = mod(xx, t, text, tmask, cond, indices=idx)
        return (out * w).sum() + moe.balance_loss

    if wrt == "params":
        return param_gradcheck(m, lambda mod: loss(mod, x), coords=64, step=STEP, tol=TOL, seed=seed)
    return gradcheck(lambda v: loss(m, v.reshape(x.shape)), x.reshape(-1), STEP, TOL, coords=64, seed=seed)


def _hoi_check(seed: int, wrt: str, n_obj: int = 2) -> GradcheckReport:
    od = n_obj * OBJECT_DIM
    m = _init(HOIDenoiser(HUMAN_DIM, od, dim=D, layers=1, heads=2, max_frames=S), seed)
    b = 2
    xh, xo = _rand(b, S, HUMAN_DIM, seed=seed + 1), _rand(b, S, od, seed=seed + 2)
    h0, o0 = _rand(b, S, HUMAN_DIM, seed=seed + 3), _rand(b, S, od, seed=seed + 4)
    text, tmask = _rand(b, 3, D, seed=seed + 5), torch.tensor([[True, False, False], [True, True, True]])
    t = torch.tensor([5, 900])
    wh, wo = _weights((b, S, HUMAN_DIM), seed), _weights((b, S, od), seed + 1)

    def loss(mod, a, c):
        ph, po = mod(a, c, t, text, tmask, h0, o0)
        return (ph * wh).sum() + (po * wo).sum()

    if wrt == "params":
        return param_gradcheck(m, lambda mod: loss(mod, xh, xo), coords=64, step=STEP, tol=TOL, seed=seed)
    n = xh.numel()

    def f(v):
        return loss(m, v[:n].reshape(xh.shape), v[n:].reshape(xo.shape))

    return gradcheck(f, torch.cat([xh.reshape(-1), xo.reshape(-1)]), STEP, TOL, coords=64, seed=seed)


CHECKS: dict[str, Callable[[], GradcheckReport]] = {
    "film_expert": check_film_expert,
    "moe_fixed_routing": check_moe_fixed_routing,
    "balance_loss": check_balance_loss,
    "mixed_attention": check_mixed_attention,
    "mixed_attention_module": check_mixed_attention_module,
    "l2_loss": check_l2_loss,
    "velocity_loss": check_velocity_loss,
    "distance_loss": check_distance_loss,
    "interaction_loss": check_interaction_loss,
    "human_denoiser": lambda: _stage_check(HUMAN_DIM, 40, "input"),
    "human_denoiser_params": lambda: _stage_check(HUMAN_DIM, 40, "params"),
    "object_denoiser": lambda: _stage_check(2 * OBJECT_DIM, 50, "input"),
    "object_denoiser_params": lambda: _stage_check(2 * OBJECT_DIM, 50, "params"),
    "hoi_denoiser": lambda: _hoi_check(60, "input"),
    "hoi_denoiser_params": lambda: _hoi_check(60, "params"),
}

GROUPS = {
    "moe": ["film_expert", "moe_fixed_routing", "balance_loss"],
    "attention": ["mixed_attention", "mixed_attention_module"],
    "objectives": ["l2_loss", "velocity_loss", "distance_loss", "interaction_loss"],
    "denoiser": [n for n in CHECKS if "denoiser" in n],
}


def run(module: str | None = None) -> dict[str, GradcheckReport]:
    """Run all checks, a group name from ``GROUPS``, or a single check name."""
    if module is None:
        names = list(CHECKS)
    elif module in GROUPS:
        names = GROUPS[module]
    elif module in CHECKS:
        names = [module]
    else:
        raise KeyError(f"unknown gradcheck module {module!r}; choose from {sorted(GROUPS) + sorted(CHECKS)}")
    return {n: CHECKS[n]() for n in names}
