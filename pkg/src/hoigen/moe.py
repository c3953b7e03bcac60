"""Modality-aware mixture of FiLM experts.

The router scores every motion token against ``N_e`` experts with
``logits = tau * (W_route x) R``; each token is sent to its top-``k`` experts,
whose outputs are mixed with the full-softmax probabilities renormalised
over the selected set. Experts modulate the token with a scale/shift
predicted from the pooled prior condition (FiLM) before a feed-forward map.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from . import substrate as ops


@dataclass
class Routing:
    indices: torch.Tensor  # (N, k) long
    gates: torch.Tensor  # (N, k)
    probs: torch.Tensor  # (N, N_e) full softmax
    f: torch.Tensor  # (N_e,) slot fraction
    P: torch.Tensor  # (N_e,) mean router probability


@dataclass
class MoEOutput:
    fused: torch.Tensor
    balance_loss: torch.Tensor
    routing: Routing

    @property
    def f(self) -> torch.Tensor:
        return self.routing.f

    @property
    def P(self) -> torch.Tensor:
        return self.routing.P


class Router(nn.Module):
    def __init__(self, dim: int, num_experts: int = 16, route_dim: int = 256):
        super().__init__()
        self.w_route = nn.Linear(dim, route_dim, bias=False)
        self.r = nn.Linear(route_dim, num_experts, bias=False)
        # tau = exp(log_tau) keeps the temperature positive
        self.log_tau = nn.Parameter(torch.zeros(()))

    @property
    def num_experts(self) -> int:
        return self.r.out_features

    @property
    def tau(self) -> torch.Tensor:
        return self.log_tau.exp()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.tau * self.r(self.w_route(x))


def route_from_logits(
    logits: torch.Tensor,
    k: int,
    mask: torch.Tensor | None = None,
    indices: torch.Tensor | None = None,
) -> Routing:
    """Top-k routing of ``(N, N_e)`` logits.

    ``mask`` (N,) excludes padding tokens from ``f`` and ``P``. Passing
    ``indices`` fixes the expert selection (gates stay differentiable).
    """
    n, ne = logits.shape
    if not 1 <= k <= ne:
        raise ValueError(f"route: k={k} must be in [1, {ne}]")
    probs = ops.softmax(logits, axis=-1)
    if indices is None:
        top_logits, indices = ops.topk(logits, k, axis=-1)
    else:
        top_logits = ops.gather(logits, indices, axis=-1)
    gates = ops.softmax(top_logits, axis=-1)
    w = torch.ones(n, dtype=logits.dtype) if mask is None else mask.to(logits.dtype)
    denom = w.sum().clamp(min=1.0)
    slots = torch.zeros(n, ne, dtype=logits.dtype)
    slots.scatter_(1, indices, 1.0 / k)
    f = (slots * w[:, None]).sum(0) / denom
    P = (probs * w[:, None]).sum(0) / denom
    return Routing(indices, gates, probs, f, P)


def route(tokens: torch.Tensor, router: Router, k: int = 2, mask: torch.Tensor | None = None) -> Routing:
    return route_from_logits(router(tokens), k, mask)


def balance_loss(f: torch.Tensor, P: torch.Tensor) -> torch.Tensor:
    """``sum_i f_i P_i``; 1/N_e at uniform routing, 1 when fully collapsed."""
    return ops.sum(ops.mul(f, P))


class FilmExpert(nn.Module):
    """One expert: ``FFN(W2 gelu((1 + scale) * x + shift) + b2)``.

    ``scale`` and ``shift`` come from ``W1 gelu(cond) + b1``.
    """

    def __init__(self, dim: int, cond_dim: int, ffn_mult: int = 2):
        super().__init__()
        self.dim = dim
        self.cond_proj = nn.Linear(cond_dim, 2 * dim)
        self.w2 = nn.Linear(dim, dim)
        self.ffn1 = nn.Linear(dim, ffn_mult * dim)
        self.ffn2 = nn.Linear(ffn_mult * dim, dim)

    def modulation(self, cond: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if cond.shape[-1] != self.cond_proj.in_features:
            raise ops.ShapeError(
                f"expert: condition width {cond.shape[-1]} != expected {self.cond_proj.in_features}"
            )
        scale, shift = self.cond_proj(ops.gelu(cond)).chunk(2, dim=-1)
        return scale, shift

    def modulated(self, x: torch.Tensor, scale: torch.Tensor, shift: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.dim:
            raise ops.ShapeError(f"expert: token width {x.shape[-1]} != model width {self.dim}")
        h = self.w2(ops.gelu(ops.add(ops.mul(1.0 + scale, x), shift)))
        return self.ffn2(ops.gelu(self.ffn1(h)))

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        """``x``: (..., N_t, D_f); ``cond``: (..., C) broadcast over tokens."""
        scale, shift = self.modulation(cond)
        return self.modulated(x, scale.unsqueeze(-2), shift.unsqueeze(-2))


class MoEFusion(nn.Module):
    """Sparse mixture of :class:`FilmExpert` over motion tokens."""

    def __init__(self, dim: int, cond_dim: int, num_experts: int = 16, k: int = 2,
                 route_dim: int = 256, ffn_mult: int = 2):
        super().__init__()
        self.k = k
        self.router = Router(dim, num_experts, route_dim)
        self.experts = nn.ModuleList(FilmExpert(dim, cond_dim, ffn_mult) for _ in range(num_experts))

    def forward(self, tokens: torch.Tensor, cond: torch.Tensor, mask: torch.Tensor | None = None,
                indices: torch.Tensor | None = None) -> MoEOutput:
        """``tokens``: (B, N_t, D_f); ``cond``: (B, C); ``mask``: (B, N_t) valid tokens.

        ``indices`` (B*N_t, k) pins the expert selection.
        """
        b, n, d = tokens.shape
        if cond.shape[0] != b:
            raise ops.ShapeError(f"moe: condition batch {cond.shape[0]} != token batch {b}")
        flat = tokens.reshape(b * n, d)
        flat_mask = None if mask is None else mask.reshape(-1)
        routing = route_from_logits(self.router(flat), self.k, flat_mask, indices)
        owner = torch.arange(b).repeat_interleave(n)
        out = torch.zeros_like(flat)
        for e, expert in enumerate(self.experts):
            tok, slot = (routing.indices == e).nonzero(as_tuple=True)
            if tok.numel() == 0:
                continue
            scale, shift = expert.modulation(cond)
            y = expert.modulated(flat[tok], scale[owner[tok]], shift[owner[tok]])
            out = out.index_add(0, tok, routing.gates[tok, slot, None] * y)
        return MoEOutput(out.reshape(b, n, d), balance_loss(routing.f, routing.P), routing)


class AdditiveFusion(nn.Module):
    """Non-MoE fallback: adds a projection of the condition to every token."""

    def __init__(self, dim: int, cond_dim: int):
        super().__init__()
        self.cond_proj = nn.Linear(cond_dim, dim)
        self.ffn = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, tokens, cond, mask=None, indices=None) -> MoEOutput:
        fused = self.ffn(tokens + self.cond_proj(ops.gelu(cond))[:, None, :])
        zero = tokens.new_zeros(())
        empty = Routing(torch.zeros(0, 0, dtype=torch.long), tokens.new_zeros(0, 0), tokens.new_zeros(0, 0),
                        tokens.new_zeros(0), tokens.new_zeros(0))
        return MoEOutput(fused, zero, empty)
