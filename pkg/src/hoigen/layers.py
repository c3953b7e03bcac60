"""Transformer building blocks shared by the text encoder and the denoisers."""

from __future__ import annotations

import math
from typing import Sequence

import torch
import torch.nn as nn

from . import substrate as ops


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention; ``key_mask`` is True for valid keys."""

    def __init__(self, dim: int, heads: int, ctx_dim: int | None = None):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        ctx_dim = ctx_dim or dim
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(ctx_dim, dim)
        self.v = nn.Linear(ctx_dim, dim)
        self.out = nn.Linear(dim, dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        return x.view(b, n, self.heads, d // self.heads).transpose(1, 2)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor | None = None, key_mask: torch.Tensor | None = None):
        ctx = x if ctx is None else ctx
        q, k, v = self._split(self.q(x)), self._split(self.k(ctx)), self._split(self.v(ctx))
        scores = ops.matmul(q, k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], -1e9)
        att = ops.softmax(scores, axis=-1)
        y = (att @ v).transpose(1, 2).reshape(x.shape)
        return self.out(y)


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int = 2):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * mult)
        self.fc2 = nn.Linear(dim * mult, dim)

    def forward(self, x):
        return self.fc2(ops.gelu(self.fc1(x)))


class TransformerBlock(nn.Module):
    """Pre-norm block: self-attention, optional cross-attention, feed-forward."""

    def __init__(self, dim: int, heads: int, cross: bool = True):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads)
        self.cross = cross
        if cross:
            self.norm2 = nn.LayerNorm(dim)
            self.cross_attn = MultiHeadAttention(dim, heads)
        self.norm3 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim)

    def forward(self, x, ctx=None, ctx_mask=None, self_mask=None):
        h = self.norm1(x)
        x = x + self.self_attn(h, key_mask=self_mask)
        if self.cross:
            x = x + self.cross_attn(self.norm2(x), ctx, key_mask=ctx_mask)
        return x + self.ff(self.norm3(x))


def mixed_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    heads: int = 1,
    key_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Linear attention through global templates.

    ``q``: (B, Nq, D); ``k``, ``v``: (B, Nk, D). Per head, the keys are
    softmax-normalised over the token axis and summarise the values into a
    ``d x d`` template matrix ``G = softmax_tokens(K)^T V``; each query row is
    softmax-normalised over features and reads ``softmax_feat(Q) G``. Every
    output row is therefore a convex combination of template rows, and every
    template row a convex combination of value rows.
    """
    if k.shape[:2] != v.shape[:2] or k.shape[-1] != v.shape[-1] or q.shape[-1] != k.shape[-1]:
        raise ops.ShapeError(
            f"mixed_attention: q {tuple(q.shape)}, k {tuple(k.shape)}, v {tuple(v.shape)} incompatible"
        )
    b, nq, d = q.shape
    nk = k.shape[1]
    dh = d // heads
    qh = q.view(b, nq, heads, dh).transpose(1, 2)
    kh = k.view(b, nk, heads, dh).transpose(1, 2)
    vh = v.view(b, nk, heads, dh).transpose(1, 2)
    if key_mask is not None:
        kh = kh.masked_fill(~key_mask[:, None, :, None], -1e9)
    k_soft = ops.softmax(kh, axis=-2)
    templates = ops.matmul(k_soft.transpose(-1, -2), vh)  # B, H, dh, dh
    q_soft = ops.softmax(qh, axis=-1)
    y = ops.matmul(q_soft, templates)
    return y.transpose(1, 2).reshape(b, nq, d)


def global_templates(k: torch.Tensor, v: torch.Tensor, heads: int = 1) -> torch.Tensor:
    """The ``(B, H, dh, dh)`` template matrices used by :func:`mixed_attention`."""
    b, nk, d = k.shape
    dh = d // heads
    kh = k.view(b, nk, heads, dh).transpose(1, 2)
    vh = v.view(b, nk, heads, dh).transpose(1, 2)
    return ops.softmax(kh, axis=-2).transpose(-1, -2) @ vh


class MixedAttention(nn.Module):
    """Query stream attends to several contexts, each with its own K/V maps.

    ``contexts`` names the context slots in concatenation order; projections
    are bias-free so a zeroed projection makes its context inert.
    """

    def __init__(self, dim: int, contexts: Sequence[str], heads: int = 4):
        super().__init__()
        if not contexts:
            raise ValueError("MixedAttention needs at least one context")
        self.heads = heads
        self.names = list(contexts)
        self.q = nn.Linear(dim, dim, bias=False)
        self.k = nn.ModuleDict({n: nn.Linear(dim, dim, bias=False) for n in self.names})
        self.v = nn.ModuleDict({n: nn.Linear(dim, dim, bias=False) for n in self.names})
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, contexts: dict, masks: dict | None = None) -> torch.Tensor:
        if not contexts:
            raise ValueError("mixed attention: empty context list")
        masks = masks or {}
        ks, vs, ms = [], [], []
        for name in self.names:
            if name not in contexts:
                raise KeyError(f"mixed attention: missing context {name!r}")
            c = contexts[name]
            ks.append(self.k[name](c))
            vs.append(self.v[name](c))
            m = masks.get(name)
            ms.append(m if m is not None else torch.ones(c.shape[:2], dtype=torch.bool, device=c.device))
        y = mixed_attention(self.q(x), ops.concat(ks, 1), ops.concat(vs, 1), self.heads, ops.concat(ms, 1))
        return self.out(y)


class SinusoidalEmbedding(nn.Module):
    """Sinusoidal timestep features followed by a two-layer MLP."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
        ang = t.to(torch.float64)[:, None] * freqs[None]
        emb = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1).to(self.mlp[0].weight.dtype)
        if emb.shape[-1] < self.dim:
            emb = torch.nn.functional.pad(emb, (0, self.dim - emb.shape[-1]))
        return self.mlp(emb)
