"""Stage networks: human/object denoisers and the two-stream HOI denoiser."""

from __future__ import annotations

import torch
import torch.nn as nn

from .layers import FeedForward, MixedAttention, MultiHeadAttention, SinusoidalEmbedding, TransformerBlock
from .moe import AdditiveFusion, MoEFusion, MoEOutput


class StageDenoiser(nn.Module):
    """x0-predicting denoiser for one motion stream (human or object).

    Input tokens are projected to the model width, fused with the pooled
    prior condition by the MoE, prefixed with a timestep token and passed
    through transformer blocks that cross-attend to the prompt tokens.
    """

    def __init__(self, motion_dim: int, cond_dim: int, dim: int = 256, layers: int = 4, heads: int = 4,
                 num_experts: int = 16, top_k: int = 2, route_dim: int = 256, max_frames: int = 256,
                 use_moe: bool = True):
        super().__init__()
        self.motion_dim = motion_dim
        self.in_proj = nn.Linear(motion_dim, dim)
        self.pos = nn.Parameter(torch.zeros(max_frames, dim))
        if use_moe:
            self.fusion = MoEFusion(dim, cond_dim, num_experts, top_k, route_dim)
        else:
            self.fusion = AdditiveFusion(dim, cond_dim)
        self.time = SinusoidalEmbedding(dim)
        self.blocks = nn.ModuleList(TransformerBlock(dim, heads, cross=True) for _ in range(layers))
        self.norm = nn.LayerNorm(dim)
        self.out_proj = nn.Linear(dim, motion_dim)

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, text: torch.Tensor, text_mask: torch.Tensor,
                cond: torch.Tensor, indices: torch.Tensor | None = None) -> tuple[torch.Tensor, MoEOutput]:
        if x_t.dim() != 3 or x_t.shape[-1] != self.motion_dim:
            raise ValueError(f"stage denoiser: expected (B, S, {self.motion_dim}), got {tuple(x_t.shape)}")
        s = x_t.shape[1]
        h = self.in_proj(x_t) + self.pos[:s]
        moe = self.fusion(h, cond, indices=indices)
        seq = torch.cat([self.time(t)[:, None, :], moe.fused], dim=1)
        for blk in self.blocks:
            seq = blk(seq, text, text_mask)
        return self.out_proj(self.norm(seq[:, 1:])), moe


class HOIBlock(nn.Module):
    """Self-attention, mixed attention and feed-forward for both streams."""

    def __init__(self, dim: int, heads: int, contexts: list[str]):
        super().__init__()
        self.norm_sa = nn.ModuleDict({s: nn.LayerNorm(dim) for s in ("human", "object")})
        self.self_attn = nn.ModuleDict({s: MultiHeadAttention(dim, heads) for s in ("human", "object")})
        self.norm_ma = nn.ModuleDict({s: nn.LayerNorm(dim) for s in ("human", "object")})
        self.norm_ctx = nn.ModuleDict({s: nn.LayerNorm(dim) for s in ("human", "object")})
        self.mixed = nn.ModuleDict({s: MixedAttention(dim, contexts, heads) for s in ("human", "object")})
        self.norm_ff = nn.ModuleDict({s: nn.LayerNorm(dim) for s in ("human", "object")})
        self.ff = nn.ModuleDict({s: FeedForward(dim) for s in ("human", "object")})

    def forward(self, h, o, text, text_mask, pre_h=None, pre_o=None):
        h = h + self.self_attn["human"](self.norm_sa["human"](h))
        o = o + self.self_attn["object"](self.norm_sa["object"](o))
        ctx_h = {"text": text, "other": self.norm_ctx["object"](o)}
        ctx_o = {"text": text, "other": self.norm_ctx["human"](h)}
        if pre_h is not None:
            ctx_h["pre"] = pre_h
            ctx_o["pre"] = pre_o
        masks = {"text": text_mask}
        h_new = h + self.mixed["human"](self.norm_ma["human"](h), ctx_h, masks)
        o_new = o + self.mixed["object"](self.norm_ma["object"](o), ctx_o, masks)
        h_new = h_new + self.ff["human"](self.norm_ff["human"](h_new))
        o_new = o_new + self.ff["object"](self.norm_ff["object"](o_new))
        return h_new, o_new


class HOIDenoiser(nn.Module):
    """Jointly refines human and object motion.

    The human stream's mixed attention reads the stage-1 human motion, the
    prompt tokens and the object stream; the object stream mirrors this.
    With ``cascade=False`` the stage-1 context is dropped.
    """

    def __init__(self, human_dim: int, object_dim: int, dim: int = 256, layers: int = 8, heads: int = 4,
                 max_frames: int = 256, cascade: bool = True):
        super().__init__()
        self.human_dim = human_dim
        self.object_dim = object_dim
        self.cascade = cascade
        self.human_in = nn.Linear(human_dim, dim)
        self.object_in = nn.Linear(object_dim, dim)
        if cascade:
            self.pre_human_in = nn.Linear(human_dim, dim)
            self.pre_object_in = nn.Linear(object_dim, dim)
        self.pos = nn.Parameter(torch.zeros(max_frames, dim))
        self.time = SinusoidalEmbedding(dim)
        contexts = (["pre"] if cascade else []) + ["text", "other"]
        self.blocks = nn.ModuleList(HOIBlock(dim, heads, contexts) for _ in range(layers))
        self.norm_h = nn.LayerNorm(dim)
        self.norm_o = nn.LayerNorm(dim)
        self.human_out = nn.Linear(dim, human_dim)
        self.object_out = nn.Linear(dim, object_dim)

    def forward(self, xh: torch.Tensor, xo: torch.Tensor, t: torch.Tensor, text: torch.Tensor,
                text_mask: torch.Tensor, h0: torch.Tensor | None = None, o0: torch.Tensor | None = None):
        if xh.shape[-1] != self.human_dim or xo.shape[-1] != self.object_dim:
            raise ValueError(
                f"hoi denoiser: expected widths ({self.human_dim}, {self.object_dim}), "
                f"got ({xh.shape[-1]}, {xo.shape[-1]})"
            )
        if self.cascade and (h0 is None or o0 is None):
            raise ValueError("hoi denoiser: stage-1 human/object motion is required when cascade is enabled")
        s = xh.shape[1]
        pos = self.pos[:s]
        tt = self.time(t)[:, None, :]
        h = torch.cat([tt, self.human_in(xh) + pos], dim=1)
        o = torch.cat([tt, self.object_in(xo) + pos], dim=1)
        pre_h = pre_o = None
        if self.cascade:
            pre_h = self.pre_human_in(h0) + pos
            pre_o = self.pre_object_in(o0) + pos
        for blk in self.blocks:
            h, o = blk(h, o, text, text_mask, pre_h, pre_o)
        return self.human_out(self.norm_h(h[:, 1:])), self.object_out(self.norm_o(o[:, 1:]))
