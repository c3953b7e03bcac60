"""Mixed attention: global templates from keys and values, selected by queries.

Keys are normalised over tokens, queries over features, so the cost is
linear in sequence length. The output of every query row is a convex
combination of the template rows.
"""

import torch

from hoigen.layers import MixedAttention, global_templates, mixed_attention
from hoigen.substrate import ParameterStore

torch.manual_seed(0)
q, k, v = torch.randn(1, 5, 8), torch.randn(1, 7, 8), torch.randn(1, 7, 8)
g = global_templates(k, v)[0, 0]
y = mixed_attention(q, k, v)[0]
print("templates", tuple(g.shape), "output", tuple(y.shape))
print("rows within template bounds:", bool(torch.all(y >= g.min(0).values - 1e-6) and torch.all(y <= g.max(0).values + 1e-6)))

# %% padding tokens are masked out of the template sums
mask = torch.tensor([[True] * 4 + [False] * 3])
print("mask equals truncation:", torch.allclose(mixed_attention(q, k, v, key_mask=mask), mixed_attention(q, k[:, :4], v[:, :4]), atol=1e-6))

# %% the module attends a stream to several named contexts at once
attn = MixedAttention(16, ["self", "text", "other"], heads=2)
ParameterStore(attn, 0).initialize()
x = torch.randn(2, 60, 16)
ctx = {"self": x, "text": torch.randn(2, 6, 16), "other": torch.randn(2, 60, 16)}
print("module output", tuple(attn(x, ctx).shape))
