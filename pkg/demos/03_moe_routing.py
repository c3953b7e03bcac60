"""Modality-aware mixture of experts.

Routes tokens through 16 FiLM experts with top-2 gating and shows the
load-balancing loss at its uniform minimum and under collapse.
"""

import torch

from hoigen import moe
from hoigen.substrate import ParameterStore

torch.manual_seed(0)
fusion = moe.MoEFusion(dim=32, cond_dim=16, num_experts=16, k=2, route_dim=32)
ParameterStore(fusion, 0).initialize()

tokens, cond = torch.randn(2, 60, 32), torch.randn(2, 16)
out = fusion(tokens, cond)
r = out.routing
print("fused", tuple(out.fused.shape), "indices", tuple(r.indices.shape))
print("gates sum to one:", torch.allclose(r.gates.sum(-1), torch.ones(len(r.gates))))
print("token share per expert f:", r.f.detach().numpy().round(3))
print("balance loss:", float(out.balance_loss.detach()))

# %% the loss is sum_i f_i P_i: 1/16 when uniform, 1 when every token picks one expert
u = torch.full((16,), 1 / 16)
e = torch.zeros(16)
e[3] = 1
print("uniform:", float(moe.balance_loss(u, u)), " collapsed:", float(moe.balance_loss(e, e)))

# %% only the selected experts receive gradient
fusion.zero_grad()
single = fusion(tokens[:1, :1], cond[:1])
single.fused.sum().backward()
touched = [i for i, ex in enumerate(fusion.experts) if ex.w2.weight.grad is not None and ex.w2.weight.grad.abs().sum() > 0]
print("routed to", sorted(single.routing.indices[0].tolist()), "gradient reached", touched)
