"""Diffusion schedule, forward noising and guided x0-prediction sampling."""

import torch

from hoigen import diffusion as dif

sched = dif.build_schedule()
print("T =", sched.T, " beta range", sched.betas[0], sched.betas[-1], " alpha_bar_T", sched.alphas_cumprod[-1])

# %% forward process at a few timesteps
x0 = torch.ones(1, 4)
for t in (1, 100, 500, 1000):
    xt = dif.q_sample(x0, t, torch.zeros_like(x0), sched)
    print(f"t={t:4d}  signal kept {float(xt[0, 0]):.4f}")

# %% classifier-free guidance: s=0 unconditional, s=1 conditional, s>1 extrapolates
c, u = torch.tensor([1.0]), torch.tensor([0.0])
print("guided at 0, 1, 2:", [float(dif.guided(c, u, s)) for s in (0.0, 1.0, 2.0)])

# %% a model that always predicts the same clean sample is a sampler fixed point
target = torch.tensor([[0.5, -1.0, 2.0]])
out = dif.p_sample_loop(lambda x, t, cond: target.expand_as(x), (4, 1, 3), sched, 2.0, seed=0)
print("full chain max error:", float((out - target).abs().max()))
out = dif.p_sample_loop(lambda x, t, cond: target.expand_as(x), (4, 1, 3), sched, 2.0, seed=0, steps=50)
print("50-step strided chain max error:", float((out - target).abs().max()))
