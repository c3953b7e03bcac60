"""Training losses and interaction metrics on a perturbed ground truth."""

import numpy as np
import torch

from hoigen import objectives as obj
from hoigen import pipeline as P
from hoigen import synthdata

refs = [synthdata.generate(t, seed=i) for i, t in enumerate(synthdata.TEMPLATES)]

# %% ground truth against itself is perfect
rep = P.evaluate_records(refs, refs)
print("self:", {k: round(v, 3) for k, v in rep.to_json().items()})

# %% shift every wrist by 10 cm and the contact metrics degrade
shifted = []
for r in refs:
    h = r.human.copy()
    joints = h[:, :156].reshape(-1, 52, 3)
    joints[:, [20, 21], 2] += 0.10
    h[:, :156] = joints.reshape(len(h), -1)
    shifted.append(synthdata.SequenceRecord(r.fps, r.text, h, r.objects, r.geometry, r.atomic_id, r.sub_actions))
rep = P.evaluate_records(shifted, refs)
print("wrists +10cm:", {k: round(v, 3) for k, v in rep.to_json().items()})

# %% the HOI loss terms on the same perturbation
gt = torch.as_tensor(refs[0].human[:, :156].reshape(1, -1, 52, 3))
pred = torch.as_tensor(shifted[0].human[:, :156].reshape(1, -1, 52, 3))
cents = torch.as_tensor(np.stack([o[:, 165:168] for o in refs[0].objects], axis=1)[None])
print("velocity loss", float(obj.velocity_loss(pred[0], gt[0])))
print("interaction loss", float(obj.interaction_loss(pred[..., [20, 21], :], cents, gt[..., [20, 21], :], cents)))
print("weighted total of unit components:",
      float(obj.total_loss({k: torch.tensor(1.0) for k in obj.LOSS_KEYS}, obj.LossWeights())))
