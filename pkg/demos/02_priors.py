"""Multi-modal priors: text, visual, atomic motion and object geometry.

Builds the prior bundle for a two-object prompt: per-sub-action text
features, procedural visual features, retrieved atomic poses and PointNet
geometry features.
"""

import numpy as np
import torch

from hoigen import priors as pr
from hoigen import synthdata
from hoigen.substrate import ParameterStore

vocab = synthdata.vocabulary()
library = synthdata.atomic_library()
rec = synthdata.generate("two-object-transfer", seed=4)
print("prompt:", rec.text)

# %% text encoder shared by the prompt, the sub-actions and atomic retrieval
enc = pr.TextEncoder(len(vocab), 64, 64, embed_dim=32, max_len=32, heads=4, layers=1)
ParameterStore(enc, 0).initialize()
enc.eval()

# %% atomic retrieval: cosine similarity of the sub-action against every library label
for sub in rec.sub_actions:
    idx = pr.retrieve_atomic(vocab.encode(sub), library, enc, vocab)
    print(f"{sub!r:40s} -> atomic motion {library.labels[idx]!r}")

# %% PointNet geometry features are invariant to point order
net = pr.PointNetEncoder(64, (32, 64))
ParameterStore(net, 1).initialize()
pts = torch.as_tensor(rec.geometry[0].points[:256], dtype=torch.float32)
perm = pts[torch.randperm(len(pts), generator=torch.Generator().manual_seed(0))]
print("permutation changes feature:", not torch.equal(net(pts), net(perm)))

# %% the full bundle
prior = pr.PriorEncoder(enc, 64, visual_dim=64, atomic_dim=64, point_dim=64, pointnet_hidden=(32, 64))
ParameterStore(prior, 2).initialize()
bundle = pr.build_bundle(prior, vocab, rec.sub_actions, pr.ProceduralVisualProvider(64), library, rec.geometry)
for name in ("text_feats", "visual_feats", "atomic_feats", "point_feats"):
    print(f"{name:13s}", tuple(getattr(bundle, name).shape))
print("human condition", tuple(bundle.human_condition().shape),
      "object condition", tuple(bundle.object_condition().shape))
print("visual features are unit norm:", np.allclose(np.linalg.norm(bundle.visual_feats[0].detach().numpy(), axis=1), 1))
