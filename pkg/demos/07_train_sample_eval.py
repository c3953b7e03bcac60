"""End to end: synthetic data, a short training run, sampling and evaluation.

Uses the tiny preset so it finishes in seconds; pass ``--smoke`` for the
reduced-width preset trained for 2000 steps (about ten minutes on one core).
"""

import sys
import tempfile
from pathlib import Path

from hoigen import pipeline as P
from hoigen import synthdata

smoke = "--smoke" in sys.argv
frames = 60 if smoke else 30
ds = synthdata.build_dataset(256 if smoke else 40, seed=0, frames=frames)
cfg = P.smoke_config() if smoke else P.toy_config(steps=20)
out = Path(tempfile.mkdtemp(prefix="hoigen_"))
print(f"{len(ds.train)} train / {len(ds.val)} val sequences, run dir {out}")

# %% train; the log is JSON lines with every loss component and the lr
trainer = P.Trainer(cfg, out, ds)
log = trainer.train()
print(f"loss {log[0]['total']:.3f} -> {log[-1]['total']:.3f} over {len(log)} steps")

# %% sample one sequence for a held-out prompt and its geometry
ref = ds.split("val")[0]
rec = P.sample(trainer.checkpoint_dir, ref.text, ref.geometry, seed=0, sub_actions=ref.sub_actions)
rec.validate()
rec.save(out / "sample.json")
print("sampled:", ref.text, "->", out / "sample.json")

# %% evaluate the checkpoint on the validation split
report = P.evaluate(trainer.checkpoint_dir, ds, seed=0)
print({k: round(v, 3) for k, v in report.to_json().items()})
