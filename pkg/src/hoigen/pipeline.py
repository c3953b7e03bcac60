"""End-to-end training, sampling and evaluation of the three-stage model."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import shutil
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import diffusion as dif
from . import objectives as obj
from .denoiser import HOIDenoiser, StageDenoiser
from .priors import (
    AtomicMotionLibrary,
    ClauseSubActions,
    FileVisualProvider,
    PriorEncoder,
    ProceduralVisualProvider,
    TextEncoder,
    Vocabulary,
    cosine_argmax,
    pad_ids,
)
from .representation import (
    HUMAN_DIM,
    OBJ_BASIC,
    OBJ_CENTROID,
    OBJ_TRANS,
    OBJECT_DIM,
    DEFAULT_CONTACT_THRESHOLD,
    LEFT_WRIST,
    RIGHT_WRIST,
    ObjectGeometry,
    RawObjectMotion,
    SequenceRecord,
    derive_enhanced,
    flatten_object,
)
from .substrate import ParameterStore, load_tensors, save_tensors
from .synthdata import Dataset

log = logging.getLogger(__name__)

torch.set_num_threads(1)


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class Ablations:
    """Component switches for ablation runs; all True is the full model."""

    text_prior: bool = True
    visual_prior: bool = True
    spatial_prior: bool = True
    enhanced_repr: bool = True
    cascade: bool = True
    moe: bool = True
    hoi_losses: bool = True

    def priors(self, on: bool) -> "Ablations":
        return replace(self, text_prior=on, visual_prior=on, spatial_prior=on)


@dataclass
class RunConfig:
    data: str = ""
    frames: int = 60
    fps: float = 30.0
    max_objects: int = 3
    max_actions: int = 3
    # model
    model_dim: int = 256
    heads: int = 4
    human_layers: int = 4
    object_layers: int = 4
    hoi_layers: int = 8
    text_dim: int = 512
    visual_dim: int = 512
    atomic_dim: int = 512
    point_dim: int = 256
    pointnet_hidden: tuple = (64, 128)
    n_points: int = 1024
    text_embed_dim: int = 64
    text_layers: int = 2
    text_max_len: int = 32
    num_experts: int = 16
    top_k: int = 2
    route_dim: int = 256
    # diffusion
    T: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 2e-2
    guidance_scale: float = 2.0
    cond_dropout: float = 0.1
    teacher_forcing: float = 0.5
    sample_steps: int = 0  # 0 -> full T
    # optimisation
    lr: float = 1e-4
    lr_min: float = 1e-5
    batch_size: int = 8
    steps: int = 2000
    seed: int = 0
    checkpoint_every: int = 500
    weights: obj.LossWeights = field(default_factory=obj.LossWeights)
    ablations: Ablations = field(default_factory=Ablations)
    contact_threshold: float = DEFAULT_CONTACT_THRESHOLD
    visual_features: str = ""  # directory of precomputed features; empty -> procedural
    visual_seed: int = 0

    def to_json(self) -> dict:
        d = asdict(self)
        d["pointnet_hidden"] = list(self.pointnet_hidden)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known - {"preset"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        base = PRESETS[d["preset"]]() if "preset" in d else cls()
        d = {k: v for k, v in d.items() if k != "preset"}
        if "weights" in d:
            d["weights"] = obj.LossWeights(**{**asdict(base.weights), **d["weights"]})
        if "ablations" in d:
            d["ablations"] = Ablations(**{**asdict(base.ablations), **d["ablations"]})
        if "pointnet_hidden" in d:
            d["pointnet_hidden"] = tuple(d["pointnet_hidden"])
        return replace(base, **d)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        cfg = cls.from_json(json.loads(path.read_text()))
        if cfg.data:
            data = Path(cfg.data)
            if not data.is_absolute():
                data = (path.parent / data).resolve()
            if not data.exists():
                raise FileNotFoundError(f"dataset path does not exist: {data}")
            cfg = replace(cfg, data=str(data))
        return cfg

    def schedule(self) -> dif.DiffusionSchedule:
        return dif.build_schedule(self.T, self.beta_min, self.beta_max)


def smoke_config(**overrides) -> RunConfig:
    """Reduced widths for single-core CPU training runs in minutes."""
    base = RunConfig(
        model_dim=64, heads=4, human_layers=2, object_layers=2, hoi_layers=4,
        text_dim=64, visual_dim=64, atomic_dim=64, point_dim=64, pointnet_hidden=(32, 64),
        n_points=128, text_embed_dim=32, text_layers=1, num_experts=16, top_k=2, route_dim=64,
        lr=1e-3, lr_min=1e-4, batch_size=16, sample_steps=50,
    )
    return replace(base, **overrides)


def toy_config(**overrides) -> RunConfig:
    """Tiny dimensions for unit tests and gradient checks."""
    base = RunConfig(
        frames=30, model_dim=16, heads=2, human_layers=1, object_layers=1, hoi_layers=2,
        text_dim=8, visual_dim=8, atomic_dim=8, point_dim=8, pointnet_hidden=(8,), n_points=16,
        text_embed_dim=8, text_layers=1, num_experts=4, top_k=2, route_dim=8, T=50, batch_size=2,
        steps=4, sample_steps=5, checkpoint_every=2,
    )
    return replace(base, **overrides)


PRESETS: dict[str, Callable[[], RunConfig]] = {"default": RunConfig, "smoke": smoke_config, "toy": toy_config}


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class HOIModel(nn.Module):
    """Text encoder, prior encoders and the three stage denoisers."""

    def __init__(self, cfg: RunConfig, vocab_size: int):
        super().__init__()
        self.cfg = cfg
        d = cfg.model_dim
        self.text_encoder = TextEncoder(vocab_size, d, cfg.text_dim, cfg.text_embed_dim, cfg.text_max_len,
                                        cfg.heads, cfg.text_layers)
        self.priors = PriorEncoder(self.text_encoder, cfg.text_dim, cfg.visual_dim, cfg.atomic_dim,
                                   cfg.point_dim, cfg.pointnet_hidden)
        ab = cfg.ablations
        common = dict(dim=d, heads=cfg.heads, num_experts=cfg.num_experts, top_k=cfg.top_k,
                      route_dim=cfg.route_dim, max_frames=cfg.frames, use_moe=ab.moe)
        if ab.cascade:
            self.human = StageDenoiser(HUMAN_DIM, self.priors.human_cond_dim, layers=cfg.human_layers, **common)
            self.object = StageDenoiser(cfg.max_objects * OBJECT_DIM, self.priors.object_cond_dim,
                                        layers=cfg.object_layers, **common)
        self.hoi = HOIDenoiser(HUMAN_DIM, cfg.max_objects * OBJECT_DIM, d, cfg.hoi_layers, cfg.heads,
                               cfg.frames, cascade=ab.cascade)
        self.register_buffer("human_mean", torch.zeros(HUMAN_DIM))
        self.register_buffer("human_std", torch.ones(HUMAN_DIM))
        self.register_buffer("object_mean", torch.zeros(OBJECT_DIM))
        self.register_buffer("object_std", torch.ones(OBJECT_DIM))

    # normalisation ---------------------------------------------------------
    def norm_human(self, x):
        return (x - self.human_mean) / self.human_std

    def denorm_human(self, x):
        return x * self.human_std + self.human_mean

    def _obj_stats(self, x):
        n = x.shape[-1] // OBJECT_DIM
        return self.object_mean.repeat(n), self.object_std.repeat(n)

    def norm_object(self, x):
        m, s = self._obj_stats(x)
        return (x - m) / s

    def denorm_object(self, x):
        m, s = self._obj_stats(x)
        return x * s + m

    def modality_mask(self, batch: int, drop: torch.Tensor | None = None) -> torch.Tensor:
        ab = self.cfg.ablations
        base = torch.tensor([ab.text_prior, ab.visual_prior, ab.spatial_prior, ab.spatial_prior], dtype=torch.float32)
        m = base.repeat(batch, 1)
        if drop is not None:
            # the unconditional branch keeps only the object geometry
            m[drop, :3] = 0.0
        return m


def build_model(cfg: RunConfig, vocab_size: int, seed: int | None = None) -> HOIModel:
    model = HOIModel(cfg, vocab_size)
    ParameterStore(model, cfg.seed if seed is None else seed).initialize()
    return model


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def object_channel_mask(cfg: RunConfig) -> torch.Tensor:
    """Per-channel mask over the 170 object channels (all True unless the enhanced repr is ablated)."""
    m = torch.ones(OBJECT_DIM, dtype=torch.bool)
    if not cfg.ablations.enhanced_repr:
        m[:] = False
        m[OBJ_BASIC] = True
    return m


@dataclass
class Batch:
    human: torch.Tensor  # B,S,471 normalised
    objects: torch.Tensor  # B,S,N*170 normalised
    object_mask: torch.Tensor  # B,N
    prompt_ids: torch.Tensor
    prompt_mask: torch.Tensor
    action_ids: torch.Tensor  # B,Na,L
    action_tok_mask: torch.Tensor
    action_mask: torch.Tensor  # B,Na
    visual: torch.Tensor  # B,Na,Dv
    atomic: torch.Tensor  # B,Na,471 normalised
    points: torch.Tensor  # B,N,K,3

    def index(self, idx) -> "Batch":
        return Batch(**{f.name: getattr(self, f.name)[idx] for f in fields(self)})

    def __len__(self) -> int:
        return self.human.shape[0]


def visual_provider(cfg: RunConfig):
    if cfg.visual_features:
        return FileVisualProvider(cfg.visual_features, cfg.visual_dim)
    return ProceduralVisualProvider(cfg.visual_dim, cfg.visual_seed)


@torch.no_grad()
def retrieval_index(model: HOIModel, vocab: Vocabulary, library: AtomicMotionLibrary):
    """Returns ``f(token_ids) -> library index`` using the frozen text embeddings."""
    enc = model.text_encoder
    keys = enc.frozen_embed(*pad_ids([vocab.encode(lbl) for lbl in library.labels])).double().numpy()
    cache: dict[tuple, int] = {}

    def lookup(tokens: Sequence[int]) -> int:
        key = tuple(tokens)
        if key not in cache:
            q = enc.frozen_embed(*pad_ids([list(tokens)]))[0].double().numpy()
            cache[key] = cosine_argmax(q, keys)
        return cache[key]

    return lookup


def compute_normalisation(records: Sequence[SequenceRecord], floor: float = 1e-2):
    h = np.concatenate([r.human for r in records])
    o = np.concatenate([np.concatenate(r.objects) for r in records])
    return (h.mean(0), np.maximum(h.std(0), floor), o.mean(0), np.maximum(o.std(0), floor))


def encode_conditions(model: HOIModel, vocab: Vocabulary, library: AtomicMotionLibrary, texts: Sequence[str],
                      sub_actions: Sequence[Sequence[str]], geometries: Sequence[Sequence[ObjectGeometry]],
                      provider=None) -> dict:
    """Condition tensors for a batch of prompts (everything except motion)."""
    cfg = model.cfg
    provider = provider or visual_provider(cfg)
    lookup = retrieval_index(model, vocab, library)
    poses = torch.as_tensor(library.poses(), dtype=torch.float32)
    b = len(texts)
    n_max, na_max = cfg.max_objects, cfg.max_actions
    prompt_ids, prompt_mask = pad_ids([vocab.encode(t) for t in texts], cfg.text_max_len)
    all_tokens = [[vocab.encode(s) for s in subs] for subs in sub_actions]
    L = max(len(t) for subs in all_tokens for t in subs)
    action_ids = torch.zeros(b, na_max, max(L, 1), dtype=torch.long)
    action_tok_mask = torch.zeros(b, na_max, max(L, 1), dtype=torch.bool)
    action_mask = torch.zeros(b, na_max, dtype=torch.bool)
    visual = torch.zeros(b, na_max, cfg.visual_dim)
    atomic = torch.zeros(b, na_max, HUMAN_DIM)
    points = torch.zeros(b, n_max, cfg.n_points, 3)
    object_mask = torch.zeros(b, n_max, dtype=torch.bool)
    for i in range(b):
        subs = list(sub_actions[i])
        if not 1 <= len(subs) <= na_max:
            raise ValueError(f"sequence {i}: {len(subs)} sub-actions, expected 1..{na_max}")
        geoms = list(geometries[i])
        if not 1 <= len(geoms) <= n_max:
            raise ValueError(f"sequence {i}: {len(geoms)} objects, expected 1..{n_max}")
        for j, toks in enumerate(all_tokens[i]):
            action_ids[i, j, : len(toks)] = torch.as_tensor(toks)
            action_tok_mask[i, j, : len(toks)] = True
            atomic[i, j] = poses[lookup(toks)]
        action_mask[i, : len(subs)] = True
        visual[i, : len(subs)] = torch.as_tensor(provider.features(subs), dtype=torch.float32)
        for j, g in enumerate(geoms):
            if len(g.points) < cfg.n_points:
                raise ValueError(f"geometry has {len(g.points)} points, need {cfg.n_points}")
            points[i, j] = torch.as_tensor(g.points[: cfg.n_points], dtype=torch.float32)
        for j in range(len(geoms), n_max):
            points[i, j] = points[i, 0]
        object_mask[i, : len(geoms)] = True
    return dict(prompt_ids=prompt_ids, prompt_mask=prompt_mask, action_ids=action_ids,
                action_tok_mask=action_tok_mask, action_mask=action_mask, visual=visual,
                atomic=model.norm_human(atomic), points=points, object_mask=object_mask)


def make_batch(model: HOIModel, vocab: Vocabulary, library: AtomicMotionLibrary,
               records: Sequence[SequenceRecord], provider=None) -> Batch:
    cfg = model.cfg
    conds = encode_conditions(model, vocab, library, [r.text for r in records], [r.sub_actions for r in records],
                              [r.geometry for r in records], provider)
    b, s = len(records), cfg.frames
    human = torch.as_tensor(np.stack([r.human for r in records]), dtype=torch.float32)
    if human.shape[1] != s:
        raise ValueError(f"records have {human.shape[1]} frames, config expects {s}")
    objects = torch.zeros(b, s, cfg.max_objects * OBJECT_DIM)
    chan = object_channel_mask(cfg).to(torch.float32)
    with torch.no_grad():
        for i, r in enumerate(records):
            for j, o in enumerate(r.objects):
                on = model.norm_object(torch.as_tensor(o, dtype=torch.float32))
                objects[i, :, j * OBJECT_DIM:(j + 1) * OBJECT_DIM] = on * chan
        human = model.norm_human(human)
    return Batch(human=human, objects=objects, **conds)


# ---------------------------------------------------------------------------
# training step
# ---------------------------------------------------------------------------

def _object_valid(batch_mask: torch.Tensor, cfg: RunConfig, frames: int) -> torch.Tensor:
    """(B, 1, N*170) validity of every object channel."""
    chan = object_channel_mask(cfg)
    return (batch_mask[:, :, None] & chan[None, None, :]).reshape(batch_mask.shape[0], 1, -1)


def _centroids(model: HOIModel, objects_norm: torch.Tensor) -> torch.Tensor:
    den = model.denorm_object(objects_norm)
    o = den.reshape(*den.shape[:-1], -1, OBJECT_DIM)
    sl = OBJ_CENTROID if model.cfg.ablations.enhanced_repr else OBJ_TRANS
    return o[..., sl]


def encode_prompt(model: HOIModel, batch: Batch, drop: torch.Tensor | None):
    tokens, tmask, _ = model.text_encoder(batch.prompt_ids, batch.prompt_mask, drop)
    bundle = model.priors(batch.action_ids, batch.action_tok_mask, batch.action_mask, batch.visual,
                          batch.atomic, batch.points, batch.object_mask,
                          model.modality_mask(len(batch), drop))
    return tokens, tmask, bundle


def training_losses(model: HOIModel, batch: Batch, sched: dif.DiffusionSchedule, gen: torch.Generator,
                    cfg: RunConfig | None = None) -> tuple[torch.Tensor, dict, dict]:
    """One stochastic evaluation of the total objective.

    Returns ``(total, components, routing_stats)``. All randomness comes from ``gen``.
    """
    cfg = cfg or model.cfg
    ab = cfg.ablations
    b = len(batch)
    T = sched.T
    drop = dif.drop_condition(b, cfg.cond_dropout, gen)
    t_h = torch.randint(1, T + 1, (b,), generator=gen)
    t_o = torch.randint(1, T + 1, (b,), generator=gen)
    t_hoi = torch.randint(1, T + 1, (b,), generator=gen)
    eps_h = torch.randn(batch.human.shape, generator=gen)
    eps_o = torch.randn(batch.objects.shape, generator=gen)
    eps_hh = torch.randn(batch.human.shape, generator=gen)
    eps_ho = torch.randn(batch.objects.shape, generator=gen)
    teacher = torch.rand(b, generator=gen) < cfg.teacher_forcing

    tokens, tmask, bundle = encode_prompt(model, batch, drop)
    obj_valid = _object_valid(batch.object_mask, cfg, batch.human.shape[1])
    comps: dict[str, torch.Tensor] = {}
    stats: dict[str, dict] = {}
    h0 = o0 = None
    if ab.cascade:
        xh = dif.q_sample(batch.human, t_h, eps_h, sched)
        pred_h, moe_h = model.human(xh, t_h, tokens, tmask, bundle.human_condition())
        xo = dif.q_sample(batch.objects, t_o, eps_o, sched)
        pred_o, moe_o = model.object(xo, t_o, tokens, tmask, bundle.object_condition())
        comps["human_l2"] = obj.l2_loss(pred_h, batch.human)
        comps["object_l2"] = obj.l2_loss(pred_o, batch.objects, obj_valid)
        comps["human_balance"] = moe_h.balance_loss
        comps["object_balance"] = moe_o.balance_loss
        if ab.moe:
            stats["human"] = {"f": moe_h.f.tolist(), "P": moe_h.P.detach().tolist(),
                              "balance_loss": float(moe_h.balance_loss.detach())}
            stats["object"] = {"f": moe_o.f.tolist(), "P": moe_o.P.detach().tolist(),
                               "balance_loss": float(moe_o.balance_loss.detach())}
        tf = teacher[:, None, None]
        h0 = torch.where(tf, batch.human, pred_h.detach())
        o0 = torch.where(tf, batch.objects, pred_o.detach() * obj_valid)

    xh2 = dif.q_sample(batch.human, t_hoi, eps_hh, sched)
    xo2 = dif.q_sample(batch.objects, t_hoi, eps_ho, sched)
    ph, po = model.hoi(xh2, xo2, t_hoi, tokens, tmask, h0, o0)
    sq_h = ((ph - batch.human) ** 2).sum()
    vo = obj_valid.expand_as(po).to(po.dtype)
    sq_o = (((po - batch.objects) ** 2) * vo).sum()
    comps["l2"] = (sq_h + sq_o) / (batch.human.numel() + vo.sum())

    if ab.hoi_losses:
        pj = obj.joints_of(model.denorm_human(ph))
        gj = obj.joints_of(model.denorm_human(batch.human))
        comps["vel"] = obj.velocity_loss(pj, gj)
        pc, gc = _centroids(model, po), _centroids(model, batch.objects)
        comps["dis"] = obj.distance_loss(pc, gc, batch.object_mask)
        hands = [LEFT_WRIST, RIGHT_WRIST]
        comps["inter"] = obj.interaction_loss(pj[..., hands, :], pc, gj[..., hands, :], gc, batch.object_mask)

    weights = cfg.weights if ab.hoi_losses else replace(cfg.weights, vel=0.0, dis=0.0, inter=0.0)
    total = obj.total_loss(comps, weights)
    return total, comps, stats


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def cosine_lr(step: int, total: int, lr_max: float, lr_min: float) -> float:
    if total <= 1:
        return lr_max
    frac = min(max(step / (total - 1), 0.0), 1.0)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * frac))


def _step_generator(seed: int, step: int) -> torch.Generator:
    h = hashlib.sha256(f"train:{seed}:{step}".encode()).digest()
    return torch.Generator().manual_seed(int.from_bytes(h[:8], "little") >> 1)


def save_checkpoint(path: str | Path, model: HOIModel, optimizer: torch.optim.Optimizer | None, step: int,
                    vocab: Vocabulary, library: AtomicMotionLibrary, extra: dict | None = None) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    save_tensors(tmp / "model", model.state_dict())
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        opt = {}
        for group in optimizer.param_groups:
            for p in group["params"]:
                st = optimizer.state.get(p)
                if st:
                    opt[f"{names[id(p)]}.exp_avg"] = st["exp_avg"]
                    opt[f"{names[id(p)]}.exp_avg_sq"] = st["exp_avg_sq"]
                    opt[f"{names[id(p)]}.step"] = st["step"].reshape(1).float()
        save_tensors(tmp / "optim", opt)
    state = {"step": step, "config": model.cfg.to_json(), "vocabulary": vocab.to_json(), **(extra or {})}
    (tmp / "state.json").write_text(json.dumps(state, indent=1))
    library.save(tmp / "atomic_library.json")
    if path.exists():
        shutil.rmtree(path)
    tmp.rename(path)


def load_checkpoint(path: str | Path) -> tuple[HOIModel, dict, Vocabulary, AtomicMotionLibrary]:
    path = Path(path)
    state_path = path / "state.json"
    if not state_path.exists():
        raise FileNotFoundError(f"checkpoint state missing: {state_path}")
    state = json.loads(state_path.read_text())
    cfg = RunConfig.from_json(state["config"])
    vocab = Vocabulary.from_json(state["vocabulary"])
    model = HOIModel(cfg, len(vocab))
    model.load_state_dict(load_tensors(path / "model"))
    return model, state, vocab, AtomicMotionLibrary.load(path / "atomic_library.json")


def _load_optimizer(path: Path, model: HOIModel, optimizer: torch.optim.Optimizer) -> None:
    if not Path(f"{path / 'optim'}.manifest.json").exists():
        return
    t = load_tensors(path / "optim")
    for name, p in model.named_parameters():
        if f"{name}.exp_avg" in t:
            optimizer.state[p] = {
                "step": t[f"{name}.step"].reshape(()).clone(),
                "exp_avg": t[f"{name}.exp_avg"].reshape(p.shape).clone(),
                "exp_avg_sq": t[f"{name}.exp_avg_sq"].reshape(p.shape).clone(),
            }


class Trainer:
    """Resumable training run writing into ``out_dir``.

    Layout: ``checkpoint/`` (latest), ``train_log.jsonl``, ``routing.jsonl``.
    """

    def __init__(self, cfg: RunConfig, out_dir: str | Path, dataset: Dataset | None = None):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.dataset = dataset if dataset is not None else Dataset.load(cfg.data)
        self.sched = cfg.schedule()
        ckpt = self.out / "checkpoint"
        if (ckpt / "state.json").exists():
            self.model, state, self.vocab, self.library = load_checkpoint(ckpt)
            self.step = int(state["step"])
        else:
            self.vocab, self.library = self.dataset.vocab, self.dataset.library
            self.model = build_model(cfg, len(self.vocab))
            train = self.dataset.split("train")
            hm, hs, om, os_ = compute_normalisation(train)
            with torch.no_grad():
                self.model.human_mean.copy_(torch.as_tensor(hm))
                self.model.human_std.copy_(torch.as_tensor(hs))
                self.model.object_mean.copy_(torch.as_tensor(om))
                self.model.object_std.copy_(torch.as_tensor(os_))
            self.step = 0
        params = [p for p in self.model.parameters() if p.requires_grad]
        self.optimizer = torch.optim.Adam(params, lr=cfg.lr)
        if self.step:
            _load_optimizer(ckpt, self.model, self.optimizer)
        self.data = make_batch(self.model, self.vocab, self.library, self.dataset.split("train"))

    @property
    def checkpoint_dir(self) -> Path:
        return self.out / "checkpoint"

    def _save(self) -> None:
        save_checkpoint(self.checkpoint_dir, self.model, self.optimizer, self.step, self.vocab, self.library)

    def step_once(self) -> dict:
        cfg = self.cfg
        gen = _step_generator(cfg.seed, self.step)
        n = len(self.data)
        idx = torch.randint(0, n, (min(cfg.batch_size, n),), generator=gen)
        batch = self.data.index(idx)
        self.model.train()
        total, comps, stats = training_losses(self.model, batch, self.sched, gen, cfg)
        if not torch.isfinite(total):
            raise TrainingError(
                f"non-finite loss at step {self.step}; last good checkpoint: {self.checkpoint_dir}"
            )
        lr = cosine_lr(self.step, cfg.steps, cfg.lr, cfg.lr_min)
        for g in self.optimizer.param_groups:
            g["lr"] = lr
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        self.optimizer.step()
        rec = {"step": self.step, "total": float(total.detach()),
               **{k: float(v.detach()) for k, v in comps.items()}, "lr": lr}
        with open(self.out / "train_log.jsonl", "a") as fh:
            fh.write(json.dumps(rec) + "\n")
        if stats:
            with open(self.out / "routing.jsonl", "a") as fh:
                fh.write(json.dumps({"step": self.step, **stats}) + "\n")
        self.step += 1
        return rec

    def train(self, until: int | None = None) -> list[dict]:
        until = self.cfg.steps if until is None else min(until, self.cfg.steps)
        records = []
        while self.step < until:
            records.append(self.step_once())
            if self.step % self.cfg.checkpoint_every == 0 or self.step == self.cfg.steps:
                self._save()
        if self.step == until and not (self.checkpoint_dir / "state.json").exists():
            self._save()
        return records


def read_log(out_dir: str | Path) -> list[dict]:
    path = Path(out_dir) / "train_log.jsonl"
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

@torch.no_grad()
def sample_motion(model: HOIModel, batch: Batch, seed: int = 0, steps: int | None = None,
                  guidance_scale: float | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Cascaded sampling. Returns de-normalised ``(human B,S,471, objects B,S,N*170)``."""
    cfg = model.cfg
    model.eval()
    scale = cfg.guidance_scale if guidance_scale is None else guidance_scale
    steps = steps if steps is not None else (cfg.sample_steps or None)
    sched = cfg.schedule()
    b, s = len(batch), cfg.frames
    on = torch.zeros(b, dtype=torch.bool)
    off = torch.ones(b, dtype=torch.bool)
    cond = {True: encode_prompt(model, batch, on), False: encode_prompt(model, batch, off)}
    obj_valid = _object_valid(batch.object_mask, cfg, s).to(torch.float32)
    hd, od = HUMAN_DIM, cfg.max_objects * OBJECT_DIM

    h0 = o0 = None
    if cfg.ablations.cascade:
        def human_model(x, t, c):
            tok, tm, bun = cond[c]
            return model.human(x, t, tok, tm, bun.human_condition())[0]

        def object_model(x, t, c):
            tok, tm, bun = cond[c]
            return model.object(x, t, tok, tm, bun.object_condition())[0] * obj_valid

        h0 = dif.p_sample_loop(human_model, (b, s, hd), sched, scale, seed, steps)
        o0 = dif.p_sample_loop(object_model, (b, s, od), sched, scale, seed + 1, steps)

    def hoi_model(x, t, c):
        tok, tm, _ = cond[c]
        ph, po = model.hoi(x[..., :hd], x[..., hd:], t, tok, tm, h0, o0)
        return torch.cat([ph, po * obj_valid], dim=-1)

    x = dif.p_sample_loop(hoi_model, (b, s, hd + od), sched, scale, seed + 2, steps)
    return model.denorm_human(x[..., :hd]), model.denorm_object(x[..., hd:])


def to_records(model: HOIModel, human: torch.Tensor, objects: torch.Tensor, texts: Sequence[str],
               sub_actions: Sequence[Sequence[str]], geometries: Sequence[Sequence[ObjectGeometry]]
               ) -> list[SequenceRecord]:
    """Package sampled arrays as interchange records.

    Without the enhanced representation only rotation and translation are
    generated; the remaining object channels are re-derived from them.
    """
    cfg = model.cfg
    out = []
    for i in range(human.shape[0]):
        h = human[i].double().numpy()
        objs = []
        for j, g in enumerate(geometries[i]):
            o = objects[i, :, j * OBJECT_DIM:(j + 1) * OBJECT_DIM].double().numpy()
            if not cfg.ablations.enhanced_repr:
                raw = RawObjectMotion(o[:, 0:6], o[:, 6:9])
                joints = h[:, :156].reshape(-1, 52, 3)
                o = flatten_object(derive_enhanced(raw, g, joints[:, LEFT_WRIST], joints[:, RIGHT_WRIST],
                                                   cfg.fps, cfg.contact_threshold))
            objs.append(o)
        out.append(SequenceRecord(fps=cfg.fps, text=texts[i], human=h, objects=objs,
                                  geometry=list(geometries[i]), sub_actions=list(sub_actions[i]),
                                  seq_id=f"sample_{i:04d}"))
    return out


def sample(checkpoint: str | Path, text: str, geometries: Sequence[ObjectGeometry], seed: int = 0,
           steps: int | None = None, guidance_scale: float | None = None,
           sub_actions: Sequence[str] | None = None, provider=None) -> SequenceRecord:
    """Generate one sequence for a free-text prompt and object geometries."""
    model, _, vocab, library = load_checkpoint(checkpoint)
    subs = list(sub_actions) if sub_actions else ClauseSubActions().sub_actions(text)
    subs = subs[: model.cfg.max_actions]
    conds = encode_conditions(model, vocab, library, [text], [subs], [list(geometries)], provider)
    s = model.cfg.frames
    zeros_h = torch.zeros(1, s, HUMAN_DIM)
    zeros_o = torch.zeros(1, s, model.cfg.max_objects * OBJECT_DIM)
    batch = Batch(human=zeros_h, objects=zeros_o, **conds)
    human, objects = sample_motion(model, batch, seed, steps, guidance_scale)
    rec = to_records(model, human, objects, [text], [subs], [list(geometries)])[0]
    rec.validate()
    return rec


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _hand_object_distances(rec: SequenceRecord) -> np.ndarray:
    """(S, N_o, 2) hand-to-centroid distances."""
    joints = rec.human[:, :156].reshape(-1, 52, 3)
    hands = joints[:, [LEFT_WRIST, RIGHT_WRIST]]
    cents = np.stack([o[:, OBJ_CENTROID] for o in rec.objects], axis=1)
    return np.linalg.norm(cents[:, :, None, :] - hands[:, None, :, :], axis=-1)


def default_embedding(rec: SequenceRecord) -> np.ndarray:
    """Pluggable motion feature for diversity / Fréchet: mean and std of joint positions over time."""
    j = rec.human[:, :156]
    return np.concatenate([j.mean(0), j.std(0)])


def evaluate_records(generated: Sequence[SequenceRecord], reference: Sequence[SequenceRecord],
                     threshold: float = DEFAULT_CONTACT_THRESHOLD, embed=default_embedding,
                     n_pairs: int = 300, seed: int = 0, csv_path: str | Path | None = None,
                     real_features: np.ndarray | None = None) -> obj.MetricReport:
    if len(generated) != len(reference):
        raise ValueError("generated and reference lists differ in length")
    if not reference:
        raise ValueError("nothing to evaluate: empty reference list")
    pred_c, gt_c, pred_d, gt_d, rows = [], [], [], [], []
    for g, r in zip(generated, reference):
        dp, dg = _hand_object_distances(g), _hand_object_distances(r)
        pc, gc = dp < threshold, dg < threshold
        pred_c.append(pc.reshape(len(pc), -1))
        gt_c.append(gc.reshape(len(gc), -1))
        pred_d.append(dp.ravel())
        gt_d.append(dg.ravel())
        if csv_path is not None:
            p, rc, f1, pct = obj.contact_metrics(pc, gc)
            rows.append({"id": r.seq_id, "C_prec": p, "C_rec": rc, "C_F1": f1, "C_pct": pct,
                         "D_I": obj.interaction_distance(dp, dg)})
    tp = fp = fn = 0
    frames_any = []
    for pc, gc in zip(pred_c, gt_c):
        tp += int(np.sum(pc & gc))
        fp += int(np.sum(pc & ~gc))
        fn += int(np.sum(~pc & gc))
        frames_any.append(pc.any(axis=1))
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    pct = float(np.concatenate(frames_any).mean())
    d_i = obj.interaction_distance(np.concatenate(pred_d), np.concatenate(gt_d))
    feats = np.stack([embed(g) for g in generated])
    report = obj.MetricReport(prec, rec, f1, pct, d_i, obj.diversity(feats, n_pairs, seed))
    report.extra["n_sequences"] = len(generated)
    report.extra["gt_C_pct"] = float(np.concatenate([gc.any(axis=1) for gc in gt_c]).mean())
    if real_features is not None:
        mu1, s1 = obj.gaussian_stats(feats)
        mu2, s2 = obj.gaussian_stats(real_features)
        report.extra["frechet"] = obj.frechet_distance(mu1, s1, mu2, s2)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return report


def generate_for(model: HOIModel, vocab: Vocabulary, library: AtomicMotionLibrary,
                 records: Sequence[SequenceRecord], seed: int = 0, steps: int | None = None,
                 guidance_scale: float | None = None, batch_size: int = 32) -> list[SequenceRecord]:
    """One generation per reference record, conditioned on its text, sub-actions and geometry."""
    out = []
    for start in range(0, len(records), batch_size):
        chunk = list(records[start:start + batch_size])
        batch = make_batch(model, vocab, library, chunk)
        human, objects = sample_motion(model, batch, seed + start, steps, guidance_scale)
        recs = to_records(model, human, objects, [r.text for r in chunk], [r.sub_actions for r in chunk],
                          [r.geometry for r in chunk])
        for g, r in zip(recs, chunk):
            g.seq_id = r.seq_id
        out.extend(recs)
    return out


def evaluate(checkpoint: str | Path, data: str | Path | Dataset, split: str = "val", seed: int = 0,
             steps: int | None = None, guidance_scale: float | None = None,
             csv_path: str | Path | None = None, embedding_file: str | Path | None = None,
             model: HOIModel | None = None) -> obj.MetricReport:
    if model is None:
        model, _, vocab, library = load_checkpoint(checkpoint)
    else:
        _, _, vocab, library = load_checkpoint(checkpoint)
    ds = data if isinstance(data, Dataset) else Dataset.load(data)
    refs = ds.split(split)
    gens = generate_for(model, vocab, library, refs, seed, steps, guidance_scale)
    real = None
    if embedding_file is not None:
        real = np.asarray(json.loads(Path(embedding_file).read_text())["real"], dtype=np.float64)
    return evaluate_records(gens, refs, model.cfg.contact_threshold, csv_path=csv_path, seed=seed,
                            real_features=real)
