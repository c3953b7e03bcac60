"""Multimodal prior features: text, visual, atomic-pose and point-cloud.

The large external models are replaced by small local stand-ins:

* text: a frozen, seeded token-embedding table (used for retrieval) topped
  by a trainable two-layer transformer encoder;
* visual: a :class:`VisualPriorProvider` that either reads precomputed
  feature files or derives deterministic pseudo-features from hashed text;
* sub-action parsing: a :class:`SubActionProvider`.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import substrate as ops
from .layers import TransformerBlock
from .representation import HUMAN_DIM, ObjectGeometry


class PriorError(ValueError):
    pass


# ---------------------------------------------------------------------------
# tokens
# ---------------------------------------------------------------------------

def tokenize(text: str) -> list[str]:
    return re.findall(r"[a-z0-9]+", text.lower())


class Vocabulary:
    """Fixed word list; id 0 is reserved for padding."""

    PAD = "<pad>"

    def __init__(self, words: Sequence[str]):
        uniq = sorted(set(words) - {self.PAD})
        self.words = [self.PAD] + uniq
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, text: str) -> list[int]:
        ids = []
        for w in tokenize(text):
            if w not in self.index:
                raise PriorError(f"unknown token {w!r} (not in vocabulary of {len(self)} words)")
            ids.append(self.index[w])
        return ids

    def to_json(self) -> list[str]:
        return list(self.words)

    @classmethod
    def from_json(cls, words: list[str]) -> "Vocabulary":
        return cls(words)


def pad_ids(seqs: Sequence[Sequence[int]], max_len: int | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad token id lists -> (ids, mask). Empty lists keep one masked slot."""
    n = max([len(s) for s in seqs] + [1])
    if max_len is not None:
        if n > max_len:
            raise PriorError(f"prompt of {n} tokens exceeds max length {max_len}")
    ids = torch.zeros(len(seqs), n, dtype=torch.long)
    mask = torch.zeros(len(seqs), n, dtype=torch.bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
        mask[i, : len(s)] = True
    return ids, mask


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------

class TextEncoder(nn.Module):
    """Token encoder producing prompt tokens (``T_p``) and pooled features.

    Empty prompts map to a learned null token, which is what classifier-free
    guidance uses for its unconditional branch.
    """

    def __init__(self, vocab_size: int, model_dim: int, out_dim: int, embed_dim: int = 64,
                 max_len: int = 32, heads: int = 4, layers: int = 2):
        super().__init__()
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.frozen = nn.Embedding(vocab_size, embed_dim)
        self.frozen.weight.requires_grad_(False)
        self.proj = nn.Linear(embed_dim, model_dim)
        self.pos = nn.Parameter(torch.zeros(max_len, model_dim))
        self.null_token = nn.Parameter(torch.zeros(1, model_dim))
        self.blocks = nn.ModuleList([TransformerBlock(model_dim, heads, cross=False) for _ in range(layers)])
        self.norm = nn.LayerNorm(model_dim)
        self.pool_proj = nn.Linear(model_dim, out_dim)

    def _check(self, ids: torch.Tensor, mask: torch.Tensor) -> None:
        if ids.shape[1] > self.max_len:
            raise PriorError(f"prompt of {ids.shape[1]} tokens exceeds max length {self.max_len}")
        if (ids[mask] >= self.vocab_size).any() or (ids < 0).any():
            raise PriorError("token id outside vocabulary")

    def frozen_embed(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Mean of the frozen token embeddings; the retrieval feature."""
        self._check(ids, mask)
        e = self.frozen(ids) * mask[..., None]
        return e.sum(1) / mask.sum(1, keepdim=True).clamp(min=1)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor, drop: torch.Tensor | None = None):
        """Returns ``(tokens B x L x D, token_mask B x L, pooled B x out_dim)``.

        Rows with an empty mask, or with ``drop`` set, become the null prompt.
        """
        self._check(ids, mask)
        b = ids.shape[0]
        empty = ~mask.any(1)
        if drop is not None:
            empty = empty | drop
        mask = mask & ~empty[:, None]
        x = self.proj(self.frozen(ids)) + self.pos[: ids.shape[1]]
        # null prompt occupies slot 0 of empty rows
        null = self.null_token.expand(b, -1)
        x = torch.where(empty[:, None, None] & (torch.arange(ids.shape[1]) == 0)[None, :, None], null[:, None, :], x)
        mask = mask.clone()
        mask[:, 0] = mask[:, 0] | empty
        for blk in self.blocks:
            x = blk(x, self_mask=mask)
        x = self.norm(x)
        w = mask[..., None].to(x.dtype)
        pooled = self.pool_proj((x * w).sum(1) / w.sum(1))
        return x, mask, pooled


def encode_text(encoder: TextEncoder, tokens: Sequence[int]) -> torch.Tensor:
    """Pooled ``1 x D_t`` feature of a single prompt."""
    ids, mask = pad_ids([tokens])
    return encoder(ids, mask)[2]


class PointNetEncoder(nn.Module):
    """Shared per-point MLP followed by a max-pool over points."""

    def __init__(self, out_dim: int = 256, hidden: Sequence[int] = (64, 128)):
        super().__init__()
        dims = [3, *hidden, out_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def point_features(self, pts: torch.Tensor) -> torch.Tensor:
        h = pts
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = ops.gelu(h)
        return h

    def forward(self, pts: torch.Tensor) -> torch.Tensor:
        """``pts``: (..., K, 3) -> (..., out_dim)."""
        return ops.max_pool(self.point_features(pts), axis=-2)


class PoseEncoder(nn.Module):
    """Two-layer MLP from a 471-dim atomic pose to ``D_a``."""

    def __init__(self, out_dim: int = 512, in_dim: int = HUMAN_DIM):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, out_dim)
        self.fc2 = nn.Linear(out_dim, out_dim)

    def forward(self, pose):
        return self.fc2(ops.gelu(self.fc1(pose)))


# ---------------------------------------------------------------------------
# atomic motions
# ---------------------------------------------------------------------------

@dataclass
class AtomicEntry:
    label: str
    pose: np.ndarray  # 471


class AtomicMotionLibrary:
    def __init__(self, entries: Sequence[AtomicEntry]):
        if not entries:
            raise PriorError("atomic motion library is empty")
        labels = [e.label for e in entries]
        if len(set(labels)) != len(labels):
            raise PriorError("atomic motion labels must be unique")
        for e in entries:
            if np.shape(e.pose) != (HUMAN_DIM,):
                raise PriorError(f"atomic pose {e.label!r}: expected ({HUMAN_DIM},), got {np.shape(e.pose)}")
        self.entries = list(entries)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def labels(self) -> list[str]:
        return [e.label for e in self.entries]

    def poses(self) -> np.ndarray:
        return np.stack([e.pose for e in self.entries])

    def to_json(self) -> list[dict]:
        return [{"label": e.label, "pose": np.asarray(e.pose).tolist()} for e in self.entries]

    @classmethod
    def from_json(cls, items: list[dict]) -> "AtomicMotionLibrary":
        return cls([AtomicEntry(d["label"], np.asarray(d["pose"], dtype=np.float64)) for d in items])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> "AtomicMotionLibrary":
        return cls.from_json(json.loads(Path(path).read_text()))


def cosine_argmax(query: np.ndarray, keys: np.ndarray) -> int:
    """Index of the key with highest cosine similarity; first index wins ties."""
    q = np.asarray(query, dtype=np.float64)
    k = np.asarray(keys, dtype=np.float64)
    sims = (k @ q) / (np.linalg.norm(k, axis=1) * np.linalg.norm(q) + 1e-12)
    return int(np.argmax(sims))


@torch.no_grad()
def retrieve_atomic(action_tokens: Sequence[int], lib: AtomicMotionLibrary, encoder: TextEncoder,
                    vocab: Vocabulary) -> int:
    label_ids, label_mask = pad_ids([vocab.encode(lbl) for lbl in lib.labels])
    keys = encoder.frozen_embed(label_ids, label_mask).double().numpy()
    q_ids, q_mask = pad_ids([action_tokens])
    query = encoder.frozen_embed(q_ids, q_mask)[0].double().numpy()
    return cosine_argmax(query, keys)


# ---------------------------------------------------------------------------
# providers
# ---------------------------------------------------------------------------

class VisualPriorProvider(Protocol):
    dim: int

    def features(self, texts: Sequence[str]) -> np.ndarray:
        """One ``dim``-wide feature row per sub-action text."""


class SubActionProvider(Protocol):
    def sub_actions(self, prompt: str) -> list[str]:
        ...


def _text_seed(text: str, seed: int) -> int:
    return int.from_bytes(hashlib.sha256(f"{seed}|{text}".encode()).digest()[:8], "little")


class ProceduralVisualProvider:
    """Deterministic unit-norm pseudo-features from hashed text."""

    def __init__(self, dim: int = 512, seed: int = 0):
        self.dim = dim
        self.seed = seed

    def features(self, texts: Sequence[str]) -> np.ndarray:
        rows = []
        for t in texts:
            v = np.random.default_rng(_text_seed(t, self.seed)).standard_normal(self.dim)
            rows.append(v / np.linalg.norm(v))
        return np.stack(rows)


def feature_file_name(texts: Sequence[str], kind: str = "visual") -> str:
    key = hashlib.sha1("|".join(texts).encode()).hexdigest()[:16]
    return f"{kind}_{key}.json"


def write_feature_file(path: str | Path, values: np.ndarray, kind: str = "visual") -> None:
    values = np.asarray(values, dtype=np.float64)
    Path(path).write_text(json.dumps(
        {"kind": kind, "rows": int(values.shape[0]), "dim": int(values.shape[1]), "values": values.tolist()}
    ))


def read_feature_file(path: str | Path, kind: str | None = None) -> np.ndarray:
    d = json.loads(Path(path).read_text())
    if kind is not None and d.get("kind") != kind:
        raise PriorError(f"{path}: expected kind {kind!r}, found {d.get('kind')!r}")
    values = np.asarray(d["values"], dtype=np.float64)
    if values.shape != (d["rows"], d["dim"]):
        raise PriorError(f"{path}: values shape {values.shape} != rows x dim {(d['rows'], d['dim'])}")
    return values


class FileVisualProvider:
    """Loads precomputed visual features keyed by the sub-action texts."""

    def __init__(self, root: str | Path, dim: int = 512):
        self.root = Path(root)
        self.dim = dim

    def path_for(self, texts: Sequence[str]) -> Path:
        return self.root / feature_file_name(texts, "visual")

    def features(self, texts: Sequence[str]) -> np.ndarray:
        path = self.path_for(texts)
        if not path.exists():
            raise FileNotFoundError(f"visual feature file missing: {path}")
        values = read_feature_file(path, "visual")
        if values.shape != (len(texts), self.dim):
            raise PriorError(f"{path}: expected {(len(texts), self.dim)}, got {values.shape}")
        return values


class ClauseSubActions:
    """Splits a free-text prompt into clauses at commas and 'then'/'and'."""

    def sub_actions(self, prompt: str) -> list[str]:
        parts = re.split(r",|\bthen\b|\band\b", prompt.lower())
        parts = [" ".join(tokenize(p)) for p in parts]
        parts = [p for p in parts if p]
        return parts or [prompt]


class FixedSubActions:
    """Looks up sub-actions from a prompt -> list mapping (e.g. dataset templates)."""

    def __init__(self, table: dict[str, list[str]], fallback: SubActionProvider | None = None):
        self.table = table
        self.fallback = fallback or ClauseSubActions()

    def sub_actions(self, prompt: str) -> list[str]:
        return list(self.table.get(prompt) or self.fallback.sub_actions(prompt))


# ---------------------------------------------------------------------------
# bundle
# ---------------------------------------------------------------------------

@dataclass
class PriorBundle:
    """Batched prior features; masks mark valid sub-action / object rows.

    text_feats: (B, N_a, D_t); visual_feats: (B, N_a, D_v);
    atomic_feats: (B, N_a, D_a); point_feats: (B, N_b, D_p).
    """

    text_feats: torch.Tensor
    visual_feats: torch.Tensor
    atomic_feats: torch.Tensor
    point_feats: torch.Tensor
    action_mask: torch.Tensor
    object_mask: torch.Tensor

    @staticmethod
    def _pool(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        w = mask[..., None].to(x.dtype)
        return (x * w).sum(-2) / w.sum(-2).clamp(min=1.0)

    def human_condition(self) -> torch.Tensor:
        """Mean-pooled ``[C_t; C_v; C_a]`` per sequence."""
        m = self.action_mask
        return ops.concat([self._pool(self.text_feats, m), self._pool(self.visual_feats, m),
                           self._pool(self.atomic_feats, m)], axis=-1)

    def object_condition(self) -> torch.Tensor:
        """Mean-pooled ``[C_t; C_v; C_p]`` per sequence."""
        m = self.action_mask
        return ops.concat([self._pool(self.text_feats, m), self._pool(self.visual_feats, m),
                           self._pool(self.point_feats, self.object_mask)], axis=-1)


class PriorEncoder(nn.Module):
    """Trainable encoders turning raw priors into a :class:`PriorBundle`."""

    def __init__(self, text_encoder: TextEncoder, text_dim: int, visual_dim: int = 512,
                 atomic_dim: int = 512, point_dim: int = 256, pointnet_hidden: Sequence[int] = (64, 128)):
        super().__init__()
        self.text_encoder = text_encoder
        self.text_dim = text_dim
        self.visual_dim = visual_dim
        self.pose_encoder = PoseEncoder(atomic_dim)
        self.pointnet = PointNetEncoder(point_dim, pointnet_hidden)

    @property
    def human_cond_dim(self) -> int:
        return self.text_dim + self.visual_dim + self.pose_encoder.fc2.out_features

    @property
    def object_cond_dim(self) -> int:
        return self.text_dim + self.visual_dim + self.pointnet.layers[-1].out_features

    def forward(self, action_ids: torch.Tensor, action_tok_mask: torch.Tensor, action_mask: torch.Tensor,
                visual: torch.Tensor, atomic_poses: torch.Tensor, points: torch.Tensor,
                object_mask: torch.Tensor, modality_mask: torch.Tensor | None = None) -> PriorBundle:
        """Encode a batch.

        action_ids: (B, N_a, L); action_tok_mask: (B, N_a, L); action_mask: (B, N_a);
        visual: (B, N_a, D_v); atomic_poses: (B, N_a, 471); points: (B, N_b, K, 3);
        object_mask: (B, N_b). ``modality_mask`` (B, 4) zeroes the text, visual,
        atomic and point features per row (used for condition dropout and ablations).
        """
        b, na, L = action_ids.shape
        if not object_mask.any(1).all():
            raise PriorError("every sequence needs at least one object (N_b >= 1)")
        flat_ids = action_ids.reshape(b * na, L)
        flat_mask = action_tok_mask.reshape(b * na, L)
        # padded sub-action slots still need one valid token for the encoder
        _, _, pooled = self.text_encoder(flat_ids, flat_mask)
        text = pooled.reshape(b, na, -1)
        atomic = self.pose_encoder(atomic_poses)
        pts = self.pointnet(points)
        visual = visual.to(text.dtype)
        if modality_mask is not None:
            mm = modality_mask.to(text.dtype)
            text = text * mm[:, 0, None, None]
            visual = visual * mm[:, 1, None, None]
            atomic = atomic * mm[:, 2, None, None]
            pts = pts * mm[:, 3, None, None]
        return PriorBundle(text, visual, atomic, pts, action_mask, object_mask)


def build_bundle(
    encoder: PriorEncoder,
    vocab: Vocabulary,
    sub_actions: Sequence[str],
    visual_source: VisualPriorProvider,
    lib: AtomicMotionLibrary,
    geoms: Sequence[ObjectGeometry],
) -> PriorBundle:
    """Single-sequence bundle (batch of one) from raw prior sources."""
    if not sub_actions:
        raise PriorError("need at least one sub-action")
    if not geoms:
        raise PriorError("need at least one object geometry (N_b >= 1)")
    tokens = [vocab.encode(s) for s in sub_actions]
    ids, tmask = pad_ids(tokens, encoder.text_encoder.max_len)
    atomic_idx = [retrieve_atomic(t, lib, encoder.text_encoder, vocab) for t in tokens]
    poses = torch.as_tensor(lib.poses()[atomic_idx], dtype=torch.float32)
    visual = torch.as_tensor(visual_source.features(list(sub_actions)), dtype=torch.float32)
    k = min(len(g.points) for g in geoms)
    points = torch.as_tensor(np.stack([g.points[:k] for g in geoms]), dtype=torch.float32)
    na, nb = len(sub_actions), len(geoms)
    return encoder(
        ids[None], tmask[None], torch.ones(1, na, dtype=torch.bool), visual[None], poses[None],
        points[None], torch.ones(1, nb, dtype=torch.bool),
    )
