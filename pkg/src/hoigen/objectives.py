"""Training losses and evaluation metrics.

Losses are torch functions (differentiable); metrics take numpy arrays.
Geometric losses work in physical units (metres) on de-normalised motion.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np
import torch

from .representation import (
    HAND_JOINTS,
    HUMAN_POS,
    N_JOINTS,
    OBJ_CENTROID,
    OBJECT_DIM,
)


@dataclass
class LossWeights:
    balance: float = 10.0
    l2: float = 1.0
    vel: float = 2.0
    dis: float = 0.3
    inter: float = 0.01

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be nonnegative")


# ---------------------------------------------------------------------------
# geometry helpers (torch, any leading dims)
# ---------------------------------------------------------------------------

def joints_of(human: torch.Tensor) -> torch.Tensor:
    """(..., S, 471) -> (..., S, 52, 3)"""
    return human[..., HUMAN_POS].reshape(*human.shape[:-1], N_JOINTS, 3)


def hands_of(human: torch.Tensor) -> torch.Tensor:
    """(..., S, 471) -> (..., S, 2, 3), left then right."""
    return joints_of(human)[..., list(HAND_JOINTS), :]


def centroids_of(objects: torch.Tensor) -> torch.Tensor:
    """(..., S, N_o * 170) -> (..., S, N_o, 3)"""
    o = objects.reshape(*objects.shape[:-1], -1, OBJECT_DIM)
    return o[..., OBJ_CENTROID]


def hand_centroid_distances(hands: torch.Tensor, centroids: torch.Tensor) -> torch.Tensor:
    """(..., S, 2, 3) x (..., S, N_o, 3) -> (..., S, N_o, 2)"""
    return torch.linalg.vector_norm(centroids[..., :, None, :] - hands[..., None, :, :], dim=-1)


def _safe_norm(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    # sqrt(0) has no gradient; coincident points keep a finite one
    return torch.sqrt((x * x).sum(dim) + 1e-12)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def l2_loss(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared error, optionally over entries where ``mask`` (broadcastable) is true."""
    if pred.shape != gt.shape:
        raise ValueError(f"l2_loss: shapes {tuple(pred.shape)} and {tuple(gt.shape)} differ")
    sq = (pred - gt) ** 2
    if mask is None:
        return sq.mean()
    m = mask.to(sq.dtype).expand_as(sq)
    return (sq * m).sum() / m.sum().clamp(min=1.0)


def velocity_loss(pred_joints: torch.Tensor, gt_joints: torch.Tensor,
                  hand_indices=HAND_JOINTS, hand_weight: float = 2.0) -> torch.Tensor:
    """Frame-difference velocity MSE over all joints plus ``hand_weight`` x the hands-only MSE.

    Joints are (..., S, J, 3); velocities are in metres per frame.
    """
    if pred_joints.shape[-3] < 2:
        raise ValueError("velocity_loss: need at least 2 frames")
    dv = torch.diff(pred_joints, dim=-3) - torch.diff(gt_joints, dim=-3)
    body = (dv ** 2).mean()
    hands = (dv[..., list(hand_indices), :] ** 2).mean()
    return body + hand_weight * hands


def _pair_distances(c: torch.Tensor) -> torch.Tensor:
    n = c.shape[-2]
    i, j = torch.triu_indices(n, n, offset=1)
    return _safe_norm(c[..., i, :] - c[..., j, :])


def distance_loss(pred_centroids: torch.Tensor, gt_centroids: torch.Tensor,
                  object_mask: torch.Tensor | None = None) -> torch.Tensor:
    """MSE of pairwise object-centroid distances per frame; 0 with a single object.

    Centroids are (B, S, N_o, 3); ``object_mask`` (B, N_o) marks real objects.
    """
    n = pred_centroids.shape[-2]
    if n < 2:
        return pred_centroids.sum() * 0.0
    dp = _pair_distances(pred_centroids)
    dg = _pair_distances(gt_centroids)
    sq = (dp - dg) ** 2  # B, S, pairs
    if object_mask is None:
        return sq.mean()
    i, j = torch.triu_indices(n, n, offset=1)
    pm = (object_mask[:, i] & object_mask[:, j]).to(sq.dtype)[:, None, :].expand_as(sq)
    if pm.sum() == 0:
        return pred_centroids.sum() * 0.0
    return (sq * pm).sum() / pm.sum()


def interaction_loss(pred_hands: torch.Tensor, pred_centroids: torch.Tensor, gt_hands: torch.Tensor,
                     gt_centroids: torch.Tensor, object_mask: torch.Tensor | None = None) -> torch.Tensor:
    """MSE between predicted and ground-truth hand-to-centroid distances (2 N_o channels per frame)."""
    dp = _safe_norm(pred_centroids[..., :, None, :] - pred_hands[..., None, :, :])
    dg = _safe_norm(gt_centroids[..., :, None, :] - gt_hands[..., None, :, :])
    sq = (dp - dg) ** 2  # B, S, N_o, 2
    if object_mask is None:
        return sq.mean()
    m = object_mask.to(sq.dtype)[:, None, :, None].expand_as(sq)
    return (sq * m).sum() / m.sum().clamp(min=1.0)


LOSS_KEYS = ("human_l2", "human_balance", "object_l2", "object_balance", "l2", "vel", "dis", "inter")


def total_loss(components: Mapping[str, torch.Tensor], weights: LossWeights) -> torch.Tensor:
    """Sum of the two stage-1 objectives and the weighted HOI objective.

    Missing components count as zero.
    """
    def c(key):
        return components.get(key, 0.0)

    stage_h = c("human_l2") + weights.balance * c("human_balance")
    stage_o = c("object_l2") + weights.balance * c("object_balance")
    hoi = weights.l2 * c("l2") + weights.vel * c("vel") + weights.dis * c("dis") + weights.inter * c("inter")
    total = stage_h + stage_o + hoi
    return total if isinstance(total, torch.Tensor) else torch.tensor(float(total))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    C_prec: float
    C_rec: float
    C_F1: float
    C_pct: float
    D_I: float
    diversity: float
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        d.update(d.pop("extra"))
        return d


def contact_metrics(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float, float, float]:
    """Precision, recall, F1 over all labels, and the fraction of frames with any predicted contact.

    Arrays are (S, ...) booleans; the first axis is frames. Zero denominators give 0.
    """
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"contact_metrics: shapes {pred.shape} and {gt.shape} differ")
    tp = np.sum(pred & gt)
    fp = np.sum(pred & ~gt)
    fn = np.sum(~pred & gt)
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    frames = pred.reshape(pred.shape[0], -1).any(axis=1) if pred.ndim > 1 else pred
    pct = float(frames.mean()) if frames.size else 0.0
    return float(prec), float(rec), float(f1), pct


def interaction_distance(pred_distances: np.ndarray, gt_distances: np.ndarray) -> float:
    """``|mean(pred) - mean(gt)|`` of hand-to-centroid distances."""
    return float(abs(np.mean(pred_distances) - np.mean(gt_distances)))


def diversity(features: np.ndarray, n_pairs: int = 300, seed: int = 0) -> float:
    """Mean Euclidean distance over ``n_pairs`` random index pairs (i != j when possible)."""
    x = np.asarray(features, dtype=np.float64)
    n = len(x)
    if n < 2:
        return 0.0
    rng = np.random.default_rng(seed)
    i = rng.integers(0, n, n_pairs)
    j = (i + rng.integers(1, n, n_pairs)) % n
    return float(np.linalg.norm(x[i] - x[j], axis=1).mean())


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(mu1, sigma1, mu2, sigma2) -> float:
    """Fréchet distance between Gaussians via symmetric eigendecompositions.

    ``tr((S1 S2)^{1/2})`` is evaluated as ``tr((S1^{1/2} S2 S1^{1/2})^{1/2})``,
    which is symmetric PSD and so needs only ``eigh``.
    """
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, np.float64)), np.atleast_1d(np.asarray(mu2, np.float64))
    s1, s2 = np.atleast_2d(np.asarray(sigma1, np.float64)), np.atleast_2d(np.asarray(sigma2, np.float64))
    if mu1.shape != mu2.shape or s1.shape != s2.shape or s1.shape != (len(mu1), len(mu1)):
        raise ValueError("frechet_distance: inconsistent shapes")
    r1 = _sqrt_psd(s1)
    inner = r1 @ s2 @ r1
    w = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_sqrt = np.sqrt(np.clip(w, 0, None)).sum()
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * tr_sqrt)


def gaussian_stats(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(features, dtype=np.float64)
    return x.mean(axis=0), np.cov(x, rowvar=False)
