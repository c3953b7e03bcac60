"""Human and enhanced-object motion representations.

Per-frame layouts (fixed; all other modules index through the slices here):

human, 471 wide
    joint positions 52x3 | joint rotations 52x6 (6D) | root translation 3

object, 170 wide
    rotation 6 (6D) | translation 3 | translational velocity 3 |
    angular velocity 3 | keypoints 51x3 (last = centroid) | contact 2 (L, R)

6D rotations are the first two columns of the rotation matrix, stacked
``[c0x, c0y, c0z, c1x, c1y, c1z]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

N_JOINTS = 52
N_KEYPOINTS = 51
N_SAMPLED_KEYPOINTS = 50
N_POINTS = 1024
HUMAN_DIM = N_JOINTS * 3 + N_JOINTS * 6 + 3
OBJECT_DIM = 6 + 3 + 3 + 3 + N_KEYPOINTS * 3 + 2

# wrist joints of the 52-joint skeleton
LEFT_WRIST = 20
RIGHT_WRIST = 21
HAND_JOINTS = (LEFT_WRIST, RIGHT_WRIST)

DEFAULT_CONTACT_THRESHOLD = 0.12

HUMAN_POS = slice(0, 156)
HUMAN_ROT = slice(156, 468)
HUMAN_TRANS = slice(468, 471)

OBJ_ROT = slice(0, 6)
OBJ_TRANS = slice(6, 9)
OBJ_VEL = slice(9, 12)
OBJ_ANGVEL = slice(12, 15)
OBJ_KEYPOINTS = slice(15, 168)
OBJ_CENTROID = slice(165, 168)
OBJ_CONTACT = slice(168, 170)
OBJ_BASIC = slice(0, 9)

assert HUMAN_DIM == 471 and OBJECT_DIM == 170


class RepresentationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# rotations
# ---------------------------------------------------------------------------

def rot6d_to_matrix(r6: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Gram-Schmidt decode of ``(..., 6)`` to ``(..., 3, 3)`` rotation matrices."""
    r6 = np.asarray(r6, dtype=np.float64)
    if r6.shape[-1] != 6:
        raise RepresentationError(f"rot6d_to_matrix: expected trailing dim 6, got {r6.shape}")
    a1, a2 = r6[..., :3], r6[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 < eps):
        raise RepresentationError("rot6d_to_matrix: first column is zero")
    b1 = a1 / n1
    u2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    if np.any(n2 < eps):
        raise RepresentationError("rot6d_to_matrix: columns are parallel (degenerate 6D rotation)")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def matrix_to_rot6d(mat: np.ndarray) -> np.ndarray:
    mat = np.asarray(mat, dtype=np.float64)
    return np.concatenate([mat[..., :, 0], mat[..., :, 1]], axis=-1)


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------

@dataclass
class HumanMotion:
    joints: np.ndarray  # S x 52 x 3
    rotations: np.ndarray  # S x 52 x 6
    root_translation: np.ndarray  # S x 3

    @property
    def frames(self) -> int:
        return self.joints.shape[0]

    def validate(self, tol: float = 1e-4) -> None:
        s = self.frames
        for name, arr, shape in (
            ("joints", self.joints, (s, N_JOINTS, 3)),
            ("rotations", self.rotations, (s, N_JOINTS, 6)),
            ("root_translation", self.root_translation, (s, 3)),
        ):
            if arr.shape != shape:
                raise RepresentationError(f"HumanMotion.{name}: expected {shape}, got {arr.shape}")
        _check_rotations(self.rotations, tol, "HumanMotion.rotations")


@dataclass
class RawObjectMotion:
    rotation: np.ndarray  # S x 6
    translation: np.ndarray  # S x 3

    @property
    def frames(self) -> int:
        return self.rotation.shape[0]


@dataclass
class ObjectGeometry:
    points: np.ndarray  # K x 3, canonical frame
    keypoints: np.ndarray  # 51 x 3, last row is the centroid

    @classmethod
    def from_points(cls, points: np.ndarray, seed: int = 0) -> "ObjectGeometry":
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3 or len(points) < 1:
            raise RepresentationError(f"ObjectGeometry: points must be Kx3, got {points.shape}")
        sampled = farthest_point_sample(points, N_SAMPLED_KEYPOINTS, seed)
        kp = np.concatenate([sampled, points.mean(axis=0, keepdims=True)], axis=0)
        return cls(points=points, keypoints=kp)

    @property
    def centroid(self) -> np.ndarray:
        return self.keypoints[-1]

    def validate(self, tol: float = 1e-6) -> None:
        if self.keypoints.shape != (N_KEYPOINTS, 3):
            raise RepresentationError(
                f"ObjectGeometry.keypoints: expected {(N_KEYPOINTS, 3)}, got {self.keypoints.shape}"
            )
        if np.abs(self.keypoints[-1] - self.points.mean(axis=0)).max() > tol:
            raise RepresentationError("ObjectGeometry: last keypoint is not the point-cloud centroid")

    def to_json(self) -> dict:
        return {"points": self.points.tolist(), "keypoints": self.keypoints.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "ObjectGeometry":
        pts = np.asarray(d["points"], dtype=np.float64)
        if "keypoints" not in d:
            return cls.from_points(pts)
        return cls(points=pts, keypoints=np.asarray(d["keypoints"], dtype=np.float64))


@dataclass
class EnhancedObjectMotion:
    rotation: np.ndarray  # S x 6
    translation: np.ndarray  # S x 3
    velocity: np.ndarray  # S x 3, m/s
    angular_velocity: np.ndarray  # S x 3, rad/s
    keypoints: np.ndarray  # S x 51 x 3
    contact: np.ndarray  # S x 2 (left, right)

    @property
    def frames(self) -> int:
        return self.rotation.shape[0]

    @property
    def centroid(self) -> np.ndarray:
        return self.keypoints[:, -1]

    def validate(self, tol: float = 1e-4) -> None:
        s = self.frames
        for name, arr, shape in (
            ("rotation", self.rotation, (s, 6)),
            ("translation", self.translation, (s, 3)),
            ("velocity", self.velocity, (s, 3)),
            ("angular_velocity", self.angular_velocity, (s, 3)),
            ("keypoints", self.keypoints, (s, N_KEYPOINTS, 3)),
            ("contact", self.contact, (s, 2)),
        ):
            if arr.shape != shape:
                raise RepresentationError(f"EnhancedObjectMotion.{name}: expected {shape}, got {arr.shape}")
        _check_rotations(self.rotation, tol, "EnhancedObjectMotion.rotation")


def _check_rotations(r6: np.ndarray, tol: float, what: str) -> None:
    if not np.all(np.isfinite(r6)):
        raise RepresentationError(f"{what}: non-finite values")
    mats = rot6d_to_matrix(r6)
    det = np.linalg.det(mats)
    if np.abs(det - 1.0).max() > tol:
        raise RepresentationError(f"{what}: orthonormalised determinant deviates from +1")


# ---------------------------------------------------------------------------
# derivation
# ---------------------------------------------------------------------------

def farthest_point_sample(points: np.ndarray, n: int, seed: int = 0) -> np.ndarray:
    """Greedy farthest-point sampling; the start point is drawn from ``seed``."""
    points = np.asarray(points, dtype=np.float64)
    k = len(points)
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(k))]
    dist = np.linalg.norm(points - points[chosen[0]], axis=1)
    for _ in range(1, n):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return points[chosen]


def angular_velocity(rot6d: np.ndarray, fps: float) -> np.ndarray:
    """Axis-angle of ``R[i]^T R[i+1]`` times ``fps``; last frame repeats."""
    mats = rot6d_to_matrix(rot6d)
    rel = np.einsum("sji,sjk->sik", mats[:-1], mats[1:])
    w = Rotation.from_matrix(rel).as_rotvec() * fps
    return np.concatenate([w, w[-1:]], axis=0)


def linear_velocity(translation: np.ndarray, fps: float) -> np.ndarray:
    v = np.diff(translation, axis=0) * fps
    return np.concatenate([v, v[-1:]], axis=0)


def contact_labels(hands: np.ndarray, centroid: np.ndarray, threshold: float) -> np.ndarray:
    """``hands``: S x 2 x 3 (left, right); ``centroid``: S x 3 -> S x 2 in {0, 1}."""
    d = np.linalg.norm(hands - centroid[:, None, :], axis=-1)
    return (d < threshold).astype(np.float64)


def derive_enhanced(
    raw: RawObjectMotion,
    geom: ObjectGeometry,
    left_hand: np.ndarray,
    right_hand: np.ndarray,
    fps: float,
    contact_threshold: float = DEFAULT_CONTACT_THRESHOLD,
) -> EnhancedObjectMotion:
    s = raw.frames
    if s < 2:
        raise RepresentationError(f"derive_enhanced: need at least 2 frames, got {s}")
    if fps <= 0 or contact_threshold <= 0:
        raise RepresentationError("derive_enhanced: fps and contact_threshold must be positive")
    rot = np.asarray(raw.rotation, dtype=np.float64)
    trans = np.asarray(raw.translation, dtype=np.float64)
    mats = rot6d_to_matrix(rot)
    kp = np.einsum("sij,kj->ski", mats, geom.keypoints) + trans[:, None, :]
    hands = np.stack([left_hand, right_hand], axis=1)
    return EnhancedObjectMotion(
        rotation=rot,
        translation=trans,
        velocity=linear_velocity(trans, fps),
        angular_velocity=angular_velocity(rot, fps),
        keypoints=kp,
        contact=contact_labels(hands, kp[:, -1], contact_threshold),
    )


def hand_positions(human: HumanMotion) -> np.ndarray:
    return human.joints[:, list(HAND_JOINTS)]


# ---------------------------------------------------------------------------
# flat layouts
# ---------------------------------------------------------------------------

def flatten_human(h: HumanMotion) -> np.ndarray:
    s = h.frames
    return np.concatenate(
        [h.joints.reshape(s, -1), h.rotations.reshape(s, -1), h.root_translation], axis=1
    )


def unflatten_human(x: np.ndarray) -> HumanMotion:
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != HUMAN_DIM:
        raise RepresentationError(f"unflatten_human: expected width {HUMAN_DIM}, got shape {x.shape}")
    s = x.shape[0]
    return HumanMotion(
        joints=x[:, HUMAN_POS].reshape(s, N_JOINTS, 3).copy(),
        rotations=x[:, HUMAN_ROT].reshape(s, N_JOINTS, 6).copy(),
        root_translation=x[:, HUMAN_TRANS].copy(),
    )


def flatten_object(o: EnhancedObjectMotion) -> np.ndarray:
    s = o.frames
    return np.concatenate(
        [o.rotation, o.translation, o.velocity, o.angular_velocity, o.keypoints.reshape(s, -1), o.contact],
        axis=1,
    )


def unflatten_object(x: np.ndarray) -> EnhancedObjectMotion:
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != OBJECT_DIM:
        raise RepresentationError(f"unflatten_object: expected width {OBJECT_DIM}, got shape {x.shape}")
    s = x.shape[0]
    return EnhancedObjectMotion(
        rotation=x[:, OBJ_ROT].copy(),
        translation=x[:, OBJ_TRANS].copy(),
        velocity=x[:, OBJ_VEL].copy(),
        angular_velocity=x[:, OBJ_ANGVEL].copy(),
        keypoints=x[:, OBJ_KEYPOINTS].reshape(s, N_KEYPOINTS, 3).copy(),
        contact=x[:, OBJ_CONTACT].copy(),
    )


def flatten(record: HumanMotion | EnhancedObjectMotion) -> np.ndarray:
    if isinstance(record, HumanMotion):
        return flatten_human(record)
    if isinstance(record, EnhancedObjectMotion):
        return flatten_object(record)
    raise TypeError(f"flatten: unsupported record type {type(record).__name__}")


def unflatten(x: np.ndarray) -> HumanMotion | EnhancedObjectMotion:
    width = np.shape(x)[-1]
    if width == HUMAN_DIM:
        return unflatten_human(x)
    if width == OBJECT_DIM:
        return unflatten_object(x)
    raise RepresentationError(
        f"unflatten: width {width} matches neither human ({HUMAN_DIM}) nor object ({OBJECT_DIM})"
    )


# ---------------------------------------------------------------------------
# interchange format
# ---------------------------------------------------------------------------

@dataclass
class SequenceRecord:
    """One HOI sequence in the JSON interchange format.

    ``sub_actions`` and ``template`` are optional extras on top of the core
    fields (``fps``, ``text``, ``human``, ``objects``, ``geometry``,
    ``atomic_id``); ``atomic_id`` holds one library index per sub-action.
    """

    fps: float
    text: str
    human: np.ndarray  # S x 471
    objects: list[np.ndarray]  # N_o arrays, S x 170
    geometry: list[ObjectGeometry]
    atomic_id: list[int] = field(default_factory=list)
    sub_actions: list[str] = field(default_factory=list)
    seq_id: str = ""
    template: str = ""

    @property
    def frames(self) -> int:
        return self.human.shape[0]

    def validate(self) -> None:
        if self.human.ndim != 2 or self.human.shape[1] != HUMAN_DIM:
            raise RepresentationError(f"human: expected S x {HUMAN_DIM}, got {self.human.shape}")
        unflatten_human(self.human).validate()
        if not self.objects:
            raise RepresentationError("record has no objects")
        if len(self.geometry) != len(self.objects):
            raise RepresentationError(
                f"{len(self.objects)} objects but {len(self.geometry)} geometries"
            )
        for i, o in enumerate(self.objects):
            if o.shape != (self.frames, OBJECT_DIM):
                raise RepresentationError(
                    f"object {i}: expected {(self.frames, OBJECT_DIM)}, got {o.shape}"
                )
            unflatten_object(o).validate()
        for g in self.geometry:
            g.validate()

    def to_json(self) -> dict:
        return {
            "id": self.seq_id,
            "template": self.template,
            "fps": self.fps,
            "text": self.text,
            "sub_actions": list(self.sub_actions),
            "atomic_id": list(self.atomic_id),
            "human": self.human.tolist(),
            "objects": [o.tolist() for o in self.objects],
            "geometry": [g.to_json() for g in self.geometry],
        }

    @classmethod
    def from_json(cls, d: dict) -> "SequenceRecord":
        atomic = d.get("atomic_id", [])
        if isinstance(atomic, int):
            atomic = [atomic]
        return cls(
            fps=float(d["fps"]),
            text=d["text"],
            human=np.asarray(d["human"], dtype=np.float64),
            objects=[np.asarray(o, dtype=np.float64) for o in d["objects"]],
            geometry=[ObjectGeometry.from_json(g) for g in d["geometry"]],
            atomic_id=list(atomic),
            sub_actions=list(d.get("sub_actions", [])),
            seq_id=d.get("id", ""),
            template=d.get("template", ""),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json(), separators=(",", ":"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "SequenceRecord":
        return cls.from_json(json.loads(Path(path).read_text()))
