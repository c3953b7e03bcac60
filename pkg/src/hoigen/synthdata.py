"""Deterministic kinematic generator of toy human-object interaction sequences.

Each template is a chain of object cycles ``approach -> grasp -> carry ->
place -> release``. The root walks between standing spots along smoothstep
paths, the active hand blends onto a grip point on the object, and while
held the object follows the hand. Everything in the enhanced object
representation, contacts included, is then derived from the kinematics.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .priors import AtomicEntry, AtomicMotionLibrary, Vocabulary, tokenize
from .representation import (
    DEFAULT_CONTACT_THRESHOLD,
    LEFT_WRIST,
    N_JOINTS,
    N_POINTS,
    RIGHT_WRIST,
    HumanMotion,
    ObjectGeometry,
    RawObjectMotion,
    SequenceRecord,
    derive_enhanced,
    flatten_human,
    flatten_object,
    matrix_to_rot6d,
)

PHASES = ("approach", "grasp", "carry", "place", "release")
_PHASE_WEIGHTS = np.array([0.25, 0.1, 0.35, 0.15, 0.15])

# local body frame: x forward, y left, z up; offsets from the pelvis (m)
_BODY = np.array([
    [0, 0, 0], [0, .1, -.08], [0, -.1, -.08], [0, 0, .12], [0, .1, -.48], [0, -.1, -.48],
    [0, 0, .25], [0, .1, -.85], [0, -.1, -.85], [0, 0, .38], [.1, .1, -.9], [.1, -.1, -.9],
    [0, 0, .55], [0, .08, .5], [0, -.08, .5], [0, 0, .7], [0, .18, .5], [0, -.18, .5],
    [.05, .22, .25], [.05, -.22, .25], [.15, .2, .05], [.15, -.2, .05],
], dtype=np.float64)
_FINGERS = np.array([[0.03 + 0.025 * (k // 3), 0.02 * (k % 3) - 0.02, -0.01 * (k // 3)] for k in range(15)])
_SHOULDER = {LEFT_WRIST: 16, RIGHT_WRIST: 17}
_ELBOW = {LEFT_WRIST: 18, RIGHT_WRIST: 19}
_FINGER_BASE = {LEFT_WRIST: 22, RIGHT_WRIST: 37}
PELVIS_HEIGHT = 0.9

DIRECTIONS = {
    "to the left": np.array([0.0, 1.0, 0.0]),
    "to the right": np.array([0.0, -1.0, 0.0]),
    "forward": np.array([1.0, 0.0, 0.0]),
    "backward": np.array([-1.0, 0.0, 0.0]),
}

# name -> (shape, nominal size xyz, support height)
OBJECTS = {
    "box": ("cuboid", (0.30, 0.30, 0.30), 0.0),
    "suitcase": ("cuboid", (0.45, 0.20, 0.60), 0.0),
    "chair": ("chair", (0.45, 0.45, 0.85), 0.0),
    "basket": ("cuboid", (0.40, 0.30, 0.25), 0.0),
    "bottle": ("cylinder", (0.08, 0.08, 0.25), 0.75),
    "lamp": ("cylinder", (0.15, 0.15, 0.45), 0.75),
}

GRIP_OFFSET = np.array([-0.06, 0.0, 0.04])


@dataclass(frozen=True)
class ScenarioTemplate:
    """Text and motion recipe; one object cycle per object.

    ``arc`` lifts the carry path, ``drop`` is the height the object is
    lowered from while placing and ``yaw_scale`` bounds its yaw change.
    """

    name: str
    n_objects: int
    text: str
    sub_actions: tuple[str, ...]
    atomic_labels: tuple[str, ...]
    arc: float = 0.15
    drop: float = 0.05
    yaw_scale: float = 0.5

    @property
    def phases(self) -> tuple[str, ...]:
        return PHASES * self.n_objects

    def render(self, objs: Sequence[str], dirs: Sequence[str]) -> tuple[str, list[str]]:
        slots = {}
        for i, (o, d) in enumerate(zip(objs, dirs)):
            slots[f"obj{i}"] = o
            slots[f"dir{i}"] = d
        return self.text.format(**slots), [s.format(**slots) for s in self.sub_actions]


TEMPLATES = (
    ScenarioTemplate(
        "pick-place", 1, "a person picks up the {obj0} and places it {dir0}",
        ("pick up the {obj0}", "place the {obj0} {dir0}"), ("pick up", "place"),
    ),
    ScenarioTemplate(
        "push", 1, "a person pushes the {obj0} {dir0}",
        ("walk to the {obj0}", "push the {obj0} {dir0}"), ("walk to", "push"),
        arc=0.0, drop=0.0, yaw_scale=0.0,
    ),
    ScenarioTemplate(
        "lift-carry-put", 1, "a person lifts the {obj0} high carries it {dir0} and puts it down",
        ("lift the {obj0} high", "carry the {obj0} {dir0} and put it down"), ("lift high", "put down"),
        arc=0.4, drop=0.1,
    ),
    ScenarioTemplate(
        "two-object-transfer", 2, "a person moves the {obj0} {dir0} and then moves the {obj1} {dir1}",
        ("pick up the {obj0}", "move the {obj0} {dir0}", "move the {obj1} {dir1}"),
        ("pick up", "move", "move"),
    ),
    ScenarioTemplate(
        "three-object-sequence", 3, "a person moves the {obj0} {dir0} then the {obj1} {dir1} then the {obj2} {dir2}",
        ("move the {obj0} {dir0}", "move the {obj1} {dir1}", "move the {obj2} {dir2}"),
        ("move", "move", "move"),
    ),
)
TEMPLATE_BY_NAME = {t.name: t for t in TEMPLATES}

ATOMIC_LABELS = ("pick up", "place", "walk to", "push", "lift high", "put down", "move", "carry")


class GenerationError(ValueError):
    pass


def vocabulary() -> Vocabulary:
    words = set()
    for t in TEMPLATES:
        for s in (t.text, *t.sub_actions):
            words.update(tokenize(s.replace("{", " ").replace("}", " ")))
    for name in OBJECTS:
        words.update(tokenize(name))
    for d in DIRECTIONS:
        words.update(tokenize(d))
    for lbl in ATOMIC_LABELS:
        words.update(tokenize(lbl))
    words -= {w for w in words if w.startswith(("obj", "dir")) and w[-1].isdigit()}
    return Vocabulary(sorted(words))


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def _cuboid_surface(rng, size, n):
    sx, sy, sz = size
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=(n, 3)) * np.array(size)
    axis = face // 2
    sign = np.where(face % 2 == 0, 0.5, -0.5)
    u[np.arange(n), axis] = sign * np.array(size)[axis]
    return u


def _cylinder_surface(rng, size, n):
    r, h = size[0] / 2, size[2]
    theta = rng.uniform(0, 2 * np.pi, n)
    z = rng.uniform(-h / 2, h / 2, n)
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def make_geometry(name: str, rng: np.random.Generator, n_points: int = N_POINTS, fps_seed: int = 0) -> ObjectGeometry:
    shape, size, _ = OBJECTS[name]
    size = np.array(size) * rng.uniform(0.9, 1.1, 3)
    if shape == "cylinder":
        pts = _cylinder_surface(rng, size, n_points)
    elif shape == "chair":
        seat = _cuboid_surface(rng, (size[0], size[1], 0.05), n_points // 2)
        back = _cuboid_surface(rng, (0.05, size[1], size[2] / 2), n_points - n_points // 2)
        back[:, 0] -= size[0] / 2
        back[:, 2] += size[2] / 4
        pts = np.concatenate([seat, back])
    else:
        pts = _cuboid_surface(rng, size, n_points)
    pts = pts - pts.mean(axis=0)
    return ObjectGeometry.from_points(pts, seed=fps_seed)


# ---------------------------------------------------------------------------
# kinematics
# ---------------------------------------------------------------------------

def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3 - 2 * u)


def _rz(yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


def phase_layout(n_cycles: int, frames: int, rng: np.random.Generator) -> list[tuple[str, int, int]]:
    """``(phase, start, stop)`` triples covering ``frames`` exactly; each phase >= 2 frames."""
    n = n_cycles * len(PHASES)
    if frames < 2 * n:
        raise GenerationError(f"{frames} frames cannot hold {n} phases of >= 2 frames")
    w = np.tile(_PHASE_WEIGHTS, n_cycles) * rng.uniform(0.8, 1.2, n)
    spare = frames - 2 * n
    extra = np.floor(w / w.sum() * spare).astype(int)
    for i in np.argsort(-(w / w.sum() * spare - extra))[: spare - extra.sum()]:
        extra[i] += 1
    lengths = 2 + extra
    out, start = [], 0
    for k, ln in enumerate(lengths):
        out.append((PHASES[k % len(PHASES)], start, start + int(ln)))
        start += int(ln)
    return out


def generate(template: ScenarioTemplate | str, seed: int, frames: int = 60, fps: float = 30.0,
             contact_threshold: float = DEFAULT_CONTACT_THRESHOLD, seq_id: str = "") -> SequenceRecord:
    if isinstance(template, str):
        template = TEMPLATE_BY_NAME[template]
    rng = np.random.default_rng(seed)
    layout = phase_layout(template.n_objects, frames, rng)

    names = list(rng.choice(sorted(OBJECTS), size=template.n_objects, replace=False))
    dirs = list(rng.choice(sorted(DIRECTIONS), size=template.n_objects))
    text, subs = template.render(names, dirs)
    geoms = [make_geometry(n, rng, fps_seed=int(rng.integers(1 << 31))) for n in names]

    # initial placements, spread across the person's front
    picks, places, yaws0, dyaws = [], [], [], []
    lateral = np.linspace(-0.5, 0.5, template.n_objects) if template.n_objects > 1 else np.zeros(1)
    for i, name in enumerate(names):
        half_h = np.ptp(geoms[i].points[:, 2]) / 2
        z = OBJECTS[name][2] + half_h
        p = np.array([1.2 + rng.uniform(0, 0.4), lateral[i] + rng.uniform(-0.15, 0.15), z])
        q = p + 0.6 * DIRECTIONS[dirs[i]] + np.r_[rng.uniform(-0.05, 0.05, 2), 0.0]
        picks.append(p)
        places.append(q)
        yaws0.append(rng.uniform(-np.pi, np.pi))
        dyaws.append(template.yaw_scale * rng.uniform(-1, 1))

    # object trajectories
    obj_t = [np.repeat(p[None], frames, 0) for p in picks]
    obj_yaw = [np.full(frames, y) for y in yaws0]
    hold = np.full(frames, -1)  # index of object held by the active hand per frame
    hand_side = [RIGHT_WRIST if i % 2 == 0 else LEFT_WRIST for i in range(template.n_objects)]
    cycles = [layout[i * 5:(i + 1) * 5] for i in range(template.n_objects)]
    for i, cyc in enumerate(cycles):
        (_, a0, a1), (_, g0, g1), (_, c0, c1), (_, p0, p1), (_, r0, r1) = cyc
        top = places[i] + np.array([0, 0, template.drop])
        u = _smoothstep((np.arange(c0, c1) - c0) / max(c1 - 1 - c0, 1))
        path = picks[i] + u[:, None] * (top - picks[i])
        path[:, 2] += template.arc * np.sin(np.pi * u)
        obj_t[i][c0:c1] = path
        v = _smoothstep((np.arange(p0, p1) - p0) / max(p1 - 1 - p0, 1))
        obj_t[i][p0:p1] = top + v[:, None] * (places[i] - top)
        obj_t[i][p1:] = places[i]
        obj_yaw[i][c0:c1] = yaws0[i] + u * dyaws[i]
        obj_yaw[i][c1:] = yaws0[i] + dyaws[i]
        hold[g0:p1] = i

    obj_R = [np.stack([_rz(y) for y in yaws]) for yaws in obj_yaw]
    grip = [obj_t[i] + np.einsum("sij,j->si", obj_R[i], GRIP_OFFSET) for i in range(template.n_objects)]

    # root path: stand spots in front of pick / place locations
    root = np.zeros((frames, 3))
    root[:, 2] = PELVIS_HEIGHT
    pos = np.array([0.0, 0.0, PELVIS_HEIGHT]) + np.r_[rng.uniform(-0.1, 0.1, 2), 0.0]
    focus = np.zeros((frames, 3))
    for i, cyc in enumerate(cycles):
        (_, a0, a1), (_, g0, g1), (_, c0, c1), (_, p0, p1), (_, r0, r1) = cyc
        stand_p = _stand_spot(pos, picks[i])
        u = _smoothstep((np.arange(a0, a1) - a0) / max(a1 - 1 - a0, 1))
        root[a0:a1] = pos + u[:, None] * (stand_p - pos)
        root[g0:c0] = stand_p
        stand_q = _stand_spot(stand_p, places[i])
        u = _smoothstep((np.arange(c0, c1) - c0) / max(c1 - 1 - c0, 1))
        root[c0:c1] = stand_p + u[:, None] * (stand_q - stand_p)
        root[p0:r1] = stand_q
        pos = stand_q
        focus[a0:r1] = np.where(np.arange(a0, r1)[:, None] < c0, picks[i], places[i])
    heading = np.arctan2(focus[:, 1] - root[:, 1], focus[:, 0] - root[:, 0])
    heading = np.unwrap(heading)

    # body joints
    joint_rng = np.random.default_rng(seed ^ 0x5EED)
    amp = joint_rng.uniform(0.0, 0.01, (N_JOINTS, 3))
    freq = joint_rng.uniform(0.5, 1.5, (N_JOINTS, 3))
    phase = joint_rng.uniform(0, 2 * np.pi, (N_JOINTS, 3))
    tt = np.arange(frames) / fps
    wobble = amp[None] * np.sin(2 * np.pi * freq[None] * tt[:, None, None] + phase[None])

    Rh = np.stack([_rz(h) for h in heading])
    joints = np.zeros((frames, N_JOINTS, 3))
    joints[:, :22] = root[:, None] + np.einsum("sij,kj->ski", Rh, _BODY)
    for side in (LEFT_WRIST, RIGHT_WRIST):
        rest = joints[:, side].copy()
        target = rest.copy()
        for i, cyc in enumerate(cycles):
            if hand_side[i] != side:
                continue
            (_, a0, a1), _, _, (_, p0, p1), (_, r0, r1) = cyc
            u = _smoothstep((np.arange(a0, a1) - a0) / max(a1 - 1 - a0, 1))
            target[a0:a1] = rest[a0:a1] + u[:, None] * (grip[i][a0:a1] - rest[a0:a1])
            target[a1:p1] = grip[i][a1:p1]
            u = _smoothstep((np.arange(r0, r1) - r0) / max(r1 - 1 - r0, 1))
            target[r0:r1] = grip[i][r0:r1] + u[:, None] * (rest[r0:r1] - grip[i][r0:r1])
        joints[:, side] = target
        shoulder = joints[:, _SHOULDER[side]]
        joints[:, _ELBOW[side]] = 0.5 * (shoulder + target) + np.array([0, 0, -0.08])
        base = _FINGER_BASE[side]
        joints[:, base:base + 15] = target[:, None] + np.einsum("sij,kj->ski", Rh, _FINGERS)
    wobble[:, [0, LEFT_WRIST, RIGHT_WRIST]] = 0.0
    wobble[:, 22:] = 0.0
    joints = joints + wobble
    root_translation = joints[:, 0].copy()

    rot_axis = joint_rng.normal(size=(N_JOINTS, 3))
    rot_axis /= np.linalg.norm(rot_axis, axis=1, keepdims=True)
    rot_amp = joint_rng.uniform(0.0, 0.3, N_JOINTS)
    rot_freq = joint_rng.uniform(0.3, 1.0, N_JOINTS)
    ang = rot_amp[None] * np.sin(2 * np.pi * rot_freq[None] * tt[:, None])
    local = Rotation.from_rotvec((ang[..., None] * rot_axis[None]).reshape(-1, 3)).as_matrix()
    local = local.reshape(frames, N_JOINTS, 3, 3)
    rotations = matrix_to_rot6d(np.einsum("sij,skjl->skil", Rh, local))

    human = HumanMotion(joints=joints, rotations=rotations, root_translation=root_translation)
    objects = []
    for i in range(template.n_objects):
        raw = RawObjectMotion(rotation=matrix_to_rot6d(obj_R[i]), translation=obj_t[i])
        enh = derive_enhanced(raw, geoms[i], joints[:, LEFT_WRIST], joints[:, RIGHT_WRIST], fps, contact_threshold)
        objects.append(flatten_object(enh))

    atomic_ids = [ATOMIC_LABELS.index(lbl) for lbl in template.atomic_labels]
    return SequenceRecord(
        fps=fps, text=text, human=flatten_human(human), objects=objects, geometry=geoms,
        atomic_id=atomic_ids, sub_actions=subs, seq_id=seq_id, template=template.name,
    )


def _stand_spot(current: np.ndarray, target: np.ndarray, reach: float = 0.45) -> np.ndarray:
    d = target[:2] - current[:2]
    n = np.linalg.norm(d)
    d = d / n if n > 1e-9 else np.array([1.0, 0.0])
    xy = target[:2] - reach * d
    return np.array([xy[0], xy[1], PELVIS_HEIGHT])


# ---------------------------------------------------------------------------
# atomic library and datasets
# ---------------------------------------------------------------------------

_ATOMIC_SOURCE = {
    "pick up": ("pick-place", "grasp"),
    "place": ("pick-place", "place"),
    "walk to": ("push", "approach"),
    "push": ("push", "carry"),
    "lift high": ("lift-carry-put", "carry"),
    "put down": ("lift-carry-put", "place"),
    "move": ("two-object-transfer", "carry"),
    "carry": ("lift-carry-put", "release"),
}


def atomic_library(seed: int = 0, frames: int = 60, fps: float = 30.0) -> AtomicMotionLibrary:
    """One representative pose per atomic action, taken mid-phase from a reference sequence."""
    entries = []
    for label in ATOMIC_LABELS:
        tname, phase = _ATOMIC_SOURCE[label]
        rec = generate(tname, seed, frames, fps)
        layout = phase_layout(TEMPLATE_BY_NAME[tname].n_objects, frames, np.random.default_rng(seed))
        _, a, b = next(p for p in layout if p[0] == phase)
        entries.append(AtomicEntry(label, rec.human[(a + b) // 2].copy()))
    return AtomicMotionLibrary(entries)


def _sequence_seed(seed: int, index: int) -> int:
    return int.from_bytes(hashlib.sha256(f"{seed}:{index}".encode()).digest()[:8], "little") >> 1


def is_validation(seq_id: str) -> bool:
    return int(hashlib.sha1(seq_id.encode()).hexdigest(), 16) % 10 == 0


@dataclass
class Dataset:
    sequences: list[SequenceRecord]
    train: list[str]
    val: list[str]
    vocab: Vocabulary
    library: AtomicMotionLibrary
    seed: int = 0

    def by_id(self) -> dict[str, SequenceRecord]:
        return {r.seq_id: r for r in self.sequences}

    def split(self, name: str) -> list[SequenceRecord]:
        if name not in ("train", "val"):
            raise ValueError(f"unknown split {name!r}; expected 'train' or 'val'")
        ids = set(self.train if name == "train" else self.val)
        return [r for r in self.sequences if r.seq_id in ids]

    def save(self, out: str | Path) -> None:
        out = Path(out)
        (out / "sequences").mkdir(parents=True, exist_ok=True)
        files = []
        for r in self.sequences:
            rel = f"sequences/{r.seq_id}.json"
            r.save(out / rel)
            files.append(rel)
        self.library.save(out / "atomic_library.json")
        manifest = {
            "seed": self.seed,
            "files": files,
            "train": self.train,
            "val": self.val,
            "vocabulary": self.vocab.to_json(),
            "atomic_library": "atomic_library.json",
            "templates": [t.name for t in TEMPLATES],
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1))

    @classmethod
    def load(cls, root: str | Path) -> "Dataset":
        root = Path(root)
        path = root / "manifest.json"
        if not path.exists():
            raise FileNotFoundError(f"dataset manifest missing: {path}")
        m = json.loads(path.read_text())
        seqs = [SequenceRecord.load(root / f) for f in m["files"]]
        return cls(seqs, m["train"], m["val"], Vocabulary.from_json(m["vocabulary"]),
                   AtomicMotionLibrary.load(root / m["atomic_library"]), m.get("seed", 0))


def build_dataset(n_sequences: int = 256, templates: Sequence[ScenarioTemplate] = TEMPLATES, seed: int = 0,
                  frames: int = 60, fps: float = 30.0) -> Dataset:
    """Round-robin template assignment; ~10% validation split by hash of the sequence id."""
    seqs = []
    for i in range(n_sequences):
        tpl = templates[i % len(templates)]
        sid = f"seq_{i:05d}"
        seqs.append(generate(tpl, _sequence_seed(seed, i), frames, fps, seq_id=sid))
    val = [r.seq_id for r in seqs if is_validation(r.seq_id)]
    train = [r.seq_id for r in seqs if not is_validation(r.seq_id)]
    return Dataset(seqs, train, val, vocabulary(), atomic_library(seed, frames, fps), seed)
