"""Synthetic skeleton clips with known actions, for desk-scale training runs.

Bodies use a 15-joint layout. Motion patterns:

* ``translate`` - whole body drifts sideways with a stepping gait
* ``wave``      - right forearm raised and oscillating
* ``crouch``    - body compresses vertically toward the ankles
* ``reach``     - right wrist travels to a target point; ``params["object"]``
  puts an object at the target (``"target"``), somewhere else
  (``"elsewhere"``) or nowhere (``"none"``)

Two ``reach`` classes that differ only in ``object`` have identical joint
distributions, so only object keypoints can tell them apart.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry
from .data import (
    ActorRecord,
    ClipRecord,
    FrameRecord,
    Header,
    ObjectRecord,
    PersonRecord,
    _Fields,
    dumps,
    parse_clip,
    save_clips,
)

JOINT_NAMES = [
    "neck", "belly", "face",
    "right_shoulder", "left_shoulder", "right_hip", "left_hip",
    "right_elbow", "left_elbow", "right_knee", "left_knee",
    "right_wrist", "left_wrist", "right_ankle", "left_ankle",
]  # fmt: skip
FLIP = [0, 1, 2, 4, 3, 6, 5, 8, 7, 10, 9, 12, 11, 14, 13]

# rest pose in body heights, neck at origin, image y downward; the person
# faces the camera so their right side is on the image left
REST = np.array([
    [0.00, 0.00], [0.00, 0.25], [0.00, -0.12],
    [-0.10, 0.02], [0.10, 0.02], [-0.07, 0.45], [0.07, 0.45],
    [-0.14, 0.18], [0.14, 0.18], [-0.08, 0.68], [0.08, 0.68],
    [-0.16, 0.33], [0.16, 0.33], [-0.08, 0.90], [0.08, 0.90],
])  # fmt: skip

R_SHOULDER, R_ELBOW, R_WRIST = 3, 7, 11
R_KNEE, L_KNEE, R_ANKLE, L_ANKLE = 9, 10, 13, 14
L_WRIST = 12
PATTERNS = ("translate", "wave", "crouch", "reach")


@dataclass
class ClassDef:
    name: str
    pattern: str
    params: dict = field(default_factory=dict)
    objects: bool = False

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown motion pattern {self.pattern!r}")
        if self.pattern == "reach":
            mode = self.params.get("object", "target" if self.objects else "none")
            if mode not in ("target", "elsewhere", "none"):
                raise ValueError(f"reach object mode {mode!r}")
            self.params = {**self.params, "object": mode}
            self.objects = mode != "none"


@dataclass
class SynthSpec:
    classes: list[ClassDef]
    clips_per_class: int = 50
    frames: int = 10
    jitter: float = 1.0
    seed: int = 0
    persons: int = 1
    width: float = 320.0
    height: float = 240.0
    fps: float = 5.0
    object_points: int = 8
    holdout: float = 0.2
    spread: float = 0.05  # fraction of the free placement range actually used

    def __post_init__(self):
        if len(self.classes) < 2:
            raise ValueError("a synthetic spec needs at least two classes")
        if len({c.name for c in self.classes}) != len(self.classes):
            raise ValueError("class names must be unique")
        if self.clips_per_class < 1 or self.frames < 1 or self.persons < 1:
            raise ValueError("clip count, frames and persons must be positive")
        if not 0.0 <= self.spread <= 1.0:
            raise ValueError("spread must lie in [0, 1]")

    @property
    def localization(self) -> bool:
        return self.persons > 1

    def to_obj(self) -> dict:
        return {
            "kind": "synthspec",
            "classes": [{"name": c.name, "pattern": c.pattern, "params": c.params, "objects": c.objects} for c in self.classes],
            "clips_per_class": self.clips_per_class,
            "frames": self.frames,
            "jitter": self.jitter,
            "seed": self.seed,
            "persons": self.persons,
            "width": self.width,
            "height": self.height,
            "fps": self.fps,
            "object_points": self.object_points,
            "holdout": self.holdout,
            "spread": self.spread,
        }

    @classmethod
    def from_obj(cls, obj: dict, where: str = "<spec>") -> "SynthSpec":
        f = _Fields(obj, where)
        if f.get("kind", str) != "synthspec":
            f.fail("kind", "expected 'synthspec'")
        classes = []
        for c in f.get("classes", list):
            cf = _Fields(c, where)
            try:
                classes.append(
                    ClassDef(
                        cf.get("name", str), cf.get("pattern", str), cf.get("params", dict, {}), cf.get("objects", bool, False)
                    )
                )
            except ValueError as exc:
                cf.fail("classes", str(exc))
        defaults = cls.__dataclass_fields__
        kw = {}
        for name, kind in (("clips_per_class", int), ("frames", int), ("seed", int), ("persons", int), ("object_points", int)):
            kw[name] = f.get(name, kind, defaults[name].default)
        for name in ("jitter", "width", "height", "fps", "holdout", "spread"):
            kw[name] = f.get(name, float, defaults[name].default)
        try:
            return cls(classes, **kw)
        except ValueError as exc:
            raise ValueError(f"{where}: {exc}") from None


def recognition_spec(seed: int = 0, clips_per_class: int = 50, frames: int = 10) -> SynthSpec:
    """Four single-actor classes; ``pick_up`` and ``mime_reach`` share their motion."""
    return SynthSpec(
        [
            ClassDef("walk", "translate"),
            ClassDef("wave", "wave"),
            ClassDef("pick_up", "reach", {"object": "target"}, True),
            ClassDef("mime_reach", "reach", {"object": "none"}, False),
        ],
        clips_per_class=clips_per_class,
        frames=frames,
        seed=seed,
    )


def localization_spec(seed: int = 0, clips_per_class: int = 50, frames: int = 6, persons: int = 3) -> SynthSpec:
    """Several actors per clip, each labelled with its own motion."""
    return SynthSpec(
        [
            ClassDef("walk", "translate"),
            ClassDef("wave", "wave"),
            ClassDef("crouch", "crouch"),
            ClassDef("reach", "reach", {"object": "none"}),
        ],
        clips_per_class=clips_per_class,
        frames=frames,
        persons=persons,
        seed=seed,
    )


# ---------------------------------------------------------------- motion


def _ease(u):
    return u * u * (3.0 - 2.0 * u)


def _pose_track(cls: ClassDef, frames: int, rng: np.random.Generator) -> tuple[np.ndarray, dict]:
    """Joint offsets in body heights, shape (T, 15, 2), plus pattern extras."""
    u = np.linspace(0.0, 1.0, frames) if frames > 1 else np.zeros(1)
    pose = np.repeat(REST[None], frames, axis=0).copy()
    extra: dict = {}
    if cls.pattern == "translate":
        direction = rng.choice([-1.0, 1.0])
        speed = rng.uniform(0.05, 0.07)  # body heights per frame
        # swings wider than a grid cell so the gait survives quantization
        step = 0.12 * np.sin(2.0 * math.pi * rng.uniform(1.0, 1.5) * u + rng.uniform(0, 2 * math.pi))
        pose[:, R_KNEE, 0] += step
        pose[:, R_ANKLE, 0] += 1.6 * step
        pose[:, L_KNEE, 0] -= step
        pose[:, L_ANKLE, 0] -= 1.6 * step
        pose[:, R_WRIST, 0] -= step
        pose[:, L_WRIST, 0] += step
        pose[..., 0] += (direction * speed * np.arange(frames))[:, None]
        extra["drift"] = direction * speed * (frames - 1)
    elif cls.pattern == "wave":
        cycles = rng.uniform(1.5, 2.5)
        phase = rng.uniform(0, 2 * math.pi)
        elbow = REST[R_SHOULDER] + np.array([-0.13, -0.08])
        pose[:, R_ELBOW] = elbow
        pose[:, R_WRIST, 0] = elbow[0] + 0.15 * np.sin(2 * math.pi * cycles * u + phase)
        pose[:, R_WRIST, 1] = elbow[1] - 0.14
    elif cls.pattern == "crouch":
        depth = rng.uniform(0.25, 0.4)
        squash = 1.0 - depth * np.sin(math.pi * u)
        base = REST[R_ANKLE, 1]
        pose[..., 1] = base - (base - pose[..., 1]) * squash[:, None]
        spread = 0.06 * depth * np.sin(math.pi * u)
        pose[:, R_KNEE, 0] -= spread
        pose[:, L_KNEE, 0] += spread
    elif cls.pattern == "reach":
        angle = rng.uniform(0.35 * math.pi, 0.85 * math.pi)  # down and to the image left
        reach = rng.uniform(0.4, 0.55)
        target = REST[R_SHOULDER] + reach * np.array([math.cos(angle) * -1.0, math.sin(angle)])
        w = _ease(u)[:, None]
        wrist = (1 - w) * REST[R_WRIST] + w * target
        pose[:, R_WRIST] = wrist
        mid = 0.5 * (REST[R_SHOULDER] + wrist)
        pose[:, R_ELBOW] = mid + np.array([-0.03, 0.02])
        extra["target"] = target
    return pose, extra


def _render_object(rng: np.random.Generator, k: int) -> tuple[np.ndarray, geometry.BinaryMask]:
    """Contour keypoints of a random ellipse or rectangle, centred at the origin."""
    rx, ry = rng.uniform(5.0, 12.0), rng.uniform(5.0, 12.0)
    size_x, size_y = int(math.ceil(rx)) * 2 + 3, int(math.ceil(ry)) * 2 + 3
    yy, xx = np.mgrid[0:size_y, 0:size_x]
    cx, cy = (size_x - 1) / 2.0, (size_y - 1) / 2.0
    if rng.random() < 0.5:
        bits = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    else:
        bits = (np.abs(xx - cx) <= rx) & (np.abs(yy - cy) <= ry)
    mask = geometry.BinaryMask(bits)
    return geometry.object_keypoints(mask, k) - np.array([cx, cy]), mask


def _box(points: np.ndarray, margin: float, width: float, height: float) -> tuple[float, float, float, float]:
    x1, y1 = points.min(axis=0) - margin
    x2, y2 = points.max(axis=0) + margin
    return (max(0.0, x1), max(0.0, y1), min(width, x2), min(height, y2))


def _place(rng: np.random.Generator, lo: float, hi: float, spread: float) -> float:
    """Uniform draw from the central ``spread`` fraction of [lo, hi]."""
    mid = 0.5 * (lo + hi)
    if hi <= lo:
        return mid
    return mid + spread * (rng.uniform(lo, hi) - mid)


def _clip(spec: SynthSpec, index: int, class_ids: list[int], masks_dir: Path | None, names: list[str]) -> ClipRecord:
    rng = np.random.default_rng([spec.seed, index])
    t_len = spec.frames
    slot = spec.width / len(class_ids)
    tracks = []
    objects: list[ObjectRecord] = []
    for a, ci in enumerate(class_ids):
        cls = spec.classes[ci]
        scale = 72.5 + spec.spread * rng.uniform(-12.5, 12.5)
        offsets, extra = _pose_track(cls, t_len, rng)
        drift = extra.get("drift", 0.0) * scale
        lo = a * slot + 0.22 * scale + max(0.0, -drift)
        hi = (a + 1) * slot - 0.22 * scale - max(0.0, drift)
        neck_x = _place(rng, lo, hi, spec.spread)
        neck_y = _place(rng, 0.15 * scale + 4.0, spec.height - 0.95 * scale - 4.0, spec.spread)
        pts = offsets * scale + np.array([neck_x, neck_y])
        pts = pts + rng.normal(0.0, spec.jitter, pts.shape)
        pts[..., 0] = np.clip(pts[..., 0], 0.0, spec.width - 1e-3)
        pts[..., 1] = np.clip(pts[..., 1], 0.0, spec.height - 1e-3)
        conf = rng.uniform(0.85, 1.0, pts.shape[:2])
        score = rng.uniform(0.8, 1.0)
        tracks.append((pts, conf, score, scale))
        mode = cls.params.get("object") if cls.pattern == "reach" else None
        if mode in ("target", "elsewhere"):
            contour, mask = _render_object(rng, spec.object_points)
            target = extra["target"] * scale + np.array([neck_x, neck_y])
            if mode == "elsewhere":
                for _ in range(100):
                    centre = np.array([rng.uniform(15, spec.width - 15), rng.uniform(15, spec.height - 15)])
                    if np.linalg.norm(centre - target) > 0.6 * scale:
                        break
            else:
                centre = target
            obj_score = float(rng.uniform(0.7, 1.0))
            if masks_dir is not None:
                name = f"c{index:04d}_o{len(objects)}.pgm"
                geometry.write_pgm(masks_dir / name, mask)
                origin = (float(centre[0] - (mask.width - 1) / 2.0), float(centre[1] - (mask.height - 1) / 2.0))
                objects.append(ObjectRecord(obj_score, None, f"{masks_dir.name}/{name}", origin))
            else:
                objects.append(ObjectRecord(obj_score, contour + centre))
    keyframe = t_len // 2
    frames = []
    for t in range(t_len):
        persons = []
        for a, (pts, conf, score, scale) in enumerate(tracks):
            joints = np.concatenate([pts[t], conf[t][:, None]], axis=1)
            persons.append(PersonRecord(_box(pts[t], 0.08 * scale, spec.width, spec.height), score, joints, a))
        frames.append(FrameRecord(t, persons))
    actors = []
    label = None
    if spec.localization:
        for a, (pts, _, _, scale) in enumerate(tracks):
            actors.append(ActorRecord(_box(pts[keyframe], 0.08 * scale, spec.width, spec.height), [names[class_ids[a]]], a))
    else:
        label = names[class_ids[0]]
    return ClipRecord(f"c{index:04d}", spec.width, spec.height, spec.fps, keyframe, frames, objects, label, actors)


def _snap(clip: ClipRecord, header: Header) -> ClipRecord:
    """Round every float to the six decimals the file format stores."""
    return parse_clip(json.loads(dumps(clip.to_obj())), header, f"<synthetic {clip.id}>")


def header_for(spec: SynthSpec) -> Header:
    return Header([c.name for c in spec.classes], len(JOINT_NAMES), list(FLIP), spec.object_points, list(JOINT_NAMES))


def generate_synthetic(spec: SynthSpec, masks_dir: Path | None = None) -> tuple[Header, list[ClipRecord]]:
    """Deterministic clips, ``clips_per_class`` per class (by first actor in multi-actor clips)."""
    header = header_for(spec)
    names = header.classes
    n_cls = len(spec.classes)
    clips = []
    for i in range(spec.clips_per_class * n_cls):
        primary = i % n_cls
        ids = [primary]
        if spec.persons > 1:
            pick = np.random.default_rng([spec.seed, i, 1]).integers(0, n_cls, spec.persons - 1)
            ids += [int(c) for c in pick]
        clips.append(_clip(spec, i, ids, masks_dir, names))
    return header, [_snap(c, header) for c in clips]


def split(clips: list[ClipRecord], holdout: float, n_classes: int) -> tuple[list[ClipRecord], list[ClipRecord]]:
    """Every ``round(1/holdout)``-th round of classes goes to the test side (stratified)."""
    if not 0.0 < holdout < 1.0:
        return list(clips), []
    period = max(2, int(round(1.0 / holdout)))
    train, test = [], []
    for i, c in enumerate(clips):
        (test if (i // n_classes) % period == period - 1 else train).append(c)
    return train, test


def write_dataset(spec: SynthSpec, out_dir, with_masks: bool = False) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    masks = None
    if with_masks:
        masks = out / "masks"
        masks.mkdir(exist_ok=True)
    header, clips = generate_synthetic(spec, masks)
    train, test = split(clips, spec.holdout, len(spec.classes))
    paths = {"train": out / "train.knd", "test": out / "test.knd"}
    save_clips(paths["train"], header, train)
    save_clips(paths["test"], header, test)
    return paths


# ---------------------------------------------------------------- oracle


def _human_features(clip: ClipRecord) -> np.ndarray:
    """Wrist path summary: start, end and mid positions relative to the neck, in body heights."""
    joints = np.stack([fr.persons[0].joints[:, :2] for fr in clip.frames])
    height = max(joints[0, R_ANKLE, 1] - joints[0, 2, 1], 1e-6)
    rel = (joints[:, R_WRIST] - joints[:, 0]) / height
    return np.concatenate([rel[0], rel[len(rel) // 2], rel[-1]])


def _object_features(clip: ClipRecord) -> np.ndarray:
    if not clip.objects or clip.objects[0].points is None:
        return np.array([0.0, 0.0, 0.0])
    wrist = clip.frames[-1].persons[0].joints[R_WRIST, :2]
    centre = clip.objects[0].points.mean(axis=0)
    return np.concatenate([[1.0], (centre - wrist) / 100.0])


def _nearest_centroid(features: np.ndarray, labels: np.ndarray) -> float:
    """Two-fold nearest-centroid accuracy on z-scored features."""
    mu, sd = features.mean(axis=0), features.std(axis=0)
    z = (features - mu) / np.where(sd > 0, sd, 1.0)
    folds = np.zeros(len(labels), dtype=int)
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        folds[members] = np.arange(members.size) % 2
    correct = 0
    for f in (0, 1):
        tr, te = folds != f, folds == f
        classes = np.unique(labels[tr])
        cents = np.stack([z[tr & (labels == c)].mean(axis=0) for c in classes])
        d = ((z[te][:, None, :] - cents[None]) ** 2).sum(axis=2)
        correct += int((classes[d.argmin(axis=1)] == labels[te]).sum())
    return correct / len(labels)


def centroid_oracle(clips: list[ClipRecord], pair: tuple[str, str]) -> dict[str, float]:
    """Nearest-centroid accuracy on the two classes, without and with object features."""
    chosen = [c for c in clips if c.label in pair]
    labels = np.array([pair.index(c.label) for c in chosen])
    human = np.stack([_human_features(c) for c in chosen])
    objects = np.stack([_object_features(c) for c in chosen])
    return {
        "human_only": _nearest_centroid(human, labels),
        "object_aware": _nearest_centroid(np.concatenate([human, objects], axis=1), labels),
    }


def ambiguous_pairs(spec: SynthSpec) -> list[tuple[str, str]]:
    """Class pairs whose joint motion is generated identically."""
    pairs = []
    for i, a in enumerate(spec.classes):
        for b in spec.classes[i + 1 :]:
            same = a.pattern == b.pattern and {k: v for k, v in a.params.items() if k != "object"} == {
                k: v for k, v in b.params.items() if k != "object"
            }
            if same and a.params.get("object") != b.params.get("object"):
                pairs.append((a.name, b.name))
    return pairs
