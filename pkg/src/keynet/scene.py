"""Scene sequences, their four token streams, and keypoint-space augmentation."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np


class Keypoint(NamedTuple):
    x: float
    y: float
    valid: bool = True


@dataclass(frozen=True)
class SceneConfig:
    grid_w: int = 32
    grid_h: int = 24
    frames: int = 10  # T
    persons: int = 5  # N
    objects: int = 3  # M
    joints: int = 17  # k_h
    object_points: int = 8  # k_o

    def __post_init__(self):
        for name in ("grid_w", "grid_h", "frames", "persons", "joints", "object_points"):
            if getattr(self, name) < 1:
                raise ValueError(f"SceneConfig.{name} must be positive")
        if self.objects < 0:
            raise ValueError("SceneConfig.objects must be >= 0")

    @property
    def length(self) -> int:
        return self.persons * self.frames * self.joints + self.objects * self.object_points

    @property
    def human_length(self) -> int:
        return self.persons * self.frames * self.joints

    @property
    def position_vocab(self) -> int:
        return self.grid_w * self.grid_h + 1

    @property
    def type_vocab(self) -> int:
        return self.joints + self.object_points + 1

    @property
    def segment_vocab(self) -> int:
        return self.frames + 1

    @property
    def instance_vocab(self) -> int:
        return self.persons + self.objects + 1


@dataclass
class SceneSequence:
    """Keypoints of N actors over T frames plus M keyframe objects.

    Invalid keypoints hold (0, 0). ``keyframe`` is 1-based.
    """

    width: float
    height: float
    humans: np.ndarray  # (N, T, k_h, 2)
    human_valid: np.ndarray  # (N, T, k_h)
    objects: np.ndarray  # (M, k_o, 2)
    object_valid: np.ndarray  # (M, k_o)
    keyframe: int = 1
    label: int | None = None
    actor_labels: np.ndarray | None = None  # (N, C) multi-hot
    actor_boxes: np.ndarray | None = None  # (N, 4) keyframe boxes
    clip_id: str = ""

    def __post_init__(self):
        self.humans = np.asarray(self.humans, dtype=np.float64)
        self.human_valid = np.asarray(self.human_valid, dtype=bool)
        self.objects = np.asarray(self.objects, dtype=np.float64)
        self.object_valid = np.asarray(self.object_valid, dtype=bool)
        self.humans[~self.human_valid] = 0.0
        self.objects[~self.object_valid] = 0.0

    @property
    def num_persons(self) -> int:
        return self.humans.shape[0]

    @property
    def num_frames(self) -> int:
        return self.humans.shape[1]

    @property
    def num_objects(self) -> int:
        return self.objects.shape[0]

    @classmethod
    def empty(cls, cfg: SceneConfig, width=320.0, height=240.0) -> "SceneSequence":
        return cls(
            width,
            height,
            np.zeros((0, cfg.frames, cfg.joints, 2)),
            np.zeros((0, cfg.frames, cfg.joints), bool),
            np.zeros((0, cfg.object_points, 2)),
            np.zeros((0, cfg.object_points), bool),
        )

    def copy(self) -> "SceneSequence":
        return replace(
            self,
            humans=self.humans.copy(),
            human_valid=self.human_valid.copy(),
            objects=self.objects.copy(),
            object_valid=self.object_valid.copy(),
            actor_boxes=None if self.actor_boxes is None else self.actor_boxes.copy(),
        )


@dataclass
class TokenizedScene:
    position: np.ndarray
    type: np.ndarray
    segment: np.ndarray
    instance: np.ndarray
    mask: np.ndarray

    def __len__(self) -> int:
        return self.position.shape[-1]

    def streams(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return self.position, self.type, self.segment, self.instance

    @classmethod
    def stack(cls, scenes: list["TokenizedScene"]) -> "TokenizedScene":
        return cls(*(np.stack([getattr(s, f) for s in scenes]) for f in ("position", "type", "segment", "instance", "mask")))

    def select(self, rows) -> "TokenizedScene":
        return TokenizedScene(self.position[rows], self.type[rows], self.segment[rows], self.instance[rows], self.mask[rows])


# ---------------------------------------------------------------- tokens


def quantize_cells(x, y, width, height, grid_w, grid_h):
    """1-based grid cells; coordinates outside the image are clamped."""
    cx = np.floor(np.asarray(x, dtype=np.float64) / width * grid_w).astype(np.int64) + 1
    cy = np.floor(np.asarray(y, dtype=np.float64) / height * grid_h).astype(np.int64) + 1
    return np.clip(cx, 1, grid_w), np.clip(cy, 1, grid_h)


def quantize_position(kp: Keypoint, width: float, height: float, grid_w: int, grid_h: int) -> int:
    """Row-major flat cell id in ``[1, grid_w * grid_h]``; 0 for invalid points."""
    if not kp.valid:
        return 0
    cx, cy = quantize_cells(kp.x, kp.y, width, height, grid_w, grid_h)
    return int((cy - 1) * grid_w + cx)


def tokenize_scene(scene: SceneSequence, cfg: SceneConfig) -> TokenizedScene:
    """Flatten a scene into position/type/segment/instance streams.

    Humans come first (person, then frame, then joint), then objects (object,
    then contour point). Slots with no valid keypoint are zero in every stream.
    """
    n_have = min(scene.num_persons, cfg.persons)
    m_have = min(scene.num_objects, cfg.objects)
    if scene.num_persons and (scene.num_frames != cfg.frames or scene.humans.shape[2] != cfg.joints):
        raise ValueError(f"scene humans {scene.humans.shape[1:3]} do not match config T={cfg.frames}, k_h={cfg.joints}")
    if scene.num_objects and scene.objects.shape[1] != cfg.object_points:
        raise ValueError(f"scene objects carry {scene.objects.shape[1]} points, config k_o={cfg.object_points}")

    h_shape = (cfg.persons, cfg.frames, cfg.joints)
    h_valid = np.zeros(h_shape, bool)
    h_valid[:n_have] = scene.human_valid[:n_have]
    hx = np.zeros(h_shape)
    hy = np.zeros(h_shape)
    hx[:n_have] = scene.humans[:n_have, ..., 0]
    hy[:n_have] = scene.humans[:n_have, ..., 1]
    n_idx, t_idx, k_idx = np.indices(h_shape)

    o_shape = (cfg.objects, cfg.object_points)
    o_valid = np.zeros(o_shape, bool)
    o_valid[:m_have] = scene.object_valid[:m_have]
    ox = np.zeros(o_shape)
    oy = np.zeros(o_shape)
    ox[:m_have] = scene.objects[:m_have, :, 0]
    oy[:m_have] = scene.objects[:m_have, :, 1]
    j_idx, i_idx = np.indices(o_shape)

    valid = np.concatenate([h_valid.ravel(), o_valid.ravel()])
    cx, cy = quantize_cells(
        np.concatenate([hx.ravel(), ox.ravel()]),
        np.concatenate([hy.ravel(), oy.ravel()]),
        scene.width,
        scene.height,
        cfg.grid_w,
        cfg.grid_h,
    )
    position = (cy - 1) * cfg.grid_w + cx
    type_ = np.concatenate([k_idx.ravel() + 1, cfg.joints + i_idx.ravel() + 1])
    segment = np.concatenate([t_idx.ravel() + 1, np.full(o_valid.size, scene.keyframe)])
    instance = np.concatenate([n_idx.ravel() + 1, cfg.persons + j_idx.ravel() + 1])
    streams = [np.where(valid, s, 0).astype(np.int64) for s in (position, type_, segment, instance)]
    return TokenizedScene(*streams, valid)


def tokenize_reference(scene: SceneSequence, cfg: SceneConfig) -> TokenizedScene:
    """Plain nested-loop tokenizer, kept as a cross-check for :func:`tokenize_scene`."""
    pos, typ, seg, ins, mask = [], [], [], [], []

    def emit(p, ty, sg, inst, ok):
        pos.append(p if ok else 0)
        typ.append(ty if ok else 0)
        seg.append(sg if ok else 0)
        ins.append(inst if ok else 0)
        mask.append(ok)

    for n in range(cfg.persons):
        for t in range(cfg.frames):
            for k in range(cfg.joints):
                ok = n < scene.num_persons and bool(scene.human_valid[n, t, k])
                p = 0
                if ok:
                    x, y = scene.humans[n, t, k]
                    p = quantize_position(Keypoint(x, y), scene.width, scene.height, cfg.grid_w, cfg.grid_h)
                emit(p, k + 1, t + 1, n + 1, ok)
    for j in range(cfg.objects):
        for i in range(cfg.object_points):
            ok = j < scene.num_objects and bool(scene.object_valid[j, i])
            p = 0
            if ok:
                x, y = scene.objects[j, i]
                p = quantize_position(Keypoint(x, y), scene.width, scene.height, cfg.grid_w, cfg.grid_h)
            emit(p, cfg.joints + i + 1, scene.keyframe, cfg.persons + j + 1, ok)
    as_int = lambda v: np.array(v, dtype=np.int64)  # noqa: E731
    return TokenizedScene(as_int(pos), as_int(typ), as_int(seg), as_int(ins), np.array(mask, dtype=bool))


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentPolicy:
    flip: bool = True
    crop: bool = True
    expand: bool = True
    probability: float = 0.5
    crop_scale: tuple[float, float] = (0.6, 1.0)
    max_expand: float = 1.5

    @classmethod
    def none(cls) -> "AugmentPolicy":
        return cls(flip=False, crop=False, expand=False)


def flip(scene: SceneSequence, joint_perm) -> SceneSequence:
    """Mirror horizontally: x -> width - x, left/right joints swapped."""
    out = scene.copy()
    perm = np.asarray(joint_perm, dtype=np.int64)
    out.humans = scene.humans[:, :, perm].copy()
    out.human_valid = scene.human_valid[:, :, perm].copy()
    out.humans[..., 0] = np.where(out.human_valid, scene.width - out.humans[..., 0], 0.0)
    out.objects[..., 0] = np.where(out.object_valid, scene.width - out.objects[..., 0], 0.0)
    if out.actor_boxes is not None:
        b = out.actor_boxes
        out.actor_boxes = np.stack([scene.width - b[:, 2], b[:, 1], scene.width - b[:, 0], b[:, 3]], axis=1)
    return out


def _rebase(scene: SceneSequence, dx: float, dy: float, width: float, height: float) -> SceneSequence:
    out = scene.copy()
    out.width, out.height = width, height
    for pts, valid in ((out.humans, out.human_valid), (out.objects, out.object_valid)):
        pts[..., 0] -= dx
        pts[..., 1] -= dy
        inside = (pts[..., 0] >= 0) & (pts[..., 0] < width) & (pts[..., 1] >= 0) & (pts[..., 1] < height)
        valid &= inside
        pts[~valid] = 0.0
    if out.actor_boxes is not None:
        b = out.actor_boxes - np.array([dx, dy, dx, dy])
        out.actor_boxes = np.stack(
            [np.clip(b[:, 0], 0, width), np.clip(b[:, 1], 0, height), np.clip(b[:, 2], 0, width), np.clip(b[:, 3], 0, height)],
            axis=1,
        )
    return out


def crop(scene: SceneSequence, x0: float, y0: float, width: float, height: float) -> SceneSequence:
    """Keep the window at (x0, y0); keypoints outside it become invalid."""
    return _rebase(scene, x0, y0, width, height)


def expand(scene: SceneSequence, ratio: float, ox: float, oy: float) -> SceneSequence:
    """Place the frame at offset (ox, oy) on a canvas ``ratio`` times larger."""
    return _rebase(scene, -ox, -oy, scene.width * ratio, scene.height * ratio)


def augment(scene: SceneSequence, rng: np.random.Generator, policy: AugmentPolicy, joint_perm=None) -> SceneSequence:
    out = scene
    if policy.flip and joint_perm is not None and rng.random() < policy.probability:
        out = flip(out, joint_perm)
    if policy.crop and rng.random() < policy.probability:
        s = rng.uniform(*policy.crop_scale)
        w, h = out.width * s, out.height * s
        out = crop(out, rng.uniform(0, out.width - w), rng.uniform(0, out.height - h), w, h)
    if policy.expand and rng.random() < policy.probability:
        r = rng.uniform(1.0, policy.max_expand)
        out = expand(out, r, rng.uniform(0, out.width * (r - 1)), rng.uniform(0, out.height * (r - 1)))
    return out


# ---------------------------------------------------------------- sampling


def weighted_sample_indices(labels, count: int, rng: np.random.Generator) -> np.ndarray:
    """Draw with replacement, each sample weighted by 1 / (its class frequency)."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("cannot sample from an empty dataset")
    _, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    weights = 1.0 / counts[inverse]
    return rng.choice(labels.size, size=count, replace=True, p=weights / weights.sum())
