"""``.knd`` annotation files and conversion of clip records into scenes.

A ``.knd`` file holds one JSON object per line. The first line is a header
declaring the class list, joint count and left/right flip permutation;
every further line is a record with a ``kind`` field. Files are written in a
canonical form (sorted keys, no spaces, floats with six decimals) so that
load followed by write reproduces a canonical file byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry
from .evaluate import GroundTruth
from .scene import SceneConfig, SceneSequence, TokenizedScene
from .tracking import Detection, Tracklet, frame_grid, fps_stride, iou, link_detections, select_top_n

FORMAT_VERSION = 1
CONFIDENCE_THRESHOLD = 0.3


class KndError(ValueError):
    """Malformed ``.knd`` content; the message names file, line and field."""


# ---------------------------------------------------------------- canonical text


def dumps(value) -> str:
    """Canonical single-line encoding."""
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        if not np.isfinite(value):
            raise ValueError(f"non-finite number {value}")
        return f"{float(value):.6f}"
    if isinstance(value, str):
        return json.dumps(value, ensure_ascii=False)
    if isinstance(value, dict):
        return "{" + ",".join(f"{json.dumps(str(k), ensure_ascii=False)}:{dumps(v)}" for k, v in sorted(value.items())) + "}"
    if isinstance(value, (list, tuple, np.ndarray)):
        return "[" + ",".join(dumps(v) for v in value) + "]"
    raise TypeError(f"cannot encode {type(value).__name__}")


def read_lines(path) -> list[tuple[int, dict]]:
    """(line number, object) for every non-blank line."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise KndError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise KndError(f"{path}:{lineno}: expected an object")
            out.append((lineno, obj))
    return out


def write_lines(path, objects) -> None:
    text = "".join(dumps(o) + "\n" for o in objects)
    Path(path).write_text(text, encoding="utf-8")


class _Fields:
    """Typed access to one parsed line, with errors that name the line."""

    def __init__(self, obj: dict, where: str):
        self.obj = obj
        self.where = where

    def fail(self, name: str, msg: str):
        raise KndError(f"{self.where}: field '{name}': {msg}")

    def get(self, name: str, kind, default=...):
        if name not in self.obj:
            if default is ...:
                self.fail(name, "missing")
            return default
        v = self.obj[name]
        if kind is float and isinstance(v, (int, float)) and not isinstance(v, bool):
            return float(v)
        if kind is int and isinstance(v, int) and not isinstance(v, bool):
            return v
        if kind in (str, list, dict, bool) and isinstance(v, kind):
            return v
        self.fail(name, f"expected {kind.__name__}, got {type(v).__name__}")

    def floats(self, name: str, value, length: int | None = None) -> list[float]:
        if not isinstance(value, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in value):
            self.fail(name, "expected a list of numbers")
        if length is not None and len(value) != length:
            self.fail(name, f"expected {length} numbers, got {len(value)}")
        return [float(x) for x in value]


# ---------------------------------------------------------------- records


@dataclass
class Header:
    classes: list[str]
    joints: int
    flip: list[int]
    object_points: int = 8
    joint_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if sorted(self.flip) != list(range(self.joints)):
            raise ValueError(f"flip permutation {self.flip} is not a permutation of {self.joints} joints")

    def class_index(self, name: str) -> int:
        return self.classes.index(name)

    def to_obj(self) -> dict:
        obj = {
            "kind": "header",
            "version": FORMAT_VERSION,
            "classes": list(self.classes),
            "joints": self.joints,
            "flip": list(self.flip),
            "object_points": self.object_points,
        }
        if self.joint_names:
            obj["joint_names"] = list(self.joint_names)
        return obj

    @classmethod
    def from_obj(cls, obj: dict, where: str) -> "Header":
        f = _Fields(obj, where)
        if f.get("kind", str) != "header":
            f.fail("kind", "first line must be the header")
        if f.get("version", int) != FORMAT_VERSION:
            f.fail("version", f"unsupported version {obj['version']}")
        classes = f.get("classes", list)
        if len(set(classes)) != len(classes) or not all(isinstance(c, str) for c in classes):
            f.fail("classes", "class names must be unique strings")
        joints = f.get("joints", int)
        flip = f.get("flip", list)
        if sorted(flip) != list(range(joints)):
            f.fail("flip", f"not a permutation of 0..{joints - 1}")
        return cls(classes, joints, flip, f.get("object_points", int, 8), f.get("joint_names", list, []))


@dataclass
class PersonRecord:
    box: tuple[float, float, float, float]
    score: float
    joints: np.ndarray  # (k_h, 3)
    track: int | None = None

    def to_obj(self) -> dict:
        obj = {"box": list(self.box), "score": self.score, "joints": self.joints.tolist()}
        if self.track is not None:
            obj["track"] = self.track
        return obj


@dataclass
class FrameRecord:
    index: int
    persons: list[PersonRecord] = field(default_factory=list)

    def to_obj(self) -> dict:
        return {"index": self.index, "persons": [p.to_obj() for p in self.persons]}


@dataclass
class ObjectRecord:
    score: float
    points: np.ndarray | None = None  # (k_o, 2)
    mask: str | None = None  # PGM path relative to the .knd file
    origin: tuple[float, float] = (0.0, 0.0)

    def to_obj(self) -> dict:
        obj: dict = {"score": self.score}
        if self.points is not None:
            obj["points"] = self.points.tolist()
        if self.mask is not None:
            obj["mask"] = self.mask
            obj["origin"] = list(self.origin)
        return obj


@dataclass
class ActorRecord:
    box: tuple[float, float, float, float]
    labels: list[str]
    track: int | None = None

    def to_obj(self) -> dict:
        obj = {"box": list(self.box), "labels": list(self.labels)}
        if self.track is not None:
            obj["track"] = self.track
        return obj


@dataclass
class ClipRecord:
    id: str
    width: float
    height: float
    fps: float
    keyframe: int  # a frame ``index`` value
    frames: list[FrameRecord]
    objects: list[ObjectRecord] = field(default_factory=list)
    label: str | None = None
    actors: list[ActorRecord] = field(default_factory=list)

    def to_obj(self) -> dict:
        obj = {
            "kind": "clip",
            "id": self.id,
            "width": float(self.width),
            "height": float(self.height),
            "fps": float(self.fps),
            "keyframe": self.keyframe,
            "frames": [f.to_obj() for f in self.frames],
            "objects": [o.to_obj() for o in self.objects],
            "actors": [a.to_obj() for a in self.actors],
        }
        if self.label is not None:
            obj["label"] = self.label
        return obj

    def frame_position(self, index: int) -> int:
        for i, f in enumerate(self.frames):
            if f.index == index:
                return i
        raise KeyError(f"clip {self.id}: no frame with index {index}")


def _parse_box(f: _Fields, name: str, value) -> tuple[float, float, float, float]:
    box = f.floats(name, value, 4)
    if not (box[0] < box[2] and box[1] < box[3]):
        f.fail(name, f"degenerate box {box}")
    return tuple(box)


def parse_clip(obj: dict, header: Header, where: str) -> ClipRecord:
    f = _Fields(obj, where)
    if f.get("kind", str) != "clip":
        f.fail("kind", f"expected 'clip', got {obj.get('kind')!r}")
    frames = []
    for fr in f.get("frames", list):
        if not isinstance(fr, dict):
            f.fail("frames", "each frame must be an object")
        ff = _Fields(fr, where)
        persons = []
        for p in ff.get("persons", list):
            pf = _Fields(p, where)
            joints = pf.get("joints", list)
            if len(joints) != header.joints:
                pf.fail("joints", f"expected {header.joints} joints, got {len(joints)}")
            arr = np.array([pf.floats("joints", j, 3) for j in joints], dtype=np.float64).reshape(header.joints, 3)
            track = pf.get("track", int, None)
            persons.append(PersonRecord(_parse_box(pf, "box", pf.get("box", list)), pf.get("score", float), arr, track))
        frames.append(FrameRecord(ff.get("index", int), persons))
    indices = [fr.index for fr in frames]
    if indices != sorted(set(indices)):
        f.fail("frames", "frame indices must be strictly increasing")
    keyframe = f.get("keyframe", int)
    if frames and keyframe not in indices:
        f.fail("keyframe", f"{keyframe} is not one of the frame indices")
    objects = []
    for o in f.get("objects", list, []):
        of = _Fields(o, where)
        points = of.get("points", list, None)
        mask = of.get("mask", str, None)
        if (points is None) == (mask is None):
            of.fail("points", "an object needs exactly one of 'points' or 'mask'")
        if points is not None:
            if len(points) != header.object_points:
                of.fail("points", f"expected {header.object_points} points, got {len(points)}")
            points = np.array([of.floats("points", pt, 2) for pt in points], dtype=np.float64).reshape(-1, 2)
        origin = tuple(of.floats("origin", of.get("origin", list, [0.0, 0.0]), 2))
        objects.append(ObjectRecord(of.get("score", float), points, mask, origin))
    label = f.get("label", str, None)
    if label is not None and label not in header.classes:
        f.fail("label", f"unknown class {label!r}")
    actors = []
    for a in f.get("actors", list, []):
        af = _Fields(a, where)
        labels = af.get("labels", list)
        for name in labels:
            if name not in header.classes:
                af.fail("labels", f"unknown class {name!r}")
        actors.append(ActorRecord(_parse_box(af, "box", af.get("box", list)), labels, af.get("track", int, None)))
    width, height = f.get("width", float), f.get("height", float)
    if width <= 0 or height <= 0:
        f.fail("width", "image extents must be positive")
    return ClipRecord(f.get("id", str), width, height, f.get("fps", float), keyframe, frames, objects, label, actors)


def load_clips(path) -> tuple[Header | None, list[ClipRecord]]:
    """Header and clips of a ``.knd`` file; an empty file gives ``(None, [])``."""
    lines = read_lines(path)
    if not lines:
        return None, []
    lineno, first = lines[0]
    header = Header.from_obj(first, f"{path}:{lineno}")
    clips = [parse_clip(obj, header, f"{path}:{n}") for n, obj in lines[1:]]
    return header, clips


def save_clips(path, header: Header, clips: list[ClipRecord]) -> None:
    write_lines(path, [header.to_obj()] + [c.to_obj() for c in clips])


# ---------------------------------------------------------------- tracking a clip


def _detections(clip: ClipRecord) -> list[list[Detection]]:
    return [[Detection(fr.index, p.box, p.score, p.joints) for p in fr.persons] for fr in clip.frames]


def _tracklets(clip: ClipRecord, iou_threshold: float) -> list[Tracklet]:
    persons = [p for fr in clip.frames for p in fr.persons]
    if persons and all(p.track is not None for p in persons):
        by_id: dict[int, Tracklet] = {}
        for fr in clip.frames:
            for p in fr.persons:
                tr = by_id.setdefault(p.track, Tracklet(p.track))
                if fr.index in tr.entries:
                    raise ValueError(f"clip {clip.id}: track {p.track} twice in frame {fr.index}")
                tr.entries[fr.index] = Detection(fr.index, p.box, p.score, p.joints)
        return [by_id[k] for k in sorted(by_id)]
    key_pos = clip.frame_position(clip.keyframe) if clip.frames else None
    return link_detections(_detections(clip), iou_threshold, key_pos)


def track_clip(
    clip: ClipRecord,
    iou_threshold: float = 0.5,
    persons: int = 5,
    target_fps: float | None = None,
    window: int | None = None,
) -> ClipRecord:
    """Link, keep the top ``persons`` tracklets and reduce the frame rate.

    The result carries track ids on every person and only the kept frames.
    """
    tracks = select_top_n(_tracklets(clip, iou_threshold), persons) if clip.frames else []
    stride = 1 if target_fps is None else fps_stride(clip.fps, target_fps)
    positions = frame_grid(len(clip.frames), clip.frame_position(clip.keyframe), stride, window) if clip.frames else []
    frames = []
    for pos in positions:
        index = clip.frames[pos].index
        people = []
        for tr in tracks:
            det = tr.entries.get(index)
            if det is not None:
                people.append(PersonRecord(tuple(det.box), det.score, det.joints, tr.id))
        frames.append(FrameRecord(index, people))
    fps = clip.fps / stride
    return ClipRecord(
        clip.id, clip.width, clip.height, fps, clip.keyframe, frames, list(clip.objects), clip.label, list(clip.actors)
    )


# ---------------------------------------------------------------- scenes


def object_points(obj: ObjectRecord, k: int, base_dir: Path | None = None) -> np.ndarray:
    if obj.points is not None:
        if obj.points.shape[0] != k:
            return geometry.sample_equidistant(obj.points, k)
        return obj.points
    path = Path(obj.mask)
    if base_dir is not None and not path.is_absolute():
        path = base_dir / path
    mask = geometry.read_pgm(path)
    return geometry.object_keypoints(mask, k) + np.asarray(obj.origin)


def clip_to_scene(
    clip: ClipRecord,
    header: Header,
    cfg: SceneConfig,
    base_dir: Path | None = None,
    iou_threshold: float = 0.5,
    target_fps: float | None = None,
    conf_threshold: float = CONFIDENCE_THRESHOLD,
) -> SceneSequence:
    """Scene with up to N tracked actors over T frames around the keyframe and the top-M objects."""
    if header.joints != cfg.joints:
        raise ValueError(f"data has {header.joints} joints, config expects {cfg.joints}")
    tracked = track_clip(clip, iou_threshold, cfg.persons, target_fps, cfg.frames)
    frame_ids = [fr.index for fr in tracked.frames]
    track_ids = sorted({p.track for fr in tracked.frames for p in fr.persons})
    # keep the tracker's ranking: order actors by confidence like select_top_n did
    conf = {t: np.mean([p.score for fr in tracked.frames for p in fr.persons if p.track == t]) for t in track_ids}
    lengths = {t: sum(1 for fr in tracked.frames for p in fr.persons if p.track == t) for t in track_ids}
    track_ids.sort(key=lambda t: (-conf[t], -lengths[t], t))

    n, t_len = len(track_ids), cfg.frames
    humans = np.zeros((n, t_len, cfg.joints, 2))
    valid = np.zeros((n, t_len, cfg.joints), bool)
    boxes: dict[int, dict[int, tuple]] = {t: {} for t in track_ids}
    for ti, fr in enumerate(tracked.frames):
        for p in fr.persons:
            a = track_ids.index(p.track)
            humans[a, ti] = p.joints[:, :2]
            valid[a, ti] = p.joints[:, 2] >= conf_threshold
            boxes[p.track][fr.index] = p.box
    keyframe = frame_ids.index(clip.keyframe) + 1 if frame_ids else 1

    ranked = sorted(range(len(clip.objects)), key=lambda i: (-clip.objects[i].score, i))[: cfg.objects]
    objs = np.zeros((len(ranked), cfg.object_points, 2))
    for j, i in enumerate(ranked):
        objs[j] = object_points(clip.objects[i], cfg.object_points, base_dir)
    obj_valid = np.ones(objs.shape[:2], bool)

    actor_boxes = np.zeros((n, 4))
    for a, t in enumerate(track_ids):
        seen = boxes[t]
        if clip.keyframe in seen:
            actor_boxes[a] = seen[clip.keyframe]
        elif seen:
            nearest = min(seen, key=lambda f: (abs(f - clip.keyframe), f))
            actor_boxes[a] = seen[nearest]

    actor_labels = None
    if clip.actors:
        actor_labels = np.zeros((n, len(header.classes)))
        for a, t in enumerate(track_ids):
            ann = _match_actor(clip.actors, t, actor_boxes[a])
            if ann is not None:
                for name in ann.labels:
                    actor_labels[a, header.class_index(name)] = 1.0
    label = None if clip.label is None else header.class_index(clip.label)
    return SceneSequence(
        clip.width,
        clip.height,
        humans,
        valid,
        objs,
        obj_valid,
        keyframe=keyframe,
        label=label,
        actor_labels=actor_labels,
        actor_boxes=actor_boxes,
        clip_id=clip.id,
    )


def _match_actor(actors: list[ActorRecord], track: int, box) -> ActorRecord | None:
    for ann in actors:
        if ann.track is not None and ann.track == track:
            return ann
    best, best_iou = None, 0.5
    for ann in actors:
        if ann.track is None:
            overlap = iou(tuple(box), ann.box)
            if overlap >= best_iou:
                best, best_iou = ann, overlap
    return best


def load_scenes(path, cfg: SceneConfig, **kwargs) -> tuple[Header, list[SceneSequence]]:
    header, clips = load_clips(path)
    if header is None:
        raise KndError(f"{path}: empty dataset")
    base = Path(path).parent
    return header, [clip_to_scene(c, header, cfg, base, **kwargs) for c in clips]


def ground_truth(clips: list[ClipRecord], header: Header) -> list[GroundTruth]:
    """Annotated keyframe actors, keyed by clip id."""
    out = []
    for clip in clips:
        for ann in clip.actors:
            out.append(GroundTruth(clip.id, ann.box, frozenset(header.class_index(n) for n in ann.labels)))
    return out


# ---------------------------------------------------------------- token files


def save_tokens(path, cfg: SceneConfig, entries: list[tuple[str, TokenizedScene]]) -> None:
    """One header line with the scene geometry, then one line per clip."""
    head = {
        "kind": "tokens_header",
        "version": FORMAT_VERSION,
        "grid": [cfg.grid_w, cfg.grid_h],
        "frames": cfg.frames,
        "persons": cfg.persons,
        "objects": cfg.objects,
        "joints": cfg.joints,
        "object_points": cfg.object_points,
    }
    lines = [head]
    for clip_id, tok in entries:
        lines.append(
            {
                "kind": "tokens",
                "clip": clip_id,
                "position": tok.position.tolist(),
                "type": tok.type.tolist(),
                "segment": tok.segment.tolist(),
                "instance": tok.instance.tolist(),
                "mask": tok.mask.astype(int).tolist(),
            }
        )
    write_lines(path, lines)


def load_tokens(path) -> tuple[SceneConfig, list[tuple[str, TokenizedScene]]]:
    lines = read_lines(path)
    if not lines:
        raise KndError(f"{path}: empty token file")
    lineno, first = lines[0]
    f = _Fields(first, f"{path}:{lineno}")
    if f.get("kind", str) != "tokens_header":
        f.fail("kind", "first line must be the token header")
    grid = f.get("grid", list)
    if len(grid) != 2 or not all(isinstance(g, int) for g in grid):
        f.fail("grid", "expected [width, height]")
    try:
        cfg = SceneConfig(
            grid[0],
            grid[1],
            f.get("frames", int),
            f.get("persons", int),
            f.get("objects", int),
            f.get("joints", int),
            f.get("object_points", int),
        )
    except ValueError as exc:
        raise KndError(f"{path}:{lineno}: {exc}") from None
    entries = []
    for n, obj in lines[1:]:
        tf = _Fields(obj, f"{path}:{n}")
        if tf.get("kind", str) != "tokens":
            tf.fail("kind", "expected 'tokens'")
        streams = {}
        for name in ("position", "type", "segment", "instance", "mask"):
            values = tf.get(name, list)
            if len(values) != cfg.length or not all(isinstance(v, int) and not isinstance(v, bool) for v in values):
                tf.fail(name, f"expected {cfg.length} integers")
            streams[name] = np.array(values, dtype=np.int64)
        streams["mask"] = streams["mask"].astype(bool)
        entries.append((tf.get("clip", str), TokenizedScene(**streams)))
    return cfg, entries
