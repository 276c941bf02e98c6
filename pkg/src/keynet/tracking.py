"""Greedy IOU tracking of per-frame person detections into tubelets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Box = tuple[float, float, float, float]


@dataclass
class Detection:
    frame: int
    box: Box
    score: float
    joints: np.ndarray  # (k_h, 3): x, y, confidence

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"degenerate box {self.box} at frame {self.frame}")
        self.joints = np.asarray(self.joints, dtype=np.float64).reshape(-1, 3)


@dataclass
class Tracklet:
    id: int
    entries: dict[int, Detection] = field(default_factory=dict)

    @property
    def confidence(self) -> float:
        if not self.entries:
            return 0.0
        return float(np.mean([d.score for d in self.entries.values()]))

    def __len__(self) -> int:
        return len(self.entries)

    def frames(self) -> list[int]:
        return sorted(self.entries)

    def box_at(self, frame: int) -> Box | None:
        det = self.entries.get(frame)
        return None if det is None else det.box


def iou(a: Box, b: Box) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


def _greedy_match(tracks: list[Tracklet], prev_frame: int, dets: list[Detection], threshold: float):
    """Pairs (track, det_index) by IOU descending, then det score, then track id."""
    candidates = []
    for tr in tracks:
        prev = tr.entries.get(prev_frame)
        if prev is None:
            continue
        for j, det in enumerate(dets):
            overlap = iou(prev.box, det.box)
            if overlap >= threshold and overlap > 0.0:
                candidates.append((-overlap, -det.score, tr.id, j, tr))
    candidates.sort(key=lambda c: c[:4])
    used_tracks: set[int] = set()
    used_dets: set[int] = set()
    pairs = []
    for _, _, tid, j, tr in candidates:
        if tid in used_tracks or j in used_dets:
            continue
        used_tracks.add(tid)
        used_dets.add(j)
        pairs.append((tr, j))
    return pairs, used_dets


def link_detections(
    frames: list[list[Detection]],
    iou_threshold: float = 0.5,
    keyframe: int | None = None,
) -> list[Tracklet]:
    """Link per-frame detections into tracklets.

    ``frames[i]`` holds the detections of the i-th frame (in time order).
    Linking starts at ``keyframe`` (a position in ``frames``, default 0),
    runs forward to the end, then backward to the start. Each detection
    ends up in exactly one tracklet.
    """
    if not frames:
        return []
    start = 0 if keyframe is None else keyframe
    if not 0 <= start < len(frames):
        raise ValueError(f"keyframe {keyframe} outside 0..{len(frames) - 1}")
    tracks: list[Tracklet] = []

    def new_track(det: Detection) -> None:
        tr = Tracklet(id=len(tracks))
        tr.entries[det.frame] = det
        tracks.append(tr)

    for det in frames[start]:
        new_track(det)

    order = [(i - 1, i) for i in range(start + 1, len(frames))]
    order += [(i + 1, i) for i in range(start - 1, -1, -1)]
    for prev_i, cur_i in order:
        dets = frames[cur_i]
        if not dets:
            continue
        prev_frame = frames[prev_i][0].frame if frames[prev_i] else None
        pairs, used = ([], set()) if prev_frame is None else _greedy_match(tracks, prev_frame, dets, iou_threshold)
        for tr, j in pairs:
            tr.entries[dets[j].frame] = dets[j]
        for j, det in enumerate(dets):
            if j not in used:
                new_track(det)
    return tracks


def select_top_n(tracklets: list[Tracklet], n: int) -> list[Tracklet]:
    if n < 1:
        raise ValueError("n must be >= 1")
    ranked = sorted(tracklets, key=lambda t: (-t.confidence, -len(t), t.id))
    return ranked[:n]


def frame_grid(frame_count: int, keyframe: int, stride: int, window: int | None = None) -> list[int]:
    """Source frame indices kept at ``stride``, anchored so ``keyframe`` is on the grid."""
    if stride < 1:
        raise ValueError(f"stride {stride} < 1")
    grid = list(range(keyframe % stride, frame_count, stride))
    if window is not None:
        k = grid.index(keyframe)
        lo = max(0, min(k - window // 2, len(grid) - window))
        grid = grid[lo : lo + window]
    return grid


def fps_stride(source_fps: float, target_fps: float) -> int:
    if target_fps <= 0 or target_fps > source_fps:
        raise ValueError(f"target fps {target_fps} must be in (0, {source_fps}]")
    stride = int(round(source_fps / target_fps))
    if stride < 1:
        raise ValueError(f"stride {stride} < 1")
    return stride


def subsample_frames(
    tracklets: list[Tracklet],
    source_fps: float,
    target_fps: float,
    keyframe: int,
    frame_count: int,
    window: int | None = None,
) -> tuple[list[Tracklet], int, list[int]]:
    """Keep frames at stride ``round(source/target)`` through the keyframe.

    Returns re-indexed tracklets (frames 1..T), the keyframe's new index and
    the kept source frame indices. ``window`` limits the grid to T frames
    around the keyframe.
    """
    grid = frame_grid(frame_count, keyframe, fps_stride(source_fps, target_fps), window)
    remap = {src: i + 1 for i, src in enumerate(grid)}
    out = []
    for tr in tracklets:
        kept = Tracklet(id=tr.id)
        for f, det in tr.entries.items():
            if f in remap:
                kept.entries[remap[f]] = Detection(remap[f], det.box, det.score, det.joints)
        out.append(kept)
    return out, remap[keyframe], grid


def temporal_footprint(frames: int, fps: float) -> float:
    """Seconds of video covered by ``frames`` samples taken at ``fps``."""
    return frames / fps
