"""Top-1 accuracy and frame-level average precision at an IOU threshold."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tracking import iou


@dataclass
class ActorPrediction:
    frame: str  # clip / keyframe key; matching never crosses frames
    box: tuple[float, float, float, float]
    scores: np.ndarray  # (C,) in [0, 1]


@dataclass
class GroundTruth:
    frame: str
    box: tuple[float, float, float, float]
    labels: frozenset[int]


def top1_accuracy(predictions, labels) -> float:
    """``predictions`` are class indices or (n, C) score rows."""
    preds = np.asarray(predictions)
    labels = np.asarray(labels)
    if preds.ndim == 2:
        preds = preds.argmax(axis=1)
    if preds.shape[0] == 0:
        raise ValueError("top-1 accuracy of an empty set")
    if preds.shape[0] != labels.shape[0]:
        raise ValueError(f"{preds.shape[0]} predictions for {labels.shape[0]} labels")
    return float(np.mean(preds == labels))


def match_detections(preds: list[ActorPrediction], gts: list[GroundTruth], cls: int, threshold: float):
    """Greedy matching in the given prediction order; True marks a true positive."""
    taken: set[int] = set()
    hits = []
    for p in preds:
        best, best_iou = None, threshold
        for j, g in enumerate(gts):
            if j in taken or g.frame != p.frame or cls not in g.labels:
                continue
            overlap = iou(p.box, g.box)
            # strict '>' keeps the lowest GT index on equal IOU
            if overlap > best_iou or (best is None and overlap >= threshold):
                best, best_iou = j, overlap
        if best is not None:
            taken.add(best)
        hits.append(best is not None)
    return hits


def interpolated_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the all-point interpolated precision/recall curve."""
    r = np.concatenate([[0.0], recall, [1.0]])
    p = np.concatenate([[0.0], precision, [0.0]])
    p = np.maximum.accumulate(p[::-1])[::-1]
    steps = np.flatnonzero(r[1:] != r[:-1])
    return float(np.sum((r[steps + 1] - r[steps]) * p[steps + 1]))


def frame_ap(predictions: list[ActorPrediction], ground_truth: list[GroundTruth], cls: int, iou_threshold: float = 0.5) -> float:
    """AP of class ``cls``; NaN when the class has no ground truth."""
    n_gt = sum(1 for g in ground_truth if cls in g.labels)
    if n_gt == 0:
        return float("nan")
    order = sorted(range(len(predictions)), key=lambda i: -float(predictions[i].scores[cls]))
    ranked = [predictions[i] for i in order]
    if not ranked:
        return 0.0
    hits = np.array(match_detections(ranked, ground_truth, cls, iou_threshold), dtype=float)
    scores = np.array([float(p.scores[cls]) for p in ranked])
    tp = np.cumsum(hits)
    fp = np.cumsum(1.0 - hits)
    # a PR point only where the score strictly drops: tied predictions enter together
    ends = np.flatnonzero(np.append(scores[1:] != scores[:-1], True))
    recall = tp[ends] / n_gt
    precision = tp[ends] / (tp[ends] + fp[ends])
    return interpolated_ap(recall, precision)


def mean_ap(per_class: dict[int, float] | list[float]) -> float:
    """Unweighted mean over classes that have ground truth (NaN entries skipped)."""
    values = list(per_class.values()) if isinstance(per_class, dict) else list(per_class)
    kept = [v for v in values if not np.isnan(v)]
    if not kept:
        raise ValueError("no class with ground truth to average")
    return float(np.mean(kept))


def frame_map(predictions, ground_truth, num_classes: int, iou_threshold: float = 0.5) -> tuple[float, dict[int, float]]:
    aps = {c: frame_ap(predictions, ground_truth, c, iou_threshold) for c in range(num_classes)}
    return mean_ap(aps), aps


def format_ap_report(aps: dict[int, float], class_names=None) -> str:
    lines = ["class,ap"]
    for c, ap in aps.items():
        if np.isnan(ap):
            continue
        name = class_names[c] if class_names else str(c)
        lines.append(f"{name},{ap:.6f}")
    lines.append(f"mAP,{mean_ap(aps):.6f}")
    return "\n".join(lines) + "\n"
